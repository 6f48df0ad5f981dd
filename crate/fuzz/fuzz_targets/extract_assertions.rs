#![no_main]

use libfuzzer_sys::fuzz_target;
use oracle_forge::prompt::extract_assertions;

fuzz_target!(|input: (u8, &str)| {
    let (expected, text) = input;
    let r = extract_assertions(text, expected as usize % 32);
    for a in &r.assertions {
        assert!(a.starts_with("assert"));
        assert!(!a.contains('\n'));
    }
});
