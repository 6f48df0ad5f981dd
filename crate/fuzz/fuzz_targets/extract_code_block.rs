#![no_main]

use libfuzzer_sys::fuzz_target;
use oracle_forge::prompt::{extract_code_block, fenced_blocks};

fuzz_target!(|text: &str| {
    let _ = fenced_blocks(text);
    if let Ok(code) = extract_code_block(text) {
        assert!(!code.trim().is_empty());
    }
});
