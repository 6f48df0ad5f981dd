#![no_main]

use libfuzzer_sys::fuzz_target;
use oracle_forge::gateway::CacheEntry;

fuzz_target!(|data: &[u8]| {
    if let Ok(entry) = CacheEntry::decode(data) {
        let again = CacheEntry::decode(entry.encode().as_bytes()).expect("re-decode");
        assert_eq!(again, entry);
    }
});
