#![no_main]

use libfuzzer_sys::fuzz_target;
use oracle_forge::task::TaskSuite;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(suite) = TaskSuite::parse(text, "fuzz", "fuzz.jsonl") {
        // whatever loads must survive a round trip
        let again = TaskSuite::parse(&suite.to_jsonl(), "fuzz", "fuzz.jsonl").expect("re-parse");
        assert_eq!(again.tasks, suite.tasks);
        for t in &suite.tasks {
            for i in 0..t.input_count() {
                let _ = t.call_expr(i);
            }
        }
    }
});
