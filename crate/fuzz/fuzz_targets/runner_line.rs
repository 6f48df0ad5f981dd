#![no_main]

use libfuzzer_sys::fuzz_target;
use oracle_forge::sandbox::protocol::parse_runner_line;

fuzz_target!(|line: &str| {
    let _ = parse_runner_line(line);
});
