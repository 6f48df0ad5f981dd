#![no_main]

use libfuzzer_sys::fuzz_target;
use oracle_forge::prompt::{bindings, Template};

fuzz_target!(|text: &str| {
    if let Ok(t) = Template::parse(text) {
        let b = bindings(t.placeholders().into_iter().map(|p| (p.to_string(), format!("<{p}>"))));
        t.render(&b).expect("all placeholders bound");
    }
});
