#![no_main]

use libfuzzer_sys::fuzz_target;
use oracle_forge::gateway::{glob_match, ProviderScript};

fuzz_target!(|text: &str| {
    if let Ok(script) = ProviderScript::from_json(text) {
        for rule in &script.rules {
            let _ = glob_match(&rule.tag, "panelist:edge_case_specialist");
            let _ = rule.reply.render();
        }
    }
});
