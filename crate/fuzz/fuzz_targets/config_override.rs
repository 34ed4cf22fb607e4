#![no_main]

use libfuzzer_sys::fuzz_target;
use metaweight::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut cfg = ExperimentConfig::default();
    for line in text.lines() {
        if cfg.apply_override_str(line).is_err() {
            return;
        }
    }
    let _ = cfg.validate();
});
