#![no_main]

use libfuzzer_sys::fuzz_target;
use metaweight::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = ExperimentConfig::from_toml(text) else {
        return;
    };
    let _ = cfg.warnings();
    let serialized = cfg.to_toml().expect("a parsed config serializes");
    let again = ExperimentConfig::from_toml(&serialized).expect("serialized config parses");
    assert_eq!(again.to_toml().unwrap(), serialized);
});
