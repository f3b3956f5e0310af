#![no_main]

use libfuzzer_sys::fuzz_target;
use streamtrain::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::from_toml_str(text, None) {
            let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), None).unwrap();
            assert_eq!(again.to_toml(), cfg.to_toml());
        }
    }
});
