#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenskill::config::parse_config;
use tokenskill::trainer::LifelongRunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = parse_config(text) {
            let _ = file.apply(&LifelongRunConfig::default());
        }
    }
});
