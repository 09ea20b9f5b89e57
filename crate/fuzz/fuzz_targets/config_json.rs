#![no_main]

use libfuzzer_sys::fuzz_target;

use phredgan::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_json(text) {
            let again = RunConfig::from_json(&cfg.to_json().to_string()).expect("echoed config parses");
            assert_eq!(again, cfg);
        }
    }
});
