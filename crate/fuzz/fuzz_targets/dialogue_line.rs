#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(conv) = phredgan::corpus::parse_dialogue_line(line) {
            assert!(!conv.id.is_empty());
        }
    }
});
