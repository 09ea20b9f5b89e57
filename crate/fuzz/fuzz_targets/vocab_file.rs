#![no_main]

use libfuzzer_sys::fuzz_target;

use phredgan::corpus::Vocabulary;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = Vocabulary::parse(text) {
            let again = Vocabulary::parse(&v.to_text()).expect("written file parses");
            assert_eq!(again.tokens(), v.tokens());
        }
    }
});
