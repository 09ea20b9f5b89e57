#![no_main]

use libfuzzer_sys::fuzz_target;

use phredgan::corpus::AttributeVocabulary;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = AttributeVocabulary::parse(text) {
            let again = AttributeVocabulary::parse(&v.to_text()).expect("written file parses");
            assert_eq!(again.labels(), v.labels());
        }
    }
});
