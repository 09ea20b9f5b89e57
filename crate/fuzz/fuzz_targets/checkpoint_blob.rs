#![no_main]

use libfuzzer_sys::fuzz_target;

use phredgan::checkpoint::{decode_blob, encode_blob};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_blob(data) {
        assert_eq!(encode_blob(&t), data);
    }
});
