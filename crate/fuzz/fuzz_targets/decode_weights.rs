#![no_main]

use libfuzzer_sys::fuzz_target;
use mipeaks::toy::{decode_weights, encode_weights};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_weights(data) {
        assert_eq!(encode_weights(&model), data);
    }
});
