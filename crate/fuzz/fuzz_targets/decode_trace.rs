#![no_main]

use libfuzzer_sys::fuzz_target;
use mipeaks::trace_io::{decode_trace, encode_trace};

fuzz_target!(|data: &[u8]| {
    if let Ok(trace) = decode_trace(data) {
        // anything accepted must re-encode to the same bytes
        let bytes = encode_trace(&trace).expect("decoded trace re-encodes");
        assert_eq!(bytes, data);
    }
});
