#![no_main]

use libfuzzer_sys::fuzz_target;
use mipeaks::toy::task::{parse_tokens, render_tokens};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(tokens) = parse_tokens(text) {
            assert_eq!(parse_tokens(&render_tokens(&tokens)).unwrap(), tokens);
        }
    }
});
