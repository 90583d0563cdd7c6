#![no_main]

use libfuzzer_sys::fuzz_target;
use moreflow_core::io::parse_tokens;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_tokens(text);
    }
});
