#![no_main]

use libfuzzer_sys::fuzz_target;
use moreflow_core::io::{format_stats, parse_stats};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((stats, meta)) = parse_stats(text) {
        let again = parse_stats(&format_stats(&stats, &meta)).expect("reformatted stats parse");
        assert_eq!(again.0.channels(), stats.channels());
    }
});
