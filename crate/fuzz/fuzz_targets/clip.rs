#![no_main]

use libfuzzer_sys::fuzz_target;
use moreflow_core::io::{format_clip, parse_clip};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((clip, meta)) = parse_clip(text) {
        // whatever parses must survive a round trip
        let again = parse_clip(&format_clip(&clip, &meta)).expect("reformatted clip parses");
        assert_eq!(again.0.frames.len(), clip.frames.len());
    }
});
