#![no_main]

use libfuzzer_sys::fuzz_target;
use moreflow_core::artifact;
use moreflow_diffcore::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode(data) {
        assert_eq!(decode(&encode(&entries)).expect("re-encoded checkpoint decodes").len(), entries.len());
        let _ = artifact::unpack(entries);
    }
});
