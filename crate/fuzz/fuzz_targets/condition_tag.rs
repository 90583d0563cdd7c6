#![no_main]

use libfuzzer_sys::fuzz_target;
use moreflow_core::features::{Condition, ConditionSet};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = text.parse::<Condition>() {
        assert_eq!(c.to_string().parse::<Condition>().expect("printed tag parses"), c);
    }
    let _ = ConditionSet::parse_list(text);
});
