#![no_main]

use libfuzzer_sys::fuzz_target;
use pipelearn::cost_model::format::{parse_profile, write_profile};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = parse_profile(text) {
        let again = parse_profile(&write_profile(&p)).expect("written profile parses");
        assert_eq!(p, again);
    }
});
