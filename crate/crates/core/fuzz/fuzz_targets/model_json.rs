#![no_main]

use libfuzzer_sys::fuzz_target;
use pipelearn::nn::SequentialModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = SequentialModel::from_json(text) {
        let again = SequentialModel::from_json(&m.to_json()).expect("encoded model decodes");
        assert_eq!(m, again);
    }
});
