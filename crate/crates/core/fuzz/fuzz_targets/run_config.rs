#![no_main]

use libfuzzer_sys::fuzz_target;
use pipelearn::orchestrator::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(c) = RunConfig::from_toml(text) {
        let again = RunConfig::from_toml(&c.to_toml()).expect("written config parses");
        assert_eq!(c, again);
    }
});
