//! Replays the fuzz corpus seeds through the fuzz target properties.

use std::fs;
use std::path::PathBuf;

use pipelearn::cost_model::format::{parse_profile, write_profile};
use pipelearn::nn::SequentialModel;
use pipelearn::orchestrator::RunConfig;

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("seed-"))
        .map(|p| {
            let text = fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn profile_seeds_parse_and_round_trip() {
    for (path, text) in seeds("profile") {
        let p = parse_profile(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(parse_profile(&write_profile(&p)).unwrap(), p);
    }
}

#[test]
fn model_seeds_decode_and_round_trip() {
    for (path, text) in seeds("model_json") {
        let m = SequentialModel::from_json(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(SequentialModel::from_json(&m.to_json()).unwrap(), m);
    }
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (path, text) in seeds("run_config") {
        let c = RunConfig::from_toml(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}

#[test]
fn truncated_seeds_never_panic() {
    for target in ["profile", "model_json", "run_config"] {
        for (_, text) in seeds(target) {
            for cut in (0..text.len()).filter(|&i| text.is_char_boundary(i)) {
                let t = &text[..cut];
                let _ = parse_profile(t);
                let _ = SequentialModel::from_json(t);
                let _ = RunConfig::from_toml(t);
            }
        }
    }
}
