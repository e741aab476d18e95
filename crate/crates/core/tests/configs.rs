use std::path::Path;

use gated_moe::config::ExperimentConfig;

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}

#[test]
fn default_config_matches_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.dataset.num_classes(), 8);
    assert_eq!(cfg.train.grad_clip_l2, 40.0);
    assert_eq!(cfg.train.num_segments, 3);
    assert_eq!(cfg.model.dropout_ratio, 0.8);
}
