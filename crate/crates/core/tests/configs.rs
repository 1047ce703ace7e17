use std::path::PathBuf;

use deephoyer::pipeline::ExperimentConfig;

#[test]
fn bundled_configs_load_and_resolve() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        let net = cfg.build_network().unwrap();
        cfg.sparsify.objective.resolve(&net).unwrap();
        seen += 1;
    }
    assert_eq!(seen, 8);
}
