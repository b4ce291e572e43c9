use std::path::Path;

use tta_cli::config;

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        // Domain definitions, not an experiment.
        if name == "domains.json" || !name.ends_with(".json") {
            continue;
        }
        let cfg = config::load(Some(&path), &[], None).unwrap_or_else(|e| panic!("{name}: {}", e.message()));
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {}", e.message()));
        seen += 1;
    }
    assert_eq!(seen, 6);
}

