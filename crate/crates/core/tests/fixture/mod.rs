//! Small PCA pipeline run shared by the stage-level integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use latsched::cli::{self, Artifact};
use serde::de::DeserializeOwned;

pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("stages").join(env!("CARGO_CRATE_NAME")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Runs the CLI with `--config <dir>/config.json --out <dir>` prepended
/// when a config has been written there.
pub fn run_cli(dir: &Path, args: &[&str]) -> i32 {
    let mut argv: Vec<String> = vec!["latsched".into()];
    let config = dir.join("config.json");
    if config.exists() {
        argv.extend(["--config".into(), config.display().to_string()]);
    }
    argv.extend(["--out".into(), dir.display().to_string()]);
    argv.extend(args.iter().map(|a| a.to_string()));
    cli::run(argv)
}

pub fn write_config(dir: &Path, json: &str) {
    std::fs::write(dir.join("config.json"), json).unwrap();
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> T {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_slice::<Artifact<T>>(&bytes).unwrap().payload
}

pub const SMALL: &str = r#"{"campaign": {"episodes": 4}}"#;

/// Artifact directory of a four-episode PCA pipeline, built once per test
/// binary.
pub fn small_pipeline() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("small-pca");
        write_config(&dir, SMALL);
        assert_eq!(run_cli(&dir, &["--arch", "pca", "pipeline"]), 0);
        dir
    })
}
