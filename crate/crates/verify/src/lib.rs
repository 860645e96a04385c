//! Locations of the shared fixtures used by the acceptance target.

use std::path::PathBuf;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root exists")
}

pub fn data(rel: &str) -> PathBuf {
    workspace_root().join("data").join(rel)
}

pub fn config(rel: &str) -> PathBuf {
    workspace_root().join("configs").join(rel)
}
