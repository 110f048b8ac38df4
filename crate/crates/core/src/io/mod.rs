//! Files on disk: corpora, checkpoints, metrics, deployment bundles and
//! experiment plans.

pub mod bundle;
pub mod checkpoint;
pub mod experiment;
pub mod formats;
pub mod metrics;
pub mod store;

use std::path::{Path, PathBuf};

pub use bundle::{export_deployment, DeploymentBundle, Manifest};
pub use checkpoint::{peek_config, Checkpoint};
pub use formats::{load_classified, load_conll, load_pairs};
pub use metrics::{read_metrics, MetricRecord, MetricsWriter};

/// Environment variable naming the corpus root.
pub const DATA_DIR_ENV: &str = "TPLF_DATA_DIR";

/// Resolves a relative corpus path against `$TPLF_DATA_DIR` when set.
pub fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if !root.is_empty() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}
