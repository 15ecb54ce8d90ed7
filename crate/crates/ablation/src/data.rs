//! Resolves an experiment's dataset source into image splits.

use std::path::Path;

use ddtr_core::data::{generate_range, read_dataset, AnnotatedImage};

use crate::config::{DatasetSource, ExperimentConfig, HELD_OUT_START};
use crate::HarnessError;

/// First generator index of the validation split used by the search.
pub const VALIDATION_START: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
}

fn read_split(dir: &Path, name: &str) -> Result<Vec<AnnotatedImage>, HarnessError> {
    let path = dir.join(name);
    if !path.is_dir() {
        return Err(HarnessError::Config(format!("{}: missing `{name}` split directory", dir.display())));
    }
    Ok(read_dataset(&path)?)
}

/// Training and held-out splits of `cfg.dataset`, or of `override_dir` when given.
pub fn load_splits(cfg: &ExperimentConfig, override_dir: Option<&Path>) -> Result<Splits, HarnessError> {
    match (override_dir, &cfg.dataset) {
        (Some(dir), _) => Ok(Splits { train: read_split(dir, "train")?, test: read_split(dir, "test")? }),
        (None, DatasetSource::Path(dir)) => load_splits(cfg, Some(dir)),
        (None, DatasetSource::Synthetic { spec, train, test }) => {
            Ok(Splits { train: generate_range(spec, 0, *train)?, test: generate_range(spec, HELD_OUT_START, *test)? })
        }
    }
}

/// Validation images for hyperparameter search: a disjoint synthetic range,
/// or the `val/` split (falling back to `test/`) of a dataset directory.
pub fn load_validation(
    cfg: &ExperimentConfig,
    override_dir: Option<&Path>,
) -> Result<Vec<AnnotatedImage>, HarnessError> {
    let dir = match (override_dir, &cfg.dataset) {
        (Some(d), _) => d.to_path_buf(),
        (None, DatasetSource::Path(d)) => d.clone(),
        (None, DatasetSource::Synthetic { spec, test, .. }) => {
            return Ok(generate_range(spec, VALIDATION_START, *test)?)
        }
    };
    if dir.join("val").is_dir() {
        read_split(&dir, "val")
    } else {
        read_split(&dir, "test")
    }
}
