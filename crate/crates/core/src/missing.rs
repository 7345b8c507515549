//! Missing-completely-at-random masking.
//!
//! Each non-intervened coordinate of each sample is hidden independently with
//! the configured rate. The indicator process never looks at the values, so
//! missingness carries no information about them, and intervention targets
//! are exempt: their values are set by the experimenter and hence known.

use rand::Rng;

use crate::dataset::InterventionalDataset;
use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Stream tag separating MCAR draws from every other consumer of the seed.
const MCAR_TAG: u64 = 0x4d43_4152; // "MCAR"

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McarConfig {
    /// Probability that an eligible entry is hidden; in [0, 1).
    pub rate: f64,
    pub seed: u64,
}

/// Return a copy of the dataset with missingness indicators drawn MCAR.
///
/// Pure in (dataset, config): each row consumes its own derived stream, so
/// the masking pattern is independent of traversal order. Values are kept in
/// memory (the manifest writer is responsible for hiding them on disk).
pub fn apply_mcar(
    dataset: &InterventionalDataset,
    config: &McarConfig,
) -> Result<InterventionalDataset> {
    if !(config.rate >= 0.0 && config.rate < 1.0) {
        return Err(Error::invalid(
            "rate",
            format!("missing rate must lie in [0, 1), got {}", config.rate),
        ));
    }
    let mut out = dataset.clone();
    for (bi, block) in out.blocks.iter_mut().enumerate() {
        for (si, sample) in block.samples.iter_mut().enumerate() {
            if sample.r.iter().any(|&o| !o) {
                return Err(Error::invalid(
                    "dataset",
                    format!("block {bi} sample {si} already has missing entries"),
                ));
            }
            if config.rate == 0.0 {
                continue;
            }
            let mut stream = derive_rng(config.seed, &[MCAR_TAG, bi as u64, si as u64]);
            for i in 0..dataset.d() {
                if !block.experiment.is_intervened(i) && stream.random::<f64>() < config.rate {
                    sample.r[i] = false;
                }
            }
        }
    }
    Ok(out)
}
