//! On-disk dataset manifests and their in-memory form.
//!
//! A manifest directory holds four files:
//!
//! * `samples.csv` — header `x_0,...,x_{d-1}`, one row per sample. Entries
//!   hidden by the missingness process are written as the literal `NaN`.
//! * `mask.csv` — header `r_0,...,r_{d-1}`, entries 0/1, 1 = observed.
//! * `regimes.csv` — header `targets`, one row per sample listing the
//!   zero-based intervention targets separated by `;` (empty row =
//!   observational).
//! * `meta.csv` — `key,value` rows carrying at least d, kind, sigma, seed.
//!
//! In memory, samples are grouped into blocks that share one experiment; on
//! disk the rows appear in block order, so loading groups consecutive rows
//! with an identical regime. Values that the mask hides may still be present
//! in memory right after generation (the simulator knows them); the writer
//! always masks them to NaN, so nothing hidden ever reaches disk.

use std::path::Path;

use nalgebra::DMatrix;

use crate::csv;
use crate::error::{Error, Result};
use crate::sem::{InterventionExperiment, Sample, SemKind};

pub const SAMPLES_FILE: &str = "samples.csv";
pub const MASK_FILE: &str = "mask.csv";
pub const REGIMES_FILE: &str = "regimes.csv";
pub const META_FILE: &str = "meta.csv";

/// Provenance record stored in `meta.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub d: usize,
    pub kind: SemKind,
    pub sigma: f64,
    pub seed: u64,
    /// Additional key/value pairs preserved verbatim across round-trips.
    pub extras: Vec<(String, String)>,
}

/// All samples sharing one interventional experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    pub experiment: InterventionExperiment,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionalDataset {
    pub meta: DatasetMeta,
    pub blocks: Vec<DataBlock>,
}

impl InterventionalDataset {
    pub fn d(&self) -> usize {
        self.meta.d
    }

    pub fn n_samples(&self) -> usize {
        self.blocks.iter().map(|b| b.samples.len()).sum()
    }

    pub fn has_missing(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.samples.iter().any(|s| s.r.iter().any(|&o| !o)))
    }

    /// Validate internal consistency: shapes, and the rule that intervention
    /// targets are always observed.
    pub fn validate(&self) -> Result<()> {
        let d = self.meta.d;
        for (bi, block) in self.blocks.iter().enumerate() {
            if block.experiment.d() != d {
                return Err(Error::DimensionMismatch(format!(
                    "block {bi}: experiment over {} nodes in a d = {d} dataset",
                    block.experiment.d()
                )));
            }
            for (si, s) in block.samples.iter().enumerate() {
                if s.x.len() != d || s.r.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "block {bi} sample {si}: vector length does not match d = {d}"
                    )));
                }
                for &t in block.experiment.targets() {
                    if !s.r[t] {
                        return Err(Error::invalid(
                            "mask",
                            format!("block {bi} sample {si}: intervened node {t} marked missing"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Write the four manifest files into `dir`. Hidden entries are replaced
    /// by NaN regardless of what the in-memory sample still carries.
    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let d = self.meta.d;
        let n = self.n_samples();
        let mut values = DMatrix::zeros(n, d);
        let mut mask_rows = String::new();
        let mut regime_rows = String::from("targets\n");
        let mut row = 0;
        for block in &self.blocks {
            let regime: Vec<String> = block
                .experiment
                .targets()
                .iter()
                .map(|t| t.to_string())
                .collect();
            for s in &block.samples {
                for j in 0..d {
                    values[(row, j)] = if s.r[j] { s.x[j] } else { f64::NAN };
                }
                let bits: Vec<&str> = s.r.iter().map(|&o| if o { "1" } else { "0" }).collect();
                mask_rows.push_str(&bits.join(","));
                mask_rows.push('\n');
                regime_rows.push_str(&regime.join(";"));
                regime_rows.push('\n');
                row += 1;
            }
        }
        let x_header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
        csv::write_matrix(&dir.join(SAMPLES_FILE), &values, Some(&x_header))?;
        let r_header: Vec<String> = (0..d).map(|j| format!("r_{j}")).collect();
        let mut mask_out = r_header.join(",");
        mask_out.push('\n');
        mask_out.push_str(&mask_rows);
        csv::write_file(&dir.join(MASK_FILE), &mask_out)?;
        csv::write_file(&dir.join(REGIMES_FILE), &regime_rows)?;
        let mut pairs = vec![
            ("d".to_string(), self.meta.d.to_string()),
            ("kind".to_string(), self.meta.kind.as_str().to_string()),
            ("sigma".to_string(), csv::format_float(self.meta.sigma)),
            ("seed".to_string(), self.meta.seed.to_string()),
        ];
        pairs.extend(self.meta.extras.iter().cloned());
        csv::write_key_values(&dir.join(META_FILE), &pairs)
    }

    /// Load a manifest directory written by [`write_manifest`] (or supplied
    /// externally in the same layout).
    pub fn read_manifest(dir: &Path) -> Result<Self> {
        let meta = read_meta(&dir.join(META_FILE))?;
        let d = meta.d;
        let samples_path = dir.join(SAMPLES_FILE);
        let (values, _) = csv::read_matrix(&samples_path, true)?;
        if values.ncols() != d {
            return Err(Error::parse(
                &samples_path,
                1,
                format!("expected {d} columns per meta.csv, found {}", values.ncols()),
            ));
        }
        let mask_path = dir.join(MASK_FILE);
        let (mask, _) = csv::read_matrix(&mask_path, true)?;
        if mask.shape() != values.shape() {
            return Err(Error::parse(
                &mask_path,
                1,
                format!(
                    "mask shape {:?} does not match samples shape {:?}",
                    mask.shape(),
                    values.shape()
                ),
            ));
        }
        let regimes_path = dir.join(REGIMES_FILE);
        let regime_lines = csv::read_lines(&regimes_path)?;
        if regime_lines.first().map(|l| l.trim()) != Some("targets") {
            return Err(Error::parse(&regimes_path, 1, "expected header `targets`".to_string()));
        }
        let regimes = &regime_lines[1..];
        let n = values.nrows();
        if regimes.len() != n {
            return Err(Error::parse(
                &regimes_path,
                1,
                format!("{} regime rows for {n} samples", regimes.len()),
            ));
        }

        let mut blocks: Vec<DataBlock> = Vec::new();
        let mut current_regime: Option<String> = None;
        for row in 0..n {
            let regime = regimes[row].trim().to_string();
            if current_regime.as_deref() != Some(regime.as_str()) {
                let targets = parse_regime(&regime, &regimes_path, row + 2)?;
                let experiment = InterventionExperiment::new(d, &targets)?;
                blocks.push(DataBlock {
                    experiment,
                    samples: Vec::new(),
                });
                current_regime = Some(regime);
            }
            let mut r = vec![false; d];
            for j in 0..d {
                let bit = mask[(row, j)];
                if bit == 1.0 {
                    r[j] = true;
                } else if bit != 0.0 {
                    return Err(Error::parse(
                        &mask_path,
                        row + 2,
                        format!("mask entries must be 0 or 1, got {bit}"),
                    ));
                }
            }
            let x = nalgebra::DVector::from_fn(d, |j, _| values[(row, j)]);
            for j in 0..d {
                if r[j] && x[j].is_nan() {
                    return Err(Error::parse(
                        &samples_path,
                        row + 2,
                        format!("column {j} is marked observed but holds NaN"),
                    ));
                }
            }
            blocks.last_mut().unwrap().samples.push(Sample { x, r });
        }
        let dataset = InterventionalDataset { meta, blocks };
        dataset.validate()?;
        Ok(dataset)
    }
}

fn parse_regime(regime: &str, path: &Path, line: usize) -> Result<Vec<usize>> {
    if regime.is_empty() {
        return Ok(Vec::new());
    }
    regime
        .split(';')
        .map(|t| csv::parse_usize(t, path, line))
        .collect()
}

fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let pairs = csv::read_key_values(path)?;
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::parse(path, 1, format!("missing required key `{key}`")))
    };
    let d = csv::parse_usize(get("d")?, path, 1)?;
    if d == 0 {
        return Err(Error::parse(path, 1, "d must be positive".to_string()));
    }
    let kind = SemKind::parse(get("kind")?)?;
    let sigma = csv::parse_float(get("sigma")?, path, 1)?;
    let seed = get("seed")?
        .trim()
        .parse::<u64>()
        .map_err(|_| Error::parse(path, 1, "seed must be a non-negative integer".to_string()))?;
    let extras = pairs
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "d" | "kind" | "sigma" | "seed"))
        .cloned()
        .collect();
    Ok(DatasetMeta {
        d,
        kind,
        sigma,
        seed,
        extras,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::WeightedAdjacency;
    use crate::sem::{simulate, GroundTruthSem, SemKind};
    use nalgebra::DVector;

    fn toy_dataset() -> InterventionalDataset {
        let mut b = nalgebra::DMatrix::zeros(3, 3);
        b[(0, 1)] = 0.5;
        b[(1, 2)] = -0.4;
        let sem = GroundTruthSem::new(
            SemKind::Linear,
            WeightedAdjacency::new(b).unwrap(),
            0.25,
            0.9,
        )
        .unwrap();
        let mut rng = crate::rng::derive_rng(5, &[0]);
        let mut blocks = Vec::new();
        for (exp, n) in crate::sem::make_single_node_plan(3, 4) {
            let samples = simulate(&sem, &exp, n, &mut rng).unwrap();
            blocks.push(DataBlock {
                experiment: exp,
                samples,
            });
        }
        InterventionalDataset {
            meta: DatasetMeta {
                d: 3,
                kind: SemKind::Linear,
                sigma: 0.25,
                seed: 5,
                extras: vec![("missing_rate".into(), csv::format_float(0.0))],
            },
            blocks,
        }
    }

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        let mut ds = toy_dataset();
        // Hide a couple of non-intervened entries to exercise the NaN path.
        ds.blocks[0].samples[1].r[1] = false;
        ds.blocks[2].samples[0].r[0] = false;
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        ds.write_manifest(&first).unwrap();
        let loaded = InterventionalDataset::read_manifest(&first).unwrap();
        assert_eq!(loaded.n_samples(), 12);
        assert_eq!(loaded.blocks.len(), 3);
        let second = dir.path().join("b");
        loaded.write_manifest(&second).unwrap();
        for name in [SAMPLES_FILE, MASK_FILE, REGIMES_FILE, META_FILE] {
            let a = std::fs::read(first.join(name)).unwrap();
            let b = std::fs::read(second.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after a round trip");
        }
    }

    #[test]
    fn masked_values_never_reach_disk() {
        let mut ds = toy_dataset();
        ds.blocks[0].samples[0].r[2] = false;
        let secret = ds.blocks[0].samples[0].x[2];
        let dir = tempfile::tempdir().unwrap();
        ds.write_manifest(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SAMPLES_FILE)).unwrap();
        assert!(!text.contains(&crate::csv::format_float(secret)));
        let loaded = InterventionalDataset::read_manifest(dir.path()).unwrap();
        assert!(loaded.blocks[0].samples[0].x[2].is_nan());
        assert!(!loaded.blocks[0].samples[0].r[2]);
    }

    #[test]
    fn intervened_nodes_must_stay_observed() {
        let mut ds = toy_dataset();
        // Block 1 intervenes node 1; marking it missing violates the contract.
        ds.blocks[1].samples[0].r[1] = false;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn meta_mismatch_is_rejected() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        ds.write_manifest(dir.path()).unwrap();
        // Corrupt d in meta.csv.
        let meta_path = dir.path().join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(&meta_path, text.replace("d,3", "d,4")).unwrap();
        assert!(InterventionalDataset::read_manifest(dir.path()).is_err());
    }

    #[test]
    fn observed_nan_is_rejected() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        ds.write_manifest(dir.path()).unwrap();
        let path = dir.path().join(SAMPLES_FILE);
        let mut lines: Vec<String> =
            std::fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[1].split(',').map(String::from).collect();
        fields[0] = "NaN".to_string();
        lines[1] = fields.join(",");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(InterventionalDataset::read_manifest(dir.path()).is_err());
    }

    #[test]
    fn regime_grouping_follows_consecutive_runs() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        ds.write_manifest(dir.path()).unwrap();
        let loaded = InterventionalDataset::read_manifest(dir.path()).unwrap();
        for (k, block) in loaded.blocks.iter().enumerate() {
            assert_eq!(block.experiment.targets(), &[k]);
            assert_eq!(block.samples.len(), 4);
        }
        // An observational regime row parses to the empty target set.
        let obs = InterventionExperiment::observational(3);
        let mut with_obs = loaded;
        with_obs.blocks.push(DataBlock {
            experiment: obs.clone(),
            samples: vec![Sample::complete(DVector::zeros(3))],
        });
        let dir2 = tempfile::tempdir().unwrap();
        with_obs.write_manifest(dir2.path()).unwrap();
        let back = InterventionalDataset::read_manifest(dir2.path()).unwrap();
        assert_eq!(back.blocks.last().unwrap().experiment, obs);
    }
}
