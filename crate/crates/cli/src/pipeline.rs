//! Dataset generation and single-run execution.
//!
//! Both `train` and `sweep` funnel through [`execute_run`], so a sweep cell
//! and a hand-launched run produce identical artifacts for identical inputs.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;

use missnodags::csv;
use missnodags::dataset::{DataBlock, DatasetMeta, InterventionalDataset};
use missnodags::error::{Error, Result};
use missnodags::graph::{self, GraphStructure};
use missnodags::impute::{effective_adjacency, mean_impute};
use missnodags::missing::{apply_mcar, McarConfig};
use missnodags::model::write_checkpoint;
use missnodags::rng::derive_rng;
use missnodags::sem::{make_single_node_plan, simulate, GroundTruthSem};
use missnodags::train::{evaluate_nll, fit, write_metrics, TrainConfig};

use crate::config::{ExperimentConfig, Method};

/// Ground-truth adjacency file written next to a generated manifest.
pub const TRUTH_ADJACENCY_FILE: &str = "adjacency.csv";
/// Ground-truth edge list written next to a generated manifest.
pub const TRUTH_EDGES_FILE: &str = "edges.csv";
/// Subdirectory holding the complete held-out manifest.
pub const TEST_DIR: &str = "test";

// Stream tags separating graph sampling, training draws, and held-out draws.
const GRAPH_TAG: u64 = 0x4752_4150;
const DATA_TAG: u64 = 0x4441_5441;
const TEST_TAG: u64 = 0x5445_5354;

/// A synthetic problem instance: the generating model, its complete training
/// draws, and a complete held-out set for likelihood evaluation.
pub struct Generated {
    pub sem: GroundTruthSem,
    pub complete: InterventionalDataset,
    pub test: InterventionalDataset,
}

impl Generated {
    /// Ground-truth structure for structural-distance scoring.
    pub fn truth_structure(&self) -> GraphStructure {
        GraphStructure::from_support(self.sem.weights.matrix())
    }
}

/// Draw model and data for one seed, entirely in memory.
pub fn generate_in_memory(cfg: &ExperimentConfig, seed: u64) -> Result<Generated> {
    let d = cfg.data.d;
    let mut rng = derive_rng(seed, &[GRAPH_TAG]);
    let structure = graph::sample_erdos_renyi(d, cfg.data.density, &mut rng)?;
    let weights = graph::assign_weights_and_project(
        &structure,
        cfg.data.weight_low,
        cfg.data.weight_high,
        cfg.data.lipschitz,
        &mut rng,
    )?;
    let sem = GroundTruthSem::new(cfg.data.sem, weights, cfg.data.sigma, cfg.data.lipschitz)?;

    let complete = simulate_plan(&sem, cfg, seed, DATA_TAG, cfg.data.n_per_intervention, &[])?;
    let test = simulate_plan(
        &sem,
        cfg,
        seed,
        TEST_TAG,
        cfg.data.n_test(),
        &[("split".to_string(), "test".to_string())],
    )?;
    Ok(Generated {
        sem,
        complete,
        test,
    })
}

fn simulate_plan(
    sem: &GroundTruthSem,
    cfg: &ExperimentConfig,
    seed: u64,
    tag: u64,
    n_per: usize,
    extra_meta: &[(String, String)],
) -> Result<InterventionalDataset> {
    let d = cfg.data.d;
    let mut rng = derive_rng(seed, &[tag]);
    let mut blocks = Vec::new();
    for (experiment, n) in make_single_node_plan(d, n_per) {
        let samples = simulate(sem, &experiment, n, &mut rng)?;
        blocks.push(DataBlock {
            experiment,
            samples,
        });
    }
    let mut extras = vec![
        ("density".to_string(), csv::format_float(cfg.data.density)),
        ("lipschitz".to_string(), csv::format_float(cfg.data.lipschitz)),
        ("n_per_intervention".to_string(), n_per.to_string()),
    ];
    extras.extend_from_slice(extra_meta);
    Ok(InterventionalDataset {
        meta: DatasetMeta {
            d,
            kind: cfg.data.sem,
            sigma: cfg.data.sigma,
            seed,
            extras,
        },
        blocks,
    })
}

/// The mask seed for one dataset seed: an explicit `missing.seed` pins the
/// mask pattern across dataset seeds; otherwise each seed masks independently.
pub fn mask_seed(cfg: &ExperimentConfig, dataset_seed: u64) -> u64 {
    cfg.missing.seed.unwrap_or(dataset_seed)
}

/// Apply the missing-data protocol and stamp its parameters into the meta.
pub fn mask_dataset(
    complete: &InterventionalDataset,
    rate: f64,
    seed: u64,
) -> Result<InterventionalDataset> {
    let mut masked = apply_mcar(complete, &McarConfig { rate, seed })?;
    masked
        .meta
        .extras
        .push(("missing_rate".to_string(), csv::format_float(rate)));
    masked.meta.extras.push(("mask_seed".to_string(), seed.to_string()));
    Ok(masked)
}

/// `generate`: write one masked manifest, the ground truth, and a complete
/// held-out split under `out`.
pub fn cmd_generate(config_path: &Path, seed: u64, out: &Path) -> Result<(usize, usize)> {
    let cfg = ExperimentConfig::read(config_path)?;
    if cfg.missing.rates.len() != 1 {
        return Err(Error::invalid(
            "missing.rates",
            format!(
                "generate writes a single dataset and needs exactly one rate, got {}",
                cfg.missing.rates.len()
            ),
        ));
    }
    let rate = cfg.missing.rates[0];
    let generated = generate_in_memory(&cfg, seed)?;
    let masked = mask_dataset(&generated.complete, rate, mask_seed(&cfg, seed))?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    masked.write_manifest(out)?;
    graph::write_adjacency(&out.join(TRUTH_ADJACENCY_FILE), generated.sem.weights.matrix())?;
    graph::write_edge_list(&out.join(TRUTH_EDGES_FILE), generated.sem.weights.matrix())?;
    let test_dir = out.join(TEST_DIR);
    fs::create_dir_all(&test_dir).map_err(|e| Error::io(&test_dir, e))?;
    generated.test.write_manifest(&test_dir)?;
    Ok((masked.d(), masked.n_samples()))
}

/// Scores of one finished run, as recorded in `run_meta.csv` and sweep rows.
pub struct RunOutcome {
    pub shd: Option<usize>,
    /// Mean held-out negative log-likelihood; NaN when no test split exists.
    pub nll_test: f64,
    pub wall_time_s: f64,
}

/// Train one method on one dataset and write the artifact set
/// {metrics.csv, checkpoint, adjacency_est.csv, edges_est.csv, run_meta.csv}.
pub fn execute_run(
    dataset: &InterventionalDataset,
    truth: Option<&GraphStructure>,
    test: Option<&InterventionalDataset>,
    config: &TrainConfig,
    method: Method,
    out: &Path,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let result = match method {
        Method::Missnodags => fit(dataset, config, truth)?,
        Method::Clean => {
            if dataset.has_missing() {
                return Err(Error::invalid(
                    "method",
                    "clean trains on complete data only; this dataset has missing entries",
                ));
            }
            fit(dataset, config, truth)?
        }
        Method::MeanImputeThenLearn => {
            let filled = mean_impute(dataset);
            fit(&filled, config, truth)?
        }
    };

    let probs = result.model.mask.probabilities();
    let structure = graph::extract_structure(&probs, config.edge_threshold)?;
    let estimated = masked_effective_weights(&result.model, &structure);
    let shd = match truth {
        Some(t) => Some(graph::shd(&structure, t)?),
        None => None,
    };
    let nll_test = match test {
        Some(t) => evaluate_nll(&result.model, t, config.edge_threshold, config.seed)?,
        None => f64::NAN,
    };
    let wall_time_s = start.elapsed().as_secs_f64();

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_metrics(&out.join("metrics.csv"), &result.metrics)?;
    write_checkpoint(&out.join("checkpoint"), &result.model)?;
    graph::write_adjacency(&out.join("adjacency_est.csv"), &estimated)?;
    graph::write_edge_list(&out.join("edges_est.csv"), &estimated)?;
    let meta = vec![
        ("method".to_string(), method.as_str().to_string()),
        ("d".to_string(), dataset.d().to_string()),
        ("model".to_string(), config.model_kind.as_str().to_string()),
        ("epochs".to_string(), config.epochs.to_string()),
        ("seed".to_string(), config.seed.to_string()),
        (
            "shd".to_string(),
            shd.map_or("NaN".to_string(), |v| v.to_string()),
        ),
        ("nll_test".to_string(), csv::format_float(nll_test)),
        ("wall_time_s".to_string(), csv::format_float(wall_time_s)),
        (
            "max_norm_after_projection".to_string(),
            csv::format_float(result.metrics.max_norm_after_projection),
        ),
    ];
    csv::write_key_values(&out.join("run_meta.csv"), &meta)?;

    Ok(RunOutcome {
        shd,
        nll_test,
        wall_time_s,
    })
}

/// Effective edge weights restricted to the extracted structure: entry
/// (src, dst) is the probability-scaled linear influence of src on dst for
/// retained edges and exactly zero elsewhere.
fn masked_effective_weights(
    model: &missnodags::model::CausalModel,
    structure: &GraphStructure,
) -> DMatrix<f64> {
    let eff = effective_adjacency(model);
    let d = eff.nrows();
    DMatrix::from_fn(d, d, |src, dst| {
        if structure.has_edge(src, dst) {
            eff[(src, dst)]
        } else {
            0.0
        }
    })
}

/// `train`: load a manifest directory (plus optional truth and test split)
/// and run one method into `out`.
pub fn cmd_train(
    data_dir: &Path,
    config_path: &Path,
    method_name: &str,
    out: &Path,
) -> Result<RunOutcome> {
    let method = Method::parse(method_name)?;
    let cfg = ExperimentConfig::read(config_path)?;
    let dataset = InterventionalDataset::read_manifest(data_dir)?;
    let truth_path = data_dir.join(TRUTH_ADJACENCY_FILE);
    let truth = if truth_path.is_file() {
        Some(GraphStructure::from_support(&graph::read_adjacency(&truth_path)?))
    } else {
        None
    };
    let test_dir = data_dir.join(TEST_DIR);
    let test = if test_dir.join(missnodags::dataset::META_FILE).is_file() {
        Some(InterventionalDataset::read_manifest(&test_dir)?)
    } else {
        None
    };
    execute_run(&dataset, truth.as_ref(), test.as_ref(), &cfg.train, method, out)
}
