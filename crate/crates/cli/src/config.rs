//! Experiment configuration files.
//!
//! The format is deliberately plain: one `section.key = value` assignment per
//! line, `#` starts a comment, blank lines are ignored. Every key has a
//! default, so an empty file (or an absent section) is a valid experiment.
//! Unknown keys are rejected by name so typos fail loudly instead of being
//! silently ignored.

use std::path::Path;

use missnodags::csv;
use missnodags::error::{Error, Result};
use missnodags::likelihood::LogDetMode;
use missnodags::sem::SemKind;
use missnodags::train::TrainConfig;

/// Which training pipeline a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Alternate Gaussian-conditional imputation of the missing coordinates
    /// with penalized likelihood ascent (the full EM loop).
    Missnodags,
    /// Fill each missing entry once with its block-wise observed mean, then
    /// train on the completed data without further imputation.
    MeanImputeThenLearn,
    /// Train directly on complete data; rejects datasets with missing
    /// entries. The reference an imputing method is compared against.
    Clean,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Missnodags => "missnodags",
            Method::MeanImputeThenLearn => "mean_impute_then_learn",
            Method::Clean => "clean",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.trim() {
            "missnodags" => Ok(Method::Missnodags),
            "mean_impute_then_learn" => Ok(Method::MeanImputeThenLearn),
            "clean" => Ok(Method::Clean),
            other => Err(Error::invalid(
                "method",
                format!("expected missnodags | mean_impute_then_learn | clean, got `{other}`"),
            )),
        }
    }
}

/// Ground-truth model and sampling plan for synthetic data.
#[derive(Debug, Clone)]
pub struct DataSection {
    /// Number of nodes.
    pub d: usize,
    /// Expected edges per node of the random graph (1.0 gives p = 1/(d-1)).
    pub density: f64,
    /// Structural function family of the generator.
    pub sem: SemKind,
    /// Noise standard deviation, shared by all nodes.
    pub sigma: f64,
    /// Spectral bound the generator weights are projected onto.
    pub lipschitz: f64,
    /// Samples drawn per single-node intervention.
    pub n_per_intervention: usize,
    /// Edge-weight magnitudes are uniform on (weight_low, weight_high).
    pub weight_low: f64,
    pub weight_high: f64,
    /// Held-out complete samples per intervention; `None` means a tenth of
    /// the training count (at least one).
    pub n_test_per_intervention: Option<usize>,
}

impl DataSection {
    pub fn n_test(&self) -> usize {
        self.n_test_per_intervention
            .unwrap_or_else(|| (self.n_per_intervention / 10).max(1))
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            d: 3,
            density: 1.0,
            sem: SemKind::Linear,
            sigma: 0.25,
            lipschitz: 0.9,
            n_per_intervention: 100,
            weight_low: 0.25,
            weight_high: 0.6,
            n_test_per_intervention: None,
        }
    }
}

/// Missing-data protocol.
#[derive(Debug, Clone)]
pub struct MissingSection {
    /// Missing-completely-at-random rates; each must lie in [0, 1).
    pub rates: Vec<f64>,
    /// Optional dedicated mask seed. When unset, masks derive from the
    /// dataset seed, so different dataset seeds get independent masks.
    pub seed: Option<u64>,
}

impl Default for MissingSection {
    fn default() -> Self {
        MissingSection {
            rates: vec![0.2],
            seed: None,
        }
    }
}

/// Grid axes for `sweep`: which pipelines run, on how many dataset draws.
#[derive(Debug, Clone)]
pub struct RunSection {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            methods: vec![Method::Missnodags],
            seeds: vec![0],
        }
    }
}

/// Everything a run needs, as read from one config file.
#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub missing: MissingSection,
    pub train: TrainConfig,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Parse and validate a config file.
    pub fn read(path: &Path) -> Result<Self> {
        let lines = csv::read_lines(path)?;
        let mut cfg = ExperimentConfig::default();
        // `train.logdet` and `train.logdet_order` may arrive in either order,
        // so the mode is assembled only after the whole file is read.
        let mut logdet_name = String::from("russian_roulette");
        let mut logdet_order = 10usize;
        for (idx, raw) in lines.iter().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw.as_str(),
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("expected `section.key = value`, got `{line}`"),
                    ))
                }
            };
            cfg.apply(key, value, &mut logdet_name, &mut logdet_order, path, line_no)?;
        }
        cfg.train.logdet.mode = match logdet_name.as_str() {
            "exact" => LogDetMode::Exact,
            "truncated" => LogDetMode::Truncated(logdet_order),
            _ => LogDetMode::RussianRoulette,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(
        &mut self,
        key: &str,
        value: &str,
        logdet_name: &mut String,
        logdet_order: &mut usize,
        path: &Path,
        line: usize,
    ) -> Result<()> {
        let bad = |what: &str| Error::parse(path, line, format!("key `{key}`: {what} `{value}`"));
        let as_f64 = || value.parse::<f64>().map_err(|_| bad("not a real number:"));
        let as_usize = || value.parse::<usize>().map_err(|_| bad("not a non-negative integer:"));
        let as_u64 = || value.parse::<u64>().map_err(|_| bad("not a non-negative integer:"));
        match key {
            "data.d" => self.data.d = as_usize()?,
            "data.density" => self.data.density = as_f64()?,
            "data.sem" => self.data.sem = parse_kind(value).ok_or_else(|| bad("unknown family:"))?,
            "data.sigma" => self.data.sigma = as_f64()?,
            "data.lipschitz" => self.data.lipschitz = as_f64()?,
            "data.n_per_intervention" => self.data.n_per_intervention = as_usize()?,
            "data.weight_low" => self.data.weight_low = as_f64()?,
            "data.weight_high" => self.data.weight_high = as_f64()?,
            "data.n_test_per_intervention" => {
                self.data.n_test_per_intervention = Some(as_usize()?)
            }
            "missing.rates" => {
                let mut rates = Vec::new();
                for part in value.split(',') {
                    let r = part
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| bad("rates must be comma-separated reals; bad entry in"))?;
                    rates.push(r);
                }
                self.missing.rates = rates;
            }
            "missing.seed" => self.missing.seed = Some(as_u64()?),
            "train.model" => {
                self.train.model_kind = parse_kind(value).ok_or_else(|| bad("unknown family:"))?
            }
            "train.hidden" => self.train.hidden = as_usize()?,
            "train.epochs" => self.train.epochs = as_usize()?,
            "train.batch_size" => self.train.batch_size = as_usize()?,
            "train.learning_rate" => self.train.learning_rate = as_f64()?,
            "train.lambda" => self.train.lambda = as_f64()?,
            "train.lipschitz_budget" => self.train.lipschitz_budget = as_f64()?,
            "train.temperature" => self.train.temperature = as_f64()?,
            "train.edge_threshold" => self.train.edge_threshold = as_f64()?,
            "train.init_scale" => self.train.init_scale = as_f64()?,
            "train.beta1" => self.train.beta1 = as_f64()?,
            "train.beta2" => self.train.beta2 = as_f64()?,
            "train.eps" => self.train.eps = as_f64()?,
            "train.logdet" => {
                if !matches!(value, "exact" | "truncated" | "russian_roulette") {
                    return Err(bad("expected exact | truncated | russian_roulette, got"));
                }
                *logdet_name = value.to_string();
            }
            "train.logdet_order" => *logdet_order = as_usize()?,
            "train.poisson_mean" => self.train.logdet.poisson_mean = as_f64()?,
            "train.probes" => self.train.logdet.probes = as_usize()?,
            "train.seed" => self.train.seed = as_u64()?,
            "run.methods" => {
                let mut methods = Vec::new();
                for part in value.split(',') {
                    let m = Method::parse(part).map_err(|e| {
                        Error::parse(path, line, format!("key `{key}`: {e}"))
                    })?;
                    methods.push(m);
                }
                self.run.methods = methods;
            }
            "run.seeds" => {
                let mut seeds = Vec::new();
                for part in value.split(',') {
                    let s = part
                        .trim()
                        .parse::<u64>()
                        .map_err(|_| bad("seeds must be comma-separated integers; bad entry in"))?;
                    seeds.push(s);
                }
                self.run.seeds = seeds;
            }
            other => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("unknown configuration key `{other}`"),
                ))
            }
        }
        Ok(())
    }

    /// Cross-field checks that the per-key parser cannot do.
    pub fn validate(&self) -> Result<()> {
        if self.data.d < 2 {
            return Err(Error::invalid("data.d", format!("need at least 2 nodes, got {}", self.data.d)));
        }
        if !(self.data.density > 0.0 && self.data.density.is_finite()) {
            return Err(Error::invalid(
                "data.density",
                format!("must be a positive real, got {}", self.data.density),
            ));
        }
        if !(self.data.sigma > 0.0) {
            return Err(Error::invalid(
                "data.sigma",
                format!("must be positive, got {}", self.data.sigma),
            ));
        }
        if !(self.data.lipschitz > 0.0) {
            return Err(Error::invalid(
                "data.lipschitz",
                format!("must be positive, got {}", self.data.lipschitz),
            ));
        }
        if self.data.n_per_intervention == 0 {
            return Err(Error::invalid("data.n_per_intervention", "must be at least 1"));
        }
        if !(self.data.weight_low > 0.0 && self.data.weight_high > self.data.weight_low) {
            return Err(Error::invalid(
                "data.weight_low",
                format!(
                    "need 0 < weight_low < weight_high, got ({}, {})",
                    self.data.weight_low, self.data.weight_high
                ),
            ));
        }
        if self.missing.rates.is_empty() {
            return Err(Error::invalid("missing.rates", "at least one rate is required"));
        }
        for &r in &self.missing.rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(
                    "missing.rates",
                    format!("rates must lie in [0, 1), got {r}"),
                ));
            }
        }
        if self.run.methods.is_empty() {
            return Err(Error::invalid("run.methods", "at least one method is required"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::invalid("run.seeds", "at least one seed is required"));
        }
        self.train.validate()
    }
}

fn parse_kind(value: &str) -> Option<SemKind> {
    match value {
        "linear" => Some(SemKind::Linear),
        "tanh" => Some(SemKind::Tanh),
        _ => None,
    }
}
