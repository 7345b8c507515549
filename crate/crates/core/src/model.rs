//! The learnable model: a masked causal function, an edge-mask distribution,
//! and a diagonal noise precision.
//!
//! Output i of the function only sees the inputs its mask column admits:
//! [f(x)]_i = [NN(M_{:,i} ⊙ x)]_i. For the linear family NN(y) = Bᵀy this
//! collapses to f(x) = (B ⊙ M)ᵀ x; the nonlinear family is a one-hidden-layer
//! tanh network without biases, so f(0) = 0 in both cases.
//!
//! Mask entries are relaxed Bernoulli draws: s = σ((φ + logistic noise)/τ).
//! With hard sampling the forward value is rounded to {0, 1} while the
//! relaxed value keeps carrying the gradient (straight-through).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::csv;
use crate::error::{Error, Result};
use crate::graph::project_to_lipschitz;
use crate::linalg::spectral_norm;

/// f(x) = (B ⊙ M)ᵀ x; entry B[j, i] weighs the edge j → i.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFunction {
    pub b: DMatrix<f64>,
}

/// One-hidden-layer tanh network, applied per output under that output's
/// mask column. `w1` is d×h, `w2` is h×d, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMlpFunction {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
}

impl MaskedMlpFunction {
    pub fn d(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    /// Pre-activation derivatives 1 - tanh²(z) for every (output, hidden)
    /// pair at the point x; row i belongs to output i.
    fn tanh_prime_table(&self, x: &DVector<f64>, mask: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, h) = (self.d(), self.hidden());
        let mut tp = DMatrix::zeros(d, h);
        for i in 0..d {
            for k in 0..h {
                let mut z = 0.0;
                for j in 0..d {
                    z += self.w1[(j, k)] * mask[(j, i)] * x[j];
                }
                let t = z.tanh();
                tp[(i, k)] = 1.0 - t * t;
            }
        }
        tp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CausalFunction {
    Linear(LinearFunction),
    Mlp(MaskedMlpFunction),
}

impl CausalFunction {
    pub fn d(&self) -> usize {
        match self {
            CausalFunction::Linear(f) => f.b.nrows(),
            CausalFunction::Mlp(f) => f.d(),
        }
    }

    /// Uniform(-scale, scale) linear weights with a zero diagonal, projected
    /// onto the Lipschitz budget.
    pub fn random_linear(d: usize, scale: f64, budget: f64, rng: &mut impl Rng) -> Self {
        let mut b = DMatrix::from_fn(d, d, |j, i| {
            if j == i {
                0.0
            } else {
                rng.random_range(-scale..scale)
            }
        });
        project_to_lipschitz(&mut b, budget);
        CausalFunction::Linear(LinearFunction { b })
    }

    /// Uniform(-scale, scale) two-layer weights, each layer projected onto
    /// budget^(1/2) so the product respects the budget.
    pub fn random_mlp(d: usize, hidden: usize, scale: f64, budget: f64, rng: &mut impl Rng) -> Self {
        let mut w1 = DMatrix::from_fn(d, hidden, |_, _| rng.random_range(-scale..scale));
        let mut w2 = DMatrix::from_fn(hidden, d, |_, _| rng.random_range(-scale..scale));
        let per_layer = budget.sqrt();
        project_to_lipschitz(&mut w1, per_layer);
        project_to_lipschitz(&mut w2, per_layer);
        CausalFunction::Mlp(MaskedMlpFunction { w1, w2 })
    }

    /// Evaluate under a mask with entries in [0, 1].
    pub fn evaluate(&self, x: &DVector<f64>, mask: &DMatrix<f64>) -> DVector<f64> {
        let d = self.d();
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(mask.shape(), (d, d));
        match self {
            CausalFunction::Linear(f) => {
                let mut out = DVector::zeros(d);
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += f.b[(j, i)] * mask[(j, i)] * x[j];
                    }
                    out[i] = acc;
                }
                out
            }
            CausalFunction::Mlp(f) => {
                let h = f.hidden();
                let mut out = DVector::zeros(d);
                for i in 0..d {
                    let mut acc = 0.0;
                    for k in 0..h {
                        let mut z = 0.0;
                        for j in 0..d {
                            z += f.w1[(j, k)] * mask[(j, i)] * x[j];
                        }
                        acc += f.w2[(k, i)] * z.tanh();
                    }
                    out[i] = acc;
                }
                out
            }
        }
    }

    /// Dense Jacobian J[i, j] = ∂f_i/∂x_j at x under the mask.
    pub fn jacobian(&self, x: &DVector<f64>, mask: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d();
        match self {
            CausalFunction::Linear(f) => {
                DMatrix::from_fn(d, d, |i, j| f.b[(j, i)] * mask[(j, i)])
            }
            CausalFunction::Mlp(f) => {
                let tp = f.tanh_prime_table(x, mask);
                let h = f.hidden();
                DMatrix::from_fn(d, d, |i, j| {
                    let mut acc = 0.0;
                    for k in 0..h {
                        acc += f.w2[(k, i)] * tp[(i, k)] * f.w1[(j, k)];
                    }
                    acc * mask[(j, i)]
                })
            }
        }
    }

    /// Jacobian-vector-product handle at (x, mask); precomputes activations
    /// once so repeated products are cheap and never build J densely.
    pub fn jacobian_op<'a>(&'a self, x: &DVector<f64>, mask: &'a DMatrix<f64>) -> JacobianOp<'a> {
        match self {
            CausalFunction::Linear(f) => {
                let d = self.d();
                let jt = DMatrix::from_fn(d, d, |j, i| f.b[(j, i)] * mask[(j, i)]);
                JacobianOp::Linear { jt }
            }
            CausalFunction::Mlp(f) => {
                let tp = f.tanh_prime_table(x, mask);
                JacobianOp::Mlp { f, mask, tp }
            }
        }
    }

    /// Project the weights so the function is `budget`-Lipschitz: the linear
    /// matrix directly, the two MLP layers onto budget^(1/2) each.
    pub fn spectral_project(&mut self, budget: f64) {
        match self {
            CausalFunction::Linear(f) => project_to_lipschitz(&mut f.b, budget),
            CausalFunction::Mlp(f) => {
                let per_layer = budget.sqrt();
                project_to_lipschitz(&mut f.w1, per_layer);
                project_to_lipschitz(&mut f.w2, per_layer);
            }
        }
    }

    /// Certified Lipschitz bound of the unmasked function: ‖B‖₂ for linear,
    /// the product of layer norms for the MLP.
    pub fn effective_norm(&self) -> f64 {
        match self {
            CausalFunction::Linear(f) => spectral_norm(&f.b),
            CausalFunction::Mlp(f) => spectral_norm(&f.w1) * spectral_norm(&f.w2),
        }
    }
}

/// Matrix-free access to J (and Jᵀ) at a fixed point.
pub trait JacobianApply {
    fn dim(&self) -> usize;
    /// J v
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
    /// Jᵀ v
    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64>;
}

pub enum JacobianOp<'a> {
    Linear {
        /// Jᵀ = B ⊙ M stored once; J is its transpose.
        jt: DMatrix<f64>,
    },
    Mlp {
        f: &'a MaskedMlpFunction,
        mask: &'a DMatrix<f64>,
        tp: DMatrix<f64>,
    },
}

impl JacobianApply for JacobianOp<'_> {
    fn dim(&self) -> usize {
        match self {
            JacobianOp::Linear { jt } => jt.nrows(),
            JacobianOp::Mlp { f, .. } => f.d(),
        }
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            JacobianOp::Linear { jt } => jt.transpose() * v,
            JacobianOp::Mlp { f, mask, tp } => {
                let (d, h) = (f.d(), f.hidden());
                let mut out = DVector::zeros(d);
                for i in 0..d {
                    let mut acc = 0.0;
                    for k in 0..h {
                        let mut inner = 0.0;
                        for j in 0..d {
                            inner += f.w1[(j, k)] * mask[(j, i)] * v[j];
                        }
                        acc += f.w2[(k, i)] * tp[(i, k)] * inner;
                    }
                    out[i] = acc;
                }
                out
            }
        }
    }

    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            JacobianOp::Linear { jt } => jt * v,
            JacobianOp::Mlp { f, mask, tp } => {
                let (d, h) = (f.d(), f.hidden());
                let mut out = DVector::zeros(d);
                for i in 0..d {
                    if v[i] == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        let m = mask[(j, i)];
                        if m == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for k in 0..h {
                            acc += f.w1[(j, k)] * tp[(i, k)] * f.w2[(k, i)];
                        }
                        out[j] += v[i] * m * acc;
                    }
                }
                out
            }
        }
    }
}

/// Independent relaxed-Bernoulli logits per ordered node pair; the diagonal
/// carries probability zero no matter what the stored logits say.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDistribution {
    pub logits: DMatrix<f64>,
    pub temperature: f64,
}

/// One mask draw. `values` is what the forward pass consumes; `soft` is the
/// relaxed sample that carries the gradient (identical to `values` when the
/// draw was not hard).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub values: DMatrix<f64>,
    pub soft: DMatrix<f64>,
    pub hard: bool,
}

impl MaskSample {
    /// The trivial mask that admits every edge (used for unmasked evaluation).
    pub fn all_ones(d: usize) -> Self {
        let mut values = DMatrix::from_element(d, d, 1.0);
        values.set_diagonal(&DVector::zeros(d));
        MaskSample {
            soft: values.clone(),
            values,
            hard: true,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl MaskDistribution {
    pub fn new(d: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(
                "temperature",
                format!("must be positive, got {temperature}"),
            ));
        }
        Ok(MaskDistribution {
            logits: DMatrix::zeros(d, d),
            temperature,
        })
    }

    pub fn d(&self) -> usize {
        self.logits.nrows()
    }

    /// Edge probabilities σ(φ), diagonal forced to zero.
    pub fn probabilities(&self) -> DMatrix<f64> {
        let d = self.d();
        DMatrix::from_fn(d, d, |j, i| if j == i { 0.0 } else { sigmoid(self.logits[(j, i)]) })
    }

    /// Expected L1 mass of a mask draw: the sum of off-diagonal probabilities.
    pub fn expected_l1(&self) -> f64 {
        self.probabilities().sum()
    }

    /// Deterministic maximum-a-posteriori mask: probability strictly above
    /// the threshold becomes 1.
    pub fn map_mask(&self, threshold: f64) -> DMatrix<f64> {
        let p = self.probabilities();
        p.map(|v| if v > threshold { 1.0 } else { 0.0 })
    }

    /// Draw the logistic noise for one mask sample (off-diagonal entries,
    /// row-major order; the diagonal stays zero and consumes no randomness).
    pub fn sample_logistic_noise(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let mut noise = DMatrix::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                if j == i {
                    continue;
                }
                let u: f64 = rng.random();
                noise[(j, i)] = u.ln() - (1.0 - u).ln();
            }
        }
        noise
    }

    /// Turn frozen logistic noise into a mask sample under the current
    /// logits: s = σ((φ + noise)/τ). Hard: forward value rounded to {0, 1},
    /// the relaxed value retained for the gradient.
    pub fn materialize(&self, noise: &DMatrix<f64>, hard: bool) -> MaskSample {
        let d = self.d();
        let mut soft = DMatrix::zeros(d, d);
        let mut values = DMatrix::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                if j == i {
                    continue;
                }
                let s = sigmoid((self.logits[(j, i)] + noise[(j, i)]) / self.temperature);
                soft[(j, i)] = s;
                values[(j, i)] = if hard {
                    if s > 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    s
                };
            }
        }
        MaskSample { values, soft, hard }
    }

    /// Draw one mask (fresh noise + materialize).
    pub fn sample(&self, hard: bool, rng: &mut impl Rng) -> MaskSample {
        let noise = Self::sample_logistic_noise(self.d(), rng);
        self.materialize(&noise, hard)
    }
}

/// Diagonal noise model: Θ = diag(exp(-ℓ)), so ℓ_i is the log-variance of
/// node i's exogenous noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrecision {
    pub log_variances: DVector<f64>,
}

impl NoisePrecision {
    pub fn unit(d: usize) -> Self {
        NoisePrecision {
            log_variances: DVector::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.log_variances.len()
    }

    /// exp(-ℓ) per node.
    pub fn precision_diag(&self) -> DVector<f64> {
        self.log_variances.map(|l| (-l).exp())
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.log_variances[i].exp()
    }
}

/// Everything the EM loop learns, plus the contractivity budget it must obey.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalModel {
    pub function: CausalFunction,
    pub mask: MaskDistribution,
    pub noise: NoisePrecision,
    pub lipschitz_budget: f64,
}

impl CausalModel {
    pub fn d(&self) -> usize {
        self.function.d()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.function.d();
        if self.mask.d() != d || self.noise.d() != d {
            return Err(Error::DimensionMismatch(format!(
                "model components disagree: function d = {d}, mask d = {}, noise d = {}",
                self.mask.d(),
                self.noise.d()
            )));
        }
        if !(self.lipschitz_budget > 0.0) {
            return Err(Error::invalid("lipschitz_budget", "must be positive"));
        }
        Ok(())
    }
}

/// Gradients for every learnable field, in ascent direction of the objective.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    /// dQ/dB for linear functions.
    pub b: Option<DMatrix<f64>>,
    /// dQ/dW1, dQ/dW2 for MLP functions.
    pub w1: Option<DMatrix<f64>>,
    pub w2: Option<DMatrix<f64>>,
    /// dQ/dφ (includes the straight-through chain and the sparsity penalty).
    pub logits: DMatrix<f64>,
    /// dQ/dℓ.
    pub log_variances: DVector<f64>,
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

/// Write a model checkpoint: a key,value preamble followed by labeled matrix
/// sections for the weights, the mask logits, and the log-variances.
pub fn write_checkpoint(path: &Path, model: &CausalModel) -> Result<()> {
    model.validate()?;
    let d = model.d();
    let mut out = String::from("key,value\n");
    let (kind, h) = match &model.function {
        CausalFunction::Linear(_) => ("linear", 0),
        CausalFunction::Mlp(f) => ("mlp", f.hidden()),
    };
    out.push_str(&format!("kind,{kind}\n"));
    out.push_str(&format!("d,{d}\n"));
    out.push_str(&format!("h,{h}\n"));
    out.push_str(&format!("tau,{}\n", csv::format_float(model.mask.temperature)));
    out.push_str(&format!(
        "budget,{}\n",
        csv::format_float(model.lipschitz_budget)
    ));
    let push_matrix = |label: &str, m: &DMatrix<f64>, out: &mut String| {
        out.push_str(&format!("[{label}]\n"));
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| csv::format_float(m[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    };
    match &model.function {
        CausalFunction::Linear(f) => push_matrix("B", &f.b, &mut out),
        CausalFunction::Mlp(f) => {
            push_matrix("W1", &f.w1, &mut out);
            push_matrix("W2", &f.w2, &mut out);
        }
    }
    push_matrix("phi", &model.mask.logits, &mut out);
    let ell: Vec<String> = model
        .noise
        .log_variances
        .iter()
        .map(|&v| csv::format_float(v))
        .collect();
    out.push_str("[ell]\n");
    out.push_str(&ell.join(","));
    out.push('\n');
    csv::write_file(path, &out)
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<CausalModel> {
    let lines = csv::read_lines(path)?;
    if lines.first().map(|l| l.trim()) != Some("key,value") {
        return Err(Error::parse(path, 1, "expected header `key,value`".to_string()));
    }
    let mut idx = 1;
    let mut header = std::collections::HashMap::new();
    while idx < lines.len() && !lines[idx].starts_with('[') {
        if let Some((k, v)) = lines[idx].split_once(',') {
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
        idx += 1;
    }
    let need = |k: &str| -> Result<&String> {
        header
            .get(k)
            .ok_or_else(|| Error::parse(path, 1, format!("missing checkpoint key `{k}`")))
    };
    let d: usize = csv::parse_usize(need("d")?, path, 1)?;
    let h: usize = csv::parse_usize(need("h")?, path, 1)?;
    let tau = csv::parse_float(need("tau")?, path, 1)?;
    let budget = csv::parse_float(need("budget")?, path, 1)?;
    let kind = need("kind")?.clone();

    let mut sections: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    while idx < lines.len() {
        let line = lines[idx].trim();
        if line.is_empty() {
            idx += 1;
            continue;
        }
        if !(line.starts_with('[') && line.ends_with(']')) {
            return Err(Error::parse(path, idx + 1, format!("expected a section label, got `{line}`")));
        }
        let label = line[1..line.len() - 1].to_string();
        idx += 1;
        let mut rows = Vec::new();
        while idx < lines.len() && !lines[idx].trim().starts_with('[') {
            let line = lines[idx].trim();
            if !line.is_empty() {
                let row: Result<Vec<f64>> = line
                    .split(',')
                    .map(|f| csv::parse_float(f, path, idx + 1))
                    .collect();
                rows.push(row?);
            }
            idx += 1;
        }
        sections.push((label, rows));
    }
    let take = |label: &str, nrows: usize, ncols: usize| -> Result<DMatrix<f64>> {
        let rows = sections
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::parse(path, 1, format!("missing section [{label}]")))?;
        if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::parse(
                path,
                1,
                format!("section [{label}] must be {nrows}x{ncols}"),
            ));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    };
    let function = match kind.as_str() {
        "linear" => CausalFunction::Linear(LinearFunction {
            b: take("B", d, d)?,
        }),
        "mlp" => CausalFunction::Mlp(MaskedMlpFunction {
            w1: take("W1", d, h)?,
            w2: take("W2", h, d)?,
        }),
        other => {
            return Err(Error::parse(path, 1, format!("unknown model kind `{other}`")));
        }
    };
    let logits = take("phi", d, d)?;
    let ell_rows = take("ell", 1, d)?;
    let model = CausalModel {
        function,
        mask: MaskDistribution {
            logits,
            temperature: tau,
        },
        noise: NoisePrecision {
            log_variances: DVector::from_fn(d, |j, _| ell_rows[(0, j)]),
        },
        lipschitz_budget: budget,
    };
    model.validate()?;
    Ok(model)
}
