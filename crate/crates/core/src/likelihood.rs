//! Interventional log-density and the penalized training objective.
//!
//! For a complete sample x under an experiment with intervened set 𝓘 and
//! selector U = diag(u), u_i = 0 iff i ∈ 𝓘, the model density is
//!
//!   log p(x) = Σ_{i∉𝓘} log N(x_i − f_i(x); 0, σ_i²)
//!            + Σ_{i∈𝓘} log N(x_i; 0, 1)
//!            + log |det(I − U J_f(x))|,
//!
//! the noise model being diagonal Gaussian and intervened coordinates being
//! drawn from a standard normal. The log-determinant is either computed
//! exactly (dense LU) or estimated from the power series
//! log det(I − UJ) = −Σ_{k≥1} tr((UJ)ᵏ)/k with Hutchinson probes
//! wᵀ(UJ)ᵏw, truncated at a fixed order or reweighted by Poisson survival
//! probabilities so that a random truncation stays unbiased.
//!
//! The training objective for a batch is the mean log-density minus
//! λ · E‖M‖₁, where the expectation of the mask's L1 mass is the sum of
//! off-diagonal edge probabilities. One mask draw is shared by the whole
//! batch; all randomness (mask noise, truncation orders, probe vectors) is
//! drawn up front into [`FrozenDraws`] so an objective evaluation is a pure
//! function of the parameters — which is what both the optimizer and the
//! finite-difference tests need.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    CausalFunction, CausalModel, JacobianApply, MaskDistribution, MaskSample, ModelGradients,
};
use crate::sem::InterventionExperiment;

pub const LN_2PI: f64 = 1.8378770664093453;

/// How log |det(I − U J_f)| is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogDetMode {
    /// Dense LU factorization; exact, O(d³) per sample.
    Exact,
    /// Power series cut at a fixed number of terms; biased but cheap.
    Truncated(usize),
    /// Poisson-randomized truncation with survival-probability weights;
    /// unbiased for contractive Jacobians.
    RussianRoulette,
}

impl LogDetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LogDetMode::Exact => "exact",
            LogDetMode::Truncated(_) => "truncated",
            LogDetMode::RussianRoulette => "russian_roulette",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDetConfig {
    pub mode: LogDetMode,
    /// Mean of the Poisson truncation order (russian_roulette only).
    pub poisson_mean: f64,
    /// Hutchinson probes per sample (series modes).
    pub probes: usize,
}

impl Default for LogDetConfig {
    fn default() -> Self {
        LogDetConfig {
            mode: LogDetMode::RussianRoulette,
            poisson_mean: 5.0,
            probes: 1,
        }
    }
}

impl LogDetConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            LogDetMode::Exact => {}
            LogDetMode::Truncated(order) => {
                if order == 0 {
                    return Err(Error::invalid("logdet_order", "must be at least 1"));
                }
                if self.probes == 0 {
                    return Err(Error::invalid("probes", "must be at least 1"));
                }
            }
            LogDetMode::RussianRoulette => {
                if !(self.poisson_mean > 0.0) {
                    return Err(Error::invalid("poisson_mean", "must be positive"));
                }
                if self.probes == 0 {
                    return Err(Error::invalid("probes", "must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    /// Sparsity weight on E‖M‖₁.
    pub lambda: f64,
    pub logdet: LogDetConfig,
}

/// P(N ≥ k) for N ~ Poisson(mean), summed upward from the k-th term so no
/// cancellation occurs.
pub fn poisson_survival(k: usize, mean: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let ln_fact: f64 = (1..=k).map(|j| (j as f64).ln()).sum();
    let mut term = (-mean + (k as f64) * mean.ln() - ln_fact).exp();
    let mut acc = 0.0;
    let mut j = k;
    while term > 0.0 {
        acc += term;
        j += 1;
        term *= mean / j as f64;
        if term < acc * 1e-17 || j > k + 10_000 {
            acc += term;
            break;
        }
    }
    acc.min(1.0)
}

/// One Hutchinson probe: a standard-normal vector plus the weight of each
/// series term it will touch. `term_weights[k-1]` multiplies wᵀ(UJ)ᵏw; its
/// length is the (possibly random) truncation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDraw {
    pub w: DVector<f64>,
    pub term_weights: Vec<f64>,
}

/// All series randomness one sample consumes (empty in exact mode).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowDraws {
    pub probes: Vec<ProbeDraw>,
}

/// Every random draw one objective evaluation consumes, frozen up front:
/// the logistic noise of the single shared mask draw, then per-row probe
/// randomness. Draw order: mask noise first, then rows in order; within a
/// probe the truncation order precedes the probe vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDraws {
    pub mask_noise: DMatrix<f64>,
    pub hard_mask: bool,
    pub rows: Vec<RowDraws>,
}

impl FrozenDraws {
    pub fn materialize_mask(&self, dist: &MaskDistribution) -> MaskSample {
        dist.materialize(&self.mask_noise, self.hard_mask)
    }
}

/// Draw the randomness for one batch of `n_rows` samples in dimension `d`.
pub fn draw_randomness(
    d: usize,
    n_rows: usize,
    hard_mask: bool,
    config: &LogDetConfig,
    rng: &mut impl Rng,
) -> Result<FrozenDraws> {
    config.validate()?;
    let mask_noise = MaskDistribution::sample_logistic_noise(d, rng);
    let mut rows = Vec::with_capacity(n_rows);
    let poisson = match config.mode {
        LogDetMode::RussianRoulette => Some(
            Poisson::new(config.poisson_mean)
                .map_err(|e| Error::invalid("poisson_mean", e.to_string()))?,
        ),
        _ => None,
    };
    for _ in 0..n_rows {
        let mut probes = Vec::new();
        if !matches!(config.mode, LogDetMode::Exact) {
            for _ in 0..config.probes {
                let order = match config.mode {
                    LogDetMode::Truncated(order) => order,
                    LogDetMode::RussianRoulette => {
                        poisson.as_ref().unwrap().sample(rng) as usize
                    }
                    LogDetMode::Exact => unreachable!(),
                };
                let term_weights = (1..=order)
                    .map(|k| match config.mode {
                        LogDetMode::Truncated(_) => 1.0 / k as f64,
                        LogDetMode::RussianRoulette => {
                            1.0 / (k as f64 * poisson_survival(k, config.poisson_mean))
                        }
                        LogDetMode::Exact => unreachable!(),
                    })
                    .collect();
                let w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                probes.push(ProbeDraw { w, term_weights });
            }
        }
        rows.push(RowDraws { probes });
    }
    Ok(FrozenDraws {
        mask_noise,
        hard_mask,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Log-determinant of the residual operator I - U J_f
// ---------------------------------------------------------------------------

/// Dense residual operator A = I − U J_f(x) under the given mask.
pub fn residual_matrix(
    function: &CausalFunction,
    mask: &DMatrix<f64>,
    x: &DVector<f64>,
    experiment: &InterventionExperiment,
) -> DMatrix<f64> {
    let d = function.d();
    let jac = function.jacobian(x, mask);
    let u = experiment.u_diag();
    DMatrix::from_fn(d, d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - u[i] * jac[(i, j)]
    })
}

/// Exact log |det(I − U J_f(x))| by dense LU.
pub fn exact_residual_log_det(
    function: &CausalFunction,
    mask: &DMatrix<f64>,
    x: &DVector<f64>,
    experiment: &InterventionExperiment,
) -> Result<f64> {
    linalg::log_abs_det(&residual_matrix(function, mask, x, experiment))
}

/// Power-series estimate; consumes J only through matrix-vector products.
/// Returns the estimate and, when requested, its gradient with respect to
/// the dense Jacobian entries.
fn series_core(
    op: &dyn JacobianApply,
    u: &DVector<f64>,
    draws: &RowDraws,
    want_grad: bool,
) -> (f64, Option<DMatrix<f64>>) {
    let d = op.dim();
    let n_probes = draws.probes.len();
    let mut value = 0.0;
    let mut grad = if want_grad {
        Some(DMatrix::zeros(d, d))
    } else {
        None
    };
    for probe in &draws.probes {
        let n = probe.term_weights.len();
        // b_j = (UJ)^j w
        let mut b_chain = Vec::with_capacity(n + 1);
        b_chain.push(probe.w.clone());
        for j in 1..=n {
            let prev = &b_chain[j - 1];
            b_chain.push(u.component_mul(&op.apply(prev)));
        }
        for (k, &weight) in probe.term_weights.iter().enumerate() {
            value -= weight * probe.w.dot(&b_chain[k + 1]);
        }
        if n >= 3 {
            let first = b_chain[1].norm();
            let last = b_chain[n].norm();
            if last > probe.w.norm() && last > first {
                log::warn!(
                    "series iterates grew from {first:.3e} to {last:.3e} over {n} terms; \
                     the masked Jacobian looks non-contractive and the log-det series \
                     may not converge"
                );
            }
        }
        if let Some(g) = grad.as_mut() {
            // d(wᵀ(UJ)ᵏw)/dJ = Σ_{m+j=k-1} (U a_m) b_jᵀ with a_m = ((UJ)ᵀ)^m w.
            let mut a_chain = Vec::with_capacity(n.max(1));
            a_chain.push(probe.w.clone());
            for m in 1..n {
                let prev = u.component_mul(&a_chain[m - 1]);
                a_chain.push(op.apply_transpose(&prev));
            }
            for m in 0..n {
                let ua = u.component_mul(&a_chain[m]);
                for j in 0..(n - m) {
                    let weight = probe.term_weights[m + j];
                    g.ger(-weight, &ua, &b_chain[j], 1.0);
                }
            }
        }
    }
    if n_probes > 0 {
        let scale = 1.0 / n_probes as f64;
        value *= scale;
        if let Some(g) = grad.as_mut() {
            *g *= scale;
        }
    }
    (value, grad)
}

/// Series estimate of log |det(I − UJ)| from frozen probe draws.
pub fn estimate_residual_log_det(
    op: &dyn JacobianApply,
    u: &DVector<f64>,
    draws: &RowDraws,
) -> f64 {
    series_core(op, u, draws, false).0
}

// ---------------------------------------------------------------------------
// Density assembly
// ---------------------------------------------------------------------------

/// Gaussian terms of the log-density: the noise term over non-intervened
/// coordinates and the standard-normal term over intervened ones. Returns
/// the summed value and the residual g = x − U f(x).
fn gaussian_log_terms(
    log_variances: &DVector<f64>,
    x: &DVector<f64>,
    f_val: &DVector<f64>,
    experiment: &InterventionExperiment,
) -> (f64, DVector<f64>) {
    let d = x.len();
    let mut value = 0.0;
    let mut residual = DVector::zeros(d);
    for i in 0..d {
        if experiment.is_intervened(i) {
            residual[i] = 0.0;
            value += -0.5 * (LN_2PI + x[i] * x[i]);
        } else {
            let g = x[i] - f_val[i];
            residual[i] = g;
            let ell = log_variances[i];
            value += -0.5 * (LN_2PI + ell + g * g * (-ell).exp());
        }
    }
    (value, residual)
}

/// Log-density with a caller-supplied log-determinant term.
pub fn interventional_log_density(
    function: &CausalFunction,
    mask: &DMatrix<f64>,
    log_variances: &DVector<f64>,
    x: &DVector<f64>,
    experiment: &InterventionExperiment,
    residual_log_det: f64,
) -> f64 {
    let f_val = function.evaluate(x, mask);
    let (gaussian, _) = gaussian_log_terms(log_variances, x, &f_val, experiment);
    gaussian + residual_log_det
}

/// Fully exact log-density (dense log-determinant).
pub fn exact_log_density(
    function: &CausalFunction,
    mask: &DMatrix<f64>,
    log_variances: &DVector<f64>,
    x: &DVector<f64>,
    experiment: &InterventionExperiment,
) -> Result<f64> {
    let log_det = exact_residual_log_det(function, mask, x, experiment)?;
    Ok(interventional_log_density(
        function,
        mask,
        log_variances,
        x,
        experiment,
        log_det,
    ))
}

// ---------------------------------------------------------------------------
// Batch objective and its tape
// ---------------------------------------------------------------------------

/// One training sample: a complete vector and the experiment it came from.
#[derive(Debug, Clone, Copy)]
pub struct BatchRow<'a> {
    pub x: &'a DVector<f64>,
    pub experiment: &'a InterventionExperiment,
}

/// Per-row adjoints recorded by the forward pass: dQ_row/df, dQ_row/dJ and
/// dQ_row/dℓ, with Q_row the row's log-density (penalty excluded).
#[derive(Debug, Clone)]
pub struct RowTape {
    pub x: DVector<f64>,
    pub upstream_f: DVector<f64>,
    pub upstream_j: DMatrix<f64>,
    pub dlogvar: DVector<f64>,
}

/// Everything [`parameter_gradients`] needs to finish the chain rule.
#[derive(Debug, Clone)]
pub struct TrainingTape {
    pub mask: MaskSample,
    pub lambda: f64,
    pub rows: Vec<RowTape>,
}

/// Batch objective under frozen randomness: mean log-density − λ·E‖M‖₁.
pub fn objective_with_draws(
    model: &CausalModel,
    batch: &[BatchRow<'_>],
    draws: &FrozenDraws,
    config: &ObjectiveConfig,
) -> Result<f64> {
    objective_and_tape(model, batch, draws, config).map(|(q, _)| q)
}

/// Batch objective plus the adjoint tape for [`parameter_gradients`].
pub fn objective_and_tape(
    model: &CausalModel,
    batch: &[BatchRow<'_>],
    draws: &FrozenDraws,
    config: &ObjectiveConfig,
) -> Result<(f64, TrainingTape)> {
    model.validate()?;
    config.logdet.validate()?;
    let d = model.d();
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must contain at least one sample"));
    }
    if draws.rows.len() != batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "frozen draws cover {} rows but the batch has {}",
            draws.rows.len(),
            batch.len()
        )));
    }
    let mask = draws.materialize_mask(&model.mask);
    let log_variances = &model.noise.log_variances;
    let mut total = 0.0;
    let mut rows = Vec::with_capacity(batch.len());
    for (row, row_draws) in batch.iter().zip(&draws.rows) {
        if row.x.len() != d || row.experiment.d() != d {
            return Err(Error::DimensionMismatch(format!(
                "sample of dimension {} under an experiment of dimension {} in a d = {d} model",
                row.x.len(),
                row.experiment.d()
            )));
        }
        let u = row.experiment.u_diag();
        let f_val = model.function.evaluate(row.x, &mask.values);
        let (gaussian, residual) = gaussian_log_terms(log_variances, row.x, &f_val, row.experiment);

        let (log_det, upstream_j) = match config.logdet.mode {
            LogDetMode::Exact => {
                let a = residual_matrix(&model.function, &mask.values, row.x, row.experiment);
                let value = linalg::log_abs_det(&a)?;
                let ainv = a.lu().try_inverse().ok_or_else(|| {
                    Error::Factorization(
                        "residual operator I - U J is singular; cannot form its inverse"
                            .to_string(),
                    )
                })?;
                // d log|det(I-UJ)|/dJ[a,b] = -u_a * (A^{-1})[b,a]
                let g = DMatrix::from_fn(d, d, |r, c| -u[r] * ainv[(c, r)]);
                (value, g)
            }
            LogDetMode::Truncated(_) | LogDetMode::RussianRoulette => {
                let op = model.function.jacobian_op(row.x, &mask.values);
                let (value, g) = series_core(&op, &u, row_draws, true);
                (value, g.unwrap())
            }
        };
        if !log_det.is_finite() {
            return Err(Error::NonFinite(
                "log-determinant term became non-finite".to_string(),
            ));
        }
        total += gaussian + log_det;

        let mut upstream_f = DVector::zeros(d);
        let mut dlogvar = DVector::zeros(d);
        for i in 0..d {
            if !row.experiment.is_intervened(i) {
                let prec = (-log_variances[i]).exp();
                upstream_f[i] = residual[i] * prec;
                dlogvar[i] = -0.5 + 0.5 * residual[i] * residual[i] * prec;
            }
        }
        rows.push(RowTape {
            x: row.x.clone(),
            upstream_f,
            upstream_j,
            dlogvar,
        });
    }
    let q = total / batch.len() as f64 - config.lambda * model.mask.expected_l1();
    if !q.is_finite() {
        return Err(Error::NonFinite("objective became non-finite".to_string()));
    }
    Ok((
        q,
        TrainingTape {
            mask,
            lambda: config.lambda,
            rows,
        },
    ))
}

/// Finish the chain rule: turn the tape's adjoints into gradients of the
/// batch objective with respect to every learnable parameter. Mask logits
/// receive the straight-through estimate (the gradient flows through the
/// relaxed sample even when the forward pass used rounded values) plus the
/// exact derivative of the sparsity penalty.
pub fn parameter_gradients(model: &CausalModel, tape: &TrainingTape) -> Result<ModelGradients> {
    let d = model.d();
    let n = tape.rows.len();
    if n == 0 {
        return Err(Error::invalid("tape", "contains no rows"));
    }
    let scale = 1.0 / n as f64;
    let mask = &tape.mask;
    // Accumulated dQ/d(mask values) over the batch; converted to logit
    // gradients at the end.
    let mut dmask = DMatrix::<f64>::zeros(d, d);
    let mut gb: Option<DMatrix<f64>> = None;
    let mut gw1: Option<DMatrix<f64>> = None;
    let mut gw2: Option<DMatrix<f64>> = None;
    let mut gell = DVector::<f64>::zeros(d);

    match &model.function {
        CausalFunction::Linear(f) => {
            let mut acc = DMatrix::<f64>::zeros(d, d);
            for row in &tape.rows {
                gell += &row.dlogvar;
                for i in 0..d {
                    for j in 0..d {
                        let up_f = row.upstream_f[i] * row.x[j];
                        let up_j = row.upstream_j[(i, j)];
                        acc[(j, i)] += (up_f + up_j) * mask.values[(j, i)];
                        dmask[(j, i)] += (up_f + up_j) * f.b[(j, i)];
                    }
                }
            }
            acc *= scale;
            gb = Some(acc);
        }
        CausalFunction::Mlp(f) => {
            let h = f.hidden();
            let mut acc1 = DMatrix::<f64>::zeros(d, h);
            let mut acc2 = DMatrix::<f64>::zeros(h, d);
            for row in &tape.rows {
                gell += &row.dlogvar;
                // Recompute the activations this row saw.
                let mut t = DMatrix::<f64>::zeros(d, h); // tanh(z_{i,k})
                let mut tp = DMatrix::<f64>::zeros(d, h); // 1 - tanh²
                for i in 0..d {
                    for k in 0..h {
                        let mut z = 0.0;
                        for j in 0..d {
                            z += f.w1[(j, k)] * mask.values[(j, i)] * row.x[j];
                        }
                        let th = z.tanh();
                        t[(i, k)] = th;
                        tp[(i, k)] = 1.0 - th * th;
                    }
                }
                // D[i,k] = Σ_j G[i,j] M[j,i] W1[j,k]
                let g = &row.upstream_j;
                let mut dik = DMatrix::<f64>::zeros(d, h);
                for i in 0..d {
                    for k in 0..h {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += g[(i, j)] * mask.values[(j, i)] * f.w1[(j, k)];
                        }
                        dik[(i, k)] = acc;
                    }
                }
                for i in 0..d {
                    let up = row.upstream_f[i];
                    for k in 0..h {
                        // tpp = d(1 - tanh²)/dz = -2 t (1 - t²)
                        let tpp = -2.0 * t[(i, k)] * tp[(i, k)];
                        acc2[(k, i)] += up * t[(i, k)] + tp[(i, k)] * dik[(i, k)];
                        let w2v = f.w2[(k, i)];
                        for j in 0..d {
                            let m = mask.values[(j, i)];
                            acc1[(j, k)] += up * w2v * tp[(i, k)] * m * row.x[j]
                                + g[(i, j)] * m * w2v * tp[(i, k)]
                                + w2v * tpp * dik[(i, k)] * m * row.x[j];
                        }
                    }
                }
                for i in 0..d {
                    for j in 0..d {
                        // S[i,j] = Σ_k W2[k,i] tp[i,k] W1[j,k]; z-chain through
                        // the mask uses tpp the same way W1's does.
                        let mut s = 0.0;
                        let mut zchain = 0.0;
                        for k in 0..h {
                            let tpp = -2.0 * t[(i, k)] * tp[(i, k)];
                            s += f.w2[(k, i)] * tp[(i, k)] * f.w1[(j, k)];
                            zchain += f.w2[(k, i)] * tpp * dik[(i, k)] * f.w1[(j, k)];
                        }
                        dmask[(j, i)] += row.upstream_f[i] * s * row.x[j]
                            + g[(i, j)] * s
                            + zchain * row.x[j];
                    }
                }
            }
            acc1 *= scale;
            acc2 *= scale;
            gw1 = Some(acc1);
            gw2 = Some(acc2);
        }
    }
    gell *= scale;

    // Straight-through logit gradient + exact penalty derivative.
    let tau = model.mask.temperature;
    let probs = model.mask.probabilities();
    let mut glogits = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        for i in 0..d {
            if i == j {
                continue;
            }
            let s = mask.soft[(j, i)];
            let ste = dmask[(j, i)] * scale * s * (1.0 - s) / tau;
            let p = probs[(j, i)];
            glogits[(j, i)] = ste - tape.lambda * p * (1.0 - p);
        }
    }

    Ok(ModelGradients {
        b: gb,
        w1: gw1,
        w2: gw2,
        logits: glogits,
        log_variances: gell,
    })
}
