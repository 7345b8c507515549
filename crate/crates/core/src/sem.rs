//! Structural equation models with cycles and surgical interventions.
//!
//! A model is x = f(x) + e. A surgical intervention on a target set replaces
//! the targeted equations entirely: x = U f(x) + U e + c, where U is the
//! diagonal selector of non-targeted (observed) nodes, c is a fresh standard
//! normal draw on the targets and zero elsewhere. Linear models are solved
//! exactly; tanh models by fixed-point iteration, which converges whenever
//! the weight matrix is contractive.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::WeightedAdjacency;
use crate::rng::derive_rng;

/// Convergence tolerance (max-norm of the step) for fixed-point solves.
pub const FIXED_POINT_TOL: f64 = 1e-9;
/// Iteration cap for fixed-point solves.
pub const FIXED_POINT_MAX_ITERS: usize = 1000;

/// One interventional regime: the set of surgically clamped nodes.
///
/// The empty set is the observational regime.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InterventionExperiment {
    d: usize,
    intervened: Vec<usize>, // sorted, deduplicated
}

impl InterventionExperiment {
    pub fn new(d: usize, targets: &[usize]) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d", "need at least one node"));
        }
        let mut intervened = targets.to_vec();
        intervened.sort_unstable();
        intervened.dedup();
        if let Some(&bad) = intervened.iter().find(|&&t| t >= d) {
            return Err(Error::invalid(
                "targets",
                format!("target {bad} out of range for d = {d}"),
            ));
        }
        Ok(InterventionExperiment { d, intervened })
    }

    pub fn observational(d: usize) -> Self {
        InterventionExperiment {
            d,
            intervened: Vec::new(),
        }
    }

    pub fn single_node(d: usize, target: usize) -> Result<Self> {
        InterventionExperiment::new(d, &[target])
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Sorted intervention targets.
    pub fn targets(&self) -> &[usize] {
        &self.intervened
    }

    pub fn is_intervened(&self, node: usize) -> bool {
        self.intervened.binary_search(&node).is_ok()
    }

    /// Non-targeted nodes, ascending.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.d).filter(|&i| !self.is_intervened(i)).collect()
    }

    /// Diagonal of the selector U: 1 on observed nodes, 0 on targets.
    pub fn u_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.d, |i, _| if self.is_intervened(i) { 0.0 } else { 1.0 })
    }
}

/// Which structural function family generated the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemKind {
    Linear,
    Tanh,
}

impl SemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SemKind::Linear => "linear",
            SemKind::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SemKind::Linear),
            "tanh" => Ok(SemKind::Tanh),
            other => Err(Error::invalid(
                "kind",
                format!("expected `linear` or `tanh`, got `{other}`"),
            )),
        }
    }
}

/// Data-generating model: weights, noise scale, and the spectral-norm target
/// the weights were projected onto at construction time.
#[derive(Debug, Clone)]
pub struct GroundTruthSem {
    pub kind: SemKind,
    pub weights: WeightedAdjacency,
    pub noise_std: f64,
    pub lipschitz: f64,
}

impl GroundTruthSem {
    pub fn new(
        kind: SemKind,
        weights: WeightedAdjacency,
        noise_std: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        if !(noise_std > 0.0) {
            return Err(Error::invalid(
                "noise_std",
                format!("must be positive, got {noise_std}"),
            ));
        }
        if !(lipschitz > 0.0) {
            return Err(Error::invalid(
                "lipschitz",
                format!("must be positive, got {lipschitz}"),
            ));
        }
        Ok(GroundTruthSem {
            kind,
            weights,
            noise_std,
            lipschitz,
        })
    }

    pub fn d(&self) -> usize {
        self.weights.d()
    }

    /// The structural function f. Linear: Bᵀx; tanh: tanh(Wᵀx) elementwise.
    pub fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let pre = self.weights.matrix().transpose() * x;
        match self.kind {
            SemKind::Linear => pre,
            SemKind::Tanh => pre.map(f64::tanh),
        }
    }
}

/// One draw: the value vector and its observation indicator (true = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub r: Vec<bool>,
}

impl Sample {
    pub fn complete(x: DVector<f64>) -> Self {
        let d = x.len();
        Sample {
            x,
            r: vec![true; d],
        }
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.r.len()).filter(|&i| self.r[i]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.r.len()).filter(|&i| !self.r[i]).collect()
    }
}

/// Solve the linear interventional system x = U Bᵀ x + U e + c exactly.
///
/// Targeted coordinates are substituted (x_i = c_i holds bit for bit); the
/// remaining block is a dense LU solve.
pub fn solve_linear(
    b: &DMatrix<f64>,
    experiment: &InterventionExperiment,
    e: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = b.nrows();
    if experiment.d() != d || e.len() != d || c.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "linear solve with d = {d}, experiment d = {}, e = {}, c = {}",
            experiment.d(),
            e.len(),
            c.len()
        )));
    }
    let observed = experiment.observed();
    let targets = experiment.targets();
    let mut x = DVector::zeros(d);
    for &i in targets {
        x[i] = c[i];
    }
    if observed.is_empty() {
        return Ok(x);
    }
    // Row i (observed): x_i - sum_j B[j,i] x_j = e_i, with targeted x_j known.
    let k = observed.len();
    let mut a = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (ri, &i) in observed.iter().enumerate() {
        rhs[ri] = e[i];
        for (rj, &j) in observed.iter().enumerate() {
            a[(ri, rj)] = f64::from(u8::from(ri == rj)) - b[(j, i)];
        }
        for &j in targets {
            rhs[ri] += b[(j, i)] * c[j];
        }
    }
    let solved = a.lu().solve(&rhs).ok_or_else(|| {
        Error::Factorization("linear SEM system (I - U Bᵀ) is singular".into())
    })?;
    for (ri, &i) in observed.iter().enumerate() {
        x[i] = solved[ri];
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear SEM solution".into()));
    }
    Ok(x)
}

/// Damped fixed-point iteration x ← (1-α) x + α (U f(x) + U e + c) from zero.
/// α = 1 is the plain iteration used for contractive maps.
fn fixed_point_impl(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    experiment: &InterventionExperiment,
    e: &DVector<f64>,
    c: &DVector<f64>,
    alpha: f64,
) -> Result<(DVector<f64>, Vec<f64>)> {
    let d = experiment.d();
    let u = experiment.u_diag();
    let mut x = DVector::<f64>::zeros(d);
    let mut residuals = Vec::new();
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let mut next = f(&x);
        for i in 0..d {
            next[i] = u[i] * (next[i] + e[i]) + c[i];
        }
        if alpha < 1.0 {
            next = (1.0 - alpha) * &x + alpha * next;
        }
        let step = (&next - &x).amax();
        residuals.push(step);
        x = next;
        if !step.is_finite() {
            return Err(Error::NonFinite("fixed-point iterate".into()));
        }
        if step < FIXED_POINT_TOL {
            // Clamp targets exactly; the iteration only approaches them
            // geometrically when damped.
            for &i in experiment.targets() {
                x[i] = c[i];
            }
            return Ok((x, residuals));
        }
    }
    Err(Error::FixedPointDiverged {
        spectral_norm: crate::linalg::spectral_norm(&numerical_jacobian_norm_probe(f, &x)),
        iterations: FIXED_POINT_MAX_ITERS,
    })
}

/// Cheap dense Jacobian estimate at the last iterate, only used to report a
/// meaningful spectral norm in divergence errors.
fn numerical_jacobian_norm_probe(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let d = x.len();
    let h = 1e-6;
    let fx = f(x);
    let mut j = DMatrix::zeros(d, d);
    for col in 0..d {
        let mut xp = x.clone();
        xp[col] += h;
        let fp = f(&xp);
        for row in 0..d {
            j[(row, col)] = (fp[row] - fx[row]) / h;
        }
    }
    j
}

/// Public fixed-point solve; see [`fixed_point_impl`].
pub fn solve_fixed_point(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    experiment: &InterventionExperiment,
    e: &DVector<f64>,
    c: &DVector<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(
            "alpha",
            format!("damping must lie in (0, 1], got {alpha}"),
        ));
    }
    fixed_point_impl(&f, experiment, e, c, alpha).map(|(x, _)| x)
}

/// Draw `n` complete samples from the model under one experiment.
///
/// Each sample consumes its own derived random stream, so the result is
/// independent of evaluation order and identical however the work is split.
pub fn simulate(
    sem: &GroundTruthSem,
    experiment: &InterventionExperiment,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    let d = sem.d();
    if experiment.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "model has d = {d}, experiment has d = {}",
            experiment.d()
        )));
    }
    let base: u64 = rng.random();
    // Saturating nonlinearities generated above the contractive regime still
    // settle under damping; use the plain iteration otherwise.
    let alpha = if sem.lipschitz < 1.0 { 1.0 } else { 0.5 };
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let mut stream = derive_rng(base, &[idx as u64]);
        let e = DVector::from_fn(d, |_, _| {
            sem.noise_std * stream.sample::<f64, _>(StandardNormal)
        });
        let mut c = DVector::zeros(d);
        for &t in experiment.targets() {
            c[t] = stream.sample::<f64, _>(StandardNormal);
        }
        let x = match sem.kind {
            SemKind::Linear => solve_linear(sem.weights.matrix(), experiment, &e, &c)?,
            SemKind::Tanh => solve_fixed_point(|v| sem.f(v), experiment, &e, &c, alpha)?,
        };
        out.push(Sample::complete(x));
    }
    Ok(out)
}

/// The single-node protocol: one experiment per node, each paired with the
/// same per-experiment sample count.
pub fn make_single_node_plan(d: usize, n_per_intervention: usize) -> Vec<(InterventionExperiment, usize)> {
    (0..d)
        .map(|k| {
            (
                InterventionExperiment::new(d, &[k]).expect("k < d by construction"),
                n_per_intervention,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::WeightedAdjacency;
    use approx::assert_relative_eq;

    fn chain_b() -> DMatrix<f64> {
        // 0 -> 1 -> 2 with weights 0.5 each.
        let mut b = DMatrix::zeros(3, 3);
        b[(0, 1)] = 0.5;
        b[(1, 2)] = 0.5;
        b
    }

    #[test]
    fn single_node_no_edges_returns_its_noise() {
        let b = DMatrix::zeros(1, 1);
        let exp = InterventionExperiment::observational(1);
        let e = DVector::from_vec(vec![0.5]);
        let c = DVector::zeros(1);
        let x = solve_linear(&b, &exp, &e, &c).unwrap();
        assert_eq!(x[0], 0.5);
    }

    #[test]
    fn chain_solves_by_forward_substitution() {
        let exp = InterventionExperiment::observational(3);
        let e = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let c = DVector::zeros(3);
        let x = solve_linear(&chain_b(), &exp, &e, &c).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(x[2], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn two_cycle_matches_closed_form() {
        // x0 = 0.4 x1 + e0, x1 = 0.5 x0 + e1 has the closed-form solution
        // x0 = (e0 + 0.4 e1) / 0.8, x1 = (e1 + 0.5 e0) / 0.8.
        let mut b = DMatrix::zeros(2, 2);
        b[(0, 1)] = 0.5;
        b[(1, 0)] = 0.4;
        let exp = InterventionExperiment::observational(2);
        let e = DVector::from_vec(vec![0.3, -0.7]);
        let c = DVector::zeros(2);
        let x = solve_linear(&b, &exp, &e, &c).unwrap();
        assert_relative_eq!(x[0], (0.3 + 0.4 * -0.7) / 0.8, epsilon = 1e-12);
        assert_relative_eq!(x[1], (-0.7 + 0.5 * 0.3) / 0.8, epsilon = 1e-12);
    }

    #[test]
    fn intervention_clamps_targets_bit_exactly() {
        let mut b = DMatrix::zeros(2, 2);
        b[(0, 1)] = 0.5;
        b[(1, 0)] = 0.4;
        let exp = InterventionExperiment::new(2, &[1]).unwrap();
        let e = DVector::from_vec(vec![0.25, 123.0]);
        let c = DVector::from_vec(vec![0.0, -1.75]);
        let x = solve_linear(&b, &exp, &e, &c).unwrap();
        // Target takes its clamp value exactly; its own noise is discarded.
        assert_eq!(x[1].to_bits(), (-1.75f64).to_bits());
        assert_relative_eq!(x[0], 0.25 + 0.4 * -1.75, epsilon = 1e-12);
    }

    #[test]
    fn tanh_with_zero_weights_reduces_to_noise_plus_clamp() {
        let w = WeightedAdjacency::zeros(3);
        let sem = GroundTruthSem::new(SemKind::Tanh, w, 1.0, 0.9).unwrap();
        let exp = InterventionExperiment::new(3, &[2]).unwrap();
        let e = DVector::from_vec(vec![0.1, -0.2, 9.0]);
        let c = DVector::from_vec(vec![0.0, 0.0, 1.5]);
        let x = solve_fixed_point(|v| sem.f(v), &exp, &e, &c, 1.0).unwrap();
        assert_relative_eq!(x[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(x[1], -0.2, epsilon = 1e-12);
        assert_eq!(x[2].to_bits(), 1.5f64.to_bits());
    }

    #[test]
    fn fixed_point_residuals_decay_geometrically() {
        // Contractive tanh model: step sizes must shrink at least by the
        // Lipschitz factor of the weight matrix once past the first step.
        let mut b = DMatrix::zeros(3, 3);
        b[(0, 1)] = 0.6;
        b[(1, 2)] = -0.5;
        b[(2, 0)] = 0.4;
        let lip = crate::linalg::spectral_norm(&b);
        assert!(lip < 1.0);
        let sem = GroundTruthSem::new(
            SemKind::Tanh,
            WeightedAdjacency::new(b).unwrap(),
            1.0,
            lip,
        )
        .unwrap();
        let exp = InterventionExperiment::observational(3);
        let e = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let c = DVector::zeros(3);
        let (_, residuals) =
            fixed_point_impl(&|v: &DVector<f64>| sem.f(v), &exp, &e, &c, 1.0).unwrap();
        for pair in residuals.windows(2) {
            if pair[0] > 1e-12 {
                assert!(
                    pair[1] <= lip * pair[0] + 1e-12,
                    "residual went {} -> {}, ratio above Lipschitz bound {lip}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn simulate_is_deterministic_and_marks_everything_observed() {
        let mut rng_a = crate::rng::derive_rng(3, &[1]);
        let mut rng_b = crate::rng::derive_rng(3, &[1]);
        let sem = GroundTruthSem::new(
            SemKind::Linear,
            WeightedAdjacency::new(chain_b()).unwrap(),
            0.25,
            0.9,
        )
        .unwrap();
        let exp = InterventionExperiment::single_node(3, 1).unwrap();
        let a = simulate(&sem, &exp, 8, &mut rng_a).unwrap();
        let b = simulate(&sem, &exp, 8, &mut rng_b).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.r.iter().all(|&o| o)));
    }

    #[test]
    fn observational_covariance_matches_the_dense_formula() {
        // Empirical covariance of x = Bᵀx + e against
        // C = σ² (I - Bᵀ)⁻¹ (I - B)⁻¹, entrywise within five standard errors
        // (Gaussian fourth-moment formula for the sample covariance).
        let mut rng = crate::rng::derive_rng(77, &[0]);
        let g = crate::graph::sample_erdos_renyi(4, 1.5, &mut rng).unwrap();
        let w =
            crate::graph::assign_weights_and_project(&g, 0.25, 0.6, 0.9, &mut rng).unwrap();
        let sigma = 0.25;
        let sem = GroundTruthSem::new(SemKind::Linear, w.clone(), sigma, 0.9).unwrap();
        let exp = InterventionExperiment::observational(4);
        let n = 100_000usize;
        let samples = simulate(&sem, &exp, n, &mut rng).unwrap();

        let eye = DMatrix::<f64>::identity(4, 4);
        let a_inv = (&eye - w.matrix().transpose()).try_inverse().unwrap();
        let c_true = sigma * sigma * &a_inv * a_inv.transpose();

        let mean = samples.iter().fold(DVector::zeros(4), |acc, s| acc + &s.x) / n as f64;
        let mut c_emp = DMatrix::zeros(4, 4);
        for s in &samples {
            let centered = &s.x - &mean;
            c_emp += &centered * centered.transpose();
        }
        c_emp /= (n - 1) as f64;

        for i in 0..4 {
            for j in 0..4 {
                let se = ((c_true[(i, i)] * c_true[(j, j)] + c_true[(i, j)].powi(2))
                    / n as f64)
                    .sqrt();
                assert!(
                    (c_emp[(i, j)] - c_true[(i, j)]).abs() <= 5.0 * se,
                    "cov[{i},{j}] = {} vs {} (se {se})",
                    c_emp[(i, j)],
                    c_true[(i, j)]
                );
            }
        }
    }

    #[test]
    fn plan_covers_every_node_once() {
        let plan = make_single_node_plan(3, 100);
        assert_eq!(plan.len(), 3);
        for (k, (exp, n)) in plan.iter().enumerate() {
            assert_eq!(exp.targets(), &[k]);
            assert_eq!(*n, 100);
        }
        let tiny = make_single_node_plan(1, 5);
        assert_eq!(tiny.len(), 1);
        assert_eq!(tiny[0].0.targets(), &[0]);
    }

    #[test]
    fn experiment_validates_and_canonicalizes_targets() {
        let exp = InterventionExperiment::new(5, &[3, 1, 3]).unwrap();
        assert_eq!(exp.targets(), &[1, 3]);
        assert_eq!(exp.observed(), vec![0, 2, 4]);
        assert!(InterventionExperiment::new(3, &[3]).is_err());
        assert_eq!(exp.u_diag(), DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.0]));
    }
}
