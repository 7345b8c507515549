//! Gaussian conditional imputation of missing coordinates.
//!
//! Around the linearization B of the causal function (weights times expected
//! mask), a sample under an experiment with selector U = diag(u) is jointly
//! Gaussian with precision
//!
//!   Θ_X = (I − BU) · (UΘ + (I − U)) · (I − UBᵀ),
//!
//! because z = (I − UBᵀ)x stacks the independent residuals: exogenous noise
//! with precision θ_i on non-intervened coordinates and the standard-normal
//! intervention values elsewhere. (The two outer factors are transposes of
//! one another, which is what makes Θ_X symmetric.)
//!
//! Imputation draws x_Ω | x_Γ for the missing set Ω: permute Ω to the front,
//! factor the permuted precision as MᵀM with M upper-triangular, then solve
//! M_ΩΩ x̃_Ω = z − M_ΩΓ x_Γ against a standard-normal z. Rows sharing a
//! missingness pattern share one factorization; every row consumes its own
//! derived random stream, so results do not depend on how rows are grouped
//! or ordered.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::InterventionalDataset;
use crate::error::{Error, Result};
use crate::model::{CausalFunction, CausalModel};
use crate::rng::derive_rng;
use crate::sem::{InterventionExperiment, Sample};

/// Stream tag for imputation randomness.
pub const IMPUTE_TAG: u64 = 0x494d_5055;

/// Jacobian of the causal function at the origin under the given mask: the
/// expansion point the imputer's Gaussian surrogate is built around. Its
/// transpose plays the role of the weighted adjacency downstream; the
/// surrogate never enters the likelihood itself.
pub fn linearization_matrix(function: &CausalFunction, mask: &DMatrix<f64>) -> DMatrix<f64> {
    function.jacobian(&DVector::zeros(function.d()), mask)
}

/// Linearization the imputer models the data with: the transposed Jacobian
/// at the origin under the expected (probability) mask. For the linear
/// family this is exactly the weight matrix scaled entrywise by the edge
/// probabilities.
pub fn effective_adjacency(model: &CausalModel) -> DMatrix<f64> {
    let probs = model.mask.probabilities();
    linearization_matrix(&model.function, &probs).transpose()
}

/// Assemble the interventional precision matrix around a linearization.
pub fn build_interventional_precision(
    b_eff: &DMatrix<f64>,
    noise_precision: &DVector<f64>,
    experiment: &InterventionExperiment,
) -> Result<DMatrix<f64>> {
    let d = experiment.d();
    if b_eff.shape() != (d, d) || noise_precision.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "adjacency {:?} / precision {} against experiment dimension {d}",
            b_eff.shape(),
            noise_precision.len()
        )));
    }
    let u = experiment.u_diag();
    // left = I − B U  (column j of B scaled by u_j)
    let left = DMatrix::from_fn(d, d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - b_eff[(i, j)] * u[j]
    });
    let middle = DVector::from_fn(d, |i, _| u[i] * noise_precision[i] + (1.0 - u[i]));
    let mut theta = &left * DMatrix::from_diagonal(&middle) * left.transpose();
    // Kill the last bits of round-off asymmetry so downstream Cholesky
    // factorizations see an exactly symmetric matrix.
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (theta[(i, j)] + theta[(j, i)]);
            theta[(i, j)] = s;
            theta[(j, i)] = s;
        }
    }
    Ok(theta)
}

/// Upper-triangular factorization of a permuted precision matrix, missing
/// coordinates first: MᵀM = PΘ_XPᵀ.
struct PatternFactorization {
    missing: Vec<usize>,
    observed: Vec<usize>,
    /// M restricted to missing rows/columns (upper-triangular).
    m_oo: DMatrix<f64>,
    /// M block mapping observed values into the missing rows.
    m_og: DMatrix<f64>,
}

fn factorize_pattern(theta_x: &DMatrix<f64>, r: &[bool]) -> Result<PatternFactorization> {
    let d = theta_x.nrows();
    let missing: Vec<usize> = (0..d).filter(|&i| !r[i]).collect();
    let observed: Vec<usize> = (0..d).filter(|&i| r[i]).collect();
    let perm: Vec<usize> = missing.iter().chain(observed.iter()).copied().collect();
    let permuted = DMatrix::from_fn(d, d, |a, b| theta_x[(perm[a], perm[b])]);
    let chol = permuted.cholesky().ok_or_else(|| {
        Error::Factorization(
            "interventional precision is not positive definite; cannot factor for imputation"
                .to_string(),
        )
    })?;
    let m = chol.l().transpose();
    let k = missing.len();
    let m_oo = m.view((0, 0), (k, k)).into_owned();
    let m_og = m.view((0, k), (k, d - k)).into_owned();
    Ok(PatternFactorization {
        missing,
        observed,
        m_oo,
        m_og,
    })
}

impl PatternFactorization {
    /// Solve M_ΩΩ x̃ = z − M_ΩΓ x_Γ.
    fn solve(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
        let x_obs = DVector::from_fn(self.observed.len(), |t, _| x[self.observed[t]]);
        let rhs = z - &self.m_og * x_obs;
        self.m_oo
            .clone()
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| {
                Error::Factorization(
                    "upper-triangular imputation solve hit a zero pivot".to_string(),
                )
            })
    }
}

/// Conditional mean and covariance of the missing coordinates given the
/// observed ones, in ascending order of missing index. `None` when the
/// sample is complete.
pub fn conditional_moments(
    theta_x: &DMatrix<f64>,
    sample: &Sample,
) -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
    if sample.r.iter().all(|&o| o) {
        return Ok(None);
    }
    let fact = factorize_pattern(theta_x, &sample.r)?;
    let k = fact.missing.len();
    let mean = fact.solve(&sample.x, &DVector::zeros(k))?;
    // Cov = M_ΩΩ⁻¹ M_ΩΩ⁻ᵀ, built by solving against the identity.
    let inv = fact
        .m_oo
        .clone()
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| {
            Error::Factorization("upper-triangular imputation solve hit a zero pivot".to_string())
        })?;
    let cov = &inv * inv.transpose();
    Ok(Some((mean, cov)))
}

/// Draw one completion for every sample in the batch. Observed coordinates
/// pass through bit-exactly; missing ones are sampled from the Gaussian
/// conditional under `theta_x`. Row i consumes the stream derived from
/// (IMPUTE_TAG, stream_tags..., i), so a row's draw is independent of what
/// the rest of the batch looks like.
pub fn impute_gaussian_batch(
    theta_x: &DMatrix<f64>,
    samples: &[Sample],
    seed: u64,
    stream_tags: &[u64],
) -> Result<Vec<DVector<f64>>> {
    let d = theta_x.nrows();
    let mut factorizations: HashMap<Vec<bool>, PatternFactorization> = HashMap::new();
    let mut out = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        if sample.x.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "sample of dimension {} against a {d}x{d} precision",
                sample.x.len()
            )));
        }
        if sample.r.iter().all(|&o| o) {
            out.push(sample.x.clone());
            continue;
        }
        if !factorizations.contains_key(&sample.r) {
            factorizations.insert(sample.r.clone(), factorize_pattern(theta_x, &sample.r)?);
        }
        let fact = &factorizations[&sample.r];
        let mut tags = Vec::with_capacity(stream_tags.len() + 2);
        tags.push(IMPUTE_TAG);
        tags.extend_from_slice(stream_tags);
        tags.push(idx as u64);
        let mut rng = derive_rng(seed, &tags);
        let z = DVector::from_fn(fact.missing.len(), |_, _| {
            StandardNormal.sample(&mut rng)
        });
        let filled = fact.solve(&sample.x, &z)?;
        let mut x = sample.x.clone();
        for (t, &coord) in fact.missing.iter().enumerate() {
            x[coord] = filled[t];
        }
        out.push(x);
    }
    Ok(out)
}

/// Baseline completion: replace each missing entry with the mean of its
/// coordinate over the observed entries of the same block, then mark
/// everything observed. A coordinate with no observed entries in a block
/// falls back to zero.
pub fn mean_impute(dataset: &InterventionalDataset) -> InterventionalDataset {
    let mut out = dataset.clone();
    for block in &mut out.blocks {
        let d = block.experiment.d();
        let mut sums = vec![0.0; d];
        let mut counts = vec![0usize; d];
        for sample in &block.samples {
            for i in 0..d {
                if sample.r[i] {
                    sums[i] += sample.x[i];
                    counts[i] += 1;
                }
            }
        }
        let means: Vec<f64> = (0..d)
            .map(|i| {
                if counts[i] > 0 {
                    sums[i] / counts[i] as f64
                } else {
                    log::warn!(
                        "coordinate {i} has no observed entries in a block; mean imputation \
                         falls back to zero"
                    );
                    0.0
                }
            })
            .collect();
        for sample in &mut block.samples {
            for i in 0..d {
                if !sample.r[i] {
                    sample.x[i] = means[i];
                    sample.r[i] = true;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{project_to_lipschitz, WeightedAdjacency};
    use crate::rng::derive_rng;
    use crate::sem::{GroundTruthSem, SemKind};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn chain_2() -> DMatrix<f64> {
        let mut b = DMatrix::zeros(2, 2);
        b[(0, 1)] = 0.5;
        b
    }

    #[test]
    fn trivial_precisions_reduce_to_the_identity() {
        let d = 3;
        // No edges, unit noise, nothing intervened.
        let obs = InterventionExperiment::observational(d);
        let theta = build_interventional_precision(
            &DMatrix::zeros(d, d),
            &DVector::from_element(d, 1.0),
            &obs,
        )
        .unwrap();
        assert_relative_eq!(theta, DMatrix::identity(d, d), epsilon = 1e-14);
        // Everything intervened: U = 0 wipes both the adjacency and the
        // noise model, whatever they are.
        let mut b = DMatrix::zeros(d, d);
        b[(0, 1)] = 0.5;
        b[(2, 0)] = -0.3;
        let prec = DVector::from_vec(vec![2.0, 0.5, 1.5]);
        let all = InterventionExperiment::new(d, &[0, 1, 2]).unwrap();
        let theta = build_interventional_precision(&b, &prec, &all).unwrap();
        assert_relative_eq!(theta, DMatrix::identity(d, d), epsilon = 1e-14);
    }

    #[test]
    fn linearization_is_the_origin_jacobian_and_vanishes_with_the_output_layer() {
        use crate::model::MaskSample;
        let d = 3;
        let ones = MaskSample::all_ones(d).values;
        // Linear family: the linearization is Bᵀ entrywise-scaled by maskᵀ.
        let mut b = DMatrix::zeros(d, d);
        b[(0, 1)] = 0.5;
        b[(1, 2)] = -0.4;
        let f = CausalFunction::Linear(crate::model::LinearFunction { b: b.clone() });
        assert_relative_eq!(linearization_matrix(&f, &ones), b.transpose(), epsilon = 1e-14);
        let mut rng = derive_rng(25, &[0]);
        let mut mlp = CausalFunction::random_mlp(d, 4, 0.5, 0.9, &mut rng);
        assert_relative_eq!(
            linearization_matrix(&mlp, &ones),
            mlp.jacobian(&DVector::zeros(d), &ones),
            epsilon = 1e-14
        );
        if let CausalFunction::Mlp(m) = &mut mlp {
            m.w2.fill(0.0);
        }
        assert_eq!(linearization_matrix(&mlp, &ones), DMatrix::zeros(d, d));
    }

    #[test]
    fn observational_precision_matches_hand_value() {
        let obs = InterventionExperiment::observational(2);
        let theta =
            build_interventional_precision(&chain_2(), &DVector::from_element(2, 1.0), &obs)
                .unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.25, -0.5, -0.5, 1.0]);
        assert_relative_eq!(theta, expect, epsilon = 1e-14);
    }

    #[test]
    fn observational_precision_matches_dense_formula() {
        let mut rng = derive_rng(20, &[0]);
        let d = 4;
        let mut b = DMatrix::from_fn(d, d, |j, i| {
            if i == j {
                0.0
            } else {
                rng.random_range(-0.5..0.5)
            }
        });
        project_to_lipschitz(&mut b, 0.9);
        let prec = DVector::from_fn(d, |i, _| 0.5 + 0.3 * i as f64);
        let obs = InterventionExperiment::observational(d);
        let theta = build_interventional_precision(&b, &prec, &obs).unwrap();
        let eye = DMatrix::<f64>::identity(d, d);
        let expect =
            (&eye - &b) * DMatrix::from_diagonal(&prec) * (&eye - &b).transpose();
        assert_relative_eq!(theta, expect, epsilon = 1e-12);
    }

    #[test]
    fn interventional_precision_is_symmetric_and_positive_definite() {
        let mut rng = derive_rng(21, &[0]);
        let d = 6;
        for trial in 0..20 {
            let mut b = DMatrix::from_fn(d, d, |j, i| {
                if i == j {
                    0.0
                } else {
                    rng.random_range(-0.7..0.7)
                }
            });
            project_to_lipschitz(&mut b, 0.9);
            let prec = DVector::from_fn(d, |_, _| rng.random_range(0.2..3.0));
            let n_targets = trial % 4;
            let mut targets = Vec::new();
            while targets.len() < n_targets {
                let t = rng.random_range(0..d);
                if !targets.contains(&t) {
                    targets.push(t);
                }
            }
            let experiment = InterventionExperiment::new(d, &targets).unwrap();
            let theta = build_interventional_precision(&b, &prec, &experiment).unwrap();
            assert_eq!(theta, theta.transpose(), "trial {trial} not symmetric");
            assert!(
                theta.clone().cholesky().is_some(),
                "trial {trial} not positive definite"
            );
        }
    }

    #[test]
    fn interventional_precision_is_the_inverse_of_the_simulated_covariance() {
        // Simulate the linear mechanism under an intervention and compare the
        // empirical covariance against Θ_X⁻¹.
        let d = 3;
        let mut b = DMatrix::zeros(d, d);
        b[(0, 1)] = 0.6;
        b[(1, 2)] = -0.5;
        b[(2, 0)] = 0.4; // a 3-cycle
        let sigma = 0.7;
        let sem = GroundTruthSem::new(
            SemKind::Linear,
            WeightedAdjacency::new(b.clone()).unwrap(),
            sigma,
            0.9,
        )
        .unwrap();
        let experiment = InterventionExperiment::single_node(d, 1).unwrap();
        let mut rng = derive_rng(22, &[0]);
        let n = 100_000;
        let samples = crate::sem::simulate(&sem, &experiment, n, &mut rng).unwrap();
        let mut mean = DVector::<f64>::zeros(d);
        for s in &samples {
            mean += &s.x;
        }
        mean /= n as f64;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for s in &samples {
            let c = &s.x - &mean;
            cov.ger(1.0 / n as f64, &c, &c, 1.0);
        }
        let prec = DVector::from_element(d, 1.0 / (sigma * sigma));
        let theta = build_interventional_precision(&b, &prec, &experiment).unwrap();
        let expect = theta.try_inverse().unwrap();
        for i in 0..d {
            for j in 0..d {
                let se = ((expect[(i, i)] * expect[(j, j)] + expect[(i, j)].powi(2))
                    / n as f64)
                    .sqrt();
                assert!(
                    (cov[(i, j)] - expect[(i, j)]).abs() <= 5.0 * se,
                    "cov[{i},{j}] = {} vs {} (se {se})",
                    cov[(i, j)],
                    expect[(i, j)]
                );
            }
        }
    }

    #[test]
    fn chain_posterior_matches_hand_values() {
        // x1 = 1 observed, x0 missing: mean 0.4, variance 0.8.
        let obs = InterventionExperiment::observational(2);
        let theta =
            build_interventional_precision(&chain_2(), &DVector::from_element(2, 1.0), &obs)
                .unwrap();
        let sample = Sample {
            x: DVector::from_vec(vec![0.0, 1.0]),
            r: vec![false, true],
        };
        let (mean, cov) = conditional_moments(&theta, &sample).unwrap().unwrap();
        assert_relative_eq!(mean[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(cov[(0, 0)], 0.8, epsilon = 1e-12);
    }

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = derive_rng(seed, &[0]);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::<f64>::identity(d, d) * 0.5
    }

    #[test]
    fn conditional_moments_match_schur_complement() {
        // Independent route: invert Θ_ΩΩ directly and form the textbook
        // conditional moments.
        for seed in 0..10 {
            let d = 5;
            let theta = random_spd(d, 30 + seed);
            let r = vec![false, true, false, true, true];
            let x = DVector::from_fn(d, |i, _| 0.3 * (i as f64) - 0.7);
            let sample = Sample { x: x.clone(), r: r.clone() };
            let (mean, cov) = conditional_moments(&theta, &sample).unwrap().unwrap();

            let missing: Vec<usize> = (0..d).filter(|&i| !r[i]).collect();
            let observed: Vec<usize> = (0..d).filter(|&i| r[i]).collect();
            let t_oo = DMatrix::from_fn(missing.len(), missing.len(), |a, b| {
                theta[(missing[a], missing[b])]
            });
            let t_og = DMatrix::from_fn(missing.len(), observed.len(), |a, b| {
                theta[(missing[a], observed[b])]
            });
            let x_obs = DVector::from_fn(observed.len(), |t, _| x[observed[t]]);
            let t_oo_inv = t_oo.try_inverse().unwrap();
            let expect_mean = -&t_oo_inv * t_og * x_obs;
            assert_relative_eq!(mean, expect_mean, epsilon = 1e-10);
            assert_relative_eq!(cov, t_oo_inv, epsilon = 1e-10);
        }
    }

    #[test]
    fn imputed_draws_have_the_conditional_distribution() {
        let d = 4;
        let theta = random_spd(d, 40);
        let x = DVector::from_vec(vec![0.0, 1.3, 0.0, -0.8]);
        let r = vec![false, true, false, true];
        let n = 100_000;
        let samples: Vec<Sample> = (0..n)
            .map(|_| Sample { x: x.clone(), r: r.clone() })
            .collect();
        let completed = impute_gaussian_batch(&theta, &samples, 77, &[1]).unwrap();
        let probe = Sample { x: x.clone(), r: r.clone() };
        let (mean, cov) = conditional_moments(&theta, &probe).unwrap().unwrap();
        let missing = [0usize, 2usize];
        let mut emp_mean = DVector::<f64>::zeros(2);
        for c in &completed {
            for (t, &coord) in missing.iter().enumerate() {
                emp_mean[t] += c[coord];
            }
        }
        emp_mean /= n as f64;
        let mut emp_cov = DMatrix::<f64>::zeros(2, 2);
        for c in &completed {
            let v = DVector::from_fn(2, |t, _| c[missing[t]] - emp_mean[t]);
            emp_cov.ger(1.0 / n as f64, &v, &v, 1.0);
        }
        for t in 0..2 {
            let se = (cov[(t, t)] / n as f64).sqrt();
            assert!(
                (emp_mean[t] - mean[t]).abs() <= 5.0 * se,
                "mean[{t}] {} vs {}",
                emp_mean[t],
                mean[t]
            );
        }
        for a in 0..2 {
            for b in 0..2 {
                let se = ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2)) / n as f64).sqrt();
                assert!(
                    (emp_cov[(a, b)] - cov[(a, b)]).abs() <= 5.0 * se,
                    "cov[{a},{b}] {} vs {}",
                    emp_cov[(a, b)],
                    cov[(a, b)]
                );
            }
        }
    }

    fn energy_stat(dist: &DMatrix<f64>, idx_a: &[usize], idx_b: &[usize]) -> f64 {
        let (n, m) = (idx_a.len(), idx_b.len());
        let mut ab = 0.0;
        for &i in idx_a {
            for &j in idx_b {
                ab += dist[(i, j)];
            }
        }
        let mut aa = 0.0;
        for &i in idx_a {
            for &j in idx_a {
                aa += dist[(i, j)];
            }
        }
        let mut bb = 0.0;
        for &i in idx_b {
            for &j in idx_b {
                bb += dist[(i, j)];
            }
        }
        2.0 * ab / (n * m) as f64 - aa / (n * n) as f64 - bb / (m * m) as f64
    }

    #[test]
    fn triangular_solve_draws_match_a_dense_oracle_sampler() {
        use rand::seq::SliceRandom;
        // Same conditional law two ways: the permuted-Cholesky triangular
        // solve against a textbook sampler (dense Schur moments + covariance
        // Cholesky), compared by a two-sample energy-distance permutation
        // test at significance 0.01.
        let d = 4;
        let theta = random_spd(d, 80);
        let x = DVector::from_vec(vec![0.0, 0.9, 0.0, -1.1]);
        let r = vec![false, true, false, true];
        let n = 300;
        let samples: Vec<Sample> = (0..n)
            .map(|_| Sample { x: x.clone(), r: r.clone() })
            .collect();
        let completed = impute_gaussian_batch(&theta, &samples, 83, &[4]).unwrap();
        let missing = [0usize, 2usize];
        let observed = [1usize, 3usize];
        let tri: Vec<DVector<f64>> = completed
            .iter()
            .map(|c| DVector::from_fn(2, |t, _| c[missing[t]]))
            .collect();

        let t_oo = DMatrix::from_fn(2, 2, |a, b| theta[(missing[a], missing[b])]);
        let t_og = DMatrix::from_fn(2, 2, |a, b| theta[(missing[a], observed[b])]);
        let x_obs = DVector::from_fn(2, |t, _| x[observed[t]]);
        let cov = t_oo.try_inverse().unwrap();
        let mean = -&cov * &t_og * x_obs;
        let l = cov.cholesky().unwrap().l();
        let mut rng = derive_rng(84, &[0]);
        let oracle: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                &mean + &l * DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal))
            })
            .collect();

        let total = 2 * n;
        let pool: Vec<&DVector<f64>> = tri.iter().chain(oracle.iter()).collect();
        let mut dist = DMatrix::<f64>::zeros(total, total);
        for i in 0..total {
            for j in (i + 1)..total {
                let v = (pool[i] - pool[j]).norm();
                dist[(i, j)] = v;
                dist[(j, i)] = v;
            }
        }
        let idx_a: Vec<usize> = (0..n).collect();
        let idx_b: Vec<usize> = (n..total).collect();
        let observed_stat = energy_stat(&dist, &idx_a, &idx_b);
        let mut exceed = 0usize;
        let mut order: Vec<usize> = (0..total).collect();
        for _ in 0..199 {
            order.shuffle(&mut rng);
            if energy_stat(&dist, &order[..n], &order[n..]) >= observed_stat {
                exceed += 1;
            }
        }
        let p = (1 + exceed) as f64 / 200.0;
        assert!(
            p > 0.01,
            "energy-distance test rejected equality: statistic {observed_stat:.5}, p = {p:.3}"
        );
    }

    #[test]
    fn observed_coordinates_pass_through_bit_exactly() {
        let theta = random_spd(3, 50);
        let x = DVector::from_vec(vec![0.1 + 0.2, 1.0 / 3.0, -7.25]);
        let samples = vec![Sample {
            x: x.clone(),
            r: vec![true, false, true],
        }];
        let completed = impute_gaussian_batch(&theta, &samples, 5, &[]).unwrap();
        assert_eq!(completed[0][0].to_bits(), x[0].to_bits());
        assert_eq!(completed[0][2].to_bits(), x[2].to_bits());
        assert!(completed[0][1].is_finite());
        assert_ne!(completed[0][1], x[1]);
    }

    #[test]
    fn complete_rows_are_returned_unchanged_and_fully_missing_rows_match_the_joint() {
        let d = 3;
        let theta = random_spd(d, 60);
        let complete = Sample {
            x: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            r: vec![true, true, true],
        };
        let out = impute_gaussian_batch(&theta, &[complete.clone()], 9, &[]).unwrap();
        assert_eq!(out[0], complete.x);

        // All-missing rows must reproduce the joint covariance Θ⁻¹.
        let n = 60_000;
        let samples: Vec<Sample> = (0..n)
            .map(|_| Sample {
                x: DVector::zeros(d),
                r: vec![false; d],
            })
            .collect();
        let completed = impute_gaussian_batch(&theta, &samples, 10, &[2]).unwrap();
        let expect = theta.clone().try_inverse().unwrap();
        let mut emp = DMatrix::<f64>::zeros(d, d);
        let mut mean = DVector::<f64>::zeros(d);
        for c in &completed {
            mean += c;
        }
        mean /= n as f64;
        for c in &completed {
            let v = c - &mean;
            emp.ger(1.0 / n as f64, &v, &v, 1.0);
        }
        for i in 0..d {
            for j in 0..d {
                let se = ((expect[(i, i)] * expect[(j, j)] + expect[(i, j)].powi(2))
                    / n as f64)
                    .sqrt();
                assert!(
                    (emp[(i, j)] - expect[(i, j)]).abs() <= 5.0 * se,
                    "joint cov[{i},{j}] {} vs {}",
                    emp[(i, j)],
                    expect[(i, j)]
                );
            }
        }
    }

    #[test]
    fn a_rows_draw_does_not_depend_on_its_neighbors() {
        let theta = random_spd(3, 70);
        let row0 = Sample {
            x: DVector::from_vec(vec![0.0, 0.5, -0.5]),
            r: vec![false, true, true],
        };
        let neighbor_a = Sample {
            x: DVector::from_vec(vec![1.0, 0.0, 2.0]),
            r: vec![true, false, true],
        };
        let neighbor_b = Sample {
            x: DVector::from_vec(vec![0.0, 0.0, 0.0]),
            r: vec![false, false, false],
        };
        let batch_a = impute_gaussian_batch(&theta, &[row0.clone(), neighbor_a], 11, &[3]).unwrap();
        let batch_b = impute_gaussian_batch(&theta, &[row0.clone(), neighbor_b], 11, &[3]).unwrap();
        assert_eq!(batch_a[0], batch_b[0]);
        // And the whole call is reproducible.
        let again = impute_gaussian_batch(&theta, &[row0.clone()], 11, &[3]).unwrap();
        assert_eq!(again[0], batch_a[0]);
        let other_seed = impute_gaussian_batch(&theta, &[row0], 12, &[3]).unwrap();
        assert_ne!(other_seed[0], batch_a[0]);
    }

    #[test]
    fn mean_imputation_fills_block_means_and_marks_observed() {
        use crate::dataset::{DataBlock, DatasetMeta, InterventionalDataset};
        let obs = InterventionExperiment::observational(2);
        let block = DataBlock {
            experiment: obs,
            samples: vec![
                Sample {
                    x: DVector::from_vec(vec![1.0, f64::NAN]),
                    r: vec![true, false],
                },
                Sample {
                    x: DVector::from_vec(vec![3.0, 2.0]),
                    r: vec![true, true],
                },
                Sample {
                    x: DVector::from_vec(vec![f64::NAN, 4.0]),
                    r: vec![false, true],
                },
            ],
        };
        let dataset = InterventionalDataset {
            meta: DatasetMeta {
                d: 2,
                kind: SemKind::Linear,
                sigma: 1.0,
                seed: 0,
                extras: vec![],
            },
            blocks: vec![block],
        };
        let filled = mean_impute(&dataset);
        let b = &filled.blocks[0];
        assert_eq!(b.samples[2].x[0], 2.0); // mean of {1, 3}
        assert_eq!(b.samples[0].x[1], 3.0); // mean of {2, 4}
        assert!(b.samples.iter().all(|s| s.r.iter().all(|&o| o)));
        // Original is untouched.
        assert!(dataset.blocks[0].samples[0].x[1].is_nan());
    }
}
