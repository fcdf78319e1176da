//! Kernel-weighted local-linear single-index solver (adaptive MAVE).
//!
//! Minimizes, over a unit direction `β` and per-anchor intercepts/slopes,
//!
//! ```text
//! Σ_ℓ Σ_i ( a_i − d1_ℓ − d2_ℓ βᵀ(z_i − z_ℓ) )² δ_ℓi ,
//! δ_ℓi = K_h(βᵀ(z_i − z_ℓ)) / Σ_i' K_h(βᵀ(z_i' − z_ℓ))
//! ```
//!
//! by alternating closed-form local fits (given `β`) with a global weighted
//! least-squares update of `β` (given the local fits).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fix_sign, solve_psd_pinv};

/// Ridge added to the diagonal of each anchor's 2×2 normal matrix.
const LOCAL_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Gaussian,
}

/// Normalized kernel weights. `delta[(l, i)]` is the weight of sample `i` in
/// the local fit at anchor `l`; every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    pub delta: DMatrix<f64>,
    pub bandwidth: f64,
    pub kernel: Kernel,
}

/// Gaussian kernel weights on one-dimensional index values.
pub fn kernel_weights(index_values: &[f64], bandwidth: f64) -> Result<KernelWeights> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let n = index_values.len();
    let mut delta = DMatrix::zeros(n, n);
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    for l in 0..n {
        // relative to the anchor's own kernel value K(0) = 1, so never all zero
        let mut total = 0.0;
        for i in 0..n {
            let u = index_values[i] - index_values[l];
            let k = (-u * u * inv).exp();
            delta[(l, i)] = k;
            total += k;
        }
        for i in 0..n {
            delta[(l, i)] /= total;
        }
    }
    Ok(KernelWeights {
        delta,
        bandwidth,
        kernel: Kernel::Gaussian,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaveSolution {
    /// Unit-norm direction, largest-magnitude entry positive.
    pub beta: DVector<f64>,
    /// Local intercepts `d1_ℓ` (the fitted value at anchor `ℓ`).
    pub intercepts: DVector<f64>,
    /// Local slopes `d2_ℓ`.
    pub slopes: DVector<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl MaveSolution {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial objective")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaveOptions {
    pub bandwidth: f64,
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl MaveOptions {
    pub fn new(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            tol: 1e-6,
            max_iter: 50,
        }
    }
}

struct LocalFit {
    intercepts: DVector<f64>,
    slopes: DVector<f64>,
    objective: f64,
    weights: KernelWeights,
}

fn index_values(carriers: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    (carriers * beta).iter().copied().collect()
}

/// Local linear fits at every anchor for fixed `β`.
fn local_fits(target: &DVector<f64>, index: &[f64], bandwidth: f64) -> Result<LocalFit> {
    let n = target.len();
    let weights = kernel_weights(index, bandwidth)?;
    let mut intercepts = DVector::zeros(n);
    let mut slopes = DVector::zeros(n);
    let mut objective = 0.0;
    for l in 0..n {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let w = weights.delta[(l, i)];
            let v = index[i] - index[l];
            s0 += w;
            s1 += w * v;
            s2 += w * v * v;
            t0 += w * target[i];
            t1 += w * v * target[i];
        }
        let (a, b, d) = (s0 + LOCAL_RIDGE, s1, s2 + LOCAL_RIDGE);
        let det = a * d - b * b;
        let d1 = (d * t0 - b * t1) / det;
        let d2 = (a * t1 - b * t0) / det;
        intercepts[l] = d1;
        slopes[l] = d2;
        for i in 0..n {
            let r = target[i] - d1 - d2 * (index[i] - index[l]);
            objective += weights.delta[(l, i)] * r * r;
        }
    }
    Ok(LocalFit {
        intercepts,
        slopes,
        objective,
        weights,
    })
}

/// Weighted least-squares update of the direction given the local fits.
///
/// The normal equations have the form `Zᵀ A Z β = Zᵀ b` with `A` (`n × n`)
/// and `b` (`n`) built from the kernel weights and local fits.
fn direction_step(
    target: &DVector<f64>,
    carriers: &DMatrix<f64>,
    fit: &LocalFit,
) -> DVector<f64> {
    let (a, b) = direction_system(target, fit);
    if carriers.ncols() > carriers.nrows() {
        solve_in_row_space(carriers, &a, &b)
    } else {
        solve_full(carriers, &a, &b)
    }
}

fn direction_system(target: &DVector<f64>, fit: &LocalFit) -> (DMatrix<f64>, DVector<f64>) {
    let delta = &fit.weights.delta;
    let d1 = &fit.intercepts;
    let d2 = &fit.slopes;
    let n = target.len();
    let d2_sq = d2.map(|v| v * v);
    // A = diag(Σ_ℓ d2_ℓ² δ_ℓ·) − Δᵀ D − D Δ + D, D = diag(d2²)
    let c = delta.transpose() * &d2_sq;
    let dd = DMatrix::from_fn(n, n, |l, i| d2_sq[l] * delta[(l, i)]);
    let mut a = -(&dd + dd.transpose());
    for i in 0..n {
        a[(i, i)] += c[i] + d2_sq[i];
    }
    // b_i = a_i Σ_ℓ d2_ℓ δ_ℓi − Σ_ℓ δ_ℓi d2_ℓ d1_ℓ − d2_i (Σ_k δ_ik a_k − d1_i)
    let u = delta.transpose() * d2;
    let w_m = d2.component_mul(d1);
    let local_target = delta * target;
    let mut b = target.component_mul(&u) - delta.transpose() * w_m;
    for i in 0..n {
        b[i] -= d2[i] * (local_target[i] - d1[i]);
    }
    (a, b)
}

fn solve_full(z: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let normal = z.transpose() * a * z;
    solve_psd_pinv(&normal, &(z.transpose() * b), 1e-12)
}

/// Same minimum-norm solution as [`solve_full`] through the thin SVD
/// `Z = U S Vᵀ`: `β = V (W A W)⁺ Wᵀ b` with `W = U S`, so the
/// pseudo-inverse is `n × n` instead of `m × m`.
fn solve_in_row_space(z: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = z.clone().svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let w = u * DMatrix::from_diagonal(&svd.singular_values);
    let reduced = w.transpose() * a * &w;
    let coef = solve_psd_pinv(&reduced, &(w.transpose() * b), 1e-12);
    v_t.transpose() * coef
}

fn normalized(mut v: DVector<f64>) -> DVector<f64> {
    let norm = v.norm();
    v /= norm;
    v
}

fn spread(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Alternating MAVE solve from `init_beta`.
///
/// Each accepted step must not increase the profiled objective; a step that
/// would is halved back towards the previous direction, and the solver stops
/// once no halving helps.
pub fn mave_solve(
    target: &DVector<f64>,
    carriers: &DMatrix<f64>,
    init_beta: &DVector<f64>,
    options: MaveOptions,
) -> Result<MaveSolution> {
    let (n, m) = carriers.shape();
    if m == 0 || init_beta.len() != m {
        return Err(Error::invalid(format!(
            "direction has length {} but carriers have {m} columns",
            init_beta.len()
        )));
    }
    if target.len() != n {
        return Err(Error::invalid("target length differs from carrier rows"));
    }
    if n < 3 {
        return Err(Error::invalid("need at least 3 samples"));
    }
    if !(init_beta.norm() > 0.0) || init_beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial direction must be finite and nonzero"));
    }
    let target_spread = spread(target.as_slice());
    if target_spread <= f64::EPSILON * target.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::FlatLink);
    }

    let mut beta = normalized(init_beta.clone());
    let mut fit = local_fits(target, &index_values(carriers, &beta), options.bandwidth)?;
    let mut trace = vec![fit.objective];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let index = index_values(carriers, &beta);
        let slope_scale = fit.slopes.amax() * spread(&index);
        if !(slope_scale > 1e-8 * target_spread) {
            if iterations == 1 {
                return Err(Error::FlatLink);
            }
            converged = true;
            break;
        }
        let proposal = direction_step(target, carriers, &fit);
        if !(proposal.norm() > 0.0) {
            return Err(Error::FlatLink);
        }
        let mut proposal = normalized(proposal);
        if proposal.dot(&beta) < 0.0 {
            proposal.neg_mut();
        }
        let previous = fit.objective;
        let mut accepted = None;
        let mut step = 1.0;
        for _ in 0..30 {
            let candidate = normalized(&beta * (1.0 - step) + &proposal * step);
            let cand_fit = local_fits(target, &index_values(carriers, &candidate), options.bandwidth)?;
            if cand_fit.objective <= previous {
                accepted = Some((candidate, cand_fit));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, cand_fit)) = accepted else {
            converged = true;
            break;
        };
        beta = candidate;
        fit = cand_fit;
        trace.push(fit.objective);
        let decrease = previous - fit.objective;
        if decrease <= options.tol * previous.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let mut signed = beta.clone();
    fix_sign(&mut signed);
    if signed.dot(&beta) < 0.0 {
        fit.slopes.neg_mut();
    }
    Ok(MaveSolution {
        beta: signed,
        intercepts: fit.intercepts,
        slopes: fit.slopes,
        objective_trace: trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_problem(seed: u64, n: usize, m: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = normalized(DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal)));
        (z, theta)
    }

    #[test]
    fn row_space_step_matches_full_solve() {
        for seed in 0..5 {
            let (z, theta) = random_problem(seed, 12, 40);
            let target = (&z * &theta).map(f64::sin);
            let fit = local_fits(&target, &index_values(&z, &normalized(z.row(0).transpose())), 0.8).unwrap();
            let (a, b) = direction_system(&target, &fit);
            let full = solve_full(&z, &a, &b);
            let reduced = solve_in_row_space(&z, &a, &b);
            let normal = z.transpose() * &a * &z;
            let rhs = z.transpose() * &b;
            let objective = |beta: &DVector<f64>| beta.dot(&(&normal * beta)) - 2.0 * beta.dot(&rhs);
            let (of, or) = (objective(&full), objective(&reduced));
            assert!((of - or).abs() < 1e-12 * of.abs(), "seed {seed}: {of} vs {or}");
            // the solutions themselves differ by roundoff amplified by the
            // smallest retained eigenvalue (down to ~1e-9 of the largest here)
            assert!((&full - &reduced).amax() < 1e-6 * full.amax(), "seed {seed}");
        }
    }

    #[test]
    fn equal_index_values_give_uniform_weights() {
        let w = kernel_weights(&[0.3; 5], 0.7).unwrap();
        assert!(w.delta.iter().all(|&d| (d - 0.2).abs() < 1e-15));
    }

    #[test]
    fn flat_kernel_limit() {
        let vals: Vec<f64> = (0..7).map(|i| i as f64 / 6.0).collect();
        let w = kernel_weights(&vals, 1e6).unwrap();
        assert!(w.delta.iter().all(|&d| (d - 1.0 / 7.0).abs() < 1e-6));
    }

    #[test]
    fn three_point_weights_match_hand_computation() {
        let w = kernel_weights(&[0.0, 1.0, 2.0], 1.0).unwrap();
        let k = |u: f64| (-u * u / 2.0).exp();
        // anchor 0: K(0), K(1), K(2)
        let tot0 = k(0.0) + k(1.0) + k(2.0);
        let tot1 = 2.0 * k(1.0) + k(0.0);
        let expected = [
            [k(0.0) / tot0, k(1.0) / tot0, k(2.0) / tot0],
            [k(1.0) / tot1, k(0.0) / tot1, k(1.0) / tot1],
            [k(2.0) / tot0, k(1.0) / tot0, k(0.0) / tot0],
        ];
        for l in 0..3 {
            for i in 0..3 {
                assert!((w.delta[(l, i)] - expected[l][i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kernel_rejects_non_positive_bandwidth() {
        assert!(kernel_weights(&[0.0, 1.0], 0.0).is_err());
        assert!(kernel_weights(&[0.0, 1.0], -2.0).is_err());
    }

    #[test]
    fn exact_linear_link_recovered() {
        let (z, theta) = random_problem(1, 60, 4);
        let a = &z * &theta * 2.0;
        let init = DVector::from_element(4, 1.0);
        let sol = mave_solve(&a, &z, &init, MaveOptions::new(0.8)).unwrap();
        assert!(sol.beta.dot(&theta).abs() >= 0.9999, "{}", sol.beta.dot(&theta));
    }

    #[test]
    fn nonlinear_link_recovered() {
        let (z, theta) = random_problem(2, 150, 3);
        let a = (&z * &theta).map(|v| v.sin() * 3.0 + v);
        let init = normalized(&theta + DVector::from_vec(vec![0.4, -0.3, 0.2]));
        let sol = mave_solve(&a, &z, &init, MaveOptions::new(0.5)).unwrap();
        assert!(sol.beta.dot(&theta).abs() >= 0.99);
    }

    #[test]
    fn pure_noise_is_flagged_or_stalls() {
        // null calibration at n = 200: a flat link, or a first step that barely
        // moves the objective and local slopes far below a unit-signal link
        let (z, _) = random_problem(3, 200, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DVector::from_fn(200, |_, _| rng.sample::<f64, _>(StandardNormal));
        match mave_solve(&a, &z, &DVector::from_element(3, 1.0), MaveOptions::new(1.0)) {
            Err(Error::FlatLink) => {}
            Ok(sol) => {
                let step = (sol.objective_trace[0] - sol.objective_trace[1]) / sol.objective_trace[0];
                assert!(step < 0.02, "first step decrease {step}");
                let idx = index_values(&z, &sol.beta);
                let mean_slope = sol.slopes.iter().map(|v| v.abs()).sum::<f64>() / 200.0;
                let signal = mean_slope * spread(&idx) / spread(a.as_slice());
                assert!(signal < 0.25, "slope signal {signal}");
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn constant_target_is_flat_link() {
        let (z, _) = random_problem(5, 30, 2);
        let a = DVector::from_element(30, 3.0);
        assert!(matches!(
            mave_solve(&a, &z, &DVector::from_element(2, 1.0), MaveOptions::new(1.0)),
            Err(Error::FlatLink)
        ));
    }

    /// Oracle: a standalone local-linear smoother evaluated at each sample.
    fn local_linear(x: &[f64], y: &[f64], h: f64) -> Vec<f64> {
        x.iter()
            .map(|&x0| {
                let w: Vec<f64> = x.iter().map(|&xi| (-(xi - x0).powi(2) / (2.0 * h * h)).exp()).collect();
                let sw: f64 = w.iter().sum();
                let w: Vec<f64> = w.iter().map(|v| v / sw).collect();
                let mx: f64 = w.iter().zip(x).map(|(a, b)| a * (b - x0)).sum();
                let my: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
                let sxx: f64 = w.iter().zip(x).map(|(a, b)| a * (b - x0).powi(2)).sum();
                let sxy: f64 = w.iter().zip(x.iter().zip(y)).map(|(a, (b, c))| a * (b - x0) * c).sum();
                let a = 1.0 + LOCAL_RIDGE;
                let d = sxx + LOCAL_RIDGE;
                (d * my - mx * sxy) / (a * d - mx * mx)
            })
            .collect()
    }

    #[test]
    fn one_dimensional_reduces_to_local_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) - v + rng.random_range(-0.1..0.1)).collect();
        let z = DMatrix::from_column_slice(40, 1, &x);
        let sol = mave_solve(&DVector::from_vec(y.clone()), &z, &DVector::from_element(1, -3.0), MaveOptions::new(0.4))
            .unwrap();
        assert_eq!(sol.beta[0], 1.0);
        let oracle = local_linear(&x, &y, 0.4);
        for (a, b) in sol.intercepts.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn objective_descends_on_random_problems() {
        for seed in 0..20 {
            let (z, theta) = random_problem(100 + seed, 50, 4);
            let a = (&z * &theta).map(|v| (1.5 * v).tanh() + 0.1 * v * v);
            let sol = mave_solve(&a, &z, &DVector::from_element(4, 0.5), MaveOptions::new(0.6)).unwrap();
            assert!(sol.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-10));
            assert!((sol.beta.norm() - 1.0).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn scale_invariance(seed in 0u64..1000, c in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0]) {
            let (z, theta) = random_problem(seed, 40, 3);
            let a = (&z * &theta).map(|v| v + 0.5 * v.sin());
            let init = DVector::from_vec(vec![1.0, 0.2, -0.3]);
            let opts = MaveOptions::new(0.7);
            let s1 = mave_solve(&a, &z, &init, opts).unwrap();
            let s2 = mave_solve(&(&a * c), &z, &init, opts).unwrap();
            prop_assert!((s1.beta.dot(&s2.beta).abs() - 1.0).abs() < 1e-6);
            for (x, y) in s1.intercepts.iter().zip(s2.intercepts.iter()) {
                prop_assert!((x * c - y).abs() < 1e-6 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn permutation_invariance(seed in 0u64..1000) {
            let (z, theta) = random_problem(seed, 35, 3);
            let a = (&z * &theta).map(|v| v * v * v - v);
            let perm: Vec<usize> = (0..35).rev().collect();
            let zp = z.select_rows(perm.iter());
            let ap = DVector::from_iterator(35, perm.iter().map(|&i| a[i]));
            let init = DVector::from_vec(vec![0.3, 1.0, 0.1]);
            let s1 = mave_solve(&a, &z, &init, MaveOptions::new(0.5)).unwrap();
            let s2 = mave_solve(&ap, &zp, &init, MaveOptions::new(0.5)).unwrap();
            prop_assert!((s1.beta.dot(&s2.beta).abs() - 1.0).abs() < 1e-8);
        }
    }
}
