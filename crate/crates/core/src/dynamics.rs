//! Function-space dynamics under kernel gradient descent.
//!
//! With squared loss and a constant normalized kernel K̄ = K/N the residual
//! r_t = f_t − f* obeys r_{t+1} = (I − ηK̄)·r_t, so
//! f_t = f* + (I − ηK̄)ᵗ(f₀ − f*). Mode i decays by 1 − ηλᵢ per step.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{NzkError, Result};
use crate::kernels::KernelMatrix;
use crate::linalg::asymmetry;
use crate::stats::Welford;
use crate::zo::Trajectory;

/// Asymmetry above which `spectral` refuses a matrix.
pub const SPECTRAL_SYMMETRY_TOL: f64 = 1e-8;

/// K/N, tagged so that a second normalization is refused.
pub fn normalize_kernel(k: &KernelMatrix) -> Result<KernelMatrix> {
    if k.normalized {
        return Err(NzkError::Precondition("kernel is already normalized by N".into()));
    }
    if !k.values.is_square() {
        return Err(NzkError::shape("kernel", k.values.nrows(), k.values.ncols()));
    }
    let n = k.n() as f64;
    Ok(KernelMatrix {
        values: &k.values / n,
        kind: k.kind,
        meta: k.meta.clone(),
        normalized: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column i is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues));
        &self.eigenvectors * lambda * self.eigenvectors.transpose()
    }

    pub fn decay_factors(&self, eta: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| 1.0 - eta * l).collect()
    }

    /// ⟨vᵢ, r⟩ for every mode.
    pub fn project(&self, r: &[f64]) -> Vec<f64> {
        let r = DVector::from_column_slice(r);
        (self.eigenvectors.transpose() * r).iter().copied().collect()
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn spectral(k: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    if !k.is_square() {
        return Err(NzkError::shape("spectral input", k.nrows(), k.ncols()));
    }
    let asym = asymmetry(k);
    if asym > SPECTRAL_SYMMETRY_TOL {
        return Err(NzkError::Contract(format!(
            "spectral decomposition needs a symmetric matrix, asymmetry {asym:e}"
        )));
    }
    let eig = SymmetricEigen::new(k.clone());
    let mut order: Vec<usize> = (0..k.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(k.nrows(), k.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormTrajectory {
    /// fvals[t] for t = 0..=T.
    pub fvals: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub decay_factors: Vec<f64>,
    /// Set when ηλ₁ ≥ 2 and the residual grows.
    pub warning: Option<String>,
}

impl ClosedFormTrajectory {
    pub fn steps(&self) -> usize {
        self.fvals.len() - 1
    }

    pub fn diverging(&self) -> bool {
        self.warning.is_some()
    }
}

fn check_vectors(k: &DMatrix<f64>, f0: &[f64], f_star: &[f64]) -> Result<()> {
    let n = k.nrows();
    if !k.is_square() {
        return Err(NzkError::shape("kernel", n, k.ncols()));
    }
    if f0.len() != n {
        return Err(NzkError::shape("f0", n, f0.len()));
    }
    if f_star.len() != n {
        return Err(NzkError::shape("f_star", n, f_star.len()));
    }
    Ok(())
}

fn divergence_warning(eta: f64, lambda_max: f64) -> Option<String> {
    (eta * lambda_max >= 2.0).then(|| format!("eta*lambda_max = {} >= 2: residual grows", eta * lambda_max))
}

/// f_t = f* + (I − ηK̄)ᵗ(f₀ − f*) for t = 0..=T, by iterating the residual.
pub fn closed_form_trajectory(
    k_bar: &DMatrix<f64>,
    f0: &[f64],
    f_star: &[f64],
    eta: f64,
    steps: usize,
) -> Result<ClosedFormTrajectory> {
    check_vectors(k_bar, f0, f_star)?;
    if !(eta > 0.0) {
        return Err(NzkError::Config(format!("eta must be positive, got {eta}")));
    }
    let decomp = spectral(k_bar)?;
    let n = f0.len();
    let mut r = DVector::from_iterator(n, f0.iter().zip(f_star).map(|(a, b)| a - b));
    let mut fvals = Vec::with_capacity(steps + 1);
    fvals.push(f0.to_vec());
    for _ in 0..steps {
        let step = k_bar * &r * eta;
        r -= step;
        fvals.push(r.iter().zip(f_star).map(|(ri, fs)| fs + ri).collect());
    }
    Ok(ClosedFormTrajectory {
        fvals,
        decay_factors: decomp.decay_factors(eta),
        warning: divergence_warning(eta, decomp.eigenvalues.first().copied().unwrap_or(0.0)),
        eigenvalues: decomp.eigenvalues,
    })
}

/// The same trajectory evaluated as f* + V(I − ηΛ)ᵗVᵀ(f₀ − f*).
pub fn spectral_trajectory(
    decomp: &SpectralDecomposition,
    f0: &[f64],
    f_star: &[f64],
    eta: f64,
    steps: usize,
) -> Result<ClosedFormTrajectory> {
    check_vectors(&decomp.eigenvectors, f0, f_star)?;
    let r0: Vec<f64> = f0.iter().zip(f_star).map(|(a, b)| a - b).collect();
    let coeffs = decomp.project(&r0);
    let factors = decomp.decay_factors(eta);
    let n = f0.len();
    let mut fvals = Vec::with_capacity(steps + 1);
    fvals.push(f0.to_vec());
    for t in 1..=steps {
        let scaled = DVector::from_iterator(n, coeffs.iter().zip(&factors).map(|(c, g)| c * g.powi(t as i32)));
        let r = &decomp.eigenvectors * scaled;
        fvals.push(r.iter().zip(f_star).map(|(ri, fs)| fs + ri).collect());
    }
    Ok(ClosedFormTrajectory {
        fvals,
        eigenvalues: decomp.eigenvalues.clone(),
        decay_factors: factors,
        warning: divergence_warning(eta, decomp.eigenvalues.first().copied().unwrap_or(0.0)),
    })
}

/// Modal residual coefficients ⟨vᵢ, f_t − f*⟩ for each row of `fvals`.
pub fn modal_residuals(decomp: &SpectralDecomposition, fvals: &[Vec<f64>], f_star: &[f64]) -> Vec<Vec<f64>> {
    fvals
        .iter()
        .map(|f| {
            let r: Vec<f64> = f.iter().zip(f_star).map(|(a, b)| a - b).collect();
            decomp.project(&r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub max_abs_err: f64,
    /// (step, max over outputs of |empirical − analytic|)
    pub per_step_err: Vec<(usize, f64)>,
}

fn analytic_row(analytic: &ClosedFormTrajectory, step: usize, n: usize) -> Result<&[f64]> {
    let row = analytic
        .fvals
        .get(step)
        .ok_or_else(|| NzkError::shape("analytic steps", step + 1, analytic.fvals.len()))?;
    if row.len() != n {
        return Err(NzkError::shape("outputs per step", row.len(), n));
    }
    Ok(row)
}

/// Compare recorded model outputs against the analytic trajectory.
pub fn compare(empirical: &Trajectory, analytic: &ClosedFormTrajectory) -> Result<Comparison> {
    let mut per_step_err = Vec::with_capacity(empirical.recorded_steps.len());
    let mut max_abs_err = 0.0f64;
    for (&step, f) in empirical.recorded_steps.iter().zip(&empirical.fvals) {
        let a = analytic_row(analytic, step, f.len())?;
        let err = f.iter().zip(a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        max_abs_err = max_abs_err.max(err);
        per_step_err.push((step, err));
    }
    Ok(Comparison {
        max_abs_err,
        per_step_err,
    })
}

/// Per-step, per-output mean and standard error over a seed ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMean {
    pub steps: Vec<usize>,
    pub mean: Vec<Vec<f64>>,
    pub std_error: Vec<Vec<f64>>,
    pub runs: usize,
}

pub fn ensemble_mean(runs: &[Trajectory]) -> Result<EnsembleMean> {
    let first = runs.first().ok_or_else(|| NzkError::Config("empty ensemble".into()))?;
    let steps = first.recorded_steps.clone();
    let n = first.fvals.first().map_or(0, Vec::len);
    let mut acc = vec![vec![Welford::new(); n]; steps.len()];
    for run in runs {
        if run.recorded_steps != steps {
            return Err(NzkError::shape("recorded steps", steps.len(), run.recorded_steps.len()));
        }
        for (row, f) in acc.iter_mut().zip(&run.fvals) {
            if f.len() != n {
                return Err(NzkError::shape("outputs per step", n, f.len()));
            }
            for (w, v) in row.iter_mut().zip(f) {
                w.push(*v);
            }
        }
    }
    Ok(EnsembleMean {
        steps,
        mean: acc.iter().map(|r| r.iter().map(Welford::mean).collect()).collect(),
        std_error: acc.iter().map(|r| r.iter().map(Welford::std_error).collect()).collect(),
        runs: runs.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleComparison {
    pub max_abs_err: f64,
    /// Largest |mean − analytic| / SE over all recorded entries.
    pub max_z: f64,
    /// (step, max |mean − analytic|, max SE at that step, max z at that step)
    pub per_step: Vec<(usize, f64, f64, f64)>,
}

impl EnsembleComparison {
    pub fn within(&self, k: f64) -> bool {
        self.max_z <= k
    }
}

pub fn compare_ensemble(ens: &EnsembleMean, analytic: &ClosedFormTrajectory) -> Result<EnsembleComparison> {
    let mut out = EnsembleComparison {
        max_abs_err: 0.0,
        max_z: 0.0,
        per_step: Vec::with_capacity(ens.steps.len()),
    };
    for ((&step, mean), se) in ens.steps.iter().zip(&ens.mean).zip(&ens.std_error) {
        let a = analytic_row(analytic, step, mean.len())?;
        let (mut err, mut worst_se, mut worst_z) = (0.0f64, 0.0f64, 0.0f64);
        for ((m, s), y) in mean.iter().zip(se).zip(a) {
            let diff = (m - y).abs();
            let z = if diff == 0.0 { 0.0 } else { diff / s };
            err = err.max(diff);
            worst_se = worst_se.max(*s);
            worst_z = worst_z.max(z);
        }
        out.max_abs_err = out.max_abs_err.max(err);
        out.max_z = out.max_z.max(worst_z);
        out.per_step.push((step, err, worst_se, worst_z));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ntk_linear, KernelKind, KernelMeta};
    use crate::linalg::max_abs_diff;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, Purpose::Check, 0);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.01
    }

    #[test]
    fn normalization_is_tagged() {
        let k = KernelMatrix::new(DMatrix::identity(4, 4), KernelKind::Ntk, KernelMeta::default());
        let once = normalize_kernel(&k).unwrap();
        assert_eq!(once.values, DMatrix::identity(4, 4) / 4.0);
        assert!(normalize_kernel(&once).is_err());
        let circle = ntk_linear(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(normalize_kernel(&circle).unwrap().values, circle.values * 0.5);
    }

    #[test]
    fn spectral_examples() {
        let s = spectral(&DMatrix::identity(3, 3)).unwrap();
        assert!(s.eigenvalues.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let x = DVector::from_column_slice(&[0.6, 0.8, 0.0]);
        let s = spectral(&(&x * x.transpose())).unwrap();
        assert!((s.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!(s.eigenvalues[1..].iter().all(|v| v.abs() < 1e-14));
        let s = spectral(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((s.eigenvalues[0] - 3.0).abs() < 1e-14 && (s.eigenvalues[1] - 1.0).abs() < 1e-14);
        assert!(matches!(
            spectral(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1e-6, 1.0])),
            Err(NzkError::Contract(_))
        ));
    }

    #[test]
    fn scalar_recursion() {
        let (k, eta, f0, fs) = (3.0, 0.1, 5.0, 1.0);
        let t = closed_form_trajectory(&DMatrix::from_element(1, 1, k), &[f0], &[fs], eta, 20).unwrap();
        assert_eq!(t.fvals[0], vec![f0]);
        let mut r = f0 - fs;
        for step in 1..=20 {
            r *= 1.0 - eta * k;
            assert!((t.fvals[step][0] - (fs + r)).abs() < 1e-14);
        }
        assert_eq!(t.decay_factors, vec![1.0 - eta * k]);
        assert!(!t.diverging());
    }

    #[test]
    fn convergence_bound() {
        let k = random_spd(6, 1);
        let s = spectral(&k).unwrap();
        let lmin = *s.eigenvalues.last().unwrap();
        let eta = 0.5 / s.eigenvalues[0];
        let f0 = vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0];
        let fs = vec![0.0; 6];
        let steps = 5000;
        let t = closed_form_trajectory(&k, &f0, &fs, eta, steps).unwrap();
        let norm0 = f0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = (1.0 - eta * lmin).powi(steps as i32) * norm0;
        assert!(t.fvals[steps].iter().all(|v| v.abs() <= bound + 1e-15));
    }

    #[test]
    fn fixed_point_and_divergence_flag() {
        let k = random_spd(3, 2);
        let f = vec![0.2, 0.3, 0.4];
        let t = closed_form_trajectory(&k, &f, &f, 0.1, 50).unwrap();
        assert!(t.fvals.iter().all(|row| row == &f));
        let s = spectral(&k).unwrap();
        let t = closed_form_trajectory(&k, &[1.0, 0.0, 0.0], &[0.0; 3], 2.5 / s.eigenvalues[0], 5).unwrap();
        assert!(t.diverging());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn decomposition_contract(n in 1usize..20, seed in any::<u64>()) {
            let k = random_spd(n, seed);
            let s = spectral(&k).unwrap();
            prop_assert!(max_abs_diff(&s.reconstruct(), &k) <= 1e-8);
            let vtv = s.eigenvectors.transpose() * &s.eigenvectors;
            prop_assert!(max_abs_diff(&vtv, &DMatrix::identity(n, n)) <= 1e-10);
            prop_assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn recursion_matches_spectral_form(n in 1usize..20, seed in any::<u64>(), frac in 0.01f64..1.0) {
            let k = random_spd(n, seed);
            let s = spectral(&k).unwrap();
            let eta = frac / s.eigenvalues[0];
            let mut rng = stream(seed, Purpose::Check, 9);
            let f0: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let fs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let steps = 10_000;
            let rec = closed_form_trajectory(&k, &f0, &fs, eta, steps).unwrap();
            let spec = spectral_trajectory(&s, &f0, &fs, eta, steps).unwrap();
            for t in (0..=steps).step_by(500) {
                for i in 0..n {
                    prop_assert!((rec.fvals[t][i] - spec.fvals[t][i]).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn modal_decay_is_monotone(n in 1usize..10, seed in any::<u64>(), frac in 0.01f64..0.99) {
            let k = random_spd(n, seed);
            let s = spectral(&k).unwrap();
            let eta = frac / s.eigenvalues[0];
            let f0: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0).sin()).collect();
            let fs = vec![0.0; n];
            let t = closed_form_trajectory(&k, &f0, &fs, eta, 300).unwrap();
            let modes = modal_residuals(&s, &t.fvals, &fs);
            for w in modes.windows(2) {
                for i in 0..n {
                    prop_assert!(w[1][i].abs() <= w[0][i].abs() + 1e-12);
                }
            }
        }
    }
}
