//! Tangent and zeroth-order kernels.
//!
//! The per-sample NZK for directions (ζ, z) is
//! K_{ζ,z}(xᵢ, xⱼ) = ⟨FD(xᵢ; ζ)·ζ, FD(xⱼ; z)·z⟩ = FD(xᵢ; ζ)·FD(xⱼ; z)·⟨ζ, z⟩,
//! with FD the two-point finite-difference factor. For one draw the matrix is
//! rank one. Its expectation is estimated by Monte Carlo or, for linear models,
//! given in closed form.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::directions::{DirectionSpec, Family, SampleMode};
use crate::error::{NzkError, Result};
use crate::linalg::{asymmetry, dot};
use crate::models::{fd_factor, LinearizedModel, Model};
use crate::rng::{stream, Purpose};
use crate::stats::Welford;

/// Smallest eigenvalue allowed for an expected kernel, relative to its trace.
pub const PSD_TOL: f64 = 1e-8;

/// Asymmetry allowed for an expected kernel before symmetrization is reported.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Draws per parallel work unit in Monte Carlo estimation.
const MC_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Ntk,
    NzkSample,
    NzkExpectedMc,
    NzkExpectedClosed,
    NzkLinearized,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Ntk => "ntk",
            KernelKind::NzkSample => "nzk_sample",
            KernelKind::NzkExpectedMc => "nzk_expected_mc",
            KernelKind::NzkExpectedClosed => "nzk_expected_closed",
            KernelKind::NzkLinearized => "nzk_linearized",
        }
    }

    /// Expected-kind kernels are symmetric PSD by contract.
    pub fn is_expected(self) -> bool {
        !matches!(self, KernelKind::NzkSample)
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = NzkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ntk" => Ok(KernelKind::Ntk),
            "nzk_sample" => Ok(KernelKind::NzkSample),
            "nzk_expected_mc" => Ok(KernelKind::NzkExpectedMc),
            "nzk_expected_closed" => Ok(KernelKind::NzkExpectedClosed),
            "nzk_linearized" => Ok(KernelKind::NzkLinearized),
            other => Err(NzkError::Config(format!("unknown kernel kind `{other}`"))),
        }
    }
}

/// Where a kernel came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KernelMeta {
    pub samples: Option<usize>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub spec_zeta: Option<DirectionSpec>,
    pub spec_z: Option<DirectionSpec>,
    pub sample_mode: Option<SampleMode>,
    /// Largest |K − Kᵀ| before symmetrization.
    pub raw_asymmetry: f64,
    /// Multiplier applied to the Gram matrix, when the kernel is a scaled Gram.
    pub gram_scale: Option<f64>,
    pub theta_ref: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub kind: KernelKind,
    pub meta: KernelMeta,
    /// Set once the kernel has been divided by N.
    pub normalized: bool,
}

impl KernelMatrix {
    pub fn new(values: DMatrix<f64>, kind: KernelKind, meta: KernelMeta) -> Self {
        Self {
            values,
            kind,
            meta,
            normalized: false,
        }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    pub fn asymmetry(&self) -> f64 {
        asymmetry(&self.values)
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = symmetrized(&self.values);
        SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// min eigenvalue ≥ −1e-8·trace.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -PSD_TOL * self.trace().abs()
    }

    /// Key/value pairs describing the kernel, in a fixed order.
    pub fn meta_pairs(&self) -> Vec<(String, String)> {
        let m = &self.meta;
        let mut out = vec![
            ("kind".to_string(), self.kind.name().to_string()),
            ("n".to_string(), self.n().to_string()),
            ("normalized".to_string(), self.normalized.to_string()),
        ];
        if let Some(v) = m.samples {
            out.push(("samples".into(), v.to_string()));
        }
        if let Some(v) = m.epsilon {
            out.push(("epsilon".into(), v.to_string()));
        }
        if let Some(v) = m.seed {
            out.push(("seed".into(), v.to_string()));
        }
        if let Some(v) = m.sample_mode {
            out.push(("sample_mode".into(), v.name().to_string()));
        }
        if let Some(v) = &m.spec_zeta {
            out.push(("spec_zeta".into(), v.describe()));
        }
        if let Some(v) = &m.spec_z {
            out.push(("spec_z".into(), v.describe()));
        }
        if let Some(v) = m.gram_scale {
            out.push(("gram_scale".into(), v.to_string()));
        }
        out.push(("raw_asymmetry".into(), format!("{:e}", m.raw_asymmetry)));
        out
    }
}

/// (K + Kᵀ)/2
pub fn symmetrized(k: &DMatrix<f64>) -> DMatrix<f64> {
    (k + k.transpose()) * 0.5
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map(Vec::len).ok_or_else(|| NzkError::Config("kernel needs at least one input".into()))?;
    for row in x {
        if row.len() != d {
            return Err(NzkError::shape("kernel input row", d, row.len()));
        }
    }
    Ok(d)
}

fn gram_of(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(&rows[i], &rows[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Per-sample kernel

/// FD(xᵢ; ζ)·FD(xⱼ; z)·⟨ζ, z⟩
#[allow(clippy::too_many_arguments)]
pub fn nzk_entry<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    epsilon: f64,
    zeta: &[f64],
    z: &[f64],
    xi: &[f64],
    xj: &[f64],
) -> Result<f64> {
    if zeta.len() != z.len() {
        return Err(NzkError::shape("zeta", z.len(), zeta.len()));
    }
    let a = fd_factor(model, theta, epsilon, zeta, xi)?;
    let b = fd_factor(model, theta, epsilon, z, xj)?;
    Ok(a * b * dot(zeta, z))
}

/// Rows a and columns b of the rank-one per-sample kernel, and ⟨ζ, z⟩.
fn sample_factors<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    epsilon: f64,
    zeta: &[f64],
    z: &[f64],
    x: &[Vec<f64>],
    shared: bool,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let a: Vec<f64> = x
        .iter()
        .map(|xi| fd_factor(model, theta, epsilon, zeta, xi))
        .collect::<Result<_>>()?;
    let b = if shared {
        a.clone()
    } else {
        x.iter()
            .map(|xj| fd_factor(model, theta, epsilon, z, xj))
            .collect::<Result<_>>()?
    };
    Ok((a, b, dot(zeta, z)))
}

/// Per-sample NZK on every pair of rows of `x`.
pub fn nzk_sample<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    epsilon: f64,
    zeta: &[f64],
    z: &[f64],
    x: &[Vec<f64>],
) -> Result<KernelMatrix> {
    check_rows(x)?;
    if zeta.len() != z.len() {
        return Err(NzkError::shape("zeta", z.len(), zeta.len()));
    }
    let (a, b, c) = sample_factors(model, theta, epsilon, zeta, z, x, false)?;
    let n = x.len();
    let values = DMatrix::from_fn(n, n, |i, j| a[i] * b[j] * c);
    let meta = KernelMeta {
        epsilon: Some(epsilon),
        raw_asymmetry: asymmetry(&values),
        theta_ref: Some(theta.to_vec()),
        ..KernelMeta::default()
    };
    Ok(KernelMatrix::new(values, KernelKind::NzkSample, meta))
}

// ---------------------------------------------------------------------------
// Monte Carlo expectation

/// Monte Carlo kernel estimate with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McKernel {
    /// Symmetrized entrywise mean.
    pub kernel: KernelMatrix,
    /// Raw (unsymmetrized) entrywise mean.
    pub raw: DMatrix<f64>,
    pub std_errors: DMatrix<f64>,
}

impl McKernel {
    pub fn max_se(&self) -> f64 {
        self.std_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Largest |raw − reference| measured in units of the entry's standard error.
    pub fn max_z_score(&self, reference: &DMatrix<f64>) -> f64 {
        self.raw
            .iter()
            .zip(reference.iter())
            .zip(self.std_errors.iter())
            .map(|((m, r), se)| {
                let diff = (m - r).abs();
                if diff == 0.0 {
                    0.0
                } else {
                    diff / se
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Draw `(ζ, z)` for sample `k`.
pub fn kernel_directions(
    spec_zeta: &DirectionSpec,
    spec_z: &DirectionSpec,
    mode: SampleMode,
    seed: u64,
    k: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, Purpose::KernelSample, k);
    let mut zeta = vec![0.0; spec_zeta.dim];
    spec_zeta.fill(&mut rng, &mut zeta);
    let z = match mode {
        SampleMode::Shared => zeta.clone(),
        SampleMode::Independent => {
            let mut z = vec![0.0; spec_z.dim];
            spec_z.fill(&mut rng, &mut z);
            z
        }
    };
    (zeta, z)
}

/// Entrywise mean of `samples` per-sample NZKs.
///
/// Sample k draws its directions from its own keyed stream; draws are
/// accumulated in fixed-size chunks that are merged in index order, so the
/// result does not depend on the number of threads. In shared mode ζ = z and
/// `spec_zeta` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn expected_nzk_mc<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    epsilon: f64,
    spec_zeta: &DirectionSpec,
    spec_z: &DirectionSpec,
    mode: SampleMode,
    samples: usize,
    x: &[Vec<f64>],
    seed: u64,
) -> Result<McKernel> {
    if samples < 2 {
        return Err(NzkError::Config(format!("Monte Carlo kernel needs at least 2 samples, got {samples}")));
    }
    check_rows(x)?;
    let d = model.param_count();
    if theta.len() != d {
        return Err(NzkError::shape("theta", d, theta.len()));
    }
    let spec_z = spec_z.with_dim(d);
    let spec_zeta = match mode {
        SampleMode::Shared => spec_z,
        SampleMode::Independent => spec_zeta.with_dim(d),
    };
    spec_z.validate()?;
    spec_zeta.validate()?;
    let n = x.len();
    let shared = mode == SampleMode::Shared;
    let chunks = samples.div_ceil(MC_CHUNK);
    let partials: Vec<Vec<Welford>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![Welford::new(); n * n];
            let lo = c * MC_CHUNK;
            let hi = (lo + MC_CHUNK).min(samples);
            for k in lo..hi {
                let (zeta, z) = kernel_directions(&spec_zeta, &spec_z, mode, seed, k as u64);
                let (a, b, dz) = sample_factors(model, theta, epsilon, &zeta, &z, x, shared)?;
                for i in 0..n {
                    let ai = a[i] * dz;
                    for j in 0..n {
                        acc[i * n + j].push(ai * b[j]);
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![Welford::new(); n * n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    let raw = DMatrix::from_fn(n, n, |i, j| total[i * n + j].mean());
    let std_errors = DMatrix::from_fn(n, n, |i, j| total[i * n + j].std_error());
    let raw_asymmetry = asymmetry(&raw);
    let meta = KernelMeta {
        samples: Some(samples),
        epsilon: Some(epsilon),
        seed: Some(seed),
        spec_zeta: Some(spec_zeta),
        spec_z: Some(spec_z),
        sample_mode: Some(mode),
        raw_asymmetry,
        gram_scale: None,
        theta_ref: Some(theta.to_vec()),
    };
    Ok(McKernel {
        kernel: KernelMatrix::new(symmetrized(&raw), KernelKind::NzkExpectedMc, meta),
        raw,
        std_errors,
    })
}

// ---------------------------------------------------------------------------
// Closed forms for linear models

/// XXᵀ
pub fn ntk_linear(x: &[Vec<f64>]) -> Result<KernelMatrix> {
    check_rows(x)?;
    let meta = KernelMeta {
        gram_scale: Some(1.0),
        ..KernelMeta::default()
    };
    Ok(KernelMatrix::new(gram_of(x), KernelKind::Ntk, meta))
}

/// Gram matrix of the parameter gradients ∂f/∂θ at θ.
pub fn ntk_model<M: Model + ?Sized>(model: &M, theta: &[f64], x: &[Vec<f64>]) -> Result<KernelMatrix> {
    check_rows(x)?;
    let grads: Vec<Vec<f64>> = x.iter().map(|xi| model.param_gradient(theta, xi)).collect::<Result<_>>()?;
    let meta = KernelMeta {
        theta_ref: Some(theta.to_vec()),
        ..KernelMeta::default()
    };
    Ok(KernelMatrix::new(gram_of(&grads), KernelKind::Ntk, meta))
}

/// Expected NZK of a linear model for Gaussian ζ and z:
/// σ²_ζσ²_z⟨xᵢ,xⱼ⟩ + (σ²_ζμ²_z + μ²_ζσ²_z + d·μ²_ζμ²_z)·⟨xᵢ,𝟏⟩⟨𝟏,xⱼ⟩.
pub fn expected_nzk_closed(spec_zeta: &DirectionSpec, spec_z: &DirectionSpec, x: &[Vec<f64>]) -> Result<KernelMatrix> {
    let d = check_rows(x)?;
    for spec in [spec_zeta, spec_z] {
        if spec.family != Family::Gaussian {
            return Err(NzkError::Unsupported(format!(
                "closed-form expected kernel requires gaussian directions, got {}",
                spec.family
            )));
        }
        spec.validate()?;
    }
    let (s2q, mq) = (spec_zeta.scale * spec_zeta.scale, spec_zeta.mean);
    let (s2z, mz) = (spec_z.scale * spec_z.scale, spec_z.mean);
    let gram_coef = s2q * s2z;
    let mean_coef = s2q * mz * mz + mq * mq * s2z + d as f64 * mq * mq * mz * mz;
    let sums: Vec<f64> = x.iter().map(|r| r.iter().sum()).collect();
    let gram = gram_of(x);
    let n = x.len();
    let values = DMatrix::from_fn(n, n, |i, j| gram_coef * gram[(i, j)] + mean_coef * sums[i] * sums[j]);
    let meta = KernelMeta {
        spec_zeta: Some(spec_zeta.with_dim(d)),
        spec_z: Some(spec_z.with_dim(d)),
        sample_mode: Some(SampleMode::Independent),
        gram_scale: (mean_coef == 0.0).then_some(gram_coef),
        ..KernelMeta::default()
    };
    Ok(KernelMatrix::new(values, KernelKind::NzkExpectedClosed, meta))
}

/// Expected NZK of a linear model when ζ = z: (𝕍z² + d·E²z²)·Gram.
pub fn expected_nzk_identical(spec: &DirectionSpec, x: &[Vec<f64>]) -> Result<KernelMatrix> {
    let d = check_rows(x)?;
    let scale = spec.kernel_scale(d)?;
    let gram = gram_of(x);
    let meta = KernelMeta {
        spec_zeta: Some(spec.with_dim(d)),
        spec_z: Some(spec.with_dim(d)),
        sample_mode: Some(SampleMode::Shared),
        gram_scale: Some(scale),
        ..KernelMeta::default()
    };
    Ok(KernelMatrix::new(gram * scale, KernelKind::NzkExpectedClosed, meta))
}

/// ⟨ĝ(xᵢ), ĝ(xⱼ)⟩ from the cached tangent features.
pub fn expected_nzk_linearized(lin: &LinearizedModel, x: &[Vec<f64>]) -> Result<KernelMatrix> {
    check_rows(x)?;
    let tangents: Vec<Vec<f64>> = x.iter().map(|xi| lin.tangent(xi).map(<[f64]>::to_vec)).collect::<Result<_>>()?;
    let meta = KernelMeta {
        samples: Some(lin.m_u()),
        epsilon: Some(lin.epsilon()),
        theta_ref: Some(lin.params().to_vec()),
        ..KernelMeta::default()
    };
    Ok(KernelMatrix::new(gram_of(&tangents), KernelKind::NzkLinearized, meta))
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Largest entrywise |K(θ_t) − K(θ₀)| over the snapshots.
pub fn constancy_report<F>(snapshots: &[Vec<f64>], kernel_fn: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    if snapshots.len() < 2 {
        return Err(NzkError::Precondition("constancy needs at least two parameter snapshots".into()));
    }
    let k0 = kernel_fn(&snapshots[0])?;
    let mut worst = 0.0f64;
    for theta in &snapshots[1..] {
        let k = kernel_fn(theta)?;
        if k.shape() != k0.shape() {
            return Err(NzkError::shape("kernel snapshot", k0.nrows(), k.nrows()));
        }
        worst = worst.max(crate::linalg::max_abs_diff(&k, &k0));
    }
    Ok(worst)
}

/// |mean(Tr Mₖ) − Tr(mean Mₖ)| for a set of square matrices.
pub fn trace_commutation_gap(matrices: &[DMatrix<f64>]) -> Result<f64> {
    let first = matrices.first().ok_or_else(|| NzkError::Config("no matrices".into()))?;
    let mut sum = DMatrix::zeros(first.nrows(), first.ncols());
    let mut trace_sum = 0.0;
    for m in matrices {
        if m.shape() != first.shape() || !m.is_square() {
            return Err(NzkError::shape("square matrix", first.nrows(), m.nrows()));
        }
        sum += m;
        trace_sum += m.trace();
    }
    let k = matrices.len() as f64;
    Ok((trace_sum / k - (sum / k).trace()).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::models::{linearize_with_directions, Activation, LinearModel, Mlp};
    use crate::stats::SE_TOLERANCE;
    use proptest::prelude::*;
    use rand::Rng;

    fn circle(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                vec![a.cos(), a.sin()]
            })
            .collect()
    }

    #[test]
    fn entry_of_linear_model() {
        let m = LinearModel::new(vec![0.3, -2.0, 1.0]);
        let zeta = [0.5, 1.5, -0.2];
        let z = [-1.0, 0.25, 2.0];
        let xi = [1.0, 2.0, 3.0];
        let xj = [-0.5, 0.0, 4.0];
        let e = nzk_entry(&m, m.params(), 1e-3, &zeta, &z, &xi, &xj).unwrap();
        let expect = dot(&zeta, &xi) * dot(&z, &xj) * dot(&zeta, &z);
        assert!((e - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn orthogonal_and_unit_entries() {
        let m = LinearModel::new(vec![0.7, 0.1]);
        assert_eq!(nzk_entry(&m, m.params(), 1e-3, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        let e = nzk_entry(&m, m.params(), 1e-3, &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_is_rank_one() {
        let m = LinearModel::new(vec![0.7, 0.1]);
        let k = nzk_sample(&m, m.params(), 1e-3, &[0.4, 1.2], &[-0.3, 0.9], &circle(6)).unwrap();
        let eig = SymmetricEigen::new(k.values.transpose() * &k.values).eigenvalues;
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(ev[1].abs() < 1e-10 * ev[0]);
    }

    #[test]
    fn theta_invariance_for_linear_models() {
        let zeta = [0.4, 1.2, -0.7];
        let z = [-0.3, 0.9, 0.1];
        let x = vec![vec![1.0, 0.5, -1.0], vec![0.2, 0.2, 0.3]];
        let reference = nzk_sample(&LinearModel::zeros(3), &[0.0; 3], 1e-3, &zeta, &z, &x).unwrap();
        for s in 0..10 {
            let m = LinearModel::random(3, s);
            let k = nzk_sample(&m, m.params(), 1e-3, &zeta, &z, &x).unwrap();
            assert!(max_abs_diff(&k.values, &reference.values) <= 1e-12);
        }
    }

    #[test]
    fn two_sample_average_is_exact() {
        let m = LinearModel::new(vec![0.5, 0.5]);
        let x = circle(4);
        let spec = DirectionSpec::standard_gaussian(2);
        let mc = expected_nzk_mc(&m, m.params(), 1e-3, &spec, &spec, SampleMode::Independent, 2, &x, 17).unwrap();
        let mut sum = DMatrix::zeros(4, 4);
        for k in 0..2 {
            let (zeta, z) = kernel_directions(&spec, &spec, SampleMode::Independent, 17, k);
            sum += nzk_sample(&m, m.params(), 1e-3, &zeta, &z, &x).unwrap().values;
        }
        assert!(max_abs_diff(&mc.raw, &(sum / 2.0)) < 1e-14);
    }

    #[test]
    fn mc_matches_gram_independent() {
        let m = LinearModel::new(vec![0.5, -0.5]);
        let x = circle(8);
        let spec = DirectionSpec::standard_gaussian(2);
        let mc = expected_nzk_mc(&m, m.params(), 1e-3, &spec, &spec, SampleMode::Independent, 10_000, &x, 3).unwrap();
        let gram = ntk_linear(&x).unwrap();
        assert!(mc.max_z_score(&gram.values) <= SE_TOLERANCE);
        assert!(mc.kernel.is_psd());
    }

    #[test]
    fn mc_matches_scaled_gram_shared() {
        let m = LinearModel::new(vec![0.5, -0.5]);
        let x = circle(8);
        let spec = DirectionSpec::standard_gaussian(2);
        let mc = expected_nzk_mc(&m, m.params(), 1e-3, &spec, &spec, SampleMode::Shared, 10_000, &x, 4).unwrap();
        let closed = expected_nzk_identical(&spec, &x).unwrap();
        assert_eq!(closed.meta.gram_scale, Some(4.0));
        assert!(mc.max_z_score(&closed.values) <= SE_TOLERANCE);
    }

    #[test]
    fn mc_is_thread_count_independent() {
        let m = LinearModel::new(vec![0.5, -0.5]);
        let x = circle(3);
        let spec = DirectionSpec::standard_gaussian(2);
        let run = || expected_nzk_mc(&m, m.params(), 1e-3, &spec, &spec, SampleMode::Shared, 1000, &x, 8).unwrap();
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
        assert_eq!(a, b);
    }

    #[test]
    fn closed_form_cases() {
        let x = circle(8);
        let k = expected_nzk_closed(&DirectionSpec::standard_gaussian(2), &DirectionSpec::standard_gaussian(2), &x).unwrap();
        assert_eq!(k.values, ntk_linear(&x).unwrap().values);

        let k = expected_nzk_closed(&DirectionSpec::standard_gaussian(2), &DirectionSpec::gaussian(1.0, 1.0, 2), &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(k.values[(0, 0)], 2.0);

        let balanced = vec![vec![1.0, -1.0], vec![0.5, -0.5], vec![-2.0, 2.0]];
        let k = expected_nzk_closed(&DirectionSpec::gaussian(1.0, 1.5, 2), &DirectionSpec::gaussian(-0.5, 0.5, 2), &balanced).unwrap();
        let g = ntk_linear(&balanced).unwrap().values * (1.5f64 * 1.5 * 0.5 * 0.5);
        assert!(max_abs_diff(&k.values, &g) < 1e-15);

        assert!(matches!(
            expected_nzk_closed(&DirectionSpec::laplace(0.0, 1.0, 2), &DirectionSpec::standard_gaussian(2), &x),
            Err(NzkError::Unsupported(_))
        ));
    }

    #[test]
    fn mean_shifted_closed_form_matches_mc() {
        let m = LinearModel::zeros(2);
        let x = vec![vec![1.0, 0.0]];
        let q = DirectionSpec::standard_gaussian(2);
        let z = DirectionSpec::gaussian(1.0, 1.0, 2);
        let mc = expected_nzk_mc(&m, m.params(), 1e-3, &q, &z, SampleMode::Independent, 200_000, &x, 12).unwrap();
        let closed = expected_nzk_closed(&q, &z, &x).unwrap();
        assert!(mc.max_z_score(&closed.values) <= SE_TOLERANCE);
    }

    #[test]
    fn identical_scale_law() {
        let x = circle(5);
        let gram = ntk_linear(&x).unwrap().values;
        for sigma in [0.5, 1.0, 1.5] {
            for d in [2usize, 10, 30, 50] {
                let rows: Vec<Vec<f64>> = x.iter().map(|r| {
                    let mut v = vec![0.0; d];
                    v[..2].copy_from_slice(r);
                    v
                }).collect();
                let k = expected_nzk_identical(&DirectionSpec::gaussian(0.0, sigma, d), &rows).unwrap();
                let s = (d as f64 + 2.0) * sigma.powi(4);
                assert_eq!(k.values, &gram * s);
            }
        }
        let k = expected_nzk_identical(&DirectionSpec::laplace(0.0, 1.0, 2), &x).unwrap();
        assert_eq!(k.meta.gram_scale, Some(28.0));
        assert!(expected_nzk_identical(&DirectionSpec::gaussian(0.5, 1.0, 2), &x).is_err());
    }

    #[test]
    fn ntk_examples() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let k = ntk_linear(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]]).unwrap();
        assert_eq!(k.values[(0, 1)], 0.0);
        assert!((k.values[(0, 2)] - s).abs() < 1e-15 && (k.values[(1, 2)] - s).abs() < 1e-15);
        let k = ntk_linear(&[vec![0.6, 0.8]]).unwrap();
        assert!((k.values[(0, 0)] - 1.0).abs() < 1e-15);
        let m = LinearModel::random(2, 0);
        let x = circle(4);
        assert_eq!(ntk_model(&m, m.params(), &x).unwrap().values, ntk_linear(&x).unwrap().values);
    }

    #[test]
    fn linearized_kernel_properties() {
        let base = Mlp::random(vec![2, 3, 1], Activation::Relu, true, 1).unwrap();
        let theta0 = base.params().to_vec();
        let mut rng = stream(5, Purpose::Check, 0);
        let dirs: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..theta0.len()).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let x = vec![vec![0.3, -0.4], vec![0.3, -0.4], vec![1.0, 0.2]];
        let lin = linearize_with_directions(&base, &theta0, 1e-3, &x, &dirs).unwrap();
        let k = expected_nzk_linearized(&lin, &x[..2]).unwrap();
        assert!(k.values.iter().all(|v| *v == k.values[(0, 0)]));
        let single = expected_nzk_linearized(&lin, &x[2..]).unwrap();
        assert!(single.values[(0, 0)] >= 0.0);
        assert!(matches!(
            expected_nzk_linearized(&lin, &[vec![9.0, 9.0]]),
            Err(NzkError::Precondition(_))
        ));
    }

    #[test]
    fn constancy_cases() {
        let zeta = [0.4, 1.2];
        let z = [-0.3, 0.9];
        let x = circle(4);
        let snaps: Vec<Vec<f64>> = (0..5).map(|s| LinearModel::random(2, s).params().to_vec()).collect();
        let m = LinearModel::zeros(2);
        let dev = constancy_report(&snaps, |t| Ok(nzk_sample(&m, t, 1e-3, &zeta, &z, &x)?.values)).unwrap();
        assert!(dev <= 1e-12);
        assert!(constancy_report(&snaps[..1], |_| Ok(DMatrix::zeros(1, 1))).is_err());
    }

    #[test]
    fn normalized_and_psd_helpers() {
        let k = KernelMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), KernelKind::Ntk, KernelMeta::default());
        assert!((k.min_eigenvalue() + 1.0).abs() < 1e-12);
        assert!(!k.is_psd());
        assert!(ntk_linear(&circle(6)).unwrap().is_psd());
    }

    proptest! {
        #[test]
        fn trace_commutes_with_mean(seed in any::<u64>()) {
            let mut rng = stream(seed, Purpose::Check, 0);
            let mats: Vec<DMatrix<f64>> = (0..500)
                .map(|_| DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>() * 2.0 - 1.0))
                .collect();
            prop_assert!(trace_commutation_gap(&mats).unwrap() <= 1e-12);
        }

        #[test]
        fn closed_form_is_psd(mz in -1.0f64..1.0, mq in -1.0f64..1.0, sz in 0.1f64..2.0, sq in 0.1f64..2.0, seed in any::<u64>()) {
            let mut rng = stream(seed, Purpose::Check, 1);
            let x: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let k = expected_nzk_closed(&DirectionSpec::gaussian(mq, sq, 3), &DirectionSpec::gaussian(mz, sz, 3), &x).unwrap();
            prop_assert!(k.asymmetry() <= SYMMETRY_TOL);
            prop_assert!(k.is_psd());
        }
    }
}
