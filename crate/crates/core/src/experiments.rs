//! Reusable experiment protocols shared by the command-line runner and the
//! acceptance suite.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;

use crate::datasets::{gen_teacher_student, load_mnist_idx, Dataset, MnistOptions, TeacherSpec};
use crate::directions::DirectionSpec;
use crate::dynamics::{closed_form_trajectory, compare_ensemble, ensemble_mean, EnsembleComparison};
use crate::error::{NzkError, Result};
use crate::kernels::{expected_nzk_identical, ntk_linear, trace_commutation_gap};
use crate::models::{
    check_layer_decomposition, check_zo_homogeneous, linearize, zo_homogeneity_gap, Activation, LinearModel,
    LinearizedModel, Mlp, Model, TwoLayerLinear,
};
use crate::rng::{stream, Purpose};
use crate::stats::Welford;
use crate::zo::{train, train_ensemble, TrainConfig, TrainMode, Trajectory};

/// Seed ensemble size for stochastic comparisons.
pub const DEFAULT_ENSEMBLE: usize = 200;

/// Step at which sweep cells are compared.
pub const DEFAULT_CHECKPOINT: usize = 2000;

/// Label noise standard deviation of the synthetic teacher.
pub const DEFAULT_NOISE: f64 = 0.02;

/// Hidden and output widths of the network that gets linearized.
pub const MNIST_WIDTHS: [usize; 4] = [64, 10, 5, 1];

/// Default value of η·(d+2)·tr(K̄) for mode comparisons on linearized networks.
pub const DEFAULT_STEP_FRACTION: f64 = 0.5;

/// `count` consecutive seeds starting at `base`.
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base.wrapping_add(k)).collect()
}

/// `n` equally spaced points on the unit circle.
pub fn unit_circle(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            vec![a.cos(), a.sin()]
        })
        .collect()
}

/// Teacher 7·x₁ + 2·x₂ padded with zeros to `d` dimensions.
pub fn padded_teacher(d: usize, noise_sigma: f64) -> TeacherSpec {
    let mut theta_star = vec![0.0; d];
    theta_star[0] = 7.0;
    if d > 1 {
        theta_star[1] = 2.0;
    }
    TeacherSpec {
        theta_star,
        noise_sigma,
    }
}

pub fn teacher_task(d: usize, n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    gen_teacher_student(d, n, &padded_teacher(d, noise_sigma), seed)
}

/// Seed-mean loss and its standard error at selected steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub label: String,
    pub steps: Vec<usize>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub runs: usize,
}

impl LossCurve {
    pub fn at(&self, step: usize) -> Option<(f64, f64)> {
        let i = self.steps.iter().position(|&s| s == step)?;
        Some((self.mean[i], self.std_error[i]))
    }
}

pub fn loss_curve(label: &str, runs: &[Trajectory], steps: &[usize]) -> Result<LossCurve> {
    if runs.is_empty() {
        return Err(NzkError::Config("empty ensemble".into()));
    }
    let mut mean = Vec::with_capacity(steps.len());
    let mut std_error = Vec::with_capacity(steps.len());
    for &s in steps {
        let mut w = Welford::new();
        for r in runs {
            let l = *r.losses.get(s).ok_or_else(|| NzkError::shape("trajectory length", s + 1, r.losses.len()))?;
            w.push(l);
        }
        mean.push(w.mean());
        std_error.push(if runs.len() > 1 { w.std_error() } else { 0.0 });
    }
    Ok(LossCurve {
        label: label.to_string(),
        steps: steps.to_vec(),
        mean,
        std_error,
        runs: runs.len(),
    })
}

/// Every `every`-th step from 0 through `steps`, always including the last.
pub fn checkpoints(steps: usize, every: usize) -> Vec<usize> {
    let every = every.max(1);
    let mut out: Vec<usize> = (0..=steps).step_by(every).collect();
    if out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

/// Largest |a − b| / √(SEₐ² + SE_b²) over shared steps.
pub fn max_curve_z(a: &LossCurve, b: &LossCurve) -> f64 {
    let mut worst = 0.0f64;
    for (i, &s) in a.steps.iter().enumerate() {
        if let Some((mb, sb)) = b.at(s) {
            let diff = (a.mean[i] - mb).abs();
            if diff > 0.0 {
                worst = worst.max(diff / (a.std_error[i].powi(2) + sb.powi(2)).sqrt());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Structural checks

/// Sample variance of (zᵢ/σ)² over `samples` Gaussian draws and the standard
/// error of that variance estimate.
pub fn chi_square_variance(samples: usize, sigma: f64, seed: u64) -> Result<(f64, f64)> {
    if samples < 4 {
        return Err(NzkError::Config("need at least 4 samples".into()));
    }
    let spec = DirectionSpec::gaussian(0.0, sigma, samples);
    let z = spec.sample(&mut stream(seed, Purpose::Check, 0))?;
    let v: Vec<f64> = z.iter().map(|zi| (zi / sigma).powi(2)).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let (m2, m4) = v.iter().fold((0.0, 0.0), |(a, b), x| {
        let d2 = (x - mean).powi(2);
        (a + d2, b + d2 * d2)
    });
    let var = m2 / (n - 1.0);
    let mu4 = m4 / n;
    let se = ((mu4 - var * var * (n - 3.0) / (n - 1.0)) / n).sqrt();
    Ok((var, se))
}

/// Worst relative layer-decomposition discrepancy over random two-layer
/// linear networks (input size and width in 1..=6, standard normal weights,
/// inputs and directions).
pub fn layer_decomposition_worst(instances: usize, epsilon: f64, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = stream(seed, Purpose::Check, k as u64);
        let n = rng.random_range(1..=6);
        let width = rng.random_range(1..=6);
        let model = TwoLayerLinear::random(n, width, rng.random())?;
        let normal = DirectionSpec::standard_gaussian(n);
        let x = normal.sample(&mut rng)?;
        let z = normal.with_dim(model.param_count()).sample(&mut rng)?;
        worst = worst.max(check_layer_decomposition(&model, &x, epsilon, &z)?.relative());
    }
    Ok(worst)
}

/// Number of points x ~ U(−bound, bound) with |x| > ε at which φ passes the
/// zeroth-order homogeneity check, and the largest gap seen.
pub fn homogeneity_sweep(activation: Activation, points: usize, bound: f64, epsilon: f64, seed: u64) -> Result<(usize, f64)> {
    let mut rng = stream(seed, Purpose::Check, 0);
    let (mut passed, mut drawn, mut worst) = (0, 0, 0.0f64);
    while drawn < points {
        let x = rng.random_range(-bound..bound);
        if x.abs() <= epsilon {
            continue;
        }
        drawn += 1;
        worst = worst.max(zo_homogeneity_gap(activation, x, epsilon));
        if check_zo_homogeneous(activation, x, epsilon)? {
            passed += 1;
        }
    }
    Ok((passed, worst))
}

/// |mean(Tr M) − Tr(mean M)| over `count` random n×n matrices with U(−1, 1) entries.
pub fn random_trace_gap(count: usize, n: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Purpose::Check, 0);
    let mats: Vec<DMatrix<f64>> = (0..count)
        .map(|_| DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    trace_commutation_gap(&mats)
}

// ---------------------------------------------------------------------------
// Sweeps

/// One training configuration in a sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    pub data: Dataset,
    pub theta0: Vec<f64>,
    pub config: TrainConfig,
    pub kernel_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub kernel_scale: Option<f64>,
    pub final_mean: f64,
    pub final_se: f64,
    pub checkpoint: usize,
    pub checkpoint_mean: f64,
    pub checkpoint_se: f64,
}

pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub curves: Vec<LossCurve>,
}

/// Train every cell over the seed ensemble (linear student models).
pub fn run_sweep(cells: &[SweepCell], seeds: &[u64], checkpoint: usize, curve_every: usize) -> Result<SweepResult> {
    let mut rows = Vec::with_capacity(cells.len());
    let mut curves = Vec::with_capacity(cells.len());
    for cell in cells {
        let steps = cell.config.steps;
        if checkpoint > steps {
            return Err(NzkError::Config(format!(
                "checkpoint {checkpoint} exceeds the {steps} training steps of `{}`",
                cell.label
            )));
        }
        let model = LinearModel::new(cell.theta0.clone());
        let cfg = TrainConfig {
            record_every: steps.max(1),
            keep_thetas: false,
            ..cell.config.clone()
        };
        let runs = train_ensemble(&model, &cell.data, &cfg, seeds)?;
        let mut marks = checkpoints(steps, curve_every);
        if !marks.contains(&checkpoint) {
            marks.push(checkpoint);
            marks.sort_unstable();
        }
        let curve = loss_curve(&cell.label, &runs, &marks)?;
        let (final_mean, final_se) = curve.at(steps).expect("last step is a checkpoint");
        let (checkpoint_mean, checkpoint_se) = curve.at(checkpoint).expect("checkpoint included");
        rows.push(SweepRow {
            label: cell.label.clone(),
            kernel_scale: cell.kernel_scale,
            final_mean,
            final_se,
            checkpoint,
            checkpoint_mean,
            checkpoint_se,
        });
        curves.push(curve);
    }
    Ok(SweepResult { rows, curves })
}

/// True when each row's checkpoint loss is strictly below the previous one.
pub fn strictly_decreasing(rows: &[SweepRow]) -> bool {
    rows.windows(2).all(|w| w[1].checkpoint_mean < w[0].checkpoint_mean)
}

// ---------------------------------------------------------------------------
// Closed-form dynamics checks

/// FO training of a linear model against f* + (I − ηK̄)ᵗ(f₀ − f*) with K̄ = Gram/N.
/// Returns the largest absolute output error over all steps.
pub fn fo_dynamics_error(data: &Dataset, theta0: &[f64], eta: f64, steps: usize) -> Result<f64> {
    let model = LinearModel::new(theta0.to_vec());
    let cfg = TrainConfig {
        eta,
        steps,
        mode: TrainMode::Fo,
        record_every: 1,
        ..TrainConfig::default()
    };
    let run = train(&model, data, &cfg)?;
    let n = data.len() as f64;
    let k_bar = ntk_linear(&data.inputs)?.values / n;
    let analytic = closed_form_trajectory(&k_bar, &run.fvals[0], &data.targets, eta, steps)?;
    Ok(crate::dynamics::compare(&run, &analytic)?.max_abs_err)
}

/// Expected per-step kernel of each training mode for a model whose tangent
/// features are the rows of `features` (inputs for a linear model, ĝ(x) for a
/// linearized one):
///
/// * fo: ΦΦᵀ
/// * zo_parametric: Φ·E[zzᵀ]·Φᵀ = c₂·ΦΦᵀ + μ²·(Φ𝟏)(Φ𝟏)ᵀ
/// * zo_kernel: (𝕍z² + d·E²z²)·ΦΦᵀ (zero-mean directions)
pub fn expected_step_kernel(features: &[Vec<f64>], mode: TrainMode, spec_z: &DirectionSpec) -> Result<DMatrix<f64>> {
    let gram = ntk_linear(features)?.values;
    let d = features[0].len();
    match mode {
        TrainMode::Fo => Ok(gram),
        TrainMode::ZoParametric => {
            let m = spec_z.with_dim(d).exact_moments()?;
            let c2 = m.m2 - m.m1 * m.m1;
            let sums: Vec<f64> = features.iter().map(|r| r.iter().sum()).collect();
            let n = features.len();
            Ok(DMatrix::from_fn(n, n, |i, j| c2 * gram[(i, j)] + m.m1 * m.m1 * sums[i] * sums[j]))
        }
        TrainMode::ZoKernel => Ok(gram * spec_z.kernel_scale(d)?),
    }
}

/// Seed-mean of shared-direction ZO runs against the closed form with the
/// scaled kernel (𝕍z² + d·E²z²)·Gram/N.
pub fn zo_kernel_dynamics(
    data: &Dataset,
    theta0: &[f64],
    spec: &DirectionSpec,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<EnsembleComparison> {
    let model = LinearModel::new(theta0.to_vec());
    let d = model.param_count();
    let cfg = TrainConfig {
        mode: TrainMode::ZoKernel,
        sample_mode: crate::directions::SampleMode::Shared,
        direction_z: spec.with_dim(d),
        direction_zeta: spec.with_dim(d),
        ..config.clone()
    };
    let runs = train_ensemble(&model, data, &cfg, seeds)?;
    let ens = ensemble_mean(&runs)?;
    let k_bar = expected_nzk_identical(spec, &data.inputs)?.values / data.len() as f64;
    let f0 = runs[0].fvals[0].clone();
    let analytic = closed_form_trajectory(&k_bar, &f0, &data.targets, cfg.eta, cfg.steps)?;
    compare_ensemble(&ens, &analytic)
}

// ---------------------------------------------------------------------------
// Linearized MNIST

/// File names tried, in order, inside a data directory.
pub const MNIST_FILE_PAIRS: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("mnist01-images-idx3-ubyte", "mnist01-labels-idx1-ubyte"),
];

/// IDX image and label paths found in `dir`.
pub fn find_mnist(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    for (img, lbl) in MNIST_FILE_PAIRS {
        let (i, l) = (dir.join(img), dir.join(lbl));
        if i.is_file() && l.is_file() {
            return Ok((i, l));
        }
    }
    Err(NzkError::Config(format!("no MNIST IDX files found in {}", dir.display())))
}

/// Balanced 0-vs-1 subset of at most `n` rows, 8×8 pixels, targets ±1.
pub fn load_mnist01(dir: &Path, n: usize) -> Result<Dataset> {
    let (images, labels) = find_mnist(dir)?;
    let opts = MnistOptions {
        digits: vec![0, 1],
        max_per_class: Some(n.div_ceil(2)),
        target_side: 8,
    };
    let data = load_mnist_idx(&images, &labels, &opts)?;
    Ok(data.head(n))
}

/// Linearize a freshly initialized ReLU network around its initial weights.
pub fn mnist_linearized(data: &Dataset, epsilon: f64, m_u: usize, seed: u64) -> Result<LinearizedModel> {
    let mut widths = MNIST_WIDTHS.to_vec();
    widths[0] = data.dim();
    let base = Mlp::random(widths, Activation::Relu, true, seed)?;
    let theta0 = base.params().to_vec();
    let spec = DirectionSpec::standard_gaussian(theta0.len());
    linearize(&base, &theta0, epsilon, m_u, &spec, &data.inputs, seed)
}

/// η with η·(d + 2)·tr(K̄) = `fraction`, where K̄ is the normalized tangent
/// kernel. Shared-direction steps see the kernel scaled by d + 2, and a single
/// draw can concentrate the whole trace on one mode, so this keeps the
/// stochastic kernel step stable.
pub fn shared_step_eta(k_bar_trace: f64, d: usize, fraction: f64) -> Result<f64> {
    if !(k_bar_trace > 0.0 && fraction > 0.0) {
        return Err(NzkError::Config(format!(
            "step rule needs a positive kernel trace and fraction, got {k_bar_trace} and {fraction}"
        )));
    }
    Ok(fraction / ((d as f64 + 2.0) * k_bar_trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeOrdering {
    pub fo: LossCurve,
    pub zo_parametric: LossCurve,
    pub zo_kernel: LossCurve,
    pub checkpoint: usize,
}

impl ModeOrdering {
    fn at(c: &LossCurve, step: usize) -> f64 {
        c.at(step).map_or(f64::NAN, |v| v.0)
    }

    /// (zo_kernel, fo, zo_parametric) seed-mean losses at the checkpoint.
    pub fn checkpoint_losses(&self) -> (f64, f64, f64) {
        (
            Self::at(&self.zo_kernel, self.checkpoint),
            Self::at(&self.fo, self.checkpoint),
            Self::at(&self.zo_parametric, self.checkpoint),
        )
    }

    /// zo_kernel < fo < zo_parametric
    pub fn ordered(&self) -> bool {
        let (k, f, p) = self.checkpoint_losses();
        k < f && f < p
    }
}

/// Train one model in all three modes at the same η. FO is deterministic and
/// runs once; the ZO modes run over `seeds` with standard Gaussian directions.
pub fn mode_ordering<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    curve_every: usize,
) -> Result<ModeOrdering> {
    let d = model.param_count();
    let spec = DirectionSpec::standard_gaussian(d);
    let steps = base.steps;
    let marks = checkpoints(steps, curve_every);
    let common = TrainConfig {
        direction_z: spec,
        direction_zeta: spec,
        record_every: steps.max(1),
        keep_thetas: false,
        ..base.clone()
    };
    let fo_run = train(
        model,
        data,
        &TrainConfig {
            mode: TrainMode::Fo,
            ..common.clone()
        },
    )?;
    let par = train_ensemble(
        model,
        data,
        &TrainConfig {
            mode: TrainMode::ZoParametric,
            sample_mode: crate::directions::SampleMode::Independent,
            ..common.clone()
        },
        seeds,
    )?;
    let ker = train_ensemble(
        model,
        data,
        &TrainConfig {
            mode: TrainMode::ZoKernel,
            sample_mode: crate::directions::SampleMode::Shared,
            ..common
        },
        seeds,
    )?;
    Ok(ModeOrdering {
        fo: loss_curve("fo", std::slice::from_ref(&fo_run), &marks)?,
        zo_parametric: loss_curve("zo_parametric", &par, &marks)?,
        zo_kernel: loss_curve("zo_kernel", &ker, &marks)?,
        checkpoint: steps,
    })
}
