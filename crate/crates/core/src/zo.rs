//! Gradient estimators and the training loop.
//!
//! Three update rules are supported:
//!
//! * `Fo`: exact gradient, θ ← θ − η·(1/N)Σ(f−y)·∂f/∂θ (squared loss only).
//! * `ZoParametric`: the two-point estimator
//!   𝒢 = (1/N)Σ[ℒ(f(xᵢ;θ+εz)) − ℒ(f(xᵢ;θ−εz))]/(2ε)·z and θ ← θ − η𝒢.
//! * `ZoKernel`: kernel-gradient ZO. The parameter step is routed through the
//!   ζ-estimated tangent, θ ← θ − η·ζ⟨ζ, 𝒢⟩, so that for linear and linearized
//!   models the function-space step is exactly −(η/N)·Σᵢ mᵢ·K_{ζ,z}(·, xᵢ).
//!   With ζ = z the expected kernel is (𝕍z² + d·E²z²)·NTK.
//!
//! Losses are only ever evaluated, never differentiated, on the ZO paths.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::datasets::Dataset;
use crate::directions::{DirectionSpec, SampleMode};
use crate::error::{NzkError, Result};
use crate::linalg::{axpy, dot, offset};
use crate::models::{Model, DEFAULT_EPSILON};
use crate::rng::{stream2, Purpose};

/// Training aborts once the mean loss exceeds this value.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// |f⁺ − f⁻| below this marks a row of the magnitude/direction split degenerate.
pub const DEGENERATE_GAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Loss {
    /// ½(f − y)²
    #[default]
    Squared,
    /// |f − y|
    Absolute,
}

impl Loss {
    pub fn value(self, f: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => 0.5 * (f - y) * (f - y),
            Loss::Absolute => (f - y).abs(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Loss::Squared => "squared",
            Loss::Absolute => "absolute",
        }
    }
}

impl FromStr for Loss {
    type Err = NzkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "squared" => Ok(Loss::Squared),
            "absolute" => Ok(Loss::Absolute),
            other => Err(NzkError::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TrainMode {
    #[default]
    Fo,
    ZoParametric,
    ZoKernel,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Fo => "fo",
            TrainMode::ZoParametric => "zo_parametric",
            TrainMode::ZoKernel => "zo_kernel",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = NzkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fo" => Ok(TrainMode::Fo),
            "zo_parametric" | "parametric" => Ok(TrainMode::ZoParametric),
            "zo_kernel" | "kernel" => Ok(TrainMode::ZoKernel),
            other => Err(NzkError::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub mode: TrainMode,
    pub sample_mode: SampleMode,
    /// Directions averaged per step.
    pub batch: usize,
    pub direction_z: DirectionSpec,
    pub direction_zeta: DirectionSpec,
    pub loss: Loss,
    pub seed: u64,
    /// Record model outputs every this many steps (step 0 is always recorded).
    pub record_every: usize,
    pub keep_thetas: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            epsilon: DEFAULT_EPSILON,
            steps: 1000,
            mode: TrainMode::Fo,
            sample_mode: SampleMode::Independent,
            batch: 1,
            direction_z: DirectionSpec::standard_gaussian(1),
            direction_zeta: DirectionSpec::standard_gaussian(1),
            loss: Loss::Squared,
            seed: 0,
            record_every: 1,
            keep_thetas: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(NzkError::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(NzkError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.batch == 0 {
            return Err(NzkError::Config("batch must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(NzkError::Config("record_every must be at least 1".into()));
        }
        match self.mode {
            TrainMode::Fo => {
                if self.loss != Loss::Squared {
                    return Err(NzkError::Unsupported("fo mode requires the squared loss".into()));
                }
            }
            TrainMode::ZoParametric => {
                self.direction_z.validate()?;
                self.direction_zeta.validate()?;
            }
            TrainMode::ZoKernel => {
                if self.sample_mode != SampleMode::Shared {
                    return Err(NzkError::Config("zo_kernel requires sample_mode = shared".into()));
                }
                self.direction_z.validate()?;
            }
        }
        Ok(())
    }
}

/// Losses, recorded outputs and optional parameter snapshots of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Mean loss after each step; `losses[0]` is the initial loss.
    pub losses: Vec<f64>,
    /// Steps at which `fvals` (and `thetas`) were recorded.
    pub recorded_steps: Vec<usize>,
    /// Model outputs on the training inputs at each recorded step.
    pub fvals: Vec<Vec<f64>>,
    pub thetas: Option<Vec<Vec<f64>>>,
    pub final_theta: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Estimators

fn check_direction(theta: &[f64], z: &[f64]) -> Result<()> {
    if z.len() != theta.len() {
        return Err(NzkError::shape("direction", theta.len(), z.len()));
    }
    Ok(())
}

fn non_finite(loss: f64) -> NzkError {
    NzkError::Divergence { step: 0, loss }
}

fn at_step(err: NzkError, step: usize) -> NzkError {
    match err {
        NzkError::Divergence { loss, .. } => NzkError::Divergence { step, loss },
        other => other,
    }
}

/// Model outputs on every input at θ.
pub fn outputs<M: Model + ?Sized>(model: &M, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    data.inputs.iter().map(|x| model.eval_at(theta, x)).collect()
}

/// Mean loss over the dataset at θ.
pub fn mean_loss<M: Model + ?Sized>(model: &M, data: &Dataset, theta: &[f64], loss: Loss) -> Result<f64> {
    let f = outputs(model, data, theta)?;
    Ok(mean_loss_of(&f, &data.targets, loss))
}

fn mean_loss_of(f: &[f64], y: &[f64], loss: Loss) -> f64 {
    f.iter().zip(y).map(|(&fi, &yi)| loss.value(fi, yi)).sum::<f64>() / f.len() as f64
}

/// (1/N)Σ[ℒ(f(xᵢ;θ+εz)) − ℒ(f(xᵢ;θ−εz))]/(2ε); the estimator is this times z.
pub fn zo_coefficient<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    epsilon: f64,
    z: &[f64],
    loss: Loss,
) -> Result<f64> {
    check_direction(theta, z)?;
    let plus = offset(theta, epsilon, z);
    let minus = offset(theta, -epsilon, z);
    let mut acc = 0.0;
    for (x, &y) in data.inputs.iter().zip(&data.targets) {
        let lp = loss.value(model.eval_at(&plus, x)?, y);
        let lm = loss.value(model.eval_at(&minus, x)?, y);
        if !lp.is_finite() || !lm.is_finite() {
            return Err(non_finite(if lp.is_finite() { lm } else { lp }));
        }
        acc += (lp - lm) / (2.0 * epsilon);
    }
    Ok(acc / data.len() as f64)
}

/// Two-point zeroth-order gradient estimate along one direction.
pub fn zo_gradient<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    epsilon: f64,
    z: &[f64],
    loss: Loss,
) -> Result<Vec<f64>> {
    let c = zo_coefficient(model, data, theta, epsilon, z, loss)?;
    Ok(z.iter().map(|v| c * v).collect())
}

/// Mean of `batch` two-point estimates with directions drawn sequentially from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn zo_gradient_batch<M: Model + ?Sized, R: rand::Rng + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    epsilon: f64,
    spec: &DirectionSpec,
    batch: usize,
    loss: Loss,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if batch == 0 {
        return Err(NzkError::Config("batch must be at least 1".into()));
    }
    let spec = spec.with_dim(theta.len());
    spec.validate()?;
    let mut z = vec![0.0; theta.len()];
    let mut acc = vec![0.0; theta.len()];
    for _ in 0..batch {
        spec.fill(rng, &mut z);
        let c = zo_coefficient(model, data, theta, epsilon, &z, loss)?;
        axpy(c, &z, &mut acc);
    }
    acc.iter_mut().for_each(|v| *v /= batch as f64);
    Ok(acc)
}

/// Batched estimate with one keyed stream per direction `(seed, step, j)`.
///
/// Directions are evaluated in parallel and summed in index order, so the
/// result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn zo_gradient_batch_keyed<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    epsilon: f64,
    spec: &DirectionSpec,
    batch: usize,
    loss: Loss,
    seed: u64,
    step: u64,
) -> Result<Vec<f64>> {
    if batch == 0 {
        return Err(NzkError::Config("batch must be at least 1".into()));
    }
    let spec = spec.with_dim(theta.len());
    spec.validate()?;
    let terms: Vec<(f64, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream2(seed, Purpose::DirectionZ, step, j as u64);
            let mut z = vec![0.0; theta.len()];
            spec.fill(&mut rng, &mut z);
            let c = zo_coefficient(model, data, theta, epsilon, &z, loss)?;
            Ok((c, z))
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; theta.len()];
    for (c, z) in &terms {
        axpy(*c, z, &mut acc);
    }
    acc.iter_mut().for_each(|v| *v /= batch as f64);
    Ok(acc)
}

/// Per-row magnitude/direction factorization of the two-point estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitGradient {
    /// [ℒ(f⁺) − ℒ(f⁻)] / [f⁺ − f⁻]; zero on degenerate rows.
    pub magnitudes: Vec<f64>,
    /// Row i is [(f⁺ − f⁻)/(2ε)]·z.
    pub directions: Vec<Vec<f64>>,
    /// Rows with |f⁺ − f⁻| < 1e-12.
    pub degenerate: Vec<bool>,
    /// [ℒ(f⁺) − ℒ(f⁻)]/(2ε) per row, the unfactored coefficient.
    pub direct: Vec<f64>,
    pub z: Vec<f64>,
}

impl SplitGradient {
    /// (1/N)·Σ magnitudeᵢ·directionᵢ, falling back to the unfactored term on
    /// degenerate rows.
    pub fn contract(&self) -> Vec<f64> {
        let n = self.magnitudes.len() as f64;
        let mut acc = vec![0.0; self.z.len()];
        for i in 0..self.magnitudes.len() {
            if self.degenerate[i] {
                axpy(self.direct[i], &self.z, &mut acc);
            } else {
                axpy(self.magnitudes[i], &self.directions[i], &mut acc);
            }
        }
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }
}

pub fn magnitude_direction_split<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    epsilon: f64,
    z: &[f64],
    loss: Loss,
) -> Result<SplitGradient> {
    check_direction(theta, z)?;
    let plus = offset(theta, epsilon, z);
    let minus = offset(theta, -epsilon, z);
    let n = data.len();
    let mut out = SplitGradient {
        magnitudes: Vec::with_capacity(n),
        directions: Vec::with_capacity(n),
        degenerate: Vec::with_capacity(n),
        direct: Vec::with_capacity(n),
        z: z.to_vec(),
    };
    for (x, &y) in data.inputs.iter().zip(&data.targets) {
        let fp = model.eval_at(&plus, x)?;
        let fm = model.eval_at(&minus, x)?;
        let dl = loss.value(fp, y) - loss.value(fm, y);
        let df = fp - fm;
        let degenerate = df.abs() < DEGENERATE_GAP;
        out.magnitudes.push(if degenerate { 0.0 } else { dl / df });
        let factor = df / (2.0 * epsilon);
        out.directions.push(z.iter().map(|v| factor * v).collect());
        out.degenerate.push(degenerate);
        out.direct.push(dl / (2.0 * epsilon));
    }
    Ok(out)
}

/// Exact gradient of the mean squared loss, (1/N)Σ(f − y)·∂f/∂θ.
pub fn fo_gradient<M: Model + ?Sized>(model: &M, data: &Dataset, theta: &[f64], loss: Loss) -> Result<Vec<f64>> {
    if loss != Loss::Squared {
        return Err(NzkError::Unsupported("first-order gradients need the squared loss".into()));
    }
    let mut acc = vec![0.0; theta.len()];
    for (x, &y) in data.inputs.iter().zip(&data.targets) {
        let r = model.eval_at(theta, x)? - y;
        let g = model.param_gradient(theta, x)?;
        axpy(r, &g, &mut acc);
    }
    acc.iter_mut().for_each(|v| *v /= data.len() as f64);
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Training

fn check_model_data<M: Model + ?Sized>(model: &M, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() {
        return Err(NzkError::shape("dataset dimension", model.input_dim(), data.dim()));
    }
    Ok(())
}

/// Run `config.steps` updates from the model's reference parameters.
pub fn train<M: Model + ?Sized>(model: &M, data: &Dataset, config: &TrainConfig) -> Result<Trajectory> {
    config.validate()?;
    check_model_data(model, data)?;
    let d = model.param_count();
    let spec_z = config.direction_z.with_dim(d);
    let spec_zeta = config.direction_zeta.with_dim(d);

    let mut theta = model.params().to_vec();
    let f0 = outputs(model, data, &theta)?;
    let mut losses = Vec::with_capacity(config.steps + 1);
    losses.push(mean_loss_of(&f0, &data.targets, config.loss));
    let mut recorded_steps = vec![0];
    let mut fvals = vec![f0];
    let mut thetas = config.keep_thetas.then(|| vec![theta.clone()]);

    let mut z = vec![0.0; d];
    let mut zeta = vec![0.0; d];
    let mut step_vec = vec![0.0; d];
    for t in 0..config.steps {
        step_vec.iter_mut().for_each(|v| *v = 0.0);
        match config.mode {
            TrainMode::Fo => {
                let g = fo_gradient(model, data, &theta, config.loss)?;
                axpy(1.0, &g, &mut step_vec);
            }
            TrainMode::ZoParametric | TrainMode::ZoKernel => {
                let inv_b = 1.0 / config.batch as f64;
                for j in 0..config.batch {
                    let mut rz = stream2(config.seed, Purpose::DirectionZ, t as u64, j as u64);
                    spec_z.fill(&mut rz, &mut z);
                    let c = zo_coefficient(model, data, &theta, config.epsilon, &z, config.loss)
                        .map_err(|e| at_step(e, t))?;
                    if config.mode == TrainMode::ZoParametric {
                        axpy(c * inv_b, &z, &mut step_vec);
                    } else {
                        // ζ⟨ζ, c·z⟩ with ζ = z in shared mode.
                        let tangent = match config.sample_mode {
                            SampleMode::Shared => &z,
                            SampleMode::Independent => {
                                let mut rq = stream2(config.seed, Purpose::DirectionZeta, t as u64, j as u64);
                                spec_zeta.fill(&mut rq, &mut zeta);
                                &zeta
                            }
                        };
                        let proj = c * dot(tangent, &z);
                        axpy(proj * inv_b, tangent, &mut step_vec);
                    }
                }
            }
        }
        axpy(-config.eta, &step_vec, &mut theta);

        let step = t + 1;
        let f = outputs(model, data, &theta)?;
        let l = mean_loss_of(&f, &data.targets, config.loss);
        if !l.is_finite() || l > DIVERGENCE_THRESHOLD {
            return Err(NzkError::Divergence { step, loss: l });
        }
        losses.push(l);
        if step % config.record_every == 0 {
            recorded_steps.push(step);
            fvals.push(f);
            if let Some(ts) = thetas.as_mut() {
                ts.push(theta.clone());
            }
        }
    }
    Ok(Trajectory {
        losses,
        recorded_steps,
        fvals,
        thetas,
        final_theta: theta,
    })
}

/// One run per seed (the config's own seed is replaced), in parallel.
/// Results are returned in seed order.
pub fn train_ensemble<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            train(model, data, &cfg)
        })
        .collect()
}
