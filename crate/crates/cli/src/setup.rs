//! Build datasets, models and direction specs from a config.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use nzk_core::datasets::load_csv_dataset;
use nzk_core::directions::{DirectionSpec, Family, SampleMode};
use nzk_core::experiments::{
    load_mnist01, seed_range, shared_step_eta, teacher_task, DEFAULT_ENSEMBLE, DEFAULT_NOISE, DEFAULT_STEP_FRACTION,
    MNIST_WIDTHS,
};
use nzk_core::kernels::expected_nzk_linearized;
use nzk_core::models::{linearize, Activation, LinearModel, LinearizedModel, Mlp, Model, DEFAULT_EPSILON};
use nzk_core::zo::{Loss, TrainConfig, TrainMode};
use nzk_core::Dataset;

use crate::config::Config;

pub const DATA_DIR_ENV: &str = "NZK_DATA_DIR";
pub const DEFAULT_DATA_SEED: u64 = 2024;
pub const DEFAULT_STUDENT_T_DOF: f64 = 1000.0;

pub fn base_seed(cfg: &Config) -> Result<u64> {
    cfg.get("seed", 0u64)
}

pub fn seeds(cfg: &Config) -> Result<Vec<u64>> {
    let n = cfg.get("ensemble.seeds", DEFAULT_ENSEMBLE)?;
    if n == 0 {
        bail!("ensemble.seeds must be at least 1");
    }
    Ok(seed_range(base_seed(cfg)?, n))
}

fn data_dir(cfg: &Config) -> Result<PathBuf> {
    if let Some(dir) = cfg.get_opt::<String>("data.dir")? {
        return Ok(PathBuf::from(dir));
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir)),
        None => bail!("set data.dir or {DATA_DIR_ENV} to the directory holding the MNIST IDX files"),
    }
}

pub fn teacher_dims(cfg: &Config) -> Result<(usize, usize, f64, u64)> {
    Ok((
        cfg.get("data.d", 2usize)?,
        cfg.get("data.n", 8usize)?,
        cfg.get("data.noise", DEFAULT_NOISE)?,
        cfg.get("data.seed", DEFAULT_DATA_SEED)?,
    ))
}

pub fn dataset(cfg: &Config) -> Result<Dataset> {
    match cfg.get_str("data.source", "teacher").as_str() {
        "teacher" => {
            let (d, n, noise, seed) = teacher_dims(cfg)?;
            Ok(teacher_task(d, n, noise, seed)?)
        }
        "csv" => {
            let path = cfg.get_opt::<String>("data.path")?.context("data.source = csv needs data.path")?;
            Ok(load_csv_dataset(&PathBuf::from(path))?)
        }
        "mnist" => {
            let n = cfg.get("data.n", 200usize)?;
            Ok(load_mnist01(&data_dir(cfg)?, n)?)
        }
        other => bail!("unknown data.source `{other}` (teacher, csv, mnist)"),
    }
}

/// Linear or linearized student.
pub enum Student {
    Linear(LinearModel),
    Linearized(LinearizedModel),
}

impl Student {
    pub fn model(&self) -> &dyn Model {
        match self {
            Student::Linear(m) => m,
            Student::Linearized(m) => m,
        }
    }

    /// Rows of the tangent feature matrix on `data`.
    pub fn features(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        match self {
            Student::Linear(_) => Ok(data.inputs.clone()),
            Student::Linearized(m) => data
                .inputs
                .iter()
                .map(|x| Ok(m.tangent(x)?.to_vec()))
                .collect(),
        }
    }
}

pub fn linear_init(cfg: &Config, d: usize) -> Result<Vec<f64>> {
    match cfg.get_str("model.init", "zeros").as_str() {
        "zeros" => Ok(vec![0.0; d]),
        "random" => Ok(LinearModel::random(d, cfg.get("model.seed", 0u64)?).params().to_vec()),
        other => bail!("unknown model.init `{other}` (zeros, random)"),
    }
}

pub fn student(cfg: &Config, data: &Dataset) -> Result<Student> {
    match cfg.get_str("model.kind", "linear").as_str() {
        "linear" => Ok(Student::Linear(LinearModel::new(linear_init(cfg, data.dim())?))),
        "linearized" => {
            let m_u = cfg.get("model.m_u", 64usize)?;
            let eps = cfg.get("model.epsilon", DEFAULT_EPSILON)?;
            let seed = cfg.get("model.seed", 0u64)?;
            let widths = cfg.get_list::<usize>("model.widths", &MNIST_WIDTHS)?;
            let activation = Activation::parse(&cfg.get_str("model.activation", "relu"), cfg.get_opt("model.alpha")?)?;
            if widths.first() != Some(&data.dim()) {
                bail!("model.widths must start with the input dimension {}", data.dim());
            }
            let base = Mlp::random(widths, activation, true, seed)?;
            let theta0 = base.params().to_vec();
            let spec = DirectionSpec::standard_gaussian(theta0.len());
            Ok(Student::Linearized(linearize(&base, &theta0, eps, m_u, &spec, &data.inputs, seed)?))
        }
        other => bail!("unknown model.kind `{other}` (linear, linearized)"),
    }
}

/// Direction spec under `prefix` (`direction` or `direction_zeta`), with
/// unspecified keys falling back to `fallback`.
pub fn direction(cfg: &Config, prefix: &str, fallback: Option<&DirectionSpec>, dim: usize) -> Result<DirectionSpec> {
    let base = fallback.copied().unwrap_or_else(|| DirectionSpec::standard_gaussian(dim));
    let family: Family = cfg.get(&format!("{prefix}.family"), base.family)?;
    let mean = cfg.get(&format!("{prefix}.mean"), base.mean)?;
    let spec = match family {
        Family::Gaussian => DirectionSpec::gaussian(mean, cfg.get(&format!("{prefix}.scale"), base.scale)?, dim),
        Family::Laplace => DirectionSpec::laplace(mean, cfg.get(&format!("{prefix}.scale"), base.scale)?, dim),
        Family::StudentT => {
            let dof = cfg.get(&format!("{prefix}.dof"), base.dof.unwrap_or(DEFAULT_STUDENT_T_DOF))?;
            DirectionSpec::student_t(mean, dof, dim)
        }
    };
    spec.validate()?;
    Ok(spec)
}

pub fn directions(cfg: &Config, dim: usize) -> Result<(DirectionSpec, DirectionSpec)> {
    let z = direction(cfg, "direction", None, dim)?;
    let zeta = direction(cfg, "direction_zeta", Some(&z), dim)?;
    Ok((z, zeta))
}

pub fn sample_mode(cfg: &Config, key: &str) -> Result<SampleMode> {
    let raw = cfg.get_str(key, "independent");
    Ok(raw.parse()?)
}

/// Training settings shared by all runs of a command. `eta = auto` picks
/// η·(d+2)·tr(K̄) = `train.step_fraction` from the student's tangent kernel.
pub fn train_config(cfg: &Config, student: &Student, data: &Dataset, steps_default: usize) -> Result<TrainConfig> {
    let d = student.model().param_count();
    let (z, zeta) = directions(cfg, d)?;
    let eta = match cfg.get_str("train.eta", "0.001").as_str() {
        "auto" => {
            let fraction = cfg.get("train.step_fraction", DEFAULT_STEP_FRACTION)?;
            let trace = match student {
                Student::Linearized(m) => expected_nzk_linearized(m, &data.inputs)?.trace(),
                Student::Linear(_) => data.inputs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum(),
            };
            shared_step_eta(trace / data.len() as f64, d, fraction)?
        }
        raw => raw.parse::<f64>().with_context(|| format!("invalid train.eta `{raw}`"))?,
    };
    let loss: Loss = cfg.get_str("train.loss", "squared").parse()?;
    Ok(TrainConfig {
        eta,
        epsilon: cfg.get("train.epsilon", DEFAULT_EPSILON)?,
        steps: cfg.get("train.steps", steps_default)?,
        mode: TrainMode::Fo,
        sample_mode: sample_mode(cfg, "direction.sample_mode")?,
        batch: cfg.get("train.batch", 1usize)?,
        direction_z: z,
        direction_zeta: zeta,
        loss,
        seed: base_seed(cfg)?,
        record_every: cfg.get("train.record_every", 1usize)?,
        keep_thetas: false,
    })
}

/// Apply a training mode; the kernel mode always shares its direction.
pub fn with_mode(base: &TrainConfig, mode: TrainMode) -> TrainConfig {
    let mut c = base.clone();
    c.mode = mode;
    if mode == TrainMode::ZoKernel {
        c.sample_mode = SampleMode::Shared;
    }
    c
}
