//! The five experiment commands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nzk_core::datasets::fmt_f64;
use nzk_core::directions::{match_scale, DirectionSpec, Family, SampleMode, LAPLACE_REFERENCE_B};
use nzk_core::dynamics::{
    closed_form_trajectory, compare, compare_ensemble, ensemble_mean, modal_residuals, spectral,
};
use nzk_core::experiments::{
    chi_square_variance, expected_step_kernel, homogeneity_sweep, layer_decomposition_worst, random_trace_gap,
    max_curve_z, run_sweep, teacher_task, unit_circle, SweepCell, DEFAULT_CHECKPOINT,
};
use nzk_core::io;
use nzk_core::kernels::{expected_nzk_closed, expected_nzk_identical, expected_nzk_mc, ntk_linear};
use nzk_core::models::{check_zo_homogeneous, Activation, LinearModel, Model, DEFAULT_EPSILON};
use nzk_core::stats::{ENSEMBLE_SE_TOLERANCE, SE_TOLERANCE};
use nzk_core::zo::{train, train_ensemble, TrainMode};
use nzk_core::NzkError;

use crate::config::Config;
use crate::manifest::{Manifest, Status, Verdict};
use crate::setup::{self, Student};

/// Monte Carlo estimates with fewer samples are reported as inconclusive.
pub const MIN_CONCLUSIVE_SAMPLES: usize = 100;

/// Seed ensembles smaller than this are reported as inconclusive.
pub const MIN_CONCLUSIVE_SEEDS: usize = 2;

const FO_DYNAMICS_TOL: f64 = 1e-10;
const DECOMPOSITION_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-12;

pub struct Outcome {
    pub manifest: Manifest,
}

/// `mode[@scale]`, e.g. `zo_parametric@0.5`.
fn parse_run(spec: &str) -> Result<(TrainMode, Option<f64>)> {
    let (mode, scale) = match spec.split_once('@') {
        Some((m, s)) => (m, Some(s.trim().parse::<f64>().with_context(|| format!("bad scale in run `{spec}`"))?)),
        None => (spec, None),
    };
    Ok((mode.trim().parse()?, scale))
}

fn run_label(mode: TrainMode, scale: Option<f64>) -> String {
    match scale {
        Some(s) => format!("{mode}_s{s}"),
        None => mode.to_string(),
    }
}

pub fn cmd_train(cfg: &Config, out: &Path) -> Result<Outcome> {
    let seed = setup::base_seed(cfg)?;
    let mut manifest = Manifest::new("train", out, seed);
    let data = setup::dataset(cfg)?;
    let student = setup::student(cfg, &data)?;
    let base = setup::train_config(cfg, &student, &data, 1000)?;
    let default_mode = cfg.get_str("train.mode", "fo");
    let runs = cfg.get_list::<String>("train.runs", &[default_mode])?;
    let with_outputs = cfg.get("train.outputs", true)?;
    cfg.ensure_consumed()?;
    manifest.note("eta", base.eta);
    for spec in &runs {
        let (mode, scale) = parse_run(spec)?;
        let mut c = setup::with_mode(&base, mode);
        if let Some(s) = scale {
            c.direction_z.scale = s;
            c.direction_zeta.scale = s;
        }
        let label = run_label(mode, scale);
        let t = train(student.model(), &data, &c).with_context(|| format!("run `{label}`"))?;
        manifest.write(&format!("trajectory_{label}.csv"), &io::trajectory_csv(&t, with_outputs)?)?;
        manifest.note(format!("final_loss.{label}"), fmt_f64(*t.losses.last().expect("non-empty")));
    }
    Ok(Outcome { manifest })
}

pub fn cmd_kernel(cfg: &Config, out: &Path) -> Result<Outcome> {
    let seed = setup::base_seed(cfg)?;
    let mut manifest = Manifest::new("kernel", out, seed);
    let points = match cfg.get_str("kernel.points", "circle").as_str() {
        "circle" => unit_circle(cfg.get("kernel.n", 8usize)?),
        "data" => setup::dataset(cfg)?.inputs,
        other => bail!("unknown kernel.points `{other}` (circle, data)"),
    };
    let d = points[0].len();
    let samples = cfg.get("kernel.samples", 10_000usize)?;
    let epsilon = cfg.get("train.epsilon", DEFAULT_EPSILON)?;
    let mode = setup::sample_mode(cfg, "direction.sample_mode")?;
    let (spec_z, spec_zeta) = setup::directions(cfg, d)?;
    cfg.ensure_consumed()?;

    let model = LinearModel::zeros(d);
    let mc = expected_nzk_mc(&model, model.params(), epsilon, &spec_zeta, &spec_z, mode, samples, &points, seed)?;
    manifest.write("kernel_mc.csv", &io::matrix_csv(&mc.kernel.values)?)?;
    manifest.write("kernel_mc.meta", &io::kernel_meta(&mc.kernel))?;
    manifest.write("kernel_se.csv", &io::matrix_csv(&mc.std_errors)?)?;
    let gram = ntk_linear(&points)?;
    manifest.write("kernel_gram.csv", &io::matrix_csv(&gram.values)?)?;

    let closed = match mode {
        SampleMode::Shared => expected_nzk_identical(&spec_z, &points),
        SampleMode::Independent => expected_nzk_closed(&spec_zeta, &spec_z, &points),
    };
    match closed {
        Ok(k) => {
            manifest.write("kernel_closed.csv", &io::matrix_csv(&k.values)?)?;
            manifest.write("kernel_closed.meta", &io::kernel_meta(&k))?;
            if let Some(s) = k.meta.gram_scale {
                manifest.note("kernel.gram_scale", s);
            }
            let z = mc.max_z_score(&k.values);
            let status = if samples < MIN_CONCLUSIVE_SAMPLES {
                Status::Inconclusive
            } else if z <= SE_TOLERANCE {
                Status::Pass
            } else {
                Status::Fail
            };
            manifest.verdict(Verdict::new("mc_vs_closed_form", status, format!("max_z={z:.4}"), format!("max_z<={SE_TOLERANCE}")));
            manifest.verdict(Verdict::check(
                "closed_form_psd",
                k.is_psd(),
                format!("min_eigenvalue={:e}", k.min_eigenvalue()),
                "min_eigenvalue>=-1e-8*trace",
            ));
        }
        Err(NzkError::Unsupported(why) | NzkError::MomentUndefined(why)) => {
            manifest.verdict(Verdict::new("mc_vs_closed_form", Status::Inconclusive, "no closed form", why));
        }
        Err(e) => return Err(e.into()),
    }
    manifest.note("kernel.max_se", mc.max_se());
    manifest.note("kernel.raw_asymmetry", mc.kernel.meta.raw_asymmetry);
    Ok(Outcome { manifest })
}

pub fn cmd_dynamics(cfg: &Config, out: &Path) -> Result<Outcome> {
    let seed = setup::base_seed(cfg)?;
    let mut manifest = Manifest::new("dynamics", out, seed);
    let data = setup::dataset(cfg)?;
    let student = setup::student(cfg, &data)?;
    let base = setup::train_config(cfg, &student, &data, 1000)?;
    let mode: TrainMode = cfg.get_str("train.mode", "fo").parse()?;
    let seeds = if mode == TrainMode::Fo { vec![seed] } else { setup::seeds(cfg)? };
    let tolerance = cfg.get("dynamics.tolerance", FO_DYNAMICS_TOL)?;
    cfg.ensure_consumed()?;

    let c = setup::with_mode(&base, mode);
    let features = student.features(&data)?;
    let k_bar = expected_step_kernel(&features, mode, &c.direction_z)? / data.len() as f64;
    let model = student.model();
    let f0: Vec<f64> = data.inputs.iter().map(|x| model.eval(x)).collect::<nzk_core::Result<_>>()?;
    let analytic = closed_form_trajectory(&k_bar, &f0, &data.targets, c.eta, c.steps)?;
    if let Some(w) = &analytic.warning {
        manifest.note("warning", w);
    }
    let decomp = spectral(&k_bar)?;
    manifest.note("eta", c.eta);
    manifest.write("spectrum.csv", &io::spectrum_csv(&decomp, &analytic)?)?;
    manifest.write("analytic.csv", &io::analytic_csv(&analytic, c.record_every)?)?;
    let steps: Vec<usize> = (0..=c.steps).step_by(c.record_every).collect();
    let modal = modal_residuals(&decomp, &steps.iter().map(|&s| analytic.fvals[s].clone()).collect::<Vec<_>>(), &data.targets);
    manifest.write("dynamics.csv", &io::dynamics_csv(&steps, &modal)?)?;

    if mode == TrainMode::Fo {
        let run = train(model, &data, &c)?;
        manifest.write("trajectory_fo.csv", &io::trajectory_csv(&run, true)?)?;
        let cmp = compare(&run, &analytic)?;
        manifest.verdict(Verdict::check(
            "fo_vs_closed_form",
            cmp.max_abs_err <= tolerance,
            format!("max_abs_err={:e}", cmp.max_abs_err),
            format!("max_abs_err<={tolerance:e}"),
        ));
    } else {
        let runs = train_ensemble(model, &data, &c, &seeds)?;
        let ens = ensemble_mean(&runs)?;
        let cmp = compare_ensemble(&ens, &analytic)?;
        manifest.write(&format!("ensemble_{mode}.csv"), &ensemble_csv(&ens))?;
        manifest.write("comparison.csv", &comparison_csv(&cmp))?;
        let status = if seeds.len() < MIN_CONCLUSIVE_SEEDS {
            Status::Inconclusive
        } else if cmp.within(ENSEMBLE_SE_TOLERANCE) {
            Status::Pass
        } else {
            Status::Fail
        };
        manifest.verdict(Verdict::new(
            "ensemble_vs_closed_form",
            status,
            format!("max_z={:.4},seeds={}", cmp.max_z, seeds.len()),
            format!("max_z<={ENSEMBLE_SE_TOLERANCE}"),
        ));
    }
    Ok(Outcome { manifest })
}

fn ensemble_csv(ens: &nzk_core::dynamics::EnsembleMean) -> String {
    let n = ens.mean.first().map_or(0, Vec::len);
    let mut out = String::from("step");
    for i in 0..n {
        out.push_str(&format!(",f_{i},se_{i}"));
    }
    out.push('\n');
    for (k, step) in ens.steps.iter().enumerate() {
        out.push_str(&step.to_string());
        for i in 0..n {
            out.push_str(&format!(",{},{}", fmt_f64(ens.mean[k][i]), fmt_f64(ens.std_error[k][i])));
        }
        out.push('\n');
    }
    out
}

fn comparison_csv(cmp: &nzk_core::dynamics::EnsembleComparison) -> String {
    let mut out = String::from("step,max_abs_err,max_se,max_z\n");
    for (s, e, se, z) in &cmp.per_step {
        out.push_str(&format!("{s},{},{},{}\n", fmt_f64(*e), fmt_f64(*se), fmt_f64(*z)));
    }
    out
}

pub fn cmd_check(cfg: &Config, out: &Path) -> Result<Outcome> {
    let seed = setup::base_seed(cfg)?;
    cfg.ensure_consumed()?;
    let mut manifest = Manifest::new("check", out, seed);
    let mut rows = vec!["name,status,measured,tolerance".to_string()];

    let worst = layer_decomposition_worst(100, DEFAULT_EPSILON, seed)?;
    manifest.verdict(Verdict::check(
        "layer_decomposition",
        worst <= DECOMPOSITION_TOL,
        format!("worst_relative={worst:e}"),
        format!("<={DECOMPOSITION_TOL:e}"),
    ));
    for act in [Activation::Relu, Activation::LeakyRelu(0.1), Activation::Linear(2.0)] {
        let (ok, gap) = homogeneity_sweep(act, 100, 5.0, DEFAULT_EPSILON, seed)?;
        manifest.verdict(Verdict::check(
            format!("homogeneity_{}", act.to_string().replace(['(', ')'], "")),
            ok == 100,
            format!("passed={ok}/100,worst_gap={gap:e}"),
            "all points",
        ));
    }
    let tanh = check_zo_homogeneous(Activation::Tanh, 2.0, DEFAULT_EPSILON)?;
    manifest.verdict(Verdict::check(
        "homogeneity_tanh_negative_control",
        !tanh,
        format!("homogeneous_at_2={tanh}"),
        "expected non-homogeneous",
    ));
    let gap = random_trace_gap(500, 5, seed)?;
    manifest.verdict(Verdict::check("trace_commutation", gap <= TRACE_TOL, format!("gap={gap:e}"), format!("<={TRACE_TOL:e}")));
    let (var, se) = chi_square_variance(1_000_000, 1.0, seed)?;
    let z = (var - 2.0).abs() / se;
    manifest.verdict(Verdict::check(
        "chi_square_variance",
        z <= SE_TOLERANCE,
        format!("variance={var:.6},se={se:.6}"),
        format!("|variance-2|<={SE_TOLERANCE}*se"),
    ));
    for v in manifest.verdicts() {
        rows.push(format!("{},{},{},{}", v.name, v.status, v.measured.replace(',', ";"), v.tolerance.replace(',', ";")));
    }
    manifest.write("checks.csv", &(rows.join("\n") + "\n"))?;
    Ok(Outcome { manifest })
}

pub fn cmd_sweep(cfg: &Config, out: &Path) -> Result<Outcome> {
    let seed = setup::base_seed(cfg)?;
    let mut manifest = Manifest::new("sweep", out, seed);
    let axis = cfg.get_str("sweep.axis", "sigma");
    let checkpoint = cfg.get("sweep.checkpoint", DEFAULT_CHECKPOINT)?;
    let curve_every = cfg.get("sweep.curve_every", 250usize)?;
    let mode: TrainMode = cfg.get_str("train.mode", "zo_kernel").parse()?;
    let seeds = setup::seeds(cfg)?;
    let (d, n, noise, data_seed) = setup::teacher_dims(cfg)?;

    let mut cells = Vec::new();
    match axis.as_str() {
        "sigma" => {
            let data = teacher_task(d, n, noise, data_seed)?;
            let student = Student::Linear(LinearModel::new(setup::linear_init(cfg, d)?));
            let base = setup::with_mode(&setup::train_config(cfg, &student, &data, checkpoint)?, mode);
            for s in cfg.get_list("sweep.values", &[0.5f64, 1.0, 1.5])? {
                let spec = DirectionSpec::gaussian(base.direction_z.mean, s, d);
                cells.push(cell(format!("sigma_{s}"), &data, &student, &base, spec, mode));
            }
            if let Some(s) = cfg.get_opt::<f64>("sweep.independent_baseline")? {
                let spec = DirectionSpec::gaussian(base.direction_z.mean, s, d);
                let par = setup::with_mode(&base, TrainMode::ZoParametric);
                cells.push(cell(format!("independent_sigma_{s}"), &data, &student, &par, spec, TrainMode::ZoParametric));
            }
        }
        "d" => {
            let dims = cfg.get_list("sweep.values", &[10usize, 30, 50])?;
            let probe = teacher_task(dims[0], n, noise, data_seed)?;
            let probe_student = Student::Linear(LinearModel::zeros(dims[0]));
            let base = setup::with_mode(&setup::train_config(cfg, &probe_student, &probe, checkpoint)?, mode);
            let init = cfg.get_str("model.init", "zeros");
            for dim in dims {
                let data = teacher_task(dim, n, noise, data_seed)?;
                let theta0 = match init.as_str() {
                    "zeros" => vec![0.0; dim],
                    _ => LinearModel::random(dim, cfg.get("model.seed", 0u64)?).params().to_vec(),
                };
                let student = Student::Linear(LinearModel::new(theta0));
                let spec = base.direction_z.with_dim(dim);
                cells.push(cell(format!("d_{dim}"), &data, &student, &base, spec, mode));
            }
        }
        "distribution" => {
            let data = teacher_task(d, n, noise, data_seed)?;
            let student = Student::Linear(LinearModel::new(setup::linear_init(cfg, d)?));
            let base = setup::with_mode(&setup::train_config(cfg, &student, &data, checkpoint)?, mode);
            let reference = base.direction_z;
            let target = reference.kernel_scale(d)?;
            let laplace_b = cfg.get_str("direction.laplace_b", "formula");
            let dof = cfg.get("direction.dof", setup::DEFAULT_STUDENT_T_DOF)?;
            manifest.note("sweep.target_kernel_scale", target);
            for name in cfg.get_list::<String>("sweep.values", &["gaussian".into(), "laplace".into()])? {
                let family: Family = name.parse()?;
                let spec = match (family, laplace_b.as_str()) {
                    (Family::StudentT, _) => DirectionSpec::student_t(0.0, dof, d),
                    (Family::Laplace, "reference") => DirectionSpec::laplace(0.0, LAPLACE_REFERENCE_B, d),
                    (Family::Laplace, "formula") | (Family::Gaussian, _) => match_scale(target, family, d)?,
                    (_, other) => bail!("unknown direction.laplace_b `{other}` (formula, reference)"),
                };
                cells.push(cell(family.to_string(), &data, &student, &base, spec, mode));
            }
        }
        other => bail!("unknown sweep.axis `{other}` (sigma, d, distribution)"),
    }
    cfg.ensure_consumed()?;
    if cells.is_empty() {
        bail!("sweep.values is empty");
    }

    let res = run_sweep(&cells, &seeds, checkpoint, curve_every)?;
    for c in &res.curves {
        manifest.write(&format!("sweep_{}.csv", c.label), &io::loss_curve_csv(c)?)?;
    }
    manifest.write("sweep_summary.csv", &io::sweep_summary_csv(&res.rows)?)?;

    let conclusive = seeds.len() >= MIN_CONCLUSIVE_SEEDS;
    let status = |ok: bool| match (conclusive, ok) {
        (false, _) => Status::Inconclusive,
        (true, true) => Status::Pass,
        (true, false) => Status::Fail,
    };
    let shared: Vec<_> = res.rows.iter().filter(|r| !r.label.starts_with("independent")).collect();
    match axis.as_str() {
        "sigma" | "d" => {
            let mut by_scale = shared.clone();
            by_scale.sort_by(|a, b| a.kernel_scale.unwrap_or(0.0).total_cmp(&b.kernel_scale.unwrap_or(0.0)));
            let ok = by_scale.windows(2).all(|w| w[1].checkpoint_mean < w[0].checkpoint_mean);
            let measured: Vec<String> = by_scale.iter().map(|r| format!("{}:{:.4e}", r.label, r.checkpoint_mean)).collect();
            manifest.verdict(Verdict::new(
                "checkpoint_loss_ordered_by_kernel_scale",
                status(ok),
                measured.join(";"),
                "strictly decreasing",
            ));
            if let Some(ind) = res.rows.iter().find(|r| r.label.starts_with("independent")) {
                let sigma = ind.label.trim_start_matches("independent_");
                if let Some(sh) = res.rows.iter().find(|r| r.label == sigma) {
                    manifest.verdict(Verdict::new(
                        "shared_beats_independent",
                        status(sh.checkpoint_mean < ind.checkpoint_mean),
                        format!("shared={:.4e};independent={:.4e}", sh.checkpoint_mean, ind.checkpoint_mean),
                        "shared < independent",
                    ));
                }
            }
        }
        _ => {
            let first = &res.curves[0];
            for other in &res.curves[1..] {
                let z = max_curve_z(first, other);
                manifest.verdict(Verdict::new(
                    format!("{}_vs_{}", first.label, other.label),
                    status(z <= ENSEMBLE_SE_TOLERANCE),
                    format!("max_z={z:.4}"),
                    format!("max_z<={ENSEMBLE_SE_TOLERANCE}"),
                ));
            }
        }
    }
    Ok(Outcome { manifest })
}

fn cell(
    label: String,
    data: &nzk_core::Dataset,
    student: &Student,
    base: &nzk_core::TrainConfig,
    spec: DirectionSpec,
    mode: TrainMode,
) -> SweepCell {
    let mut config = setup::with_mode(base, mode);
    config.direction_z = spec;
    config.direction_zeta = spec;
    SweepCell {
        label,
        data: data.clone(),
        theta0: student.model().params().to_vec(),
        kernel_scale: if mode == TrainMode::ZoKernel { spec.kernel_scale(spec.dim).ok() } else { None },
        config,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_specs_parse() {
        assert_eq!(parse_run("fo").unwrap(), (TrainMode::Fo, None));
        assert_eq!(parse_run("kernel@0.5").unwrap(), (TrainMode::ZoKernel, Some(0.5)));
        assert!(parse_run("zo_kernel@x").is_err());
        assert!(parse_run("sgd").is_err());
        assert_eq!(run_label(TrainMode::ZoKernel, Some(0.5)), "zo_kernel_s0.5");
    }
}
