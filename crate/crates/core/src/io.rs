//! CSV and key/value artifact writers.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::datasets::fmt_f64;
use crate::dynamics::{ClosedFormTrajectory, SpectralDecomposition};
use crate::error::{NzkError, Result};
use crate::experiments::{LossCurve, SweepRow};
use crate::kernels::KernelMatrix;
use crate::zo::Trajectory;

fn table(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().flexible(false).from_writer(Vec::new());
    let io = |e: csv::Error| NzkError::Contract(format!("csv encoding failed: {e}"));
    if !header.is_empty() {
        w.write_record(header).map_err(io)?;
    }
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| NzkError::Contract(format!("csv flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| NzkError::Contract(e.to_string()))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// `step,loss[,f_0..f_{N-1}]`, one row per step. Output columns are filled on
/// recorded steps and left empty otherwise.
pub fn trajectory_csv(t: &Trajectory, with_outputs: bool) -> Result<String> {
    let n = if with_outputs { t.fvals.first().map_or(0, Vec::len) } else { 0 };
    let mut head = header(&["step", "loss"]);
    head.extend((0..n).map(|i| format!("f_{i}")));
    let mut recorded = t.recorded_steps.iter().zip(&t.fvals).peekable();
    let mut rows = Vec::with_capacity(t.losses.len());
    for (step, loss) in t.losses.iter().enumerate() {
        let mut row = vec![step.to_string(), fmt_f64(*loss)];
        if n > 0 {
            match recorded.peek() {
                Some((&s, f)) if s == step => {
                    row.extend(f.iter().map(|v| fmt_f64(*v)));
                    recorded.next();
                }
                _ => row.extend(std::iter::repeat_n(String::new(), n)),
            }
        }
        rows.push(row);
    }
    table(&head, rows)
}

/// N×N matrix, no header.
pub fn matrix_csv(m: &DMatrix<f64>) -> Result<String> {
    let rows = (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect());
    table(&[], rows)
}

/// `key = value` lines.
pub fn key_values(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn kernel_meta(k: &KernelMatrix) -> String {
    key_values(&k.meta_pairs())
}

/// `step,mode_index,residual_coeff` in long format.
pub fn dynamics_csv(steps: &[usize], modal: &[Vec<f64>]) -> Result<String> {
    let rows = steps.iter().zip(modal).flat_map(|(s, coeffs)| {
        coeffs
            .iter()
            .enumerate()
            .map(move |(i, c)| vec![s.to_string(), i.to_string(), fmt_f64(*c)])
    });
    table(&header(&["step", "mode_index", "residual_coeff"]), rows)
}

/// `mode_index,eigenvalue,decay_factor`
pub fn spectrum_csv(decomp: &SpectralDecomposition, analytic: &ClosedFormTrajectory) -> Result<String> {
    let rows = decomp
        .eigenvalues
        .iter()
        .zip(&analytic.decay_factors)
        .enumerate()
        .map(|(i, (l, g))| vec![i.to_string(), fmt_f64(*l), fmt_f64(*g)]);
    table(&header(&["mode_index", "eigenvalue", "decay_factor"]), rows)
}

/// `step,f_0..f_{N-1}` for an analytic trajectory, every `every` steps.
pub fn analytic_csv(t: &ClosedFormTrajectory, every: usize) -> Result<String> {
    let n = t.fvals.first().map_or(0, Vec::len);
    let mut head = header(&["step"]);
    head.extend((0..n).map(|i| format!("f_{i}")));
    let every = every.max(1);
    let rows = t.fvals.iter().enumerate().filter(|(s, _)| s % every == 0).map(|(s, f)| {
        let mut row = vec![s.to_string()];
        row.extend(f.iter().map(|v| fmt_f64(*v)));
        row
    });
    table(&head, rows)
}

/// `step,mean_loss,std_error,runs`
pub fn loss_curve_csv(c: &LossCurve) -> Result<String> {
    let rows = c
        .steps
        .iter()
        .zip(&c.mean)
        .zip(&c.std_error)
        .map(|((s, m), e)| vec![s.to_string(), fmt_f64(*m), fmt_f64(*e), c.runs.to_string()]);
    table(&header(&["step", "mean_loss", "std_error", "runs"]), rows)
}

/// One row per sweep cell.
pub fn sweep_summary_csv(rows: &[SweepRow]) -> Result<String> {
    let body = rows.iter().map(|r| {
        vec![
            r.label.clone(),
            r.kernel_scale.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.final_mean),
            fmt_f64(r.final_se),
            r.checkpoint.to_string(),
            fmt_f64(r.checkpoint_mean),
            fmt_f64(r.checkpoint_se),
        ]
    });
    table(
        &header(&[
            "label",
            "kernel_scale",
            "final_loss",
            "final_se",
            "checkpoint",
            "checkpoint_loss",
            "checkpoint_se",
        ]),
        body,
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| NzkError::io(path, e))
}
