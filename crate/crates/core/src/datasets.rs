//! Teacher–student data on the unit sphere, MNIST IDX ingestion, and a plain
//! CSV format for arbitrary vector datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{NzkError, Result};
use crate::linalg::{dot, norm_sq};
use crate::rng::{stream, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetMeta {
    pub source: String,
    pub normalization: String,
    pub seed: Option<u64>,
    /// Free-form notes (label encoding, class filter, ...).
    pub notes: Vec<(String, String)>,
}

/// N input rows of dimension d with scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>, meta: DatasetMeta) -> Result<Self> {
        if inputs.is_empty() {
            return Err(NzkError::Config("dataset must contain at least one row".into()));
        }
        if inputs.len() != targets.len() {
            return Err(NzkError::shape("dataset targets", inputs.len(), targets.len()));
        }
        let d = inputs[0].len();
        if d == 0 {
            return Err(NzkError::Config("dataset inputs must have positive dimension".into()));
        }
        for row in &inputs {
            if row.len() != d {
                return Err(NzkError::shape("dataset row", d, row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(NzkError::Config("dataset inputs must be finite".into()));
            }
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(NzkError::Config("dataset targets must be finite".into()));
        }
        Ok(Self {
            inputs,
            targets,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len()).max(1);
        Dataset {
            inputs: self.inputs[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
            meta: self.meta.clone(),
        }
    }
}

/// Linear teacher f*(x) = ⟨θ*, x⟩ + δ with δ ~ 𝒩(0, noise_sigma²).
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub theta_star: Vec<f64>,
    pub noise_sigma: f64,
}

impl TeacherSpec {
    /// The 2-D teacher 7·x₁ + 2·x₂.
    pub fn planar(noise_sigma: f64) -> Self {
        Self {
            theta_star: vec![7.0, 2.0],
            noise_sigma,
        }
    }
}

/// Uniform points on the unit sphere in ℝ^d labelled by a noisy linear teacher.
pub fn gen_teacher_student(d: usize, n: usize, teacher: &TeacherSpec, seed: u64) -> Result<Dataset> {
    if d < 2 {
        return Err(NzkError::Config(format!("teacher-student data needs d ≥ 2, got {d}")));
    }
    if n == 0 {
        return Err(NzkError::Config("teacher-student data needs N ≥ 1".into()));
    }
    if teacher.theta_star.len() != d {
        return Err(NzkError::shape("teacher weights", d, teacher.theta_star.len()));
    }
    if !(teacher.noise_sigma >= 0.0) {
        return Err(NzkError::Config("teacher noise must be non-negative".into()));
    }
    let mut rng = stream(seed, Purpose::DataInputs, 0);
    let mut inputs = Vec::with_capacity(n);
    while inputs.len() < n {
        let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = norm_sq(&x).sqrt();
        if norm < 1e-12 {
            continue;
        }
        x.iter_mut().for_each(|v| *v /= norm);
        inputs.push(x);
    }
    let mut noise_rng = stream(seed, Purpose::DataNoise, 0);
    let targets = inputs
        .iter()
        .map(|x| {
            let delta: f64 = StandardNormal.sample(&mut noise_rng);
            dot(&teacher.theta_star, x) + teacher.noise_sigma * delta
        })
        .collect();
    Dataset::new(
        inputs,
        targets,
        DatasetMeta {
            source: "teacher_student".into(),
            normalization: "unit_sphere".into(),
            seed: Some(seed),
            notes: vec![("noise_sigma".into(), teacher.noise_sigma.to_string())],
        },
    )
}

// ---------------------------------------------------------------------------
// IDX

/// Raw IDX image tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn err(&self, message: impl Into<String>) -> NzkError {
        NzkError::ParseBytes {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err("truncated header"))?;
        let v = u32::from_be_bytes(chunk.try_into().expect("4 bytes"));
        self.pos = end;
        Ok(v)
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or_else(|| self.err("size overflow"))?;
        if end > self.bytes.len() {
            return Err(self.err(format!(
                "truncated payload: need {len} bytes, {} available",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Parse an IDX3 image file (`0x00000803`, big-endian count/rows/cols, u8 pixels).
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<IdxImages> {
    let mut r = ByteReader { path, bytes, pos: 0 };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(count * rows * cols)?.to_vec();
    Ok(IdxImages { rows, cols, pixels })
}

/// Parse an IDX1 label file (`0x00000801`, big-endian count, u8 labels).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = ByteReader { path, bytes, pos: 0 };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = r.u32_be()? as usize;
    Ok(r.take(count)?.to_vec())
}

/// Bilinear resampling with pixel-centre alignment. A constant field stays constant.
pub fn bilinear_resize(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    fn coords(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    }
    let ry = coords(rows, out_rows);
    let rx = coords(cols, out_cols);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for &(y0, y1, wy) in &ry {
        for &(x0, x1, wx) in &rx {
            let top = src[y0 * cols + x0] * (1.0 - wx) + src[y0 * cols + x1] * wx;
            let bottom = src[y1 * cols + x0] * (1.0 - wx) + src[y1 * cols + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Options for [`load_mnist_idx`].
#[derive(Debug, Clone, PartialEq)]
pub struct MnistOptions {
    pub digits: Vec<u8>,
    pub max_per_class: Option<usize>,
    pub target_side: usize,
}

impl Default for MnistOptions {
    fn default() -> Self {
        Self {
            digits: vec![0, 1],
            max_per_class: None,
            target_side: 8,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| NzkError::io(path, e))
}

/// Load MNIST-style IDX files, keep the requested digits, scale pixels to
/// [0, 1], resample to `target_side`² by bilinear interpolation and flatten
/// row-major.
///
/// With exactly two digits the targets are −1 for the first and +1 for the
/// second; otherwise the digit value itself is the target.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, opts: &MnistOptions) -> Result<Dataset> {
    if opts.digits.is_empty() {
        return Err(NzkError::Config("at least one digit class is required".into()));
    }
    if opts.target_side == 0 {
        return Err(NzkError::Config("target side must be positive".into()));
    }
    let images = parse_idx_images(images_path, &read_file(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_file(labels_path)?)?;
    if images.count() != labels.len() {
        return Err(NzkError::ParseBytes {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {} images", labels.len(), images.count()),
        });
    }
    let binary = opts.digits.len() == 2;
    let mut per_class = vec![0usize; opts.digits.len()];
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let Some(class) = opts.digits.iter().position(|&d| d == label) else {
            continue;
        };
        if let Some(cap) = opts.max_per_class {
            if per_class[class] >= cap {
                continue;
            }
        }
        per_class[class] += 1;
        let scaled: Vec<f64> = images.image(i).iter().map(|&p| p as f64 / 255.0).collect();
        inputs.push(bilinear_resize(
            &scaled,
            images.rows,
            images.cols,
            opts.target_side,
            opts.target_side,
        ));
        targets.push(if binary {
            if class == 0 {
                -1.0
            } else {
                1.0
            }
        } else {
            label as f64
        });
    }
    if inputs.is_empty() {
        return Err(NzkError::Config(format!(
            "no images with labels {:?} in {}",
            opts.digits,
            labels_path.display()
        )));
    }
    let digits = opts.digits.iter().map(u8::to_string).collect::<Vec<_>>().join(" ");
    Dataset::new(
        inputs,
        targets,
        DatasetMeta {
            source: images_path.display().to_string(),
            normalization: format!("pixels/255, bilinear {0}x{0}", opts.target_side),
            seed: None,
            notes: vec![
                ("digits".into(), digits),
                (
                    "label_encoding".into(),
                    if binary { "first=-1,second=+1" } else { "digit value" }.into(),
                ),
            ],
        },
    )
}

// ---------------------------------------------------------------------------
// CSV

/// Format with 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with header `x_0,…,x_{d-1},y`.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let d = ds.dim();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "x_{j},");
    }
    out.push_str("y\n");
    for (x, y) in ds.inputs.iter().zip(&ds.targets) {
        for v in x {
            out.push_str(&fmt_f64(*v));
            out.push(',');
        }
        out.push_str(&fmt_f64(*y));
        out.push('\n');
    }
    out
}

pub fn write_csv_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_csv(ds)).map_err(|e| NzkError::io(path, e))
}

pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| NzkError::io(path, e))?;
    parse_csv_dataset(path.to_path_buf(), &text)
}

pub fn parse_csv_dataset(path: PathBuf, text: &str) -> Result<Dataset> {
    let err = |line: u64, message: String| NzkError::ParseLine {
        path: path.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .clone();
    let width = header.len();
    if width < 2 {
        return Err(err(1, "header must be x_0,...,x_{d-1},y".into()));
    }
    for (j, name) in header.iter().enumerate() {
        let expected = if j + 1 == width { "y".to_string() } else { format!("x_{j}") };
        if name != expected {
            return Err(err(1, format!("column {j} is `{name}`, expected `{expected}`")));
        }
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(err(line, format!("expected {width} fields, found {}", record.len())));
        }
        let mut values = Vec::with_capacity(width);
        for cell in record.iter() {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(line, format!("non-numeric cell `{cell}`")))?;
            values.push(v);
        }
        targets.push(values.pop().expect("width ≥ 2"));
        inputs.push(values);
    }
    if inputs.is_empty() {
        return Err(err(2, "no data rows".into()));
    }
    Dataset::new(
        inputs,
        targets,
        DatasetMeta {
            source: path.display().to_string(),
            normalization: "as provided".into(),
            seed: None,
            notes: Vec::new(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn idx_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&rows.to_be_bytes());
        out.extend_from_slice(&cols.to_be_bytes());
        for img in images {
            out.extend_from_slice(img);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn teacher_targets() {
        let ds = gen_teacher_student(2, 16, &TeacherSpec::planar(0.0), 3).unwrap();
        for (x, y) in ds.inputs.iter().zip(&ds.targets) {
            assert!((norm_sq(x).sqrt() - 1.0).abs() <= 1e-12);
            assert!((y - (7.0 * x[0] + 2.0 * x[1])).abs() < 1e-12);
        }
        let at_e1 = dot(&[7.0, 2.0], &[1.0, 0.0]);
        assert_eq!(at_e1, 7.0);

        let zero = TeacherSpec {
            theta_star: vec![0.0; 3],
            noise_sigma: 0.0,
        };
        let ds = gen_teacher_student(3, 10, &zero, 1).unwrap();
        assert!(ds.targets.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn teacher_target_mean_is_zero_by_symmetry() {
        let ds = gen_teacher_student(2, 10_000, &TeacherSpec::planar(0.0), 9).unwrap();
        let (mean, se) = crate::stats::mean_se(&ds.targets);
        assert!(mean.abs() <= 5.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn planar_angles_are_uniform() {
        let n = 100_000;
        let ds = gen_teacher_student(2, n, &TeacherSpec::planar(0.0), 21).unwrap();
        let mut bins = [0usize; 20];
        for x in &ds.inputs {
            let a = x[1].atan2(x[0]) + PI;
            bins[((a / (2.0 * PI) * 20.0) as usize).min(19)] += 1;
        }
        let expected = n as f64 / 20.0;
        let se = (n as f64 * (1.0 / 20.0) * (19.0 / 20.0)).sqrt();
        for (k, &c) in bins.iter().enumerate() {
            assert!((c as f64 - expected).abs() <= 5.0 * se, "bin {k}: {c}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let t = TeacherSpec {
            theta_star: vec![1.0, -2.0, 0.5],
            noise_sigma: 0.1,
        };
        let a = gen_teacher_student(3, 20, &t, 5).unwrap();
        let b = gen_teacher_student(3, 20, &t, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_teacher_student(3, 20, &t, 6).unwrap());
    }

    #[test]
    fn bilinear_constant_field_is_constant() {
        let src = vec![1.0; 28 * 28];
        let out = bilinear_resize(&src, 28, 28, 8, 8);
        assert_eq!(out.len(), 64);
        assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn idx_parse_and_filter() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images");
        let lbl_path = dir.path().join("labels");
        let zero = vec![0u8; 784];
        let full = vec![255u8; 784];
        let other = vec![7u8; 784];
        fs::write(&img_path, idx_images(&[zero, full, other], 28, 28)).unwrap();
        fs::write(&lbl_path, idx_labels(&[0, 1, 5])).unwrap();
        let ds = load_mnist_idx(&img_path, &lbl_path, &MnistOptions::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 64);
        assert_eq!(ds.targets, vec![-1.0, 1.0]);
        assert!(ds.inputs[0].iter().all(|&v| v == 0.0));
        assert!(ds.inputs[1].iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn idx_golden_pixels() {
        let mut img = vec![0u8; 4];
        img.copy_from_slice(&[0, 64, 128, 255]);
        let bytes = idx_images(&[img], 2, 2);
        let parsed = parse_idx_images(Path::new("mem"), &bytes).unwrap();
        assert_eq!((parsed.rows, parsed.cols, parsed.count()), (2, 2, 1));
        assert_eq!(parsed.image(0), &[0, 64, 128, 255]);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let mut bytes = idx_images(&[vec![0u8; 4]], 2, 2);
        bytes[3] = 0x01;
        match parse_idx_images(Path::new("bad"), &bytes) {
            Err(NzkError::ParseBytes { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let truncated = &idx_images(&[vec![0u8; 4]], 2, 2)[..18];
        match parse_idx_images(Path::new("short"), truncated) {
            Err(NzkError::ParseBytes { offset: 16, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_idx_labels(Path::new("hdr"), &[0, 0, 8]) {
            Err(NzkError::ParseBytes { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images");
        let lbl_path = dir.path().join("labels");
        fs::write(&img_path, idx_images(&[vec![0u8; 784]], 28, 28)).unwrap();
        fs::write(&lbl_path, idx_labels(&[0, 1])).unwrap();
        assert!(matches!(
            load_mnist_idx(&img_path, &lbl_path, &MnistOptions::default()),
            Err(NzkError::ParseBytes { .. })
        ));
    }

    #[test]
    fn csv_round_trip_text() {
        let text = "x_0,x_1,y\n1.0000000000000000e0,2.0000000000000000e0,3.0000000000000000e0\n\
                    -5.0000000000000000e-1,2.5000000000000000e-1,0.0000000000000000e0\n";
        let ds = parse_csv_dataset("mem.csv".into(), text).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 2));
        assert_eq!(dataset_to_csv(&ds), text);
    }

    #[test]
    fn csv_errors() {
        let empty = parse_csv_dataset("e.csv".into(), "x_0,y\n");
        assert!(matches!(empty, Err(NzkError::ParseLine { .. })));
        match parse_csv_dataset("r.csv".into(), "x_0,x_1,y\n1,2,3\n1,2\n") {
            Err(NzkError::ParseLine { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv_dataset("n.csv".into(), "x_0,y\n1,2\nabc,3\n") {
            Err(NzkError::ParseLine { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_csv_dataset("h.csv".into(), "a,b\n1,2\n").is_err());
    }

    #[test]
    fn generated_dataset_survives_export() {
        let ds = gen_teacher_student(4, 12, &TeacherSpec {
            theta_star: vec![1.0, 2.0, 3.0, 4.0],
            noise_sigma: 0.3,
        }, 77)
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        write_csv_dataset(&ds, &path).unwrap();
        let back = load_csv_dataset(&path).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.targets, ds.targets);
    }
}
