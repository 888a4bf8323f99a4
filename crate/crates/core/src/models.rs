//! Scalar-valued models and finite-difference tangent estimates.
//!
//! All models expose evaluation at an arbitrary parameter vector so that the
//! estimators can perturb θ without mutating the model. Parameters are always
//! a flat `[f64]`; for layered models the order is layer-major and, inside a
//! layer, the weight matrix in row-major (output-major) order followed by the
//! bias vector.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::directions::DirectionSpec;
use crate::error::{NzkError, Result};
use crate::linalg::{axpy, dot, offset};
use crate::rng::{stream, Purpose};

/// Default finite-difference step.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Tolerance used by the zeroth-order homogeneity check.
pub const HOMOGENEITY_TOL: f64 = 1e-10;

pub trait Model: Send + Sync {
    fn input_dim(&self) -> usize;

    fn param_count(&self) -> usize;

    /// Reference parameters (the initialization for training).
    fn params(&self) -> &[f64];

    /// f(x; θ) at an arbitrary θ.
    fn eval_at(&self, theta: &[f64], x: &[f64]) -> Result<f64>;

    /// ∂f/∂θ at (x, θ).
    fn param_gradient(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>>;

    fn kind(&self) -> &'static str;

    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.eval_at(self.params(), x)
    }

    fn check_shapes(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(NzkError::shape("parameter vector", self.param_count(), theta.len()));
        }
        if x.len() != self.input_dim() {
            return Err(NzkError::shape("model input", self.input_dim(), x.len()));
        }
        Ok(())
    }
}

fn standard_normal_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Purpose::Init, 0);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

// ---------------------------------------------------------------------------
// Linear

/// f(x; θ) = ⟨θ, x⟩
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub theta: Vec<f64>,
}

impl LinearModel {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(vec![0.0; d])
    }

    /// θ ~ 𝒩(0, I_d)
    pub fn random(d: usize, seed: u64) -> Self {
        Self::new(standard_normal_vec(d, seed))
    }
}

impl Model for LinearModel {
    fn input_dim(&self) -> usize {
        self.theta.len()
    }

    fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn eval_at(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_shapes(theta, x)?;
        Ok(dot(theta, x))
    }

    fn param_gradient(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(theta, x)?;
        Ok(x.to_vec())
    }

    fn kind(&self) -> &'static str {
        "linear"
    }
}

// ---------------------------------------------------------------------------
// Two-layer linear network

/// f(x; θ) = ⟨W₁·w₂, x⟩ with W₁ ∈ ℝ^{n×ω}, w₂ ∈ ℝ^ω.
///
/// Parameters are W₁ row-major (n·ω entries) followed by w₂ (ω entries).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerLinear {
    n: usize,
    width: usize,
    params: Vec<f64>,
}

impl TwoLayerLinear {
    pub fn new(n: usize, width: usize, w1: &[f64], w2: &[f64]) -> Result<Self> {
        if n == 0 || width == 0 {
            return Err(NzkError::Config("two-layer network needs n, width ≥ 1".into()));
        }
        if w1.len() != n * width {
            return Err(NzkError::shape("first-layer weights", n * width, w1.len()));
        }
        if w2.len() != width {
            return Err(NzkError::shape("second-layer weights", width, w2.len()));
        }
        let mut params = w1.to_vec();
        params.extend_from_slice(w2);
        Ok(Self { n, width, params })
    }

    pub fn random(n: usize, width: usize, seed: u64) -> Result<Self> {
        let p = standard_normal_vec(n * width + width, seed);
        Self::new(n, width, &p[..n * width], &p[n * width..])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of first-layer parameters; z⁽¹⁾ is `z[..split]`.
    pub fn split(&self) -> usize {
        self.n * self.width
    }
}

impl Model for TwoLayerLinear {
    fn input_dim(&self) -> usize {
        self.n
    }

    fn param_count(&self) -> usize {
        self.n * self.width + self.width
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn eval_at(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_shapes(theta, x)?;
        let (w1, w2) = theta.split_at(self.split());
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let row = &w1[i * self.width..(i + 1) * self.width];
            acc += xi * dot(row, w2);
        }
        Ok(acc)
    }

    fn param_gradient(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(theta, x)?;
        let (w1, w2) = theta.split_at(self.split());
        let mut grad = vec![0.0; self.param_count()];
        for (i, xi) in x.iter().enumerate() {
            for k in 0..self.width {
                grad[i * self.width + k] = xi * w2[k];
                grad[self.split() + k] += xi * w1[i * self.width + k];
            }
        }
        Ok(grad)
    }

    fn kind(&self) -> &'static str {
        "two_layer"
    }
}

// ---------------------------------------------------------------------------
// Activations and MLP

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// max(αx, x) with α ∈ (0, 1)
    LeakyRelu(f64),
    /// kx
    Linear(f64),
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(alpha) => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Linear(k) => k * x,
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(alpha) => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Linear(k) => k,
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(alpha) if !(alpha > 0.0 && alpha < 1.0) => Err(
                NzkError::Config(format!("leaky_relu alpha must lie in (0, 1), got {alpha}")),
            ),
            Activation::Linear(k) if !k.is_finite() => {
                Err(NzkError::Config("linear activation slope must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Parse `relu`, `tanh`, `leaky_relu` / `linear` with the given parameter.
    pub fn parse(name: &str, param: Option<f64>) -> Result<Self> {
        let act = match name.trim().to_ascii_lowercase().as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "leaky_relu" => Activation::LeakyRelu(param.unwrap_or(0.1)),
            "linear" => Activation::Linear(param.unwrap_or(1.0)),
            other => return Err(NzkError::Config(format!("unknown activation `{other}`"))),
        };
        act.validate()?;
        Ok(act)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu(a) => write!(f, "leaky_relu({a})"),
            Activation::Linear(k) => write!(f, "linear({k})"),
            Activation::Tanh => f.write_str("tanh"),
        }
    }
}

impl FromStr for Activation {
    type Err = NzkError;

    fn from_str(s: &str) -> Result<Self> {
        Activation::parse(s, None)
    }
}

/// Fully connected network with scalar output. The activation follows every
/// hidden layer; the output layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    bias: bool,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(widths: Vec<usize>, activation: Activation, bias: bool, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NzkError::Config("an MLP needs at least input and output widths".into()));
        }
        if widths.contains(&0) {
            return Err(NzkError::Config("layer widths must be positive".into()));
        }
        if *widths.last().unwrap() != 1 {
            return Err(NzkError::Config("MLP output width must be 1".into()));
        }
        activation.validate()?;
        let count = Self::count_params(&widths, bias);
        if params.len() != count {
            return Err(NzkError::shape("MLP parameters", count, params.len()));
        }
        Ok(Self {
            widths,
            activation,
            bias,
            params,
        })
    }

    /// i.i.d. standard normal weights (and biases).
    pub fn random(widths: Vec<usize>, activation: Activation, bias: bool, seed: u64) -> Result<Self> {
        let count = Self::count_params(&widths, bias);
        Self::new(widths, activation, bias, standard_normal_vec(count, seed))
    }

    pub fn count_params(widths: &[usize], bias: bool) -> usize {
        widths
            .windows(2)
            .map(|w| w[0] * w[1] + if bias { w[1] } else { 0 })
            .sum()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    /// Split a flat parameter vector into per-layer (weights, bias) slices.
    pub fn unflatten<'a>(&self, theta: &'a [f64]) -> Vec<(&'a [f64], &'a [f64])> {
        let mut out = Vec::with_capacity(self.widths.len() - 1);
        let mut off = 0;
        for w in self.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &theta[off..off + fan_in * fan_out];
            off += fan_in * fan_out;
            let b = if self.bias {
                let b = &theta[off..off + fan_out];
                off += fan_out;
                b
            } else {
                &theta[off..off]
            };
            out.push((weights, b));
        }
        out
    }

    /// Inverse of [`Mlp::unflatten`].
    pub fn flatten(layers: &[(&[f64], &[f64])]) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Pre-activations and activations of every layer (index 0 is the input).
    fn forward(&self, theta: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let layers = self.unflatten(theta);
        let last = layers.len() - 1;
        let mut pre = Vec::with_capacity(layers.len());
        let mut act = Vec::with_capacity(layers.len() + 1);
        act.push(x.to_vec());
        for (l, (w, b)) in layers.iter().enumerate() {
            let input = &act[l];
            let fan_in = input.len();
            let fan_out = self.widths[l + 1];
            let mut z = vec![0.0; fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                *zo = dot(&w[o * fan_in..(o + 1) * fan_in], input) + b.get(o).copied().unwrap_or(0.0);
            }
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            act.push(a);
        }
        (pre, act)
    }

    /// Hidden pre-activations for an input; used to keep tests away from kinks.
    pub fn hidden_preactivations(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(theta, x)?;
        let (pre, _) = self.forward(theta, x);
        Ok(pre[..pre.len() - 1].iter().flatten().copied().collect())
    }
}

impl Model for Mlp {
    fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn eval_at(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_shapes(theta, x)?;
        let (_, act) = self.forward(theta, x);
        Ok(act.last().unwrap()[0])
    }

    // Reverse mode over the tiny network.
    fn param_gradient(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(theta, x)?;
        let (pre, act) = self.forward(theta, x);
        let layers = self.unflatten(theta);
        let n_layers = layers.len();

        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + if self.bias { w[1] } else { 0 };
        }

        let mut grad = vec![0.0; theta.len()];
        // δ for the output layer: ∂f/∂z = 1.
        let mut delta = vec![1.0];
        for l in (0..n_layers).rev() {
            let fan_in = self.widths[l];
            let fan_out = self.widths[l + 1];
            let input = &act[l];
            let base = offsets[l];
            for o in 0..fan_out {
                let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                axpy(delta[o], input, row);
                if self.bias {
                    grad[base + fan_in * fan_out + o] = delta[o];
                }
            }
            if l > 0 {
                let w = layers[l].0;
                let mut next = vec![0.0; fan_in];
                for (i, ni) in next.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for o in 0..fan_out {
                        s += w[o * fan_in + i] * delta[o];
                    }
                    *ni = s * self.activation.derivative(pre[l - 1][i]);
                }
                delta = next;
            }
        }
        Ok(grad)
    }

    fn kind(&self) -> &'static str {
        "mlp"
    }
}

// ---------------------------------------------------------------------------
// Finite-difference tangents

/// A perturbation ε·ζ of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub epsilon: f64,
    pub direction: Vec<f64>,
}

impl Perturbation {
    pub fn new(epsilon: f64, direction: Vec<f64>) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(NzkError::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon, direction })
    }
}

/// Two-point estimate of the rate of change of f along a direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentEstimate {
    /// [f(x; θ+εζ) − f(x; θ−εζ)] / (2ε)
    pub factor: f64,
    /// factor · ζ
    pub vector: Vec<f64>,
}

/// Symmetric finite-difference factor [f(x; θ+εζ) − f(x; θ−εζ)] / (2ε).
pub fn fd_factor<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    epsilon: f64,
    direction: &[f64],
    x: &[f64],
) -> Result<f64> {
    if direction.len() != theta.len() {
        return Err(NzkError::shape("direction", theta.len(), direction.len()));
    }
    let plus = offset(theta, epsilon, direction);
    let minus = offset(theta, -epsilon, direction);
    Ok((model.eval_at(&plus, x)? - model.eval_at(&minus, x)?) / (2.0 * epsilon))
}

/// Zeroth-order tangent estimate at input `x`.
pub fn zo_tangent<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    perturbation: &Perturbation,
    x: &[f64],
) -> Result<TangentEstimate> {
    let factor = fd_factor(model, theta, perturbation.epsilon, &perturbation.direction, x)?;
    let vector = perturbation.direction.iter().map(|v| factor * v).collect();
    Ok(TangentEstimate { factor, vector })
}

// ---------------------------------------------------------------------------
// Linearized network

#[derive(Debug, Clone, PartialEq)]
struct CachedInput {
    f0: f64,
    tangent: Vec<f64>,
}

/// First-order surrogate of an MLP around θ₀ whose tangent feature is the
/// Monte Carlo estimate ĝ(x) = mean over u of [f(x;θ₀+εu) − f(x;θ₀−εu)]/(2ε)·u.
///
/// Tangents are cached for a fixed set of inputs at construction; evaluating
/// an uncached input is a precondition error.
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    base: Mlp,
    theta0: Vec<f64>,
    epsilon: f64,
    m_u: usize,
    cache: Vec<CachedInput>,
    index: HashMap<Vec<u64>, usize>,
}

fn input_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

impl LinearizedModel {
    pub fn base(&self) -> &Mlp {
        &self.base
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn m_u(&self) -> usize {
        self.m_u
    }

    fn lookup(&self, x: &[f64]) -> Result<&CachedInput> {
        self.index
            .get(&input_key(x))
            .map(|&i| &self.cache[i])
            .ok_or_else(|| NzkError::Precondition("input has no cached tangent feature".into()))
    }

    /// Cached ĝ(x).
    pub fn tangent(&self, x: &[f64]) -> Result<&[f64]> {
        Ok(&self.lookup(x)?.tangent)
    }

    /// Cached f(x; θ₀).
    pub fn base_value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.lookup(x)?.f0)
    }
}

impl Model for LinearizedModel {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn param_count(&self) -> usize {
        self.theta0.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta0
    }

    fn eval_at(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_shapes(theta, x)?;
        let entry = self.lookup(x)?;
        let mut acc = 0.0;
        for ((g, t), t0) in entry.tangent.iter().zip(theta).zip(&self.theta0) {
            acc += g * (t - t0);
        }
        Ok(entry.f0 + acc)
    }

    fn param_gradient(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(theta, x)?;
        Ok(self.lookup(x)?.tangent.clone())
    }

    fn kind(&self) -> &'static str {
        "linearized"
    }
}

/// Linearize `base` around θ₀ with `m_u` directions u drawn from `spec`.
///
/// The same u draws are shared by every input, so the estimated features are
/// mutually consistent.
pub fn linearize(
    base: &Mlp,
    theta0: &[f64],
    epsilon: f64,
    m_u: usize,
    spec: &DirectionSpec,
    inputs: &[Vec<f64>],
    seed: u64,
) -> Result<LinearizedModel> {
    if m_u == 0 {
        return Err(NzkError::Config("linearization needs m_u ≥ 1".into()));
    }
    let moments = spec.exact_moments()?;
    if spec.mean != 0.0 || (moments.m2 - 1.0).abs() > 1e-12 {
        return Err(NzkError::Precondition(
            "linearization directions must have zero mean and unit variance".into(),
        ));
    }
    let spec = spec.with_dim(theta0.len());
    let mut rng = stream(seed, Purpose::Linearize, 0);
    let mut directions = Vec::with_capacity(m_u);
    for _ in 0..m_u {
        directions.push(spec.sample(&mut rng)?);
    }
    linearize_with_directions(base, theta0, epsilon, inputs, &directions)
}

/// Linearize with explicitly supplied directions u.
pub fn linearize_with_directions(
    base: &Mlp,
    theta0: &[f64],
    epsilon: f64,
    inputs: &[Vec<f64>],
    directions: &[Vec<f64>],
) -> Result<LinearizedModel> {
    if directions.is_empty() {
        return Err(NzkError::Config("linearization needs m_u ≥ 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(NzkError::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let d = base.param_count();
    if theta0.len() != d {
        return Err(NzkError::shape("theta0", d, theta0.len()));
    }
    let mut tangents = vec![vec![0.0; d]; inputs.len()];
    for u in directions {
        if u.len() != d {
            return Err(NzkError::shape("linearization direction", d, u.len()));
        }
        let plus = offset(theta0, epsilon, u);
        let minus = offset(theta0, -epsilon, u);
        for (x, g) in inputs.iter().zip(tangents.iter_mut()) {
            let factor = (base.eval_at(&plus, x)? - base.eval_at(&minus, x)?) / (2.0 * epsilon);
            axpy(factor, u, g);
        }
    }
    let inv = 1.0 / directions.len() as f64;
    let mut cache = Vec::with_capacity(inputs.len());
    let mut index = HashMap::with_capacity(inputs.len());
    for (x, mut g) in inputs.iter().zip(tangents) {
        g.iter_mut().for_each(|v| *v *= inv);
        let key = input_key(x);
        if index.contains_key(&key) {
            continue;
        }
        index.insert(key, cache.len());
        cache.push(CachedInput {
            f0: base.eval_at(theta0, x)?,
            tangent: g,
        });
    }
    Ok(LinearizedModel {
        base: base.clone(),
        theta0: theta0.to_vec(),
        epsilon,
        m_u: directions.len(),
        cache,
        index,
    })
}

// ---------------------------------------------------------------------------
// Structural checks

/// Full and per-layer finite differences of a two-layer linear network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDecomposition {
    pub full: f64,
    pub layer1: f64,
    pub layer2: f64,
    /// |full − (layer1 + layer2)|
    pub discrepancy: f64,
}

impl LayerDecomposition {
    /// Discrepancy relative to the largest term (absolute when all vanish).
    pub fn relative(&self) -> f64 {
        let scale = self.full.abs().max(self.layer1.abs()).max(self.layer2.abs());
        if scale == 0.0 {
            self.discrepancy
        } else {
            self.discrepancy / scale
        }
    }
}

/// Compare the full-parameter finite difference against the sum of the
/// layer-wise ones (each perturbing one layer while the other is held fixed).
pub fn check_layer_decomposition(
    model: &TwoLayerLinear,
    x: &[f64],
    epsilon: f64,
    z: &[f64],
) -> Result<LayerDecomposition> {
    let theta = model.params();
    if z.len() != theta.len() {
        return Err(NzkError::shape("direction", theta.len(), z.len()));
    }
    let split = model.split();
    let full = fd_factor(model, theta, epsilon, z, x)?;
    let mut z1 = z.to_vec();
    z1[split..].iter_mut().for_each(|v| *v = 0.0);
    let mut z2 = z.to_vec();
    z2[..split].iter_mut().for_each(|v| *v = 0.0);
    let layer1 = fd_factor(model, theta, epsilon, &z1, x)?;
    let layer2 = fd_factor(model, theta, epsilon, &z2, x)?;
    Ok(LayerDecomposition {
        full,
        layer1,
        layer2,
        discrepancy: (full - (layer1 + layer2)).abs(),
    })
}

/// |φ(x) − [(φ(x+ε) − φ(x−ε))/(2ε)]·x|
pub fn zo_homogeneity_gap(activation: Activation, x: f64, epsilon: f64) -> f64 {
    let slope = (activation.apply(x + epsilon) - activation.apply(x - epsilon)) / (2.0 * epsilon);
    (activation.apply(x) - slope * x).abs()
}

/// Whether φ(x) = [(φ(x+ε) − φ(x−ε))/(2ε)]·x holds to 1e-10.
pub fn check_zo_homogeneous(activation: Activation, x: f64, epsilon: f64) -> Result<bool> {
    if !(epsilon > 0.0) {
        return Err(NzkError::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(zo_homogeneity_gap(activation, x, epsilon) <= HOMOGENEITY_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_eval_examples() {
        let m = LinearModel::new(vec![7.0, 2.0]);
        assert_eq!(m.eval(&[1.0, 0.0]).unwrap(), 7.0);
        let z = LinearModel::zeros(3);
        assert_eq!(z.eval(&[0.3, -4.0, 9.0]).unwrap(), 0.0);
        assert!(matches!(m.eval(&[1.0]), Err(NzkError::Shape { .. })));
    }

    #[test]
    fn two_layer_eval_example() {
        let m = TwoLayerLinear::new(2, 2, &[1.0, 0.0, 0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(m.eval(&[3.0, 4.0]).unwrap(), 7.0);
        assert_eq!(m.param_count(), 2 * 2 + 2);
    }

    #[test]
    fn linear_fd_factor_is_inner_product() {
        let m = LinearModel::new(vec![0.3, -1.2, 4.0]);
        let zeta = [0.5, 2.0, -1.0];
        let x = [1.0, -0.5, 0.25];
        let p = Perturbation::new(1e-3, zeta.to_vec()).unwrap();
        let t = zo_tangent(&m, m.params(), &p, &x).unwrap();
        assert!((t.factor - dot(&zeta, &x)).abs() < 1e-12);
        let zero = Perturbation::new(1e-3, vec![0.0; 3]).unwrap();
        assert!(zo_tangent(&m, m.params(), &zero, &x).unwrap().vector.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_fd_factor_converges_away_from_kinks() {
        let mlp = Mlp::random(vec![3, 6, 4, 1], Activation::Relu, true, 5).unwrap();
        let theta = mlp.params().to_vec();
        let mut rng = stream(99, Purpose::Check, 0);
        let zeta: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = [0.4, -0.9, 1.3];
        let pre = mlp.hidden_preactivations(&theta, &x).unwrap();
        // The widest perturbation moves a preactivation by at most
        // ε·‖ζ‖₁·max(1, |input|, |hidden|); keep far from zero.
        assert!(pre.iter().all(|v| v.abs() > 0.05), "fixture sits near a kink: {pre:?}");
        // Inside one linear region f is a cubic in ε, so the symmetric
        // difference is exact up to an O(ε²) term.
        let g = dot(&mlp.param_gradient(&theta, &x).unwrap(), &zeta);
        let a = fd_factor(&mlp, &theta, 1e-3, &zeta, &x).unwrap();
        let b = fd_factor(&mlp, &theta, 1e-5, &zeta, &x).unwrap();
        assert!((a - g).abs() <= 1e-4, "{a} vs {g}");
        assert!((b - g).abs() <= 1e-8, "{b} vs {g}");
        assert!((b - g).abs() < (a - g).abs());
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh, Activation::LeakyRelu(0.2)] {
            let mlp = Mlp::random(vec![4, 5, 3, 1], act, true, 17).unwrap();
            let theta = mlp.params().to_vec();
            let x = [0.2, -0.7, 0.5, 1.1];
            let grad = mlp.param_gradient(&theta, &x).unwrap();
            for k in 0..theta.len() {
                let mut e = vec![0.0; theta.len()];
                e[k] = 1.0;
                let fd = fd_factor(&mlp, &theta, 1e-6, &e, &x).unwrap();
                assert!((fd - grad[k]).abs() < 1e-6, "{act} param {k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn mnist_network_has_711_parameters() {
        assert_eq!(Mlp::count_params(&[64, 10, 5, 1], true), 711);
    }

    #[test]
    fn flatten_round_trips() {
        let mlp = Mlp::random(vec![3, 4, 2, 1], Activation::Relu, true, 8).unwrap();
        let layers = mlp.unflatten(mlp.params());
        assert_eq!(layers.len(), 3);
        assert_eq!(layers[0].0.len(), 12);
        assert_eq!(layers[0].1.len(), 4);
        let back = Mlp::flatten(&layers);
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            mlp.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn linearized_fixed_point() {
        let mlp = Mlp::random(vec![3, 4, 1], Activation::Relu, true, 3).unwrap();
        let inputs = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]];
        let lin = linearize(
            &mlp,
            mlp.params(),
            1e-3,
            8,
            &DirectionSpec::standard_gaussian(1),
            &inputs,
            4,
        )
        .unwrap();
        for x in &inputs {
            assert_eq!(lin.eval(x).unwrap(), mlp.eval(x).unwrap());
        }
        assert!(matches!(lin.eval(&[9.0, 9.0, 9.0]), Err(NzkError::Precondition(_))));
    }

    #[test]
    fn linearize_single_axis_direction() {
        let mlp = Mlp::random(vec![2, 3, 1], Activation::Tanh, true, 12).unwrap();
        let theta0 = mlp.params().to_vec();
        let d = theta0.len();
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        let x = vec![0.6, -0.4];
        let lin = linearize_with_directions(&mlp, &theta0, 1e-3, &[x.clone()], &[e1.clone()]).unwrap();
        let expected = fd_factor(&mlp, &theta0, 1e-3, &e1, &x).unwrap();
        let g = lin.tangent(&x).unwrap();
        assert_eq!(g[0], expected);
        assert!(g[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linearize_rejects_bad_inputs() {
        let mlp = Mlp::random(vec![2, 1], Activation::Relu, false, 1).unwrap();
        let spec = DirectionSpec::standard_gaussian(2);
        assert!(matches!(
            linearize(&mlp, mlp.params(), 1e-3, 0, &spec, &[vec![1.0, 0.0]], 0),
            Err(NzkError::Config(_))
        ));
        let wide = DirectionSpec::gaussian(0.0, 2.0, 2);
        assert!(matches!(
            linearize(&mlp, mlp.params(), 1e-3, 4, &wide, &[vec![1.0, 0.0]], 0),
            Err(NzkError::Precondition(_))
        ));
    }

    #[test]
    fn layer_decomposition_examples() {
        let m = TwoLayerLinear::random(2, 3, 21).unwrap();
        let mut rng = stream(21, Purpose::Check, 1);
        let z: Vec<f64> = (0..m.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = check_layer_decomposition(&m, &[0.7, -0.3], 1e-3, &z).unwrap();
        assert!(r.relative() <= 1e-10, "{r:?}");

        let zero = check_layer_decomposition(&m, &[0.7, -0.3], 1e-3, &vec![0.0; m.param_count()]).unwrap();
        assert_eq!(zero.discrepancy, 0.0);

        let narrow = TwoLayerLinear::random(3, 1, 2).unwrap();
        let z: Vec<f64> = (0..narrow.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = check_layer_decomposition(&narrow, &[1.0, 0.5, -0.25], 1e-3, &z).unwrap();
        assert!(r.discrepancy <= 1e-12, "{r:?}");
    }

    #[test]
    fn two_layer_gradient_matches_fd() {
        let m = TwoLayerLinear::random(3, 2, 6).unwrap();
        let theta = m.params().to_vec();
        let x = [0.5, -1.0, 2.0];
        let g = m.param_gradient(&theta, &x).unwrap();
        for k in 0..theta.len() {
            let mut e = vec![0.0; theta.len()];
            e[k] = 1.0;
            let fd = fd_factor(&m, &theta, 1e-4, &e, &x).unwrap();
            assert!((fd - g[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn homogeneity_examples() {
        assert!(check_zo_homogeneous(Activation::Relu, 0.5, 1e-3).unwrap());
        assert!(check_zo_homogeneous(Activation::Relu, 0.0, 1e-3).unwrap());
        assert!(check_zo_homogeneous(Activation::Relu, 0.0, 0.7).unwrap());
        assert!(!check_zo_homogeneous(Activation::Tanh, 2.0, 1e-3).unwrap());
        assert!(check_zo_homogeneous(Activation::Relu, 1.0, 0.0).is_err());
    }

    #[test]
    fn activation_parsing() {
        assert_eq!(Activation::parse("relu", None).unwrap(), Activation::Relu);
        assert_eq!(Activation::parse("leaky_relu", Some(0.5)).unwrap(), Activation::LeakyRelu(0.5));
        assert!(Activation::parse("leaky_relu", Some(1.5)).is_err());
        assert!(Activation::parse("gelu", None).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_in(len: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-3.0f64..3.0, len)
        }

        proptest! {
            #[test]
            fn linear_fd_exact(theta in vec_in(5), zeta in vec_in(5), x in vec_in(5), eps in 1e-6f64..1e-1) {
                let m = LinearModel::new(theta.clone());
                let f = fd_factor(&m, &theta, eps, &zeta, &x).unwrap();
                let exact = dot(&zeta, &x);
                let scale = 1.0 + theta.iter().zip(&x).map(|(a, b)| (a * b).abs()).sum::<f64>();
                prop_assert!((f - exact).abs() <= 1e-13 * scale / eps);
            }

            #[test]
            fn homogeneous_activations(x in -50.0f64..50.0, eps in 1e-6f64..1e-2, pick in 0u8..4) {
                prop_assume!(x.abs() > eps);
                let act = match pick {
                    0 => Activation::Relu,
                    1 => Activation::LeakyRelu(0.1),
                    2 => Activation::LeakyRelu(0.5),
                    _ => Activation::Linear(2.5),
                };
                // Rounding in the slope is ~ulp(x)/ε, and the slope is multiplied by x.
                prop_assert!(zo_homogeneity_gap(act, x, eps) <= 1e-15 * x.abs().max(1.0).powi(2) / eps);
            }

            #[test]
            fn mlp_flatten_bit_exact(seed in any::<u64>()) {
                let mlp = Mlp::random(vec![4, 3, 2, 1], Activation::Relu, true, seed).unwrap();
                let back = Mlp::flatten(&mlp.unflatten(mlp.params()));
                prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                mlp.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
