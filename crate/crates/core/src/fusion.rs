//! Token-level adaptive gated fusion of a generative and a semantic feature
//! stream, with hand-derived reverse-mode gradients.
//!
//! Per token `i` with streams `x = F_gen,i` and `y = F_sem,i` (both `D`-dim):
//!
//! ```text
//! g_i   = σ(w · [LN_gen(x); LN_sem(y)] + b)
//! out_i = (1 − g_i)·x + g_i·y
//! ```
//!
//! Gradients are those of `L = Σ upstream ⊙ out`, so any scalar loss can be
//! stacked on top by choosing `upstream = ∂loss/∂out`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::dim(format!(
                "affine weight {:?} with bias of length {}",
                weight.dim(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }
}

/// Affine layers with GELU between them; the last layer is affine only.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Affine>,
}

impl Mlp {
    pub fn new(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform `±1/√fan_in` weights and biases. Hidden width equals `d_out`.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, depth: usize, rng: &mut R) -> Result<Self> {
        if depth == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::dim("MLP depth and widths must be at least 1"));
        }
        let layers = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { d_in } else { d_out };
                let bound = 1.0 / (fan_in as f64).sqrt();
                Affine {
                    weight: Array2::from_shape_fn((d_out, fan_in), |_| rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_fn(d_out, |_| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut h = self.layers[0].apply(x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(gelu);
            h = layer.apply(h.view());
        }
        h
    }
}

/// Applies `mlp` to every token of a `T × N × D_in` tensor.
pub fn mlp_project(f: ArrayView3<f64>, mlp: &Mlp) -> Result<Array3<f64>> {
    let (t, n, d) = f.dim();
    if d != mlp.in_dim() {
        return Err(Error::dim(format!(
            "tokens have {d} features but projector expects {}",
            mlp.in_dim()
        )));
    }
    let mut out = Array3::zeros((t, n, mlp.out_dim()));
    for ti in 0..t {
        for ni in 0..n {
            out.slice_mut(s![ti, ni, ..]).assign(&mlp.apply(f.slice(s![ti, ni, ..])));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

impl LayerNorm {
    /// `γ = 1`, `β = 0`.
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        if self.beta.len() != self.gamma.len() {
            return Err(Error::dim("layer norm gain and bias lengths differ"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("layer norm epsilon must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Returns `(output, x̂, 1/σ)`.
    fn forward_cached(&self, x: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>, f64) {
        let d = x.len() as f64;
        let mean = x.sum() / d;
        let centered = x.mapv(|v| v - mean);
        let var = centered.mapv(|v| v * v).sum() / d;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let xhat = centered * inv_std;
        let out = &xhat * &self.gamma + &self.beta;
        (out, xhat, inv_std)
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.forward_cached(x).0
    }
}

/// `(x − mean)/√(var + ε)·γ + β` with population variance.
pub fn layer_norm(x: ArrayView1<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>, eps: f64) -> Array1<f64> {
    LayerNorm {
        gamma: gamma.to_owned(),
        beta: beta.to_owned(),
        eps,
    }
    .apply(x)
}

/// Layer norms and the scalar gate over their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub ln_gen: LayerNorm,
    pub ln_sem: LayerNorm,
    /// Length `2·D`: generative half first.
    pub weight: Array1<f64>,
    pub bias: f64,
}

impl GateParams {
    /// Identity layer norms and a zero gate (`g = 0.5`).
    pub fn neutral(d: usize) -> Self {
        Self {
            ln_gen: LayerNorm::identity(d),
            ln_sem: LayerNorm::identity(d),
            weight: Array1::zeros(2 * d),
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.ln_gen.dim()
    }

    fn validate(&self, d: usize) -> Result<()> {
        self.ln_gen.validate()?;
        self.ln_sem.validate()?;
        if self.ln_gen.dim() != d || self.ln_sem.dim() != d || self.weight.len() != 2 * d {
            return Err(Error::dim(format!(
                "gate parameters sized for D={} / {} / {} but tokens have D={d}",
                self.ln_gen.dim(),
                self.ln_sem.dim(),
                self.weight.len()
            )));
        }
        Ok(())
    }

    fn logit(&self, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        let d = a.len();
        self.weight.slice(s![..d]).dot(a) + self.weight.slice(s![d..]).dot(b) + self.bias
    }
}

/// Projectors plus the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub proj_gen: Mlp,
    pub proj_sem: Mlp,
    pub gate: GateParams,
}

impl FusionParams {
    pub fn init<R: Rng>(d_gen: usize, d_sem: usize, d_llm: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let proj_gen = Mlp::init(d_gen, d_llm, depth, rng)?;
        let proj_sem = Mlp::init(d_sem, d_llm, depth, rng)?;
        let bound = 1.0 / ((2 * d_llm) as f64).sqrt();
        let mut gate = GateParams::neutral(d_llm);
        gate.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
        Ok(Self {
            proj_gen,
            proj_sem,
            gate,
        })
    }

    /// Projects both raw streams to the shared width and fuses them.
    pub fn fuse(&self, raw_gen: ArrayView3<f64>, raw_sem: ArrayView3<f64>) -> Result<FusionIO> {
        let gen = mlp_project(raw_gen, &self.proj_gen)?;
        let sem = mlp_project(raw_sem, &self.proj_sem)?;
        gate_forward(gen, sem, &self.gate)
    }
}

/// Forward pass record; holds what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionIO {
    pub gen: Array3<f64>,
    pub sem: Array3<f64>,
    /// `T × N`, strictly inside `(0, 1)` for moderate logits.
    pub gates: Array2<f64>,
    pub fused: Array3<f64>,
}

/// Convex mix kept inside the hull of its endpoints despite rounding.
fn mix(x: f64, y: f64, g: f64) -> f64 {
    let v = (1.0 - g) * x + g * y;
    let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

pub fn gate_forward(gen: Array3<f64>, sem: Array3<f64>, params: &GateParams) -> Result<FusionIO> {
    if gen.dim() != sem.dim() {
        return Err(Error::dim(format!(
            "generative tokens {:?} vs semantic tokens {:?}",
            gen.dim(),
            sem.dim()
        )));
    }
    let (t, n, d) = gen.dim();
    params.validate(d)?;
    let mut gates = Array2::zeros((t, n));
    let mut fused = Array3::zeros((t, n, d));
    for ti in 0..t {
        for ni in 0..n {
            let x = gen.slice(s![ti, ni, ..]);
            let y = sem.slice(s![ti, ni, ..]);
            let a = params.ln_gen.apply(x);
            let b = params.ln_sem.apply(y);
            let g = sigmoid(params.logit(&a, &b));
            gates[[ti, ni]] = g;
            for k in 0..d {
                fused[[ti, ni, k]] = mix(x[k], y[k], g);
            }
        }
    }
    Ok(FusionIO { gen, sem, gates, fused })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub gen: Array3<f64>,
    pub sem: Array3<f64>,
    pub ln_gen: LayerNormGrads,
    pub ln_sem: LayerNormGrads,
    pub weight: Array1<f64>,
    pub bias: f64,
}

/// Back-propagates through the normalized layer: returns `∂L/∂x` and
/// accumulates `∂L/∂γ`, `∂L/∂β`.
fn layer_norm_backward(
    d_out: &Array1<f64>,
    xhat: &Array1<f64>,
    inv_std: f64,
    ln: &LayerNorm,
    grads: &mut LayerNormGrads,
) -> Array1<f64> {
    grads.gamma += &(d_out * xhat);
    grads.beta += d_out;
    let d_xhat = d_out * &ln.gamma;
    let d = xhat.len() as f64;
    let mean_dxhat = d_xhat.sum() / d;
    let mean_proj = (&d_xhat * xhat).sum() / d;
    (d_xhat - mean_dxhat - xhat * mean_proj) * inv_std
}

pub fn gate_backward(io: &FusionIO, upstream: ArrayView3<f64>, params: &GateParams) -> Result<GateGrads> {
    if upstream.dim() != io.fused.dim() {
        return Err(Error::dim(format!(
            "upstream gradient {:?} vs fused output {:?}",
            upstream.dim(),
            io.fused.dim()
        )));
    }
    let (t, n, d) = io.gen.dim();
    params.validate(d)?;
    let zeros = || LayerNormGrads {
        gamma: Array1::zeros(d),
        beta: Array1::zeros(d),
    };
    let mut grads = GateGrads {
        gen: Array3::zeros((t, n, d)),
        sem: Array3::zeros((t, n, d)),
        ln_gen: zeros(),
        ln_sem: zeros(),
        weight: Array1::zeros(2 * d),
        bias: 0.0,
    };
    let w_gen = params.weight.slice(s![..d]);
    let w_sem = params.weight.slice(s![d..]);
    for ti in 0..t {
        for ni in 0..n {
            let x = io.gen.slice(s![ti, ni, ..]);
            let y = io.sem.slice(s![ti, ni, ..]);
            let u = upstream.slice(s![ti, ni, ..]);
            let g = io.gates[[ti, ni]];
            let (a, xhat_a, inv_a) = params.ln_gen.forward_cached(x);
            let (b, xhat_b, inv_b) = params.ln_sem.forward_cached(y);

            let d_gate: f64 = u.iter().zip(x.iter().zip(y)).map(|(u, (x, y))| u * (y - x)).sum();
            let d_logit = d_gate * g * (1.0 - g);

            grads.bias += d_logit;
            grads.weight.slice_mut(s![..d]).scaled_add(d_logit, &a);
            grads.weight.slice_mut(s![d..]).scaled_add(d_logit, &b);

            let dx = layer_norm_backward(&w_gen.mapv(|w| w * d_logit), &xhat_a, inv_a, &params.ln_gen, &mut grads.ln_gen);
            let dy = layer_norm_backward(&w_sem.mapv(|w| w * d_logit), &xhat_b, inv_b, &params.ln_sem, &mut grads.ln_sem);

            let mut gx = grads.gen.slice_mut(s![ti, ni, ..]);
            gx.assign(&(&u * (1.0 - g) + &dx));
            let mut gy = grads.sem.slice_mut(s![ti, ni, ..]);
            gy.assign(&(&u * g + &dy));
        }
    }
    Ok(grads)
}

/// `Σ upstream ⊙ fused`.
pub fn contract(upstream: ArrayView3<f64>, fused: &Array3<f64>) -> f64 {
    upstream.iter().zip(fused).map(|(u, f)| u * f).sum()
}

/// Inputs and parameters for one gradient-check configuration.
#[derive(Debug, Clone)]
pub struct GateCase {
    pub params: GateParams,
    pub gen: Array3<f64>,
    pub sem: Array3<f64>,
    pub upstream: Array3<f64>,
}

impl GateCase {
    /// Random configuration with `T ≤ max_t`, `N ≤ max_n`, `4 ≤ D ≤ max_d`.
    ///
    /// Wells of tiny token variance make layer-norm curvature explode, so
    /// `D` starts at 4.
    pub fn random(seed: u64, max_t: usize, max_n: usize, max_d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(1..=max_t.max(1));
        let n = rng.random_range(1..=max_n.max(1));
        let d = rng.random_range(4.min(max_d)..=max_d.max(1));
        let normal = |shape: (usize, usize, usize), rng: &mut ChaCha8Rng| {
            Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
        };
        let gen = normal((t, n, d), &mut rng);
        let sem = normal((t, n, d), &mut rng).mapv(|v: f64| 0.5 + 1.5 * v);
        let upstream = normal((t, n, d), &mut rng);
        let ln = |rng: &mut ChaCha8Rng| LayerNorm {
            gamma: Array1::from_shape_fn(d, |_| rng.random_range(0.5..1.5)),
            beta: Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5)),
            eps: DEFAULT_LN_EPS,
        };
        let ln_gen = ln(&mut rng);
        let ln_sem = ln(&mut rng);
        let scale = 1.0 / (d as f64).sqrt();
        let weight = Array1::from_shape_fn(2 * d, |_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let bias = rng.random_range(-1.0..1.0);
        Self {
            params: GateParams {
                ln_gen,
                ln_sem,
                weight,
                bias,
            },
            gen,
            sem,
            upstream,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.gen.dim()
    }

    fn loss(&self) -> Result<f64> {
        let io = gate_forward(self.gen.clone(), self.sem.clone(), &self.params)?;
        Ok(contract(self.upstream.view(), &io.fused))
    }

    fn coordinate_count(&self) -> usize {
        2 * self.gen.len() + 4 * self.params.dim() + self.params.weight.len() + 1
    }

    /// Mutable handle to the `index`-th scalar, in the same order that
    /// [`GateGrads::flatten`] uses.
    fn coordinate_mut(&mut self, mut index: usize) -> (&'static str, &mut f64) {
        macro_rules! take {
            ($label:expr, $arr:expr) => {
                if index < $arr.len() {
                    return ($label, $arr.iter_mut().nth(index).expect("in range"));
                }
                index -= $arr.len();
            };
        }
        take!("gen", self.gen);
        take!("sem", self.sem);
        take!("ln_gen.gamma", self.params.ln_gen.gamma);
        take!("ln_gen.beta", self.params.ln_gen.beta);
        take!("ln_sem.gamma", self.params.ln_sem.gamma);
        take!("ln_sem.beta", self.params.ln_sem.beta);
        take!("gate.weight", self.params.weight);
        assert_eq!(index, 0, "coordinate out of range");
        ("gate.bias", &mut self.params.bias)
    }
}

impl GateGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.gen
            .iter()
            .chain(&self.sem)
            .chain(&self.ln_gen.gamma)
            .chain(&self.ln_gen.beta)
            .chain(&self.ln_sem.gamma)
            .chain(&self.ln_sem.beta)
            .chain(&self.weight)
            .copied()
            .chain(std::iter::once(self.bias))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter group of the worst coordinate.
    pub worst: &'static str,
    pub coordinates: usize,
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares [`gate_backward`] with central differences of step `h` over
/// every input and gate parameter.
pub fn finite_diff_check(case: &GateCase, h: f64) -> Result<GradCheck> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let all_finite = case.gen.iter().chain(&case.sem).chain(&case.upstream).all(|v| v.is_finite())
        && case.params.weight.iter().all(|v| v.is_finite())
        && case.params.bias.is_finite();
    if !all_finite {
        return Err(Error::NonFinite("gradient-check inputs".into()));
    }
    let io = gate_forward(case.gen.clone(), case.sem.clone(), &case.params)?;
    let analytic = gate_backward(&io, case.upstream.view(), &case.params)?.flatten();

    let mut probe = case.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: "none",
        coordinates: probe.coordinate_count(),
    };
    debug_assert_eq!(analytic.len(), report.coordinates);
    for (i, &a) in analytic.iter().enumerate() {
        let (label, slot) = probe.coordinate_mut(i);
        let orig = *slot;
        *slot = orig + h;
        let plus = probe.loss()?;
        *probe.coordinate_mut(i).1 = orig - h;
        let minus = probe.loss()?;
        *probe.coordinate_mut(i).1 = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {label}")));
        }
        let err = relative_error(a, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = label;
        }
    }
    Ok(report)
}
