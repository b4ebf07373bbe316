//! Layers and tensor-level convenience ops built on the tape.
//!
//! Layers are descriptors: they know their parameter names and shapes, can
//! initialize them into a [`ParamStore`], count parameters and MACs, and
//! record a forward pass on a [`Graph`]. All feature maps are NHWC.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<F: Real>(self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        match self {
            Activation::Silu => g.silu(x),
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::config("activation", format!("unknown kind `{other}`"))),
        }
    }
}

/// Output index `j` reads input channel `perm[j]`; equivalent to viewing the
/// channels as `(groups, c / groups)`, transposing and flattening, so input
/// `a * n + b` lands at output `b * groups + a`.
pub fn channel_shuffle_perm(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::shape("channel_shuffle", format!("{channels} channels not divisible by {groups} groups")));
    }
    let n = channels / groups;
    let mut perm = vec![0; channels];
    for a in 0..groups {
        for b in 0..n {
            perm[b * groups + a] = a * n + b;
        }
    }
    Ok(perm)
}

pub fn channel_shuffle<F: Real>(g: &mut Graph<F>, x: Var, groups: usize) -> Result<Var> {
    let c = *g.shape(x).last().ok_or_else(|| Error::shape("channel_shuffle", "scalar input"))?;
    let perm = channel_shuffle_perm(c, groups)?;
    g.permute_channels(x, Rc::from(perm))
}

/// Splits the last axis into contiguous slices of the given sizes.
pub fn channel_partition<F: Real>(g: &mut Graph<F>, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
    let c = *g.shape(x).last().ok_or_else(|| Error::shape("channel_partition", "scalar input"))?;
    if sizes.contains(&0) || sizes.iter().sum::<usize>() != c {
        return Err(Error::shape("channel_partition", format!("sizes {sizes:?} do not partition {c} channels")));
    }
    let mut start = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &s in sizes {
        parts.push(g.narrow_channels(x, start, s)?);
        start += s;
    }
    Ok(parts)
}

/// Dense `k x k` convolution, weight `[c_out, k, k, c_in]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Conv2d { name: name.into(), cin, cout, geom, bias: true }
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let k = self.geom.kernel;
        let fan_in = k * k * self.cin;
        store.insert(format!("{}.weight", self.name), fan_in_uniform(rng, &[self.cout, k, k, self.cin], fan_in));
        if self.bias {
            store.insert(format!("{}.bias", self.name), fan_in_uniform(rng, &[self.cout], fan_in));
        }
    }

    pub fn num_params(&self) -> usize {
        let k = self.geom.kernel;
        self.cout * k * k * self.cin + if self.bias { self.cout } else { 0 }
    }

    /// `H' W' k^2 C_in C_out` for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.geom.out_extent(h).unwrap_or(0), self.geom.out_extent(w).unwrap_or(0));
        let k = self.geom.kernel;
        (ho * wo * k * k * self.cin * self.cout) as u64
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = if self.bias { Some(g.param(store, &format!("{}.bias", self.name))?) } else { None };
        g.conv2d(x, w, b, self.geom)
    }
}

/// Depthwise `k x k` convolution with channel multiplier, weight
/// `[k, k, channels * multiplier]`.
#[derive(Debug, Clone)]
pub struct Depthwise {
    pub name: String,
    pub channels: usize,
    pub multiplier: usize,
    pub geom: ConvGeom,
    pub bias: bool,
}

impl Depthwise {
    /// 3x3, stride 1, padding 1.
    pub fn same3(name: impl Into<String>, channels: usize, multiplier: usize) -> Self {
        Depthwise { name: name.into(), channels, multiplier, geom: ConvGeom::new(3, 1, 1), bias: true }
    }

    pub fn cout(&self) -> usize {
        self.channels * self.multiplier
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let k = self.geom.kernel;
        store.insert(format!("{}.weight", self.name), fan_in_uniform(rng, &[k, k, self.cout()], k * k));
        if self.bias {
            store.insert(format!("{}.bias", self.name), fan_in_uniform(rng, &[self.cout()], k * k));
        }
    }

    pub fn num_params(&self) -> usize {
        let k = self.geom.kernel;
        k * k * self.cout() + if self.bias { self.cout() } else { 0 }
    }

    /// `H' W' k^2 C_out`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.geom.out_extent(h).unwrap_or(0), self.geom.out_extent(w).unwrap_or(0));
        let k = self.geom.kernel;
        (ho * wo * k * k * self.cout()) as u64
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = if self.bias { Some(g.param(store, &format!("{}.bias", self.name))?) } else { None };
        g.depthwise_conv2d(x, w, b, self.geom, self.multiplier)
    }
}

/// Affine map over the last axis, weight `[c_in, c_out]`. Serves as both the
/// token-wise linear layer and the 1x1 (pointwise) convolution.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

pub type Pointwise = Linear;

impl Linear {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Linear { name: name.into(), cin, cout, bias: true }
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        store.insert(format!("{}.weight", self.name), fan_in_uniform(rng, &[self.cin, self.cout], self.cin));
        if self.bias {
            store.insert(format!("{}.bias", self.name), fan_in_uniform(rng, &[self.cout], self.cin));
        }
    }

    pub fn num_params(&self) -> usize {
        self.cin * self.cout + if self.bias { self.cout } else { 0 }
    }

    /// `positions * C_in * C_out`.
    pub fn macs(&self, positions: usize) -> u64 {
        (positions * self.cin * self.cout) as u64
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = if self.bias { Some(g.param(store, &format!("{}.bias", self.name))?) } else { None };
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        LayerNorm { name: name.into(), channels, eps: LN_EPS }
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>) {
        store.insert(format!("{}.gamma", self.name), Tensor::full(vec![self.channels], F::one()));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(vec![self.channels]));
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

// ---- tensor-level ops -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Dense,
    Depthwise,
    Pointwise,
}

/// Explicit convolution weights for the tensor-level API.
///
/// Weight layouts: dense `[c_out, k, k, c_in]`, depthwise `[k, k, c]`,
/// pointwise `[c_in, c_out]`.
#[derive(Debug, Clone)]
pub struct Conv2dParams<F> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
    pub stride: usize,
    pub padding: usize,
    pub mode: ConvMode,
}

impl<F: Real> Conv2dParams<F> {
    pub fn kernel(&self) -> usize {
        match self.mode {
            ConvMode::Dense => self.weight.shape().get(1).copied().unwrap_or(0),
            ConvMode::Depthwise => self.weight.shape().first().copied().unwrap_or(0),
            ConvMode::Pointwise => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        let ok = match self.mode {
            ConvMode::Pointwise => ws.len() == 2 && self.stride == 1 && self.padding == 0,
            ConvMode::Depthwise => ws.len() == 3 && ws[0] == ws[1],
            ConvMode::Dense => ws.len() == 4 && ws[1] == ws[2],
        };
        if !ok || self.stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("{:?} weight {ws:?} with stride {} padding {}", self.mode, self.stride, self.padding),
            ));
        }
        Ok(())
    }
}

/// Runs `f` on an inference graph over `x`, accepting `[H, W, C]` or
/// `[B, H, W, C]` and returning the same rank.
fn with_graph<F: Real>(x: &Tensor<F>, f: impl FnOnce(&mut Graph<F>, Var) -> Result<Var>) -> Result<Tensor<F>> {
    let unbatched = x.rank() == 3;
    let input = if unbatched {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        x.clone().reshape(s)?
    } else {
        x.clone()
    };
    let mut g = Graph::inference();
    let v = g.input(input);
    let y = f(&mut g, v)?;
    let out = g.value(y).clone();
    if unbatched && out.rank() == 4 {
        let s = out.shape()[1..].to_vec();
        out.reshape(s)
    } else {
        Ok(out)
    }
}

fn conv_with<F: Real>(x: &Tensor<F>, p: &Conv2dParams<F>, mode: ConvMode) -> Result<Tensor<F>> {
    if p.mode != mode {
        return Err(Error::shape("conv2d", format!("expected {mode:?} parameters, got {:?}", p.mode)));
    }
    p.validate()?;
    with_graph(x, |g, v| {
        let w = g.constant(p.weight.clone());
        let b = p.bias.clone().map(|b| g.constant(b));
        match mode {
            ConvMode::Pointwise => g.linear(v, w, b),
            ConvMode::Depthwise => g.depthwise_conv2d(v, w, b, ConvGeom::new(p.kernel(), p.stride, p.padding), 1),
            ConvMode::Dense => g.conv2d(v, w, b, ConvGeom::new(p.kernel(), p.stride, p.padding)),
        }
    })
}

pub fn depthwise_conv2d<F: Real>(x: &Tensor<F>, p: &Conv2dParams<F>) -> Result<Tensor<F>> {
    conv_with(x, p, ConvMode::Depthwise)
}

pub fn pointwise_conv2d<F: Real>(x: &Tensor<F>, p: &Conv2dParams<F>) -> Result<Tensor<F>> {
    conv_with(x, p, ConvMode::Pointwise)
}

pub fn dense_conv2d<F: Real>(x: &Tensor<F>, p: &Conv2dParams<F>) -> Result<Tensor<F>> {
    conv_with(x, p, ConvMode::Dense)
}

pub fn linear<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let mut g = Graph::inference();
    let (xv, wv) = (g.input(x.clone()), g.constant(w.clone()));
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.linear(xv, wv, bv)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub eps: f64,
}

pub fn layer_norm<F: Real>(x: &Tensor<F>, p: &LayerNormParams<F>) -> Result<Tensor<F>> {
    if !(p.eps > 0.0) {
        return Err(Error::shape("layer_norm", format!("epsilon must be positive, got {}", p.eps)));
    }
    let mut g = Graph::inference();
    let (xv, gv, bv) = (g.input(x.clone()), g.constant(p.gamma.clone()), g.constant(p.beta.clone()));
    let y = g.layer_norm(xv, gv, bv, p.eps)?;
    Ok(g.value(y).clone())
}

pub fn activation<F: Real>(kind: Activation, x: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let y = kind.apply(&mut g, xv)?;
    Ok(g.value(y).clone())
}

pub fn partition<F: Real>(x: &Tensor<F>, sizes: &[usize]) -> Result<Vec<Tensor<F>>> {
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let parts = channel_partition(&mut g, xv, sizes)?;
    Ok(parts.into_iter().map(|p| g.value(p).clone()).collect())
}

pub fn concat<F: Real>(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = parts.iter().map(|p| g.input(p.clone())).collect();
    let y = g.concat_channels(&vars)?;
    Ok(g.value(y).clone())
}

pub fn shuffle<F: Real>(x: &Tensor<F>, groups: usize) -> Result<Tensor<F>> {
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let y = channel_shuffle(&mut g, xv, groups)?;
    Ok(g.value(y).clone())
}

/// Per-channel spatial mean of `[H, W, C]` (to `[C]`) or `[B, H, W, C]` (to `[B, C]`).
pub fn global_avg_pool<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let out = with_graph(x, |g, v| g.global_avg_pool(v))?;
    if x.rank() == 3 {
        let c = out.numel();
        out.reshape(vec![c])
    } else {
        Ok(out)
    }
}

pub fn cross_entropy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let mut g = Graph::inference();
    let l = g.input(logits.clone());
    let y = g.cross_entropy(l, labels)?;
    Ok(g.value(y).item())
}
