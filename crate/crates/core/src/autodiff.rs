//! Eagerly recorded reverse-mode tape.
//!
//! Every operation computes its value immediately and appends one entry to
//! the tape. Inputs of an entry always have a smaller index than the entry
//! itself, so walking the tape backwards visits each entry once in a valid
//! reverse topological order. Gradient contributions are accumulated in
//! tape order, which keeps results bit-reproducible.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sscan::kernel;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry of a 2-D convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeom { kernel, stride, padding }
    }

    /// Output extent along one axis, or `None` when the geometry does not tile.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel || (padded - self.kernel) % self.stride != 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Sigmoid,
    Silu,
    Relu,
    Gelu,
    Softplus,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, multiplier: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(F, F)> },
    Narrow { x: Var, start: usize },
    Concat(Vec<Var>),
    PermuteChannels { x: Var, perm: Rc<[usize]> },
    PermuteTokens { x: Var, perm: Rc<[usize]> },
    GlobalAvgPool(Var),
    ScaleChannels { x: Var, gate: Var },
    ChannelConv1d { s: Var, w: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    Scan { u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var, states: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros of the right shape when no path reaches it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<F> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

/// The tape: an ordered record of every evaluated operation.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    check_finite: bool,
    params_require_grad: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            check_finite: cfg!(debug_assertions),
            params_require_grad: true,
        }
    }

    /// A graph whose parameters are bound as constants. Nothing recorded on
    /// it needs gradients, so the scan skips saving its hidden states.
    pub fn inference() -> Self {
        Graph { params_require_grad: false, ..Self::new() }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds the named parameter from `store` as a leaf (once per graph).
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.leaf(value, self.params_require_grad);
        self.bind_param(name, v);
        Ok(v)
    }

    /// Pre-binds `name` to an existing variable; later [`Graph::param`] calls
    /// for that name return `v` instead of reading the store.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        if self.params.insert(name.to_string(), v).is_none() {
            self.param_order.push((name.to_string(), v));
        }
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn rank4(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [b, h, w, c] => Ok([b, h, w, c]),
            ref s => Err(Error::shape(op, format!("expected NHWC rank-4 input, got {s:?}"))),
        }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = F::c(k);
        let out = self.value(x).map(|v| v * k);
        self.push("scale", out, Op::Scale(x, k), &[x])
    }

    pub fn identity(&mut self, x: Var) -> Result<Var> {
        self.scale(x, 1.0)
    }

    fn unary(&mut self, kind: Unary, name: &'static str, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| unary_fwd(kind, v));
        self.push(name, out, Op::Unary(kind, x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, "exp", x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, "sigmoid", x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, "silu", x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, "relu", x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, "gelu", x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, "softplus", x)
    }

    // ---- reductions and views ----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = F::c(t.numel() as f64);
        let s: F = t.data().iter().copied().sum();
        self.push("mean", Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    // ---- dense maps ----------------------------------------------------------

    /// `y = x W + b` over the last axis; `w` is `[c_in, c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&cin, lead) = xs.split_last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear", format!("bias {:?} vs {cout} outputs", self.shape(b))));
            }
        }
        let rows: usize = lead.iter().product();
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![F::zero(); rows * cout];
        for r in 0..rows {
            let yr = &mut out[r * cout..(r + 1) * cout];
            if let Some(b) = b {
                yr.copy_from_slice(self.nodes[b.0].value.data());
            }
            for (i, &xv) in xd[r * cin..(r + 1) * cin].iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                for (y, &wv) in yr.iter_mut().zip(&wd[i * cout..(i + 1) * cout]) {
                    *y += xv * wv;
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.push(cout);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", Tensor::new(shape, out)?, Op::Linear { x, w, b }, &inputs)
    }

    /// Dense 2-D convolution over NHWC input; `w` is `[c_out, k, k, c_in]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let [n, h, wd_, cin] = self.rank4("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        let k = geom.kernel;
        if ws.len() != 4 || ws[1] != k || ws[2] != k || ws[3] != cin {
            return Err(Error::shape("conv2d", format!("input {:?} vs weight {ws:?} (k={k})", self.shape(x))));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs {cout} outputs", self.shape(b))));
            }
        }
        let (ho, wo) = match (geom.out_extent(h), geom.out_extent(wd_)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-integer output extent for {h}x{wd_} with {geom:?}"),
                ))
            }
        };
        let xd = self.value(x).data();
        let wt = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let plen = k * k * cin;
        let mut patch = vec![F::zero(); plen];
        let mut out = vec![F::zero(); n * ho * wo * cout];
        for bi in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    gather_patch(xd, &mut patch, bi, oy, ox, h, wd_, cin, geom);
                    let o = ((bi * ho + oy) * wo + ox) * cout;
                    for co in 0..cout {
                        let wrow = &wt[co * plen..(co + 1) * plen];
                        let mut acc = bias.map_or(F::zero(), |b| b[co]);
                        for (p, q) in patch.iter().zip(wrow) {
                            acc += *p * *q;
                        }
                        out[o + co] = acc;
                    }
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let t = Tensor::new(vec![n, ho, wo, cout], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Depthwise 2-D convolution with channel multiplier `m`: output channel
    /// `o` filters input channel `o / m`. `w` is `[k, k, c_in * m]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        multiplier: usize,
    ) -> Result<Var> {
        let [n, h, wd_, cin] = self.rank4("depthwise_conv2d", x)?;
        let k = geom.kernel;
        let cout = cin * multiplier;
        if multiplier == 0 || self.shape(w) != [k, k, cout] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight {:?}, expected [{k}, {k}, {cout}]", self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("depthwise_conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let (ho, wo) = match (geom.out_extent(h), geom.out_extent(wd_)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("non-integer output extent for {h}x{wd_} with {geom:?}"),
                ))
            }
        };
        let xd = self.value(x).data();
        let wt = self.value(w).data();
        let mut out = vec![F::zero(); n * ho * wo * cout];
        for bi in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((bi * ho + oy) * wo + ox) * cout;
                    let yo = &mut out[o..o + cout];
                    if let Some(b) = b {
                        yo.copy_from_slice(self.nodes[b.0].value.data());
                    }
                    for ky in 0..k {
                        let Some(iy) = tap(oy, ky, geom, h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = tap(ox, kx, geom, wd_) else { continue };
                            let xi = ((bi * h + iy) * wd_ + ix) * cin;
                            let xin = &xd[xi..xi + cin];
                            let wk = &wt[(ky * k + kx) * cout..(ky * k + kx + 1) * cout];
                            if multiplier == 1 {
                                for ((y, &xv), &wv) in yo.iter_mut().zip(xin).zip(wk) {
                                    *y += xv * wv;
                                }
                            } else {
                                for (oc, y) in yo.iter_mut().enumerate() {
                                    *y += xin[oc / multiplier] * wk[oc];
                                }
                            }
                        }
                    }
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let t = Tensor::new(vec![n, ho, wo, cout], out)?;
        self.push("depthwise_conv2d", t, Op::Depthwise { x, w, b, geom, multiplier }, &inputs)
    }

    /// Normalizes each position over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("{c} channels vs gamma {:?} / beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / c.max(1);
        let inv_c = F::c(1.0 / c as f64);
        let eps = F::c(eps);
        let mut out = vec![F::zero(); xd.len()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rstd = (var + eps).sqrt().recip();
            for (i, &v) in row.iter().enumerate() {
                out[r * c + i] = (v - mean) * rstd * g[i] + bt[i];
            }
            stats.push((mean, rstd));
        }
        let t = Tensor::new(xs, out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    // ---- channel routing -----------------------------------------------------

    /// Contiguous slice `[start, start + len)` of the last axis.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::shape("narrow_channels", "scalar input"))?;
        if len == 0 || start + len > c {
            return Err(Error::shape("narrow_channels", format!("[{start}, {}) out of {c} channels", start + len)));
        }
        let xd = self.value(x).data();
        let rows = xd.len() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * c + start..r * c + start + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        self.push("narrow_channels", Tensor::new(shape, out)?, Op::Narrow { x, start }, &[x])
    }

    /// Stacks the last axes of `parts` in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let lead = self.shape(first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            match s.split_last() {
                Some((&c, l)) if l == lead.as_slice() => widths.push(c),
                _ => {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("spatial mismatch: {:?} vs {:?}", self.shape(first), s),
                    ))
                }
            }
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat_channels", Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), parts)
    }

    /// `out[..., j] = x[..., perm[j]]`.
    pub fn permute_channels(&mut self, x: Var, perm: Rc<[usize]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::shape("permute_channels", "scalar input"))?;
        if perm.len() != c || !is_permutation(&perm) {
            return Err(Error::shape("permute_channels", format!("invalid permutation of {c} channels")));
        }
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); xd.len()];
        for (orow, irow) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
            for (o, &p) in orow.iter_mut().zip(perm.iter()) {
                *o = irow[p];
            }
        }
        self.push("permute_channels", Tensor::new(xs, out)?, Op::PermuteChannels { x, perm }, &[x])
    }

    /// Gathers along axis 1 of a `[B, L, D]` tensor: `out[:, t] = x[:, perm[t]]`.
    pub fn permute_tokens(&mut self, x: Var, perm: Rc<[usize]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, l, d] = xs[..] else {
            return Err(Error::shape("permute_tokens", format!("expected [B, L, D], got {xs:?}")));
        };
        if perm.len() != l || !is_permutation(&perm) {
            return Err(Error::shape("permute_tokens", format!("invalid permutation of {l} tokens")));
        }
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); xd.len()];
        for bi in 0..n {
            for (t, &p) in perm.iter().enumerate() {
                let dst = (bi * l + t) * d;
                let src = (bi * l + p) * d;
                out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
            }
        }
        self.push("permute_tokens", Tensor::new(xs, out)?, Op::PermuteTokens { x, perm }, &[x])
    }

    // ---- pooling, gating, loss -------------------------------------------------

    /// `[B, H, W, C] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.rank4("global_avg_pool", x)?;
        if h * w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let xd = self.value(x).data();
        let inv = F::c(1.0 / (h * w) as f64);
        let mut out = vec![F::zero(); n * c];
        for bi in 0..n {
            let o = &mut out[bi * c..(bi + 1) * c];
            for px in xd[bi * h * w * c..(bi + 1) * h * w * c].chunks_exact(c) {
                for (a, &v) in o.iter_mut().zip(px) {
                    *a += v;
                }
            }
            for a in o.iter_mut() {
                *a *= inv;
            }
        }
        self.push("global_avg_pool", Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), &[x])
    }

    /// Scales `x: [B, H, W, C]` by a per-item, per-channel gate `[B, C]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, h, w, c] = self.rank4("scale_channels", x)?;
        if self.shape(gate) != [n, c] {
            return Err(Error::shape("scale_channels", format!("gate {:?} vs input {:?}", self.shape(gate), self.shape(x))));
        }
        let xd = self.value(x).data();
        let gd = self.value(gate).data();
        let mut out = vec![F::zero(); xd.len()];
        for bi in 0..n {
            let g = &gd[bi * c..(bi + 1) * c];
            let span = bi * h * w * c..(bi + 1) * h * w * c;
            for (o, px) in out[span.clone()].chunks_exact_mut(c).zip(xd[span].chunks_exact(c)) {
                for ((o, &v), &gv) in o.iter_mut().zip(px).zip(g) {
                    *o = v * gv;
                }
            }
        }
        let t = Tensor::new(vec![n, h, w, c], out)?;
        self.push("scale_channels", t, Op::ScaleChannels { x, gate }, &[x, gate])
    }

    /// Zero-padded 1-D convolution along the channel axis of `s: [B, C]`
    /// with an odd-length kernel `w: [k]`, no bias.
    pub fn channel_conv1d(&mut self, s: Var, w: Var) -> Result<Var> {
        let ss = self.shape(s).to_vec();
        let [n, c] = ss[..] else {
            return Err(Error::shape("channel_conv1d", format!("expected [B, C], got {ss:?}")));
        };
        let k = match *self.shape(w) {
            [k] if k % 2 == 1 => k,
            ref ws => return Err(Error::shape("channel_conv1d", format!("kernel {ws:?} must be odd 1-D"))),
        };
        let half = k / 2;
        let sd = self.value(s).data();
        let wd = self.value(w).data();
        let mut out = vec![F::zero(); n * c];
        for bi in 0..n {
            for ch in 0..c {
                let mut acc = F::zero();
                for (j, &wv) in wd.iter().enumerate() {
                    let src = ch + j;
                    if src >= half && src - half < c {
                        acc += wv * sd[bi * c + src - half];
                    }
                }
                out[bi * c + ch] = acc;
            }
        }
        self.push("channel_conv1d", Tensor::new(vec![n, c], out)?, Op::ChannelConv1d { s, w }, &[s, w])
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let [n, k] = ls[..] else {
            return Err(Error::shape("cross_entropy", format!("expected [B, K] logits, got {ls:?}")));
        };
        if labels.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![F::zero(); n * k];
        let mut total = F::zero();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &ld[bi * k..(bi + 1) * k];
            let top = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            let m = row[top];
            // z = 1 + rest, so log z = ln_1p(rest) stays exact for confident rows
            let rest: F = row.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &v)| (v - m).exp()).sum();
            let z = F::one() + rest;
            total += rest.ln_1p() + (m - row[label]);
            for (p, &v) in probs[bi * k..(bi + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
        }
        let loss = total / F::c(n as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Selective scan over `[B, L, D]` sequences.
    ///
    /// `delta` is the positive step size per token and channel, `a` the
    /// (negative) `[D, N]` state matrix, `b`/`c` the `[B, L, N]` input and
    /// readout vectors, `d` the `[D]` skip scale. Recurrence per channel:
    /// `h_t = exp(delta_t a) h_{t-1} + delta_t b_t u_t`, `y_t = <c_t, h_t> + d u_t`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let [n, l, dim] = us[..] else {
            return Err(Error::shape("selective_scan", format!("expected [B, L, D] input, got {us:?}")));
        };
        let state = match *self.shape(a) {
            [ad, s] if ad == dim => s,
            ref s => return Err(Error::shape("selective_scan", format!("A {s:?} vs D={dim}"))),
        };
        if self.shape(delta) != us.as_slice()
            || self.shape(b) != [n, l, state]
            || self.shape(c) != [n, l, state]
            || self.shape(d) != [dim]
        {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "u {us:?}, delta {:?}, B {:?}, C {:?}, D {:?} (N={state})",
                    self.shape(delta),
                    self.shape(b),
                    self.shape(c),
                    self.shape(d)
                ),
            ));
        }
        if l == 0 {
            return Err(Error::shape("selective_scan", "length-0 sequence"));
        }
        let save = [u, delta, a, b, c, d].iter().any(|v| self.requires_grad(*v));
        let (ud, dd, ad, bd, cd, skip) = (
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
        );
        if let Some(bad) = dd.iter().find(|v| !(**v > F::zero())) {
            return Err(Error::shape("selective_scan", format!("step size must be positive, got {bad}")));
        }
        let seq = l * dim;
        let sn = l * state;
        let mut out = vec![F::zero(); n * seq];
        let mut states = if save { vec![F::zero(); n * seq * state] } else { Vec::new() };
        for bi in 0..n {
            let st = if save { Some(&mut states[bi * seq * state..(bi + 1) * seq * state]) } else { None };
            kernel::scan_forward(
                &ud[bi * seq..(bi + 1) * seq],
                &dd[bi * seq..(bi + 1) * seq],
                ad,
                &bd[bi * sn..(bi + 1) * sn],
                &cd[bi * sn..(bi + 1) * sn],
                skip,
                l,
                dim,
                state,
                &mut out[bi * seq..(bi + 1) * seq],
                st,
            );
        }
        let op = Op::Scan { u, delta, a, b, c, d, states };
        self.push("selective_scan", Tensor::new(us, out)?, op, &[u, delta, a, b, c, d])
    }

    // ---- backward ----------------------------------------------------------------

    /// Backpropagates from a scalar output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Backward("output was not evaluated on this graph".into()));
        }
        if self.value(output).numel() != 1 {
            return Err(Error::Backward(format!(
                "implicit seed needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let seed = Tensor::full(self.shape(output).to_vec(), F::one());
        self.backward_with_seed(output, &seed)
    }

    /// Backpropagates `seed` (same shape as `output`) through the tape.
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor<F>) -> Result<Gradients<F>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Backward("output was not evaluated on this graph".into()));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::Backward(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backward_node(&self, node: &Node<F>, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); target.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| g.iter_mut().zip(gy).zip(bv).for_each(|((g, &d), &o)| *g += d * o));
                acc(*b, &mut |g| g.iter_mut().zip(gy).zip(av).for_each(|((g, &d), &o)| *g += d * o));
            }
            Op::Scale(x, k) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *k)),
            Op::Unary(kind, x) => {
                let (xv, yv) = (val(*x), node.value.data());
                acc(*x, &mut |g| {
                    for ((g, &d), (&xi, &yi)) in g.iter_mut().zip(gy).zip(xv.iter().zip(yv)) {
                        *g += d * unary_grad(*kind, xi, yi);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::Mean(x) => {
                let n = F::c(self.nodes[x.0].value.numel() as f64);
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0] / n));
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::Linear { x, w, b } => {
                let ws = self.nodes[w.0].value.shape();
                let (cin, cout) = (ws[0], ws[1]);
                let (xv, wv) = (val(*x), val(*w));
                let rows = xv.len() / cin;
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        let gr = &gy[r * cout..(r + 1) * cout];
                        for i in 0..cin {
                            let mut s = F::zero();
                            for (&d, &wv) in gr.iter().zip(&wv[i * cout..(i + 1) * cout]) {
                                s += d * wv;
                            }
                            g[r * cin + i] += s;
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for r in 0..rows {
                        let gr = &gy[r * cout..(r + 1) * cout];
                        for i in 0..cin {
                            let xi = xv[r * cin + i];
                            if xi == F::zero() {
                                continue;
                            }
                            for (gw, &d) in g[i * cout..(i + 1) * cout].iter_mut().zip(gr) {
                                *gw += xi * d;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for gr in gy.chunks_exact(cout) {
                            add_into(g, gr);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, h, wd_, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (ho, wo, cout) = (os[1], os[2], os[3]);
                let k = geom.kernel;
                let plen = k * k * cin;
                let (xv, wv) = (val(*x), val(*w));
                acc(*w, &mut |g| {
                    let mut patch = vec![F::zero(); plen];
                    for bi in 0..n {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                gather_patch(xv, &mut patch, bi, oy, ox, h, wd_, cin, *geom);
                                let o = ((bi * ho + oy) * wo + ox) * cout;
                                for co in 0..cout {
                                    let d = gy[o + co];
                                    if d == F::zero() {
                                        continue;
                                    }
                                    for (gw, &p) in g[co * plen..(co + 1) * plen].iter_mut().zip(&patch) {
                                        *gw += d * p;
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*x, &mut |g| {
                    let mut dpatch = vec![F::zero(); plen];
                    for bi in 0..n {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                dpatch.iter_mut().for_each(|v| *v = F::zero());
                                let o = ((bi * ho + oy) * wo + ox) * cout;
                                for co in 0..cout {
                                    let d = gy[o + co];
                                    if d == F::zero() {
                                        continue;
                                    }
                                    for (dp, &wv) in dpatch.iter_mut().zip(&wv[co * plen..(co + 1) * plen]) {
                                        *dp += d * wv;
                                    }
                                }
                                scatter_patch(g, &dpatch, bi, oy, ox, h, wd_, cin, *geom);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for gr in gy.chunks_exact(cout) {
                            add_into(g, gr);
                        }
                    });
                }
            }
            Op::Depthwise { x, w, b, geom, multiplier } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, h, wd_, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (ho, wo, cout) = (os[1], os[2], os[3]);
                let (k, m) = (geom.kernel, *multiplier);
                let (xv, wv) = (val(*x), val(*w));
                acc(*w, &mut |g| {
                    for bi in 0..n {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = &gy[((bi * ho + oy) * wo + ox) * cout..][..cout];
                                for ky in 0..k {
                                    let Some(iy) = tap(oy, ky, *geom, h) else { continue };
                                    for kx in 0..k {
                                        let Some(ix) = tap(ox, kx, *geom, wd_) else { continue };
                                        let xin = &xv[((bi * h + iy) * wd_ + ix) * cin..][..cin];
                                        let gk = &mut g[(ky * k + kx) * cout..][..cout];
                                        for (oc, (gw, &d)) in gk.iter_mut().zip(go).enumerate() {
                                            *gw += d * xin[oc / m];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*x, &mut |g| {
                    for bi in 0..n {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = &gy[((bi * ho + oy) * wo + ox) * cout..][..cout];
                                for ky in 0..k {
                                    let Some(iy) = tap(oy, ky, *geom, h) else { continue };
                                    for kx in 0..k {
                                        let Some(ix) = tap(ox, kx, *geom, wd_) else { continue };
                                        let gx = &mut g[((bi * h + iy) * wd_ + ix) * cin..][..cin];
                                        let wk = &wv[(ky * k + kx) * cout..][..cout];
                                        for (oc, (&d, &wv)) in go.iter().zip(wk).enumerate() {
                                            gx[oc / m] += d * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for gr in gy.chunks_exact(cout) {
                            add_into(g, gr);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = val(*x);
                let gv = val(*gamma);
                let c = gv.len();
                let inv_c = F::c(1.0 / c as f64);
                acc(*gamma, &mut |g| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for i in 0..c {
                            g[i] += gy[r * c + i] * (xv[r * c + i] - mean) * rstd;
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for gr in gy.chunks_exact(c) {
                        add_into(g, gr);
                    }
                });
                acc(*x, &mut |g| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let (mut s1, mut s2) = (F::zero(), F::zero());
                        for i in 0..c {
                            let dxh = gy[row.start + i] * gv[i];
                            let xh = (xv[row.start + i] - mean) * rstd;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                        s1 *= inv_c;
                        s2 *= inv_c;
                        for i in 0..c {
                            let dxh = gy[row.start + i] * gv[i];
                            let xh = (xv[row.start + i] - mean) * rstd;
                            g[row.start + i] += rstd * (dxh - s1 - xh * s2);
                        }
                    }
                });
            }
            Op::Narrow { x, start } => {
                let c = *self.nodes[x.0].value.shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for (r, gr) in gy.chunks_exact(len).enumerate() {
                        add_into(&mut g[r * c + start..r * c + start + len], gr);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = *self.nodes[p.0].value.shape().last().unwrap();
                    acc(p, &mut |g| {
                        for (r, gr) in g.chunks_exact_mut(c).enumerate() {
                            add_into(gr, &gy[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::PermuteChannels { x, perm } => {
                let c = perm.len();
                acc(*x, &mut |g| {
                    for (grow, drow) in g.chunks_exact_mut(c).zip(gy.chunks_exact(c)) {
                        for (&d, &p) in drow.iter().zip(perm.iter()) {
                            grow[p] += d;
                        }
                    }
                });
            }
            Op::PermuteTokens { x, perm } => {
                let s = node.value.shape();
                let (n, l, d) = (s[0], s[1], s[2]);
                acc(*x, &mut |g| {
                    for bi in 0..n {
                        for (t, &p) in perm.iter().enumerate() {
                            let src = (bi * l + t) * d;
                            let dst = (bi * l + p) * d;
                            add_into(&mut g[dst..dst + d], &gy[src..src + d]);
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.nodes[x.0].value.shape();
                let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let inv = F::c(1.0 / hw as f64);
                acc(*x, &mut |g| {
                    for bi in 0..n {
                        let gr = &gy[bi * c..(bi + 1) * c];
                        for px in g[bi * hw * c..(bi + 1) * hw * c].chunks_exact_mut(c) {
                            for (g, &d) in px.iter_mut().zip(gr) {
                                *g += d * inv;
                            }
                        }
                    }
                });
            }
            Op::ScaleChannels { x, gate } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let (xv, gv) = (val(*x), val(*gate));
                acc(*x, &mut |g| {
                    for bi in 0..n {
                        let gt = &gv[bi * c..(bi + 1) * c];
                        let span = bi * hw * c..(bi + 1) * hw * c;
                        for (gp, dp) in g[span.clone()].chunks_exact_mut(c).zip(gy[span].chunks_exact(c)) {
                            for ((g, &d), &t) in gp.iter_mut().zip(dp).zip(gt) {
                                *g += d * t;
                            }
                        }
                    }
                });
                acc(*gate, &mut |g| {
                    for bi in 0..n {
                        let span = bi * hw * c..(bi + 1) * hw * c;
                        let gg = &mut g[bi * c..(bi + 1) * c];
                        for (dp, xp) in gy[span.clone()].chunks_exact(c).zip(xv[span].chunks_exact(c)) {
                            for ((g, &d), &xv) in gg.iter_mut().zip(dp).zip(xp) {
                                *g += d * xv;
                            }
                        }
                    }
                });
            }
            Op::ChannelConv1d { s, w } => {
                let ss = self.nodes[s.0].value.shape();
                let (n, c) = (ss[0], ss[1]);
                let (sv, wv) = (val(*s), val(*w));
                let half = wv.len() / 2;
                acc(*s, &mut |g| {
                    for bi in 0..n {
                        for ch in 0..c {
                            let d = gy[bi * c + ch];
                            for (j, &wk) in wv.iter().enumerate() {
                                let src = ch + j;
                                if src >= half && src - half < c {
                                    g[bi * c + src - half] += d * wk;
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for bi in 0..n {
                        for ch in 0..c {
                            let d = gy[bi * c + ch];
                            for (j, gw) in g.iter_mut().enumerate() {
                                let src = ch + j;
                                if src >= half && src - half < c {
                                    *gw += d * sv[bi * c + src - half];
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = gy[0] / F::c(labels.len() as f64);
                acc(*logits, &mut |g| {
                    for (bi, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { F::one() } else { F::zero() };
                            g[bi * k + j] += scale * (probs[bi * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Scan { u, delta, a, b, c, d, states } => {
                let us = self.nodes[u.0].value.shape();
                let (n, l, dim) = (us[0], us[1], us[2]);
                let state = self.nodes[a.0].value.shape()[1];
                let seq = l * dim;
                let sn = l * state;
                let mut gu = vec![F::zero(); n * seq];
                let mut gdelta = vec![F::zero(); n * seq];
                let mut ga = vec![F::zero(); dim * state];
                let mut gb = vec![F::zero(); n * sn];
                let mut gc = vec![F::zero(); n * sn];
                let mut gd = vec![F::zero(); dim];
                let (uv, dv, av, bv, cv, skip) = (val(*u), val(*delta), val(*a), val(*b), val(*c), val(*d));
                for bi in 0..n {
                    kernel::scan_backward(
                        kernel::ScanSlices {
                            u: &uv[bi * seq..(bi + 1) * seq],
                            delta: &dv[bi * seq..(bi + 1) * seq],
                            a: av,
                            b: &bv[bi * sn..(bi + 1) * sn],
                            c: &cv[bi * sn..(bi + 1) * sn],
                            d: skip,
                            len: l,
                            dim,
                            state,
                        },
                        &states[bi * seq * state..(bi + 1) * seq * state],
                        &gy[bi * seq..(bi + 1) * seq],
                        kernel::ScanGrads {
                            u: &mut gu[bi * seq..(bi + 1) * seq],
                            delta: &mut gdelta[bi * seq..(bi + 1) * seq],
                            a: &mut ga,
                            b: &mut gb[bi * sn..(bi + 1) * sn],
                            c: &mut gc[bi * sn..(bi + 1) * sn],
                            d: &mut gd,
                        },
                    );
                }
                acc(*u, &mut |g| add_into(g, &gu));
                acc(*delta, &mut |g| add_into(g, &gdelta));
                acc(*a, &mut |g| add_into(g, &ga));
                acc(*b, &mut |g| add_into(g, &gb));
                acc(*c, &mut |g| add_into(g, &gc));
                acc(*d, &mut |g| add_into(g, &gd));
            }
        }
    }
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

/// Input coordinate read by output coordinate `o` at kernel tap `k`.
#[inline]
fn tap(o: usize, k: usize, geom: ConvGeom, extent: usize) -> Option<usize> {
    let i = (o * geom.stride + k).checked_sub(geom.padding)?;
    (i < extent).then_some(i)
}

#[allow(clippy::too_many_arguments)]
fn gather_patch<F: Real>(
    xd: &[F],
    patch: &mut [F],
    bi: usize,
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    cin: usize,
    geom: ConvGeom,
) {
    let k = geom.kernel;
    for ky in 0..k {
        for kx in 0..k {
            let dst = &mut patch[(ky * k + kx) * cin..(ky * k + kx + 1) * cin];
            match (tap(oy, ky, geom, h), tap(ox, kx, geom, w)) {
                (Some(iy), Some(ix)) => {
                    let src = ((bi * h + iy) * w + ix) * cin;
                    dst.copy_from_slice(&xd[src..src + cin]);
                }
                _ => dst.iter_mut().for_each(|v| *v = F::zero()),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_patch<F: Real>(
    g: &mut [F],
    dpatch: &[F],
    bi: usize,
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    cin: usize,
    geom: ConvGeom,
) {
    let k = geom.kernel;
    for ky in 0..k {
        let Some(iy) = tap(oy, ky, geom, h) else { continue };
        for kx in 0..k {
            let Some(ix) = tap(ox, kx, geom, w) else { continue };
            let dst = ((bi * h + iy) * w + ix) * cin;
            add_into(&mut g[dst..dst + cin], &dpatch[(ky * k + kx) * cin..(ky * k + kx + 1) * cin]);
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn unary_fwd<F: Real>(kind: Unary, x: F) -> F {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Silu => x * sigmoid(x),
        Unary::Relu => x.max(F::zero()),
        Unary::Gelu => F::c(0.5) * x * (F::one() + (x * F::c(std::f64::consts::FRAC_1_SQRT_2)).erf()),
        Unary::Softplus => softplus(x),
    }
}

#[inline]
fn unary_grad<F: Real>(kind: Unary, x: F, y: F) -> F {
    match kind {
        Unary::Exp => y,
        Unary::Sigmoid => y * (F::one() - y),
        Unary::Silu => {
            let s = sigmoid(x);
            s * (F::one() + x * (F::one() - s))
        }
        Unary::Relu => {
            if x > F::zero() {
                F::one()
            } else {
                F::zero()
            }
        }
        Unary::Gelu => {
            let cdf = F::c(0.5) * (F::one() + (x * F::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (F::c(-0.5) * x * x).exp() * F::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            cdf + x * pdf
        }
        Unary::Softplus => sigmoid(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn elementwise_forward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let y = g.input(t(&[2], &[3.0, 4.0]));
        let s = g.add(x, y).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let z = g.input(t(&[1], &[7.0]));
        let id = g.identity(z).unwrap();
        assert_eq!(g.value(id).data(), &[7.0]);

        let w = g.input(t(&[2], &[0.5, 2.0]));
        let sq = g.mul(w, w).unwrap();
        assert_eq!(g.value(sq).data(), &[0.25, 4.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[0.3, -1.0, 2.0]));
        let l = g.sum(x).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[6.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1], &[0.0]));
        let s = g.sigmoid(x).unwrap();
        let l = g.sum(s).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let y = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        match g.add(x, y) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape error, got {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn seed_shape_and_foreign_vars_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.backward(y).is_err(), "non-scalar output needs an explicit seed");
        assert!(g.backward_with_seed(y, &Tensor::zeros(vec![3])).is_err());
        assert!(matches!(g.backward(Var(99)), Err(Error::Backward(_))));
        let gr = g.backward_with_seed(y, &t(&[2], &[1.0, -1.0])).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn non_finite_values_are_caught() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(true);
        let x = g.input(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn gradients_accumulate_over_paths() {
        // L = sum(x*x + 3x) -> dL/dx = 2x + 3
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.5, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let s = g.add(sq, lin).unwrap();
        let l = g.sum(s).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[6.0, -1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let k = g.constant(t(&[2], &[5.0, 5.0]));
        let p = g.mul(x, k).unwrap();
        let l = g.sum(p).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(gr.get(k).is_none());
        assert_eq!(gr.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn conv_geometry() {
        assert_eq!(ConvGeom::new(3, 1, 1).out_extent(5), Some(5));
        assert_eq!(ConvGeom::new(4, 4, 0).out_extent(32), Some(8));
        assert_eq!(ConvGeom::new(2, 2, 0).out_extent(5), None);
        assert_eq!(ConvGeom::new(3, 1, 0).out_extent(2), None);
    }
}
