//! Building blocks of the backbone stages.
//!
//! * [`Laef`]: pointwise embedding to the output width, a partial local
//!   refinement of the first `round(r * C_out)` channels, then a two-group
//!   channel shuffle.
//! * [`RevSsm`]: a gated pair of branches (scan branch and depthwise branch)
//!   fused by [`Laef`] and added back to the input.
//! * [`Eca`] and [`Fmiam`]: cross-gated fusion of a local and a global
//!   branch followed by efficient channel attention.
//! * [`MambaMicBlock`]: splits channels between a convolutional local path
//!   and four parallel [`RevSsm`] groups, then fuses the two with [`Fmiam`].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{channel_partition, channel_shuffle, Activation, Depthwise, LayerNorm, Linear, Pointwise};
use crate::params::{fan_in_uniform, ParamStore};
use crate::sscan::Ssm2dLayer;
use crate::tensor::Real;

/// Structural switches used by the ablation harness. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockOptions {
    /// Off: a single pointwise map `lambda*C_g -> C_g` replaces the fusion.
    pub use_laef: bool,
    /// Off: the two branches are concatenated without gating or attention.
    pub use_fmiam: bool,
    /// Off: one scan module over all `C/2` global channels, no shuffle.
    pub parallel_vssm: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions { use_laef: true, use_fmiam: true, parallel_vssm: true }
    }
}

/// Hyperparameters shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockHyper {
    pub lambda: usize,
    pub r: f64,
    pub state: usize,
    pub eca_kernel: usize,
    pub options: BlockOptions,
}

impl Default for BlockHyper {
    fn default() -> Self {
        BlockHyper { lambda: 2, r: 0.25, state: 8, eca_kernel: 3, options: BlockOptions::default() }
    }
}

pub const PARALLEL_GROUPS: usize = 4;

/// Size of the locally refined channel group: `round(r * c_out)` with
/// halves rounded up, clamped to `[1, c_out - 1]` unless `r = 1`.
pub fn local_channels(r: f64, c_out: usize) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config("r", format!("partial channel ratio must lie in (0, 1], got {r}")));
    }
    if c_out == 0 {
        return Err(Error::config("r", "LAEF output width is zero"));
    }
    if r == 1.0 {
        return Ok(c_out);
    }
    let n = (r * c_out as f64 + 0.5).floor() as usize;
    Ok(n.clamp(1, (c_out - 1).max(1)))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
pub struct Laef {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub local: usize,
    embed: Pointwise,
    refine: Pointwise,
}

impl Laef {
    pub fn new(name: &str, cin: usize, cout: usize, r: f64) -> Result<Self> {
        let local = local_channels(r, cout)?;
        Ok(Laef {
            name: name.to_string(),
            cin,
            cout,
            local,
            embed: Linear::new(format!("{name}.embed"), cin, cout),
            refine: Linear::new(format!("{name}.local"), local, local),
        })
    }

    pub fn retained(&self) -> usize {
        self.cout - self.local
    }

    /// Groups of the output shuffle: 2, or 1 when the width is odd.
    pub fn shuffle_groups(&self) -> usize {
        gcd(2, self.cout)
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.embed.init(store, rng);
        self.refine.init(store, rng);
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params() + self.refine.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.embed.macs(h * w) + self.refine.macs(h * w)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let e = self.embed.forward(g, store, x)?;
        let xp = g.silu(e)?;
        let mut parts = if self.retained() > 0 {
            channel_partition(g, xp, &[self.local, self.retained()])?
        } else {
            vec![xp]
        };
        let refined = self.refine.forward(g, store, parts[0])?;
        parts[0] = g.silu(refined)?;
        let joined = if parts.len() > 1 { g.concat_channels(&parts)? } else { parts[0] };
        channel_shuffle(g, joined, self.shuffle_groups())
    }
}

/// Fusion stage of [`RevSsm`]: the full [`Laef`] or its ablated stand-in.
#[derive(Debug, Clone)]
pub enum Fusion {
    Laef(Laef),
    Plain(Pointwise),
}

impl Fusion {
    fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        match self {
            Fusion::Laef(l) => l.init(store, rng),
            Fusion::Plain(p) => p.init(store, rng),
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Fusion::Laef(l) => l.num_params(),
            Fusion::Plain(p) => p.num_params(),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Fusion::Laef(l) => l.macs(h, w),
            Fusion::Plain(p) => p.macs(h * w),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        match self {
            Fusion::Laef(l) => l.forward(g, store, x),
            Fusion::Plain(p) => p.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RevSsm {
    pub name: String,
    pub channels: usize,
    pub lambda: usize,
    in_proj: Linear,
    dw_scan: Depthwise,
    ssm: Ssm2dLayer,
    ln_scan: LayerNorm,
    ln_in: LayerNorm,
    dw_gate: Depthwise,
    fusion: Fusion,
}

impl RevSsm {
    pub fn new(name: &str, channels: usize, hyper: &BlockHyper) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("channels", "scan group width is zero"));
        }
        if hyper.lambda == 0 {
            return Err(Error::config("lambda", "channel expansion factor must be at least 1"));
        }
        if hyper.state == 0 {
            return Err(Error::config("ssm_state", "state size must be at least 1"));
        }
        let inner = hyper.lambda * channels;
        let fusion = if hyper.options.use_laef {
            Fusion::Laef(Laef::new(&format!("{name}.laef"), inner, channels, hyper.r)?)
        } else {
            Fusion::Plain(Linear::new(format!("{name}.fuse"), inner, channels))
        };
        Ok(RevSsm {
            name: name.to_string(),
            channels,
            lambda: hyper.lambda,
            in_proj: Linear::new(format!("{name}.in_proj"), channels, inner),
            dw_scan: Depthwise::same3(format!("{name}.dw_scan"), inner, 1),
            ssm: Ssm2dLayer::new(format!("{name}.ssm"), inner, hyper.state),
            ln_scan: LayerNorm::new(format!("{name}.ln_scan"), inner),
            ln_in: LayerNorm::new(format!("{name}.ln_in"), channels),
            dw_gate: Depthwise::same3(format!("{name}.dw_gate"), channels, hyper.lambda),
            fusion,
        })
    }

    pub fn inner(&self) -> usize {
        self.lambda * self.channels
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.in_proj.init(store, rng);
        self.dw_scan.init(store, rng);
        self.ssm.init(store, rng);
        self.ln_scan.init(store);
        self.ln_in.init(store);
        self.dw_gate.init(store, rng);
        self.fusion.init(store, rng);
    }

    pub fn num_params(&self) -> usize {
        self.in_proj.num_params()
            + self.dw_scan.num_params()
            + self.ssm.num_params()
            + self.ln_scan.num_params()
            + self.ln_in.num_params()
            + self.dw_gate.num_params()
            + self.fusion.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.in_proj.macs(h * w)
            + self.dw_scan.macs(h, w)
            + self.ssm.macs(h * w)
            + self.dw_gate.macs(h, w)
            + self.fusion.macs(h, w)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let p = self.in_proj.forward(g, store, x)?;
        let d = self.dw_scan.forward(g, store, p)?;
        let a = g.silu(d)?;
        let s = self.ssm.forward(g, store, a)?;
        let x1 = self.ln_scan.forward(g, store, s)?;

        let n = self.ln_in.forward(g, store, x)?;
        let d2 = self.dw_gate.forward(g, store, n)?;
        let x2 = g.silu(d2)?;

        let prod = g.mul(x1, x2)?;
        let fused = self.fusion.forward(g, store, prod)?;
        g.add(x, fused)
    }
}

/// Efficient channel attention: pooled channel statistics, a bias-free
/// zero-padded 1-D convolution across channels and a sigmoid gate.
#[derive(Debug, Clone)]
pub struct Eca {
    pub name: String,
    pub kernel: usize,
}

impl Eca {
    pub fn new(name: impl Into<String>, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config("eca_kernel", format!("must be odd, got {kernel}")));
        }
        Ok(Eca { name: name.into(), kernel })
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        store.insert(format!("{}.weight", self.name), fan_in_uniform(rng, &[self.kernel], self.kernel));
    }

    pub fn num_params(&self) -> usize {
        self.kernel
    }

    pub fn macs(&self, channels: usize) -> u64 {
        (self.kernel * channels) as u64
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let s = g.global_avg_pool(x)?;
        let z = g.channel_conv1d(s, w)?;
        let gate = g.sigmoid(z)?;
        g.scale_channels(x, gate)
    }
}

#[derive(Debug, Clone)]
pub struct Fmiam {
    pub name: String,
    pub branch_channels: usize,
    /// Activation inside the local weight map.
    pub act_local: Activation,
    /// Activation inside the global weight map.
    pub act_global: Activation,
    pw_local: Pointwise,
    pw_global: Pointwise,
    eca: Eca,
}

impl Fmiam {
    pub fn new(name: &str, branch_channels: usize, eca_kernel: usize) -> Result<Self> {
        Ok(Fmiam {
            name: name.to_string(),
            branch_channels,
            act_local: Activation::Relu,
            act_global: Activation::Gelu,
            pw_local: Linear::new(format!("{name}.pw_local"), branch_channels, branch_channels),
            pw_global: Linear::new(format!("{name}.pw_global"), branch_channels, branch_channels),
            eca: Eca::new(format!("{name}.eca"), eca_kernel)?,
        })
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.pw_local.init(store, rng);
        self.pw_global.init(store, rng);
        self.eca.init(store, rng);
    }

    pub fn num_params(&self) -> usize {
        self.pw_local.num_params() + self.pw_global.num_params() + self.eca.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.pw_local.macs(h * w) + self.pw_global.macs(h * w) + self.eca.macs(2 * self.branch_channels)
    }

    /// Cross-gated concatenation before channel attention:
    /// `[sigmoid(act_g(PW_g(F_G))) * F_L, sigmoid(act_l(PW_l(F_L))) * F_G]`.
    pub fn fuse<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, f_local: Var, f_global: Var) -> Result<Var> {
        if g.shape(f_local) != g.shape(f_global) {
            return Err(Error::shape(
                "fmiam",
                format!("local branch {:?} vs global branch {:?}", g.shape(f_local), g.shape(f_global)),
            ));
        }
        let pl = self.pw_local.forward(g, store, f_local)?;
        let al = self.act_local.apply(g, pl)?;
        let w_local = g.sigmoid(al)?;
        let pg = self.pw_global.forward(g, store, f_global)?;
        let ag = self.act_global.apply(g, pg)?;
        let w_global = g.sigmoid(ag)?;
        let gated_local = g.mul(w_global, f_local)?;
        let gated_global = g.mul(w_local, f_global)?;
        g.concat_channels(&[gated_local, gated_global])
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, f_local: Var, f_global: Var) -> Result<Var> {
        let fused = self.fuse(g, store, f_local, f_global)?;
        self.eca.forward(g, store, fused)
    }
}

#[derive(Debug, Clone)]
pub struct MambaMicBlock {
    pub name: String,
    pub channels: usize,
    pub options: BlockOptions,
    local_dw: Depthwise,
    local_pw: Pointwise,
    groups: Vec<RevSsm>,
    fmiam: Option<Fmiam>,
}

impl MambaMicBlock {
    pub fn new(name: &str, channels: usize, hyper: &BlockHyper) -> Result<Self> {
        let opts = hyper.options;
        let divisor = if opts.parallel_vssm { 2 * PARALLEL_GROUPS } else { 2 };
        if channels == 0 || channels % divisor != 0 {
            return Err(Error::config("stage_channels", format!("block width {channels} must be a positive multiple of {divisor}")));
        }
        let half = channels / 2;
        let groups = if opts.parallel_vssm {
            (0..PARALLEL_GROUPS)
                .map(|i| RevSsm::new(&format!("{name}.revssm{i}"), half / PARALLEL_GROUPS, hyper))
                .collect::<Result<_>>()?
        } else {
            vec![RevSsm::new(&format!("{name}.revssm"), half, hyper)?]
        };
        let fmiam = if opts.use_fmiam { Some(Fmiam::new(&format!("{name}.fmiam"), half, hyper.eca_kernel)?) } else { None };
        Ok(MambaMicBlock {
            name: name.to_string(),
            channels,
            options: opts,
            local_dw: Depthwise::same3(format!("{name}.local_dw"), half, 1),
            local_pw: Linear::new(format!("{name}.local_pw"), half, half),
            groups,
            fmiam,
        })
    }

    pub fn groups(&self) -> &[RevSsm] {
        &self.groups
    }

    pub fn fmiam(&self) -> Option<&Fmiam> {
        self.fmiam.as_ref()
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.local_dw.init(store, rng);
        self.local_pw.init(store, rng);
        for r in &self.groups {
            r.init(store, rng);
        }
        if let Some(f) = &self.fmiam {
            f.init(store, rng);
        }
    }

    pub fn num_params(&self) -> usize {
        self.local_dw.num_params()
            + self.local_pw.num_params()
            + self.groups.iter().map(RevSsm::num_params).sum::<usize>()
            + self.fmiam.as_ref().map_or(0, Fmiam::num_params)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.local_dw.macs(h, w)
            + self.local_pw.macs(h * w)
            + self.groups.iter().map(|r| r.macs(h, w)).sum::<u64>()
            + self.fmiam.as_ref().map_or(0, |f| f.macs(h, w))
    }

    /// Local path output and global path output, each `C/2` wide.
    pub fn branches<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<(Var, Var)> {
        let half = self.channels / 2;
        let c = g.shape(x).last().copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape("mambamic_block", format!("{c} channels vs block width {}", self.channels)));
        }
        let halves = channel_partition(g, x, &[half, half])?;
        let d = self.local_dw.forward(g, store, halves[0])?;
        let f_local = self.local_pw.forward(g, store, d)?;

        let f_global = if self.groups.len() == 1 {
            self.groups[0].forward(g, store, halves[1])?
        } else {
            let sizes = vec![half / self.groups.len(); self.groups.len()];
            let parts = channel_partition(g, halves[1], &sizes)?;
            let outs = self
                .groups
                .iter()
                .zip(parts)
                .map(|(r, p)| r.forward(g, store, p))
                .collect::<Result<Vec<_>>>()?;
            let joined = g.concat_channels(&outs)?;
            channel_shuffle(g, joined, self.groups.len())?
        };
        Ok((f_local, f_global))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let in_shape = g.shape(x).to_vec();
        let (f_local, f_global) = self.branches(g, store, x)?;
        let out = match &self.fmiam {
            Some(f) => f.forward(g, store, f_local, f_global)?,
            None => g.concat_channels(&[f_local, f_global])?,
        };
        debug_assert_eq!(g.shape(out), in_shape.as_slice());
        Ok(out)
    }
}
