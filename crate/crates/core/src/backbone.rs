//! Four-stage classifier and its parameter / MAC accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::blocks::{BlockHyper, BlockOptions, MambaMicBlock};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const STEM_PATCH: usize = 4;
pub const MERGE_PATCH: usize = 2;
/// Total downsampling from input to the last stage.
pub const TOTAL_STRIDE: usize = STEM_PATCH * MERGE_PATCH * MERGE_PATCH * MERGE_PATCH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: String,
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub lambda: usize,
    pub r: f64,
    pub ssm_state: usize,
    pub eca_kernel: usize,
    pub num_classes: usize,
    pub input_size: usize,
    #[serde(default)]
    pub options: BlockOptions,
}

impl ModelConfig {
    pub const VARIANTS: [&'static str; 3] = ["tiny", "small", "base"];

    /// Named layout with desk-scale defaults.
    pub fn variant(name: &str, num_classes: usize, in_channels: usize) -> Result<Self> {
        let (stage_channels, stage_depths) = match name {
            "tiny" => ([32, 64, 128, 256], [2, 2, 4, 2]),
            "small" => ([40, 80, 160, 320], [2, 2, 4, 2]),
            "base" => ([48, 96, 192, 384], [2, 2, 8, 2]),
            other => {
                return Err(Error::config("variant", format!("unknown variant `{other}` (expected tiny, small or base)")))
            }
        };
        let hyper = BlockHyper::default();
        let cfg = ModelConfig {
            variant: name.to_string(),
            in_channels,
            stage_channels,
            stage_depths,
            lambda: hyper.lambda,
            r: hyper.r,
            ssm_state: hyper.state,
            eca_kernel: hyper.eca_kernel,
            num_classes,
            input_size: 32,
            options: BlockOptions::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hyper(&self) -> BlockHyper {
        BlockHyper {
            lambda: self.lambda,
            r: self.r,
            state: self.ssm_state,
            eca_kernel: self.eca_kernel,
            options: self.options,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_size == 0 || self.input_size % TOTAL_STRIDE != 0 {
            return Err(Error::config("input_size", format!("{} is not a positive multiple of {TOTAL_STRIDE}", self.input_size)));
        }
        let divisor = if self.options.parallel_vssm { 8 } else { 2 };
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % divisor != 0 {
                return Err(Error::config("stage_channels", format!("stage {i} width {c} is not a positive multiple of {divisor}")));
            }
            if i > 0 && c != 2 * self.stage_channels[i - 1] {
                return Err(Error::config(
                    "stage_channels",
                    format!("stage {i} width {c} must double stage {} width {}", i - 1, self.stage_channels[i - 1]),
                ));
            }
        }
        if let Some(i) = self.stage_depths.iter().position(|&d| d == 0) {
            return Err(Error::config("stage_depths", format!("stage {i} has no blocks")));
        }
        if self.lambda == 0 {
            return Err(Error::config("lambda", "must be at least 1"));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::config("r", format!("must lie in (0, 1], got {}", self.r)));
        }
        if self.ssm_state == 0 {
            return Err(Error::config("ssm_state", "must be at least 1"));
        }
        if self.eca_kernel % 2 == 0 {
            return Err(Error::config("eca_kernel", format!("must be odd, got {}", self.eca_kernel)));
        }
        Ok(())
    }

    /// Spatial side of each stage.
    pub fn stage_resolutions(&self) -> [usize; 4] {
        let s0 = self.input_size / STEM_PATCH;
        [s0, s0 / 2, s0 / 4, s0 / 8]
    }
}

/// Per-module parameter and MAC counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub module: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub entries: Vec<ReportEntry>,
    pub total_params: usize,
    pub total_macs: u64,
    pub input_size: usize,
}

impl ParamReport {
    fn from_entries(entries: Vec<ReportEntry>, input_size: usize) -> Self {
        let total_params = entries.iter().map(|e| e.params).sum();
        let total_macs = entries.iter().map(|e| e.macs).sum();
        ParamReport { entries, total_params, total_macs, input_size }
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.module.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  {:>12}  {:>16}\n", "module", "params", "MACs");
        for e in &self.entries {
            s += &format!("{:<width$}  {:>12}  {:>16}\n", e.module, e.params, e.macs);
        }
        s += &format!("{:<width$}  {:>12}  {:>16}\n", "total", self.total_params, self.total_macs);
        s += &format!("input_size {}: {:.4} M params, {:.4} GMACs\n", self.input_size, self.total_params as f64 / 1e6, self.total_macs as f64 / 1e9);
        s
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("input_size={}\ntotal_params={}\ntotal_macs={}\n", self.input_size, self.total_params, self.total_macs);
        for e in &self.entries {
            s += &format!("{}.params={}\n{}.macs={}\n", e.module, e.params, e.module, e.macs);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ModelConfig,
    stem: Conv2d,
    stem_ln: LayerNorm,
    stages: Vec<Vec<MambaMicBlock>>,
    merges: Vec<(Conv2d, LayerNorm)>,
    head: Linear,
}

impl Backbone {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let hyper = config.hyper();
        let ch = config.stage_channels;
        let stem = Conv2d::new("stem.conv", config.in_channels, ch[0], ConvGeom::new(STEM_PATCH, STEM_PATCH, 0));
        let stem_ln = LayerNorm::new("stem.ln", ch[0]);
        let mut stages = Vec::with_capacity(4);
        let mut merges = Vec::with_capacity(3);
        for (i, (&c, &depth)) in ch.iter().zip(&config.stage_depths).enumerate() {
            if i > 0 {
                merges.push((
                    Conv2d::new(format!("merge{i}.conv"), ch[i - 1], c, ConvGeom::new(MERGE_PATCH, MERGE_PATCH, 0)),
                    LayerNorm::new(format!("merge{i}.ln"), c),
                ));
            }
            let blocks = (0..depth)
                .map(|j| MambaMicBlock::new(&format!("stage{i}.block{j}"), c, &hyper))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let head = Linear::new("head", ch[3], config.num_classes);
        Ok(Backbone { config, stem, stem_ln, stages, merges, head })
    }

    pub fn stages(&self) -> &[Vec<MambaMicBlock>] {
        &self.stages
    }

    /// Fresh parameters from `seed`, in construction order.
    pub fn init<F: Real>(&self, seed: u64) -> ParamStore<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.stem.init(&mut store, &mut rng);
        self.stem_ln.init(&mut store);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                let (conv, ln) = &self.merges[i - 1];
                conv.init(&mut store, &mut rng);
                ln.init(&mut store);
            }
            for b in blocks {
                b.init(&mut store, &mut rng);
            }
        }
        self.head.init(&mut store, &mut rng);
        store
    }

    /// Features before the head, `[B, C_4]`.
    pub fn features<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let expected = [self.config.input_size, self.config.input_size, self.config.in_channels];
        if s.len() != 4 || s[1..] != expected {
            return Err(Error::shape("backbone", format!("input {s:?}, expected [B, {}, {}, {}]", expected[0], expected[1], expected[2])));
        }
        let c = self.stem.forward(g, store, x)?;
        let mut h = self.stem_ln.forward(g, store, c)?;
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                let (conv, ln) = &self.merges[i - 1];
                let m = conv.forward(g, store, h)?;
                h = ln.forward(g, store, m)?;
            }
            for b in blocks {
                h = b.forward(g, store, h)?;
            }
        }
        g.global_avg_pool(h)
    }

    /// Logits `[B, num_classes]` for NHWC images.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let f = self.features(g, store, x)?;
        self.head.forward(g, store, f)
    }

    /// Analytic per-module counts at `input_size`. Convolutions, linear maps,
    /// channel attention and the scan recurrence are counted; normalization,
    /// activations, gating products and pooling are not.
    pub fn report(&self, input_size: usize) -> ParamReport {
        let mut entries = Vec::new();
        let side = input_size / STEM_PATCH;
        entries.push(ReportEntry {
            module: "stem".into(),
            params: self.stem.num_params() + self.stem_ln.num_params(),
            macs: self.stem.macs(input_size, input_size),
        });
        let mut s = side;
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                let (conv, ln) = &self.merges[i - 1];
                entries.push(ReportEntry {
                    module: format!("merge{i}"),
                    params: conv.num_params() + ln.num_params(),
                    macs: conv.macs(s, s),
                });
                s /= MERGE_PATCH;
            }
            entries.push(ReportEntry {
                module: format!("stage{i}"),
                params: blocks.iter().map(MambaMicBlock::num_params).sum(),
                macs: blocks.iter().map(|b| b.macs(s, s)).sum(),
            });
        }
        entries.push(ReportEntry { module: "head".into(), params: self.head.num_params(), macs: self.head.macs(1) });
        ParamReport::from_entries(entries, input_size)
    }

    pub fn count_params(&self) -> usize {
        self.report(self.config.input_size).total_params
    }

    pub fn count_macs(&self, input_size: usize) -> u64 {
        self.report(input_size).total_macs
    }
}

/// Exhaustive count of stored scalars.
pub fn enumerate_params<F: Real>(store: &ParamStore<F>) -> usize {
    store.iter().map(|(_, t)| t.numel()).sum()
}
