//! Run configuration, checkpoints and the `mmic` command line.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{enumerate_params, Backbone, ModelConfig};
use crate::blocks::BlockOptions;
use crate::data::{load_dataset, normalize, split_dataset, synthetic_textures, Dataset, Split, SplitIndex};
use crate::error::{Error, Result};
use crate::params::{uniform, ParamStore};
use crate::sscan::{scan_blocked, scan_sequential, SsmParams};
use crate::tensor::{decode_body, encode_body, read_u32, read_u8, AnyTensor, Tensor};
use crate::trainer::{
    evaluate, history_lines, history_table, softmax_rows, train_loop, Adam, BestRecord, MetricsReport, StopReason,
    TrainOptions, TrainSchedule, TrainState,
};

pub const THREADS_ENV: &str = "MMIC_THREADS";

fn d_in_channels() -> usize {
    3
}
fn d_input_size() -> usize {
    32
}
fn d_lambda() -> usize {
    2
}
fn d_r() -> f64 {
    0.25
}
fn d_ssm_state() -> usize {
    8
}
fn d_eca_kernel() -> usize {
    3
}
fn d_true() -> bool {
    true
}
fn d_lr() -> f64 {
    1e-4
}
fn d_wd() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    16
}
fn d_epochs() -> usize {
    200
}
fn d_warmup() -> usize {
    10
}
fn d_patience() -> usize {
    20
}
fn d_split() -> [usize; 3] {
    [6, 2, 2]
}
fn d_seed() -> u64 {
    42
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("runs/mambamic")
}

/// Everything a run needs. Only `variant`, `data` and `classes` are
/// required; `stage_channels`/`stage_depths` override the variant layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: String,
    pub data: PathBuf,
    pub classes: usize,
    #[serde(default = "d_in_channels")]
    pub in_channels: usize,
    #[serde(default = "d_input_size")]
    pub input_size: usize,
    #[serde(default)]
    pub stage_channels: Option<[usize; 4]>,
    #[serde(default)]
    pub stage_depths: Option<[usize; 4]>,
    #[serde(default = "d_lambda")]
    pub lambda: usize,
    #[serde(default = "d_r")]
    pub r: f64,
    #[serde(default = "d_ssm_state")]
    pub ssm_state: usize,
    #[serde(default = "d_eca_kernel")]
    pub eca_kernel: usize,
    #[serde(default = "d_true")]
    pub use_laef: bool,
    #[serde(default = "d_true")]
    pub use_fmiam: bool,
    #[serde(default = "d_true")]
    pub parallel_vssm: bool,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub min_lr: Option<f64>,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default)]
    pub target_val_oa: Option<f64>,
    #[serde(default = "d_split")]
    pub split: [usize; 3],
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Defaults for everything but the three required fields.
    pub fn new(variant: &str, data: impl Into<PathBuf>, classes: usize) -> Self {
        let text = serde_json::json!({ "variant": variant, "data": data.into(), "classes": classes });
        serde_json::from_value(text).expect("defaults are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.data.is_relative() {
            if let Some(base) = path.parent() {
                let joined = base.join(&cfg.data);
                if !cfg.data.exists() && joined.exists() {
                    cfg.data = joined;
                }
            }
        }
        Ok(cfg)
    }

    pub fn options(&self) -> BlockOptions {
        BlockOptions { use_laef: self.use_laef, use_fmiam: self.use_fmiam, parallel_vssm: self.parallel_vssm }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::variant(&self.variant, self.classes.max(2), self.in_channels.max(1))?;
        m.num_classes = self.classes;
        m.in_channels = self.in_channels;
        m.input_size = self.input_size;
        if let Some(c) = self.stage_channels {
            m.stage_channels = c;
        }
        if let Some(d) = self.stage_depths {
            m.stage_depths = d;
        }
        m.lambda = self.lambda;
        m.r = self.r;
        m.ssm_state = self.ssm_state;
        m.eca_kernel = self.eca_kernel;
        m.options = self.options();
        m.validate()?;
        Ok(m)
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            total_epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            base_lr: self.learning_rate,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            patience: self.patience,
            batch_size: self.batch_size,
            seed: self.seed,
            target_val_oa: self.target_val_oa,
        }
    }

    /// Constraint checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.schedule().validate()?;
        if self.split.contains(&0) {
            return Err(Error::config("split", format!("ratio components must be positive, got {:?}", self.split)));
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<()> {
        if !self.data.exists() {
            return Err(Error::config("data", format!("{} does not exist", self.data.display())));
        }
        Ok(())
    }

    /// Pretty JSON with every default filled in.
    pub fn resolved_json(&self) -> String {
        let mut resolved = self.clone();
        resolved.min_lr = Some(self.schedule().min_lr());
        serde_json::to_string_pretty(&resolved).expect("config serializes") + "\n"
    }
}

// ---- checkpoints ----------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMIC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Run configuration as JSON text, stored verbatim.
    pub config_text: String,
    /// Epochs completed when the checkpoint was written.
    pub epochs_done: usize,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
    pub best: Option<BestRecord>,
}

fn write_table(out: &mut Vec<u8>, store: &ParamStore<f32>) -> Result<()> {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_body(out, t.shape(), t.data())?;
    }
    Ok(())
}

fn read_bytes<'a>(cursor: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if cursor.len() < n {
        return Err(Error::Format(format!("truncated {what}")));
    }
    let (head, rest) = cursor.split_at(n);
    *cursor = rest;
    Ok(head)
}

fn read_u64(cursor: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(cursor, 8, "integer")?.try_into().unwrap()))
}

fn read_f64(cursor: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_le_bytes(read_bytes(cursor, 8, "number")?.try_into().unwrap()))
}

fn read_table(cursor: &mut &[u8]) -> Result<ParamStore<f32>> {
    let n = read_u32(cursor)?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = read_u32(cursor)? as usize;
        let name = String::from_utf8(read_bytes(cursor, len, "tensor name")?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let t = match decode_body(cursor)? {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        };
        store.insert(name, t);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.epochs_done as u32).to_le_bytes());
        write_table(&mut out, &self.params)?;
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                write_table(&mut out, &o.m)?;
                write_table(&mut out, &o.v)?;
            }
        }
        match &self.best {
            None => out.push(0),
            Some(b) => {
                out.push(1);
                out.extend_from_slice(&(b.epoch as u32).to_le_bytes());
                for v in [b.val_oa, b.val_precision, b.val_auc] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut c = &bytes[4..];
        let cursor = &mut c;
        let version = read_u32(cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let len = read_u32(cursor)? as usize;
        let config_text = String::from_utf8(read_bytes(cursor, len, "config text")?.to_vec())
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let epochs_done = read_u32(cursor)? as usize;
        let params = read_table(cursor)?;
        let optimizer = match read_u8(cursor)? {
            0 => None,
            1 => {
                let step = read_u64(cursor)?;
                Some(OptimizerState { step, m: read_table(cursor)?, v: read_table(cursor)? })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        let best = match read_u8(cursor)? {
            0 => None,
            1 => Some(BestRecord {
                epoch: read_u32(cursor)? as usize,
                val_oa: read_f64(cursor)?,
                val_precision: read_f64(cursor)?,
                val_auc: read_f64(cursor)?,
            }),
            f => return Err(Error::Format(format!("bad best-record flag {f}"))),
        };
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
        }
        Ok(Checkpoint { config_text, epochs_done, params, optimizer, best })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_json(&self.config_text)
    }

    /// Model and parameters, checking every name and shape against the
    /// stored configuration.
    pub fn restore(&self) -> Result<(RunConfig, Backbone, ParamStore<f32>)> {
        let cfg = self.config()?;
        let model = Backbone::new(cfg.model_config()?)?;
        let mut params = model.init::<f32>(cfg.seed);
        params.load_from(&self.params)?;
        Ok((cfg, model, params))
    }

    pub fn optimizer_for(&self, weight_decay: f64) -> Option<Adam<f32>> {
        self.optimizer.as_ref().map(|o| {
            let mut a = Adam::new(&self.params, weight_decay);
            a.step = o.step;
            a.m = o.m.clone();
            a.v = o.v.clone();
            a
        })
    }
}

// ---- library-level workflows ------------------------------------------------------

/// Worker count from `MMIC_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(THREADS_ENV, format!("expected a positive integer, got `{v}`"))),
        },
    }
}

/// Loads the configured dataset and checks it against the model geometry.
pub fn load_run_data(cfg: &RunConfig) -> Result<(Dataset, SplitIndex)> {
    cfg.check_paths()?;
    let data = load_dataset(&cfg.data, Some(cfg.classes))?;
    let (h, w, c) = data.geometry();
    if h != cfg.input_size || w != cfg.input_size || c != cfg.in_channels {
        return Err(Error::Data(format!(
            "images are {h}x{w}x{c}, config expects {0}x{0}x{1}",
            cfg.input_size, cfg.in_channels
        )));
    }
    let split = split_dataset(&data.labels, cfg.classes, cfg.split, cfg.seed)?;
    Ok((data, split))
}

#[derive(Debug)]
pub struct RunSummary {
    pub stop: StopReason,
    pub best: Option<BestRecord>,
    pub history_table: String,
    pub test: Option<MetricsReport>,
    pub params: usize,
    pub macs: u64,
}

/// Trains per `cfg`, writing the resolved config, history and checkpoints
/// (`best.mmic`, `last.mmic`) to `cfg.output_dir`.
pub fn train_run(cfg: &RunConfig, resume: Option<&Checkpoint>, opts: &TrainOptions) -> Result<RunSummary> {
    let threads = opts.threads.max(1);
    let (data, split) = load_run_data(cfg)?;
    let model = Backbone::new(cfg.model_config()?)?;
    let sched = cfg.schedule();
    let config_text = cfg.resolved_json();
    let state = match resume {
        None => TrainState { params: model.init(cfg.seed), optimizer: None, start_epoch: 0 },
        Some(ck) => {
            let mut params = model.init::<f32>(cfg.seed);
            params.load_from(&ck.params)?;
            TrainState { optimizer: ck.optimizer_for(sched.weight_decay), params, start_epoch: ck.epochs_done }
        }
    };
    let start = state.start_epoch;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("config.resolved.json", &config_text)?;

    let out = train_loop(&model, state, &data, &split.indices(Split::Train), &split.indices(Split::Val), &sched, opts)?;

    write("history.txt", &history_table(&out.history))?;
    write("history.csv", &history_lines(&out.history))?;
    let epochs_done = start + out.history.len();
    Checkpoint {
        config_text: config_text.clone(),
        epochs_done,
        params: out.final_params.clone(),
        optimizer: Some(OptimizerState { step: out.optimizer.step, m: out.optimizer.m.clone(), v: out.optimizer.v.clone() }),
        best: out.best,
    }
    .save(dir.join("last.mmic"))?;
    Checkpoint {
        config_text,
        epochs_done: out.best.map_or(0, |b| b.epoch + 1),
        params: out.best_params.clone(),
        optimizer: None,
        best: out.best,
    }
    .save(dir.join("best.mmic"))?;

    let test_idx = split.indices(Split::Test);
    let test = if out.stop != StopReason::Interrupted && !test_idx.is_empty() {
        Some(evaluate(&model, &out.best_params, &data, &test_idx, sched.batch_size, threads)?)
    } else {
        None
    };
    let report = model.report(cfg.input_size);
    Ok(RunSummary {
        stop: out.stop,
        best: out.best,
        history_table: history_table(&out.history),
        test,
        params: report.total_params,
        macs: report.total_macs,
    })
}

/// One row of an ablation study.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub study: &'static str,
    pub label: String,
    pub params: usize,
    pub macs: u64,
    /// Test metrics of the best-validation model; `None` without training.
    pub metrics: Option<(f64, f64, f64)>,
}

/// Configurations for the structural ablations and the partial-ratio sweep.
pub fn ablation_grid(base: &RunConfig, studies: &[&str], ratios: &[f64]) -> Result<Vec<(&'static str, String, RunConfig)>> {
    let mut rows = Vec::new();
    for &study in studies {
        match study {
            "fusion" => {
                for (laef, fmiam) in [(false, false), (true, false), (false, true), (true, true)] {
                    let cfg = RunConfig { use_laef: laef, use_fmiam: fmiam, ..base.clone() };
                    let mark = |b: bool| if b { "yes" } else { "no" };
                    rows.push(("fusion", format!("LAEF={} FMIAM={}", mark(laef), mark(fmiam)), cfg));
                }
            }
            "parallel" => {
                for parallel in [false, true] {
                    let cfg = RunConfig { parallel_vssm: parallel, ..base.clone() };
                    rows.push(("parallel", if parallel { "parallel x4".into() } else { "single".into() }, cfg));
                }
            }
            "ratio" => {
                for &r in ratios {
                    rows.push(("ratio", format!("r={r}"), RunConfig { r, ..base.clone() }));
                }
            }
            other => return Err(Error::config("study", format!("unknown study `{other}` (fusion, parallel, ratio)"))),
        }
    }
    for (_, _, cfg) in &rows {
        cfg.validate()?;
    }
    Ok(rows)
}

pub fn run_ablation(
    base: &RunConfig,
    studies: &[&str],
    ratios: &[f64],
    train: bool,
    threads: usize,
    interrupt: Option<Arc<AtomicBool>>,
) -> Result<Vec<AblationRow>> {
    let grid = ablation_grid(base, studies, ratios)?;
    let mut out = Vec::with_capacity(grid.len());
    for (i, (study, label, mut cfg)) in grid.into_iter().enumerate() {
        let report = Backbone::new(cfg.model_config()?)?.report(cfg.input_size);
        let metrics = if train {
            cfg.output_dir = base.output_dir.join(format!("ablate{i:02}"));
            let opts = TrainOptions { interrupt: interrupt.clone(), threads, on_epoch: None };
            let s = train_run(&cfg, None, &opts)?;
            if s.stop == StopReason::Interrupted {
                return Err(Error::Data("interrupted".into()));
            }
            s.test.map(|m| (m.oa, m.precision, m.auc))
        } else {
            None
        };
        out.push(AblationRow { study, label, params: report.total_params, macs: report.total_macs, metrics });
    }
    Ok(out)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<9}  {:<22}  {:>10}  {:>8}  {:>7}  {:>7}  {:>7}\n", "study", "setting", "params", "GMACs", "OA", "Pre", "AUC");
    for r in rows {
        let (oa, pre, auc) = match r.metrics {
            Some((a, b, c)) => (format!("{a:.2}"), format!("{b:.2}"), format!("{c:.2}")),
            None => ("-".into(), "-".into(), "-".into()),
        };
        s += &format!(
            "{:<9}  {:<22}  {:>10}  {:>8.4}  {:>7}  {:>7}  {:>7}\n",
            r.study,
            r.label,
            r.params,
            r.macs as f64 / 1e9,
            oa,
            pre,
            auc
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub state: usize,
    pub dim: usize,
    pub variant: String,
    pub ns_per_token: f64,
    pub max_abs_err: f64,
}

/// Times the sequential and blocked scans on random inputs.
pub fn bench_scan(lengths: &[usize], blocks: &[usize], state: usize, dim: usize, reps: usize, threads: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = SsmParams::<f64>::init(dim, state, &mut rng);
    let a = p.a();
    let mut rows = Vec::new();
    for &len in lengths {
        let x = uniform::<f64>(&mut rng, &[len, dim], 1.0);
        let inputs = p.project(&x)?;
        let time = |f: &dyn Fn() -> Result<Tensor<f64>>| -> Result<(f64, Tensor<f64>)> {
            let mut out = f()?;
            let t = Instant::now();
            for _ in 0..reps.max(1) {
                out = f()?;
            }
            Ok((t.elapsed().as_nanos() as f64 / (reps.max(1) * len) as f64, out))
        };
        let (ns, reference) = time(&|| scan_sequential(&x, &inputs, &a, p.d_skip.data()))?;
        rows.push(BenchRow { len, state, dim, variant: "sequential".into(), ns_per_token: ns, max_abs_err: 0.0 });
        for &b in blocks {
            let (ns, y) = time(&|| scan_blocked(&x, &inputs, &a, p.d_skip.data(), b, threads))?;
            rows.push(BenchRow {
                len,
                state,
                dim,
                variant: format!("blocked-{b}"),
                ns_per_token: ns,
                max_abs_err: y.max_abs_diff(&reference),
            });
        }
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>6}  {:>3}  {:>7}  {:<12}  {:>10}  {:>12}\n", "L", "N", "D_inner", "variant", "ns/token", "max_abs_err");
    for r in rows {
        s += &format!(
            "{:>6}  {:>3}  {:>7}  {:<12}  {:>10.1}  {:>12.3e}\n",
            r.len, r.state, r.dim, r.variant, r.ns_per_token, r.max_abs_err
        );
    }
    s
}

pub fn metrics_text(m: &MetricsReport) -> String {
    let mut s = format!("OA {:.2}  Pre {:.2}  AUC {:.2}\nconfusion (rows: true, cols: predicted)\n", m.oa, m.precision, m.auc);
    for row in &m.confusion {
        s += &row.iter().map(|v| format!("{v:>6}")).collect::<String>();
        s.push('\n');
    }
    if !m.zero_precision_classes.is_empty() {
        s += &format!("never predicted: {:?}\n", m.zero_precision_classes);
    }
    if !m.auc_excluded_classes.is_empty() {
        s += &format!("AUC undefined for: {:?}\n", m.auc_excluded_classes);
    }
    s
}

// ---- command line -----------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "mmic", version, about = "Selective-scan image classifier: training, evaluation and tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a `last.mmic` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset path overriding the one stored in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Classify a single image (PPM, or `.mmt` with values in [0, 1]).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Print parameter and MAC counts.
    Params {
        #[arg(long, conflicts_with = "variant")]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        in_channels: usize,
        #[arg(long)]
        input_size: Option<usize>,
        /// Also write `key=value` lines to this file.
        #[arg(long)]
        kv: Option<PathBuf>,
    },
    /// Time the sequential and blocked scans.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = vec![64, 256, 1024])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![8, 64])]
        blocks: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        state: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Structural ablations and partial-ratio sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Partial ratios to sweep; alone, selects the ratio study.
        #[arg(long, value_delimiter = ',')]
        r: Option<Vec<f64>>,
        /// fusion, parallel, ratio (comma separated); default: all, or ratio when --r is given.
        #[arg(long, value_delimiter = ',')]
        study: Option<Vec<String>>,
        /// Override the configured epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        /// Only count parameters and MACs.
        #[arg(long)]
        no_train: bool,
    },
    /// Write a seeded synthetic stripe-texture dataset as an `.mmt` pair.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Installs a Ctrl-C handler once per process and returns its flag.
fn interrupt_flag() -> Arc<AtomicBool> {
    static FLAG: std::sync::OnceLock<Arc<AtomicBool>> = std::sync::OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = flag.clone();
        if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
            log::warn!("interrupt handler unavailable: {e}");
        }
        flag
    })
    .clone()
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Json(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (including the program name), runs the command writing
/// results to `out`, and returns the process exit status.
pub fn run_command<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    let threads = threads_from_env()?;
    match cmd {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let ck = resume.map(Checkpoint::load).transpose()?;
            let opts = TrainOptions { interrupt: Some(interrupt_flag()), threads, on_epoch: None };
            let summary = train_run(&cfg, ck.as_ref(), &opts)?;
            emit(out, &summary.history_table)?;
            if let Some(b) = summary.best {
                emit(out, &format!("best epoch {} val OA {:.2} Pre {:.2} AUC {:.2}\n", b.epoch + 1, b.val_oa, b.val_precision, b.val_auc))?;
            }
            if let Some(m) = &summary.test {
                emit(out, &format!("test {}", metrics_text(m)))?;
            }
            emit(out, &format!("checkpoints written to {}\n", cfg.output_dir.display()))?;
            if summary.stop == StopReason::Interrupted {
                eprintln!("interrupted; final checkpoint written");
                return Ok(1);
            }
            Ok(0)
        }
        Command::Eval { checkpoint, split, data } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (mut cfg, model, params) = ck.restore()?;
            if let Some(d) = data {
                cfg.data = d;
            }
            let (dataset, index) = load_run_data(&cfg)?;
            let idx = if split == "all" { (0..dataset.len()).collect() } else { index.indices(split.parse()?) };
            if idx.is_empty() {
                return Err(Error::Data(format!("split `{split}` is empty")));
            }
            let m = evaluate(&model, &params, &dataset, &idx, cfg.batch_size, threads)?;
            emit(out, &format!("{split} ({} records): {}", idx.len(), metrics_text(&m)))?;
            Ok(0)
        }
        Command::Predict { checkpoint, image } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (cfg, model, params) = ck.restore()?;
            let img = if image.extension().is_some_and(|e| e == "mmt") {
                AnyTensor::read_mmt(&image)?.to::<f32>()
            } else {
                crate::data::load_ppm(&image)?
            };
            let shape = img.shape().to_vec();
            let hwc = if shape.len() == 4 && shape[0] == 1 { shape[1..].to_vec() } else { shape.clone() };
            if hwc != [cfg.input_size, cfg.input_size, cfg.in_channels] {
                return Err(Error::Data(format!(
                    "image is {shape:?}, model expects [{0}, {0}, {1}]",
                    cfg.input_size, cfg.in_channels
                )));
            }
            let mut batched = vec![1];
            batched.extend(hwc);
            let x = normalize(&img).reshape(batched)?;
            let mut g = Graph::inference();
            let xv = g.input(x);
            let y = model.forward(&mut g, &params, xv)?;
            let probs = softmax_rows(g.value(y))?.remove(0);
            let class = probs.iter().enumerate().fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
            emit(out, &format!("class {class}\n"))?;
            for (i, p) in probs.iter().enumerate() {
                emit(out, &format!("p[{i}] = {p:.6}\n"))?;
            }
            Ok(0)
        }
        Command::Params { config, variant, classes, in_channels, input_size, kv } => {
            let mut mc = match (config, variant) {
                (Some(path), _) => RunConfig::load(path)?.model_config()?,
                (None, Some(v)) => ModelConfig::variant(&v, classes, in_channels)?,
                (None, None) => return Err(Error::config("params", "pass --config or --variant")),
            };
            if let Some(s) = input_size {
                mc.input_size = s;
                mc.validate()?;
            }
            let model = Backbone::new(mc.clone())?;
            let report = model.report(mc.input_size);
            let enumerated = enumerate_params(&model.init::<f32>(0));
            emit(out, &format!("variant {}\n", mc.variant))?;
            emit(out, &report.to_table())?;
            let verdict = if enumerated == report.total_params { "matches" } else { "MISMATCH" };
            emit(out, &format!("enumerated parameters {enumerated} ({verdict})\n"))?;
            if let Some(path) = kv {
                std::fs::write(&path, report.to_key_values()).map_err(|e| Error::io(&path, e))?;
            }
            Ok(if enumerated == report.total_params { 0 } else { 1 })
        }
        Command::BenchScan { lengths, blocks, state, dim, reps, seed } => {
            let rows = bench_scan(&lengths, &blocks, state, dim, reps, threads, seed)?;
            emit(out, &bench_table(&rows))?;
            Ok(0)
        }
        Command::Ablate { config, r, study, epochs, no_train } => {
            let mut base = RunConfig::load(&config)?;
            if let Some(e) = epochs {
                base.epochs = e;
                base.warmup_epochs = base.warmup_epochs.min(e.saturating_sub(1));
            }
            base.validate()?;
            let studies: Vec<String> = match (study, &r) {
                (Some(s), _) => s,
                (None, Some(_)) => vec!["ratio".into()],
                (None, None) => vec!["fusion".into(), "parallel".into(), "ratio".into()],
            };
            let ratios = r.unwrap_or_else(|| vec![0.125, 0.25, 0.5, 1.0]);
            let studies: Vec<&str> = studies.iter().map(String::as_str).collect();
            let rows = run_ablation(&base, &studies, &ratios, !no_train, threads, Some(interrupt_flag()))?;
            emit(out, &ablation_table(&rows))?;
            Ok(0)
        }
        Command::Synth { out: dir, n, size, channels, classes, seed } => {
            let ds = synthetic_textures(n, size, channels, classes, seed)?;
            ds.save(&dir)?;
            emit(out, &format!("wrote {n} samples ({size}x{size}x{channels}, {classes} classes) to {}\n", dir.display()))?;
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"variant": "tiny", "data": "d", "classes": 2}"#).unwrap();
        assert_eq!(cfg.r, 0.25);
        assert_eq!(cfg.lambda, 2);
        assert_eq!(cfg.ssm_state, 8);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg, RunConfig::new("tiny", "d", 2));
    }

    #[test]
    fn unknown_key_names_the_line() {
        let text = "{\n  \"variant\": \"tiny\",\n  \"data\": \"d\",\n  \"classes\": 2,\n  \"lerning_rate\": 0.1\n}";
        let err = RunConfig::from_json(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lerning_rate") && msg.contains("line 5"), "{msg}");
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn divisibility_is_field_precise() {
        let text = r#"{"variant": "tiny", "data": "d", "classes": 2, "stage_channels": [30, 60, 120, 240]}"#;
        match RunConfig::from_json(text).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "stage_channels"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_gates() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::new(vec![2], vec![1.5f32, -0.0]).unwrap());
        params.insert("b", Tensor::new(vec![1, 1], vec![f32::MIN_POSITIVE]).unwrap());
        let ck = Checkpoint {
            config_text: "{ \"x\": 1 }".into(),
            epochs_done: 3,
            params: params.clone(),
            optimizer: Some(OptimizerState { step: 9, m: params.clone(), v: params.clone() }),
            best: Some(BestRecord { epoch: 2, val_oa: 75.0, val_precision: 70.0, val_auc: 80.0 }),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.params == params);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(Checkpoint::from_bytes(&ver).is_err());
    }
}
