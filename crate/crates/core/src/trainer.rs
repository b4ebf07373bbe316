//! Optimization loop, learning-rate schedule, early stopping and metrics.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::Backbone;
use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, weight_decay: f64) -> Self {
        let zeros = |p: &ParamStore<F>| {
            let mut s = ParamStore::new();
            for (name, t) in p.iter() {
                s.insert(name, Tensor::zeros(t.shape().to_vec()));
            }
            s
        };
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(params), v: zeros(params) }
    }

    /// One update of every named gradient. Decay `p -= lr * wd * p` is
    /// applied first, then the bias-corrected Adam step. All gradients are
    /// checked before any parameter moves.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[(String, Tensor<F>)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let (one_b1, one_b2) = (F::c(1.0 - self.beta1), F::c(1.0 - self.beta2));
        let decay = F::c(1.0 - lr * self.weight_decay);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.get_mut(name)?;
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::shape("adam", format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            let v = self.v.get_mut(name)?;
            for (((pi, mi), vi), &gi) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = mi.f64() / c1;
                let vhat = vi.f64() / c2;
                *pi *= decay;
                *pi -= F::c(lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Epoch-level schedule and stopping rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    /// Defaults to `base_lr / 100`.
    pub min_lr: Option<f64>,
    pub weight_decay: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop as soon as validation OA (percent) reaches this value.
    pub target_val_oa: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_epochs: 200,
            warmup_epochs: 10,
            base_lr: 1e-4,
            min_lr: None,
            weight_decay: 1e-4,
            patience: 20,
            batch_size: 16,
            seed: 42,
            target_val_oa: None,
        }
    }
}

impl TrainSchedule {
    pub fn min_lr(&self) -> f64 {
        self.min_lr.unwrap_or(self.base_lr / 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!("{} must be below total epochs {}", self.warmup_epochs, self.total_epochs),
            ));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("learning_rate", format!("must be positive, got {}", self.base_lr)));
        }
        if !(self.min_lr() >= 0.0 && self.min_lr() <= self.base_lr) {
            return Err(Error::config("min_lr", format!("must lie in [0, learning_rate], got {}", self.min_lr())));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine annealing to `min_lr`.
pub fn lr_at(epoch: usize, sched: &TrainSchedule) -> f64 {
    let w = sched.warmup_epochs;
    if epoch < w {
        return sched.base_lr * (epoch + 1) as f64 / w as f64;
    }
    let t = (epoch - w) as f64;
    let big_t = (sched.total_epochs - w) as f64;
    let min = sched.min_lr();
    min + 0.5 * (sched.base_lr - min) * (1.0 + (std::f64::consts::PI * t / big_t).cos())
}

/// Patience counter over a maximized metric.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, best_epoch: None, stale: 0 }
    }

    /// Records `metric` for `epoch`. Returns `true` if this epoch is the new
    /// best. Epochs with `counting = false` can set a new best but never
    /// count toward patience.
    pub fn observe(&mut self, epoch: usize, metric: f64, counting: bool) -> bool {
        if self.best.map_or(true, |b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            if counting {
                self.stale += 1;
            }
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Percent.
    pub oa: f64,
    /// Macro precision, percent.
    pub precision: f64,
    /// Macro one-vs-rest AUC, percent; NaN if no class is defined.
    pub auc: f64,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Classes never predicted (precision scored 0).
    pub zero_precision_classes: Vec<usize>,
    /// Classes without positives or negatives (left out of the AUC mean).
    pub auc_excluded_classes: Vec<usize>,
}

/// Rank-based (Mann-Whitney) AUC of `scores` for the positive set; ties
/// between a positive and a negative count one half. `None` if either side
/// is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the average rank, keeps half ranks integral
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum2 += twice_avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u64;
    let u2 = rank_sum2 - np * (np + 1);
    Some(u2 as f64 / (2 * np * n_neg as u64) as f64)
}

/// Row-wise softmax of `[B, K]` logits.
pub fn softmax_rows<F: Real>(logits: &Tensor<F>) -> Result<Vec<Vec<f64>>> {
    let [_, k] = logits.shape()[..] else {
        return Err(Error::shape("softmax", format!("expected [B, K], got {:?}", logits.shape())));
    };
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.f64() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect())
}

/// OA, macro precision and macro one-vs-rest AUC (on softmax
/// probabilities) for `[B, K]` logits.
pub fn compute_metrics<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<MetricsReport> {
    let probs = softmax_rows(logits)?;
    metrics_from_scores(&probs, labels)
}

/// Same as [`compute_metrics`] on explicit per-class scores.
pub fn metrics_from_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<MetricsReport> {
    let b = scores.len();
    if b == 0 || labels.len() != b {
        return Err(Error::shape("compute_metrics", format!("{b} score rows for {} labels", labels.len())));
    }
    let k = scores[0].len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape("compute_metrics", format!("label {bad} out of range for {k} classes")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for (row, &label) in scores.iter().zip(labels) {
        // first maximum wins
        let pred = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
        confusion[label][pred] += 1;
        correct += usize::from(pred == label);
    }
    let oa = 100.0 * correct as f64 / b as f64;

    let mut zero_precision_classes = Vec::new();
    let mut prec_sum = 0.0;
    for c in 0..k {
        let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
        if predicted == 0 {
            zero_precision_classes.push(c);
        } else {
            prec_sum += confusion[c][c] as f64 / predicted as f64;
        }
    }
    let precision = 100.0 * prec_sum / k as f64;

    let mut auc_excluded_classes = Vec::new();
    let mut auc_sum = 0.0;
    let mut defined = 0;
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match binary_auc(&col, &pos) {
            Some(a) => {
                auc_sum += a;
                defined += 1;
            }
            None => auc_excluded_classes.push(c),
        }
    }
    if !auc_excluded_classes.is_empty() {
        log::warn!("AUC undefined for classes {auc_excluded_classes:?}; excluded from the macro mean");
    }
    let auc = if defined > 0 { 100.0 * auc_sum / defined as f64 } else { f64::NAN };
    Ok(MetricsReport { oa, precision, auc, confusion, zero_precision_classes, auc_excluded_classes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Zero-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_oa: f64,
    pub val_precision: f64,
    pub val_auc: f64,
}

/// `epoch,lr,train_loss,val_OA,val_Pre,val_AUC` lines with a header.
pub fn history_lines(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_OA,val_Pre,val_AUC\n");
    for r in history {
        s += &format!("{},{:e},{},{},{},{}\n", r.epoch + 1, r.lr, r.train_loss, r.val_oa, r.val_precision, r.val_auc);
    }
    s
}

pub fn history_table(history: &[EpochRecord]) -> String {
    let mut s = format!("{:>5}  {:>10}  {:>10}  {:>7}  {:>7}  {:>7}\n", "epoch", "lr", "loss", "OA", "Pre", "AUC");
    for r in history {
        s += &format!(
            "{:>5}  {:>10.3e}  {:>10.5}  {:>7.2}  {:>7.2}  {:>7.2}\n",
            r.epoch + 1,
            r.lr,
            r.train_loss,
            r.val_oa,
            r.val_precision,
            r.val_auc
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
    TargetReached,
    Interrupted,
}

/// Best validation result seen so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_oa: f64,
    pub val_precision: f64,
    pub val_auc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_params: ParamStore<f32>,
    pub best: Option<BestRecord>,
    pub final_params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Knobs that do not change the optimization result in single-worker mode.
#[derive(Clone, Default)]
pub struct TrainOptions {
    /// Polled between batches; when set, training stops after the current
    /// batch and returns with [`StopReason::Interrupted`].
    pub interrupt: Option<Arc<AtomicBool>>,
    /// Workers for gradient and evaluation passes (`0` or `1`: serial).
    pub threads: usize,
    /// Called after every epoch.
    pub on_epoch: Option<Arc<dyn Fn(&EpochRecord) + Send + Sync>>,
}

/// Sum of per-item cross-entropy over `indices` divided by `denom`, and
/// gradients of that quantity with respect to every parameter.
fn batch_gradients(
    model: &Backbone,
    params: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    denom: usize,
) -> Result<(f64, Vec<(String, Tensor<f32>)>)> {
    let batch = data.batch(indices);
    let mut g = Graph::new();
    g.set_check_finite(false);
    let x = g.input(batch.images);
    let logits = model.forward(&mut g, params, x)?;
    let mean = g.cross_entropy(logits, &batch.labels)?;
    let loss = g.scale(mean, indices.len() as f64 / denom as f64)?;
    let value = g.value(loss).item().f64();
    let grads = g.backward(loss)?;
    let named = g.bound_params().iter().map(|(n, v)| (n.clone(), grads.get_or_zeros(*v))).collect();
    Ok((value, named))
}

fn parallel_gradients(
    model: &Backbone,
    params: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    threads: usize,
) -> Result<(f64, Vec<(String, Tensor<f32>)>)> {
    if threads <= 1 || indices.len() < 2 {
        return batch_gradients(model, params, data, indices, indices.len());
    }
    let per = indices.len().div_ceil(threads);
    let parts: Vec<Result<(f64, Vec<(String, Tensor<f32>)>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(per)
            .map(|chunk| s.spawn(move || batch_gradients(model, params, data, chunk, indices.len())))
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one chunk")?;
    for part in iter {
        let (l, gs) = part?;
        loss += l;
        for ((_, acc), (_, g)) in grads.iter_mut().zip(gs) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    Ok((loss, grads))
}

/// Logits `[N, K]` for `indices`, in order, evaluated in batches spread
/// over `threads` workers.
pub fn predict_logits(
    model: &Backbone,
    params: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<Tensor<f32>> {
    let batches = make_batches(indices, batch_size, None);
    let run = |b: &[usize]| -> Result<Vec<f32>> {
        let batch = data.batch(b);
        let mut g = Graph::inference();
        g.set_check_finite(false);
        let x = g.input(batch.images);
        let y = model.forward(&mut g, params, x)?;
        Ok(g.value(y).data().to_vec())
    };
    let outs: Vec<Result<Vec<f32>>> = if threads <= 1 {
        batches.iter().map(|b| run(b)).collect()
    } else {
        let per = batches.len().div_ceil(threads).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .chunks(per)
                .map(|chunk| {
                    let run = &run;
                    s.spawn(move || chunk.iter().map(|b| run(b)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut data_out = Vec::with_capacity(indices.len() * model.config.num_classes);
    for o in outs {
        data_out.extend(o?);
    }
    Tensor::new(vec![indices.len(), model.config.num_classes], data_out)
}

pub fn evaluate(
    model: &Backbone,
    params: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<MetricsReport> {
    let logits = predict_logits(model, params, data, indices, batch_size, threads)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    compute_metrics(&logits, &labels)
}

/// Where a run starts from.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
    /// First epoch to run (zero-based).
    pub start_epoch: usize,
}

/// Trains on `train_idx`, selecting the parameters with the best
/// validation OA.
pub fn train_loop(
    model: &Backbone,
    state: TrainState,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    sched: &TrainSchedule,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut params = state.params;
    let mut adam = state.optimizer.unwrap_or_else(|| Adam::new(&params, sched.weight_decay));
    adam.weight_decay = sched.weight_decay;
    let mut stopper = EarlyStopper::new(sched.patience);
    let mut best_params = params.clone();
    let mut best = None;
    let mut history = Vec::new();
    let mut stop = StopReason::Completed;
    let interrupted = || opts.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst));

    'epochs: for epoch in state.start_epoch..sched.total_epochs {
        let lr = lr_at(epoch, sched);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let epoch_start = (params.clone(), adam.clone());
        for batch in make_batches(train_idx, sched.batch_size, Some((sched.seed, epoch))) {
            if interrupted() {
                // roll back to the last completed epoch so a resume is exact
                (params, adam) = epoch_start;
                stop = StopReason::Interrupted;
                break 'epochs;
            }
            let (loss, grads) = parallel_gradients(model, &params, data, &batch, opts.threads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, loss });
            }
            adam.update(&mut params, &grads, lr)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let m = evaluate(model, &params, data, val_idx, sched.batch_size, opts.threads)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_oa: m.oa,
            val_precision: m.precision,
            val_auc: m.auc,
        };
        log::info!("epoch {} lr {:.3e} loss {:.5} val OA {:.2}", epoch + 1, lr, rec.train_loss, rec.val_oa);
        if let Some(cb) = &opts.on_epoch {
            cb(&rec);
        }
        history.push(rec);
        if stopper.observe(epoch, m.oa, epoch >= sched.warmup_epochs) {
            best_params = params.clone();
            best = Some(BestRecord { epoch, val_oa: m.oa, val_precision: m.precision, val_auc: m.auc });
        }
        if sched.target_val_oa.is_some_and(|t| m.oa >= t) {
            stop = StopReason::TargetReached;
            break;
        }
        if stopper.should_stop() {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(TrainOutcome { best_params, best, final_params: params, optimizer: adam, history, stop })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_examples() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::full(vec![3], 2.0));
        let mut adam = Adam::new(&p, 0.0);
        adam.update(&mut p, &[("w".into(), Tensor::full(vec![3], 1.0))], 0.1).unwrap();
        for &v in p.get("w").unwrap().data() {
            assert!((v - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        }

        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::full(vec![2], 3.0));
        let mut adam = Adam::new(&p, 0.0);
        adam.update(&mut p, &[("w".into(), Tensor::zeros(vec![2]))], 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[3.0, 3.0]);

        let mut adam = Adam::new(&p, 1e-4);
        adam.update(&mut p, &[("w".into(), Tensor::zeros(vec![2]))], 1e-4).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 3.0 * (1.0 - 1e-8));

        let err = adam.update(&mut p, &[("w".into(), Tensor::full(vec![2], f64::NAN))], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    }

    #[test]
    fn schedule_examples() {
        let s = TrainSchedule::default();
        assert_eq!(lr_at(9, &s), 1e-4);
        assert_eq!(lr_at(0, &s), 1e-5);
        assert!((lr_at(10, &s) - 1e-4).abs() < 1e-18);
        let mid = lr_at(10 + 95, &s);
        assert!((mid - (1e-4 + 1e-6) / 2.0).abs() < 1e-15);
        let long = TrainSchedule { total_epochs: 20, warmup_epochs: 0, ..s.clone() };
        assert!((lr_at(20, &long) - long.min_lr()).abs() < 1e-18);
        assert!(TrainSchedule { warmup_epochs: 200, ..s }.validate().is_err());
    }

    #[test]
    fn early_stopping_example() {
        let mut es = EarlyStopper::new(3);
        let mut stopped_at = None;
        for (e, oa) in [70.0, 71.0, 70.0, 70.0, 70.0].into_iter().enumerate() {
            es.observe(e, oa, true);
            if es.should_stop() {
                stopped_at = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(5));
        assert_eq!(es.best_epoch.map(|e| e + 1), Some(2));

        let mut es = EarlyStopper::new(1);
        es.observe(0, 50.0, false);
        es.observe(1, 40.0, false);
        assert!(!es.should_stop());
    }

    #[test]
    fn metric_examples() {
        let logits = Tensor::<f64>::from_f64(vec![4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let m = compute_metrics(&logits, &[0, 1, 0, 1]).unwrap();
        assert_eq!(m.oa, 75.0);
        let rows: usize = m.confusion.iter().flatten().sum();
        assert_eq!(rows, 4);

        assert_eq!(binary_auc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]), Some(0.75));
        assert_eq!(binary_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(binary_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(binary_auc(&[0.5, 0.5], &[true, true]), None);

        let never = Tensor::<f64>::from_f64(vec![2, 3], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let m = compute_metrics(&never, &[0, 1]).unwrap();
        assert_eq!(m.zero_precision_classes, vec![1, 2]);
        assert_eq!(m.auc_excluded_classes, vec![2]);
        assert!((m.precision - 100.0 * 0.5 / 3.0).abs() < 1e-12);
    }
}
