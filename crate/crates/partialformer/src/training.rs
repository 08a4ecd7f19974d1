//! Desk-scale training on synthetic sequence tasks: task generation,
//! label-smoothed cross-entropy, the inverse-square-root learning-rate
//! schedule, Adam with gradient clipping, checkpoint averaging, and
//! greedy/beam decoding. Everything is deterministic under the configured
//! seeds.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_checkpoint, CheckpointEntry, ForwardCtx, Model, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

// ── token conventions ──

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// First id available for payload tokens; everything below is reserved.
pub const FIRST_DATA: usize = 4;

// ── synthetic tasks ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        }
    }
}

fn default_min_len() -> usize {
    2
}
fn default_task_max_len() -> usize {
    8
}
fn default_n_train() -> usize {
    512
}
fn default_n_eval() -> usize {
    64
}
fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_task_max_len")]
    pub max_len: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.min_len < 2 {
            return err(format!("min_len = {} must be at least 2", self.min_len));
        }
        if self.max_len < self.min_len {
            return err(format!(
                "max_len = {} must be at least min_len = {}",
                self.max_len, self.min_len
            ));
        }
        if self.vocab_size <= FIRST_DATA {
            return err(format!(
                "vocab_size = {} leaves no payload ids; ids 0..{FIRST_DATA} are reserved",
                self.vocab_size
            ));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return err("n_train and n_eval must be positive".into());
        }
        Ok(())
    }
}

/// One raw task pair. `src` and `tgt` hold payload ids only; `EOS`/`BOS`
/// framing is added at tensorization time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

fn make_example(spec: &TaskSpec, rng: &mut Rng) -> Example {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let src: Vec<usize> = (0..len).map(|_| FIRST_DATA + rng.below(spec.vocab_size - FIRST_DATA)).collect();
    let tgt = match spec.kind {
        TaskKind::Copy => src.clone(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut s = src.clone();
            s.sort_unstable();
            s
        }
    };
    Example { src, tgt }
}

/// Generate the train and eval splits deterministically from `spec.seed`.
pub fn make_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::from_seed(spec.seed);
    let mut train_rng = rng.derive("train");
    let mut eval_rng = rng.derive("eval");
    Ok(Dataset {
        train: (0..spec.n_train).map(|_| make_example(spec, &mut train_rng)).collect(),
        eval: (0..spec.n_eval).map(|_| make_example(spec, &mut eval_rng)).collect(),
    })
}

/// Encoder input: the source payload with a closing `EOS`.
pub fn encoder_input(src: &[usize]) -> Vec<usize> {
    let mut v = src.to_vec();
    v.push(EOS);
    v
}

/// Teacher-forcing views of a target: decoder input `[BOS, y…]` and the
/// labels `[y…, EOS]` it should predict.
pub fn decoder_io(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tgt.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tgt);
    let mut labels = tgt.to_vec();
    labels.push(EOS);
    (input, labels)
}

// ── loss and schedule ──

/// Label-smoothed cross-entropy, summed over positions: each row costs
/// `-(1-eps)·log p[label] - (eps/V)·Σ_v log p[v]`. Divide by the label count
/// for a per-token mean.
pub fn label_smoothed_ce(logits: &Tensor, labels: &[usize], eps: f64) -> Tensor {
    assert!((0.0..1.0).contains(&eps), "label smoothing eps = {eps} must lie in [0, 1)");
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "label_smoothed_ce expects [T, V] logits");
    assert_eq!(shape[0], labels.len(), "one label per logit row");
    let vocab = shape[1] as f64;
    let logp = logits.log_softmax_rows();
    let true_term = logp.pick(labels).sum_all().scale(-(1.0 - eps));
    if eps == 0.0 {
        return true_term;
    }
    let uniform_term = logp.sum_all().scale(-eps / vocab);
    true_term.add(&uniform_term)
}

fn default_lr_peak() -> f64 {
    2e-3
}
fn default_init_lr() -> f64 {
    1e-7
}
fn default_warmup() -> usize {
    200
}
fn default_total_steps() -> usize {
    3000
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.997)
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_batch_tokens() -> usize {
    1024
}
fn default_clip_norm() -> f64 {
    1.0
}
fn default_average_last_k() -> usize {
    10
}
fn default_eval_every() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr_peak")]
    pub lr_peak: f64,
    #[serde(default = "default_init_lr")]
    pub init_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_batch_tokens")]
    pub batch_tokens: usize,
    /// Global gradient-norm ceiling; `0` disables clipping.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    /// Snapshot interval in steps; `0` disables checkpointing.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Ring size for kept snapshots (and the default averaging window).
    #[serde(default = "default_average_last_k")]
    pub average_last_k: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop as soon as teacher-forced token accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Seed for the training loop's own randomness (batch sampling, dropout).
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        serde_json::from_str("{}").expect("all TrainConfig fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.warmup_steps == 0 {
            return err("warmup_steps must be at least 1".into());
        }
        if self.total_steps != 0 && self.total_steps < self.warmup_steps {
            return err(format!(
                "total_steps = {} must reach warmup_steps = {} (or be 0 for a dry run)",
                self.total_steps, self.warmup_steps
            ));
        }
        if !(self.lr_peak > 0.0) {
            return err(format!("lr_peak = {} must be positive", self.lr_peak));
        }
        if !(0.0..=self.lr_peak).contains(&self.init_lr) {
            return err(format!("init_lr = {} must lie in [0, lr_peak]", self.init_lr));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return err(format!("adam_betas = ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return err(format!("adam_eps = {} must be positive", self.adam_eps));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err(format!("label_smoothing = {} must lie in [0, 1)", self.label_smoothing));
        }
        if self.batch_tokens == 0 {
            return err("batch_tokens must be positive".into());
        }
        if self.clip_norm < 0.0 {
            return err(format!("clip_norm = {} must be non-negative", self.clip_norm));
        }
        if self.average_last_k == 0 {
            return err("average_last_k must be at least 1".into());
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1".into());
        }
        if let Some(a) = self.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return err(format!("target_accuracy = {a} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Learning rate at a 1-based step: linear ramp from `init_lr` to `lr_peak`
/// over the warmup, then `lr_peak·√(warmup/step)` decay.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    assert!(step >= 1, "steps are 1-based");
    if step <= cfg.warmup_steps {
        cfg.init_lr + (cfg.lr_peak - cfg.init_lr) * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.lr_peak * (cfg.warmup_steps as f64 / step as f64).sqrt()
    }
}

// ── optimizer ──

/// Adam over a fixed parameter registry. Gradient clipping happens inside
/// `step` so the whole update is one call.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[(String, Tensor)], betas: (f64, f64), eps: f64) -> Adam {
        Adam {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Apply one update from the gradients currently stored on `params`.
    /// Gradients are first scaled so their global L2 norm does not exceed
    /// `clip_norm` (0 disables). Returns the pre-clip norm.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64, clip_norm: f64) -> f64 {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different registry");
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad_clone()).collect();
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let factor = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_with(|data, _| {
                for (j, gj) in g.iter().enumerate() {
                    let gj = gj * factor;
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
        norm
    }
}

// ── snapshots and checkpoint averaging ──

/// A named copy of every parameter's values.
pub type Snapshot = Vec<(String, Vec<f64>)>;

pub fn snapshot(model: &Model) -> Snapshot {
    model.params().iter().map(|(n, p)| (n.clone(), p.data_clone())).collect()
}

/// Write a snapshot's values back into a model with the same registry.
pub fn restore(model: &Model, snap: &Snapshot) -> Result<()> {
    let params = model.params();
    if params.len() != snap.len() {
        return Err(Error::Config(format!(
            "snapshot has {} parameters, model has {}",
            snap.len(),
            params.len()
        )));
    }
    for (name, values) in snap {
        let p = model
            .param(name)
            .ok_or_else(|| Error::Config(format!("snapshot parameter {name} not in model")))?;
        if p.numel() != values.len() {
            return Err(Error::Config(format!(
                "snapshot parameter {name} has {} values, model expects {}",
                values.len(),
                p.numel()
            )));
        }
        p.set_data(values);
    }
    Ok(())
}

/// Name-wise arithmetic mean of snapshots sharing one registry. The result
/// follows the first snapshot's order, so averaging commutes with parameter
/// permutation.
pub fn average_snapshots(snaps: &[Snapshot]) -> Result<Snapshot> {
    let first = snaps
        .first()
        .ok_or_else(|| Error::Config("cannot average zero snapshots".into()))?;
    let mut sums: Snapshot = first.clone();
    for snap in &snaps[1..] {
        if snap.len() != first.len() {
            return Err(Error::Config("snapshots disagree on parameter count".into()));
        }
        for (name, sum) in sums.iter_mut() {
            let (_, values) = snap
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("snapshot missing parameter {name}")))?;
            if values.len() != sum.len() {
                return Err(Error::Config(format!("snapshot parameter {name} changed size")));
            }
            for (s, v) in sum.iter_mut().zip(values) {
                *s += v;
            }
        }
    }
    let k = snaps.len() as f64;
    for (_, sum) in sums.iter_mut() {
        for s in sum.iter_mut() {
            *s /= k;
        }
    }
    Ok(sums)
}

/// Average checkpoint files into one parameter set. All files must carry an
/// identical registry; the error names the first file that differs.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<(ModelConfig, Vec<CheckpointEntry>)> {
    let first_path = paths
        .first()
        .ok_or_else(|| Error::Config("cannot average zero checkpoints".into()))?;
    let (config, mut acc) = read_checkpoint(first_path)?;
    for path in &paths[1..] {
        let (_, entries) = read_checkpoint(path)?;
        let mismatch = || {
            Error::Config(format!(
                "checkpoint {} does not share the registry of {}",
                path.display(),
                first_path.display()
            ))
        };
        if entries.len() != acc.len() {
            return Err(mismatch());
        }
        for e in &mut acc {
            let other = entries
                .iter()
                .find(|o| o.name == e.name && o.shape == e.shape)
                .ok_or_else(mismatch)?;
            for (s, v) in e.data.iter_mut().zip(&other.data) {
                *s += v;
            }
        }
    }
    let k = paths.len() as f64;
    for e in &mut acc {
        for s in &mut e.data {
            *s /= k;
        }
    }
    Ok((config, acc))
}

// ── evaluation ──

/// Teacher-forced evaluation over a set of examples: mean smoothed loss per
/// label token and the fraction of label positions the argmax gets right.
pub fn evaluate(model: &Model, examples: &[Example], smoothing: f64) -> Result<(f64, f64)> {
    let _guard = no_grad();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let (dec_in, labels) = decoder_io(&ex.tgt);
        let logits = model.forward(&encoder_input(&ex.src), &dec_in, &mut ForwardCtx::eval())?;
        loss_sum += label_smoothed_ce(&logits, &labels, smoothing).item();
        let data = logits.data();
        let vocab = model.config.vocab_size;
        for (row, &label) in labels.iter().enumerate() {
            let r = &data[row * vocab..(row + 1) * vocab];
            let argmax = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("vocab is non-empty");
            correct += usize::from(argmax == label);
            total += 1;
        }
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}

// ── the training loop ──

/// One history row, recorded every `eval_every` steps and at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub token_accuracy: f64,
}

/// A parameter snapshot taken mid-run.
pub struct CheckpointRecord {
    pub step: usize,
    pub params: Snapshot,
}

pub struct TrainSummary {
    pub steps_run: usize,
    pub stopped_early: bool,
    pub history: Vec<EvalRecord>,
    /// Per-step training loss (mean per label token).
    pub step_losses: Vec<f64>,
    /// Ring of the last `average_last_k` snapshots (empty unless
    /// `checkpoint_every` > 0).
    pub checkpoints: Vec<CheckpointRecord>,
}

/// Train `model` in place on the task. Deterministic given the model, task
/// and trainer seeds; aborts with a diagnostic when the loss stops being
/// finite.
pub fn train(model: &mut Model, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainSummary> {
    task.validate()?;
    cfg.validate()?;
    if task.vocab_size > model.config.vocab_size {
        return Err(Error::Config(format!(
            "task vocab_size = {} exceeds model vocab_size = {}",
            task.vocab_size, model.config.vocab_size
        )));
    }
    if task.max_len + 1 > model.config.max_len {
        return Err(Error::Config(format!(
            "task max_len = {} plus framing exceeds model max_len = {}",
            task.max_len, model.config.max_len
        )));
    }
    let data = make_task(task)?;
    let mut summary = TrainSummary {
        steps_run: 0,
        stopped_early: false,
        history: Vec::new(),
        step_losses: Vec::new(),
        checkpoints: Vec::new(),
    };
    if cfg.total_steps == 0 {
        return Ok(summary);
    }

    let mut rng = Rng::from_seed(cfg.seed);
    let mut batch_rng = rng.derive("batch");
    let mut dropout_rng = rng.derive("dropout");
    let mut adam = Adam::new(model.params(), cfg.adam_betas, cfg.adam_eps);

    for step in 1..=cfg.total_steps {
        for (_, p) in model.params() {
            p.zero_grad();
        }
        let mut losses: Option<Tensor> = None;
        let mut batch_labels = 0usize;
        while batch_labels < cfg.batch_tokens {
            let ex = &data.train[batch_rng.below(data.train.len())];
            let (dec_in, labels) = decoder_io(&ex.tgt);
            let mut ctx = ForwardCtx::training(&mut dropout_rng);
            let logits = model.forward(&encoder_input(&ex.src), &dec_in, &mut ctx)?;
            let loss = label_smoothed_ce(&logits, &labels, cfg.label_smoothing);
            batch_labels += labels.len();
            losses = Some(match losses {
                Some(acc) => acc.add(&loss),
                None => loss,
            });
        }
        let batch_loss = losses.expect("batch_tokens ≥ 1 admits at least one example");
        let mean_loss = batch_loss.scale(1.0 / batch_labels as f64);
        let loss_value = mean_loss.item();
        let lr = lr_at(step, cfg);
        if !loss_value.is_finite() {
            return Err(Error::Train(format!(
                "diverged at step {step}: loss = {loss_value}, lr = {lr:.3e}, \
                 batch of {batch_labels} label tokens"
            )));
        }
        mean_loss.backward();
        adam.step(model.params(), lr, cfg.clip_norm);
        summary.step_losses.push(loss_value);
        summary.steps_run = step;

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            summary.checkpoints.push(CheckpointRecord { step, params: snapshot(model) });
            if summary.checkpoints.len() > cfg.average_last_k {
                summary.checkpoints.remove(0);
            }
        }

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let (loss, token_accuracy) = evaluate(model, &data.eval, cfg.label_smoothing)?;
            summary.history.push(EvalRecord { step, lr, loss, token_accuracy });
            if cfg.target_accuracy.is_some_and(|a| token_accuracy >= a) {
                summary.stopped_early = true;
                break;
            }
        }
    }
    Ok(summary)
}

// ── decoding ──

/// Anything that can assign next-token log-probabilities to a prefix.
/// `prefix` starts with `BOS`; `src` is passed through verbatim.
pub trait Scorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, src: &[usize], prefix: &[usize]) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn log_probs(&self, src: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        let _guard = no_grad();
        let logits = self.forward(src, prefix, &mut ForwardCtx::eval())?;
        let data = logits.data();
        let vocab = self.config.vocab_size;
        let last = &data[(prefix.len() - 1) * vocab..prefix.len() * vocab];
        let max = last.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_z = max + last.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        Ok(last.iter().map(|&x| x - log_z).collect())
    }
}

/// A decoded candidate. `tokens` holds payload only (no `BOS`, no `EOS`);
/// `truncated` marks hypotheses cut off by `max_len` before emitting `EOS`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of every emitted token (including the
    /// closing `EOS` when present).
    pub log_prob: f64,
    /// `log_prob / emitted^alpha`.
    pub score: f64,
    pub truncated: bool,
}

fn normalized(log_prob: f64, emitted: usize, alpha: f64) -> f64 {
    log_prob / (emitted as f64).powf(alpha)
}

/// Greedy decoding: argmax at every step, stop on `EOS` or after `max_len`
/// emissions (then flagged truncated).
pub fn greedy_decode(scorer: &dyn Scorer, src: &[usize], alpha: f64, max_len: usize) -> Result<Hypothesis> {
    assert!(max_len >= 1, "max_len must allow at least one step");
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    for step in 0..max_len {
        let lp = scorer.log_probs(src, &prefix)?;
        let (best, best_lp) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("vocab is non-empty");
        log_prob += best_lp;
        if best == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                score: normalized(log_prob, step + 1, alpha),
                truncated: false,
            });
        }
        prefix.push(best);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        score: normalized(log_prob, max_len, alpha),
        truncated: true,
    })
}

/// Beam search under `log_prob / len^alpha` scoring. Returns up to
/// `beam_size` hypotheses, best first; `beam_size = 1` reproduces the greedy
/// path exactly.
pub fn beam_decode(
    scorer: &dyn Scorer,
    src: &[usize],
    beam_size: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    assert!(beam_size >= 1, "beam_size must be at least 1");
    assert!(max_len >= 1, "max_len must allow at least one step");
    let vocab = scorer.vocab_size();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        // (tokens, log_prob, score); candidates are generated in token order
        // and sorted stably, so ties resolve toward smaller token ids — the
        // same preference argmax has.
        let mut candidates: Vec<(Vec<usize>, f64, f64)> = Vec::new();
        for (tokens, log_prob) in &live {
            let mut prefix = Vec::with_capacity(tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(tokens);
            let lp = scorer.log_probs(src, &prefix)?;
            for (v, lpv) in lp.iter().enumerate().take(vocab) {
                let total = log_prob + lpv;
                let mut t = tokens.clone();
                t.push(v);
                candidates.push((t, total, normalized(total, step + 1, alpha)));
            }
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        candidates.truncate(beam_size);
        live.clear();
        for (mut tokens, log_prob, score) in candidates {
            if tokens.last() == Some(&EOS) {
                tokens.pop();
                done.push(Hypothesis { tokens, log_prob, score, truncated: false });
            } else {
                live.push((tokens, log_prob));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    for (tokens, log_prob) in live {
        let score = normalized(log_prob, max_len, alpha);
        done.push(Hypothesis { tokens, log_prob, score, truncated: true });
    }
    done.sort_by(|a, b| b.score.total_cmp(&a.score));
    done.truncate(beam_size);
    Ok(done)
}
