//! Losses, backprop-through-time and the optimisation loop.
//!
//! The objective is
//!
//! ```text
//! L = L_task + α_rel · L_rel + α_abs · L_abs
//! ```
//!
//! where `L_task` is the cross-entropy of the final-iteration output only,
//! `L_rel` is a hinge between easy and hard halting scores at every
//! iteration, and `L_abs` is the binary cross-entropy pulling easy scores to 1
//! and hard scores to 0. Easy/hard sets come from jointly ranking the
//! per-iteration losses of the whole batch.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Model, StepTrace};
use crate::error::{FrostError, Result};
use crate::halting::{batch_time_rank, split_easy_hard, EasyHardSplit, HaltingHead};
use crate::numerics::{all_finite, assign_flat, axpy, flatten, GradientBundle, ParamSlot, Params};
use crate::sketch::KllSketch;

pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Unroll depth `T`.
    pub steps: usize,
    pub batch_size: usize,
    pub alpha_rel: f64,
    pub alpha_abs: f64,
    /// Hinge margin `δ`.
    pub delta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Size of the easy and hard sets; `None` means `max(1, ⌊B/4⌋)`.
    pub k_split: Option<usize>,
    pub seed: u64,
    /// Stop ranking-loss gradients at the halting head.
    pub detach_backbone_for_ranking: bool,
    pub reset_sketch_per_epoch: bool,
    /// Quantile reported as `s_halt` in the training log.
    pub log_quantile: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 16,
            batch_size: 32,
            alpha_rel: 0.7,
            alpha_abs: 0.3,
            delta: 0.1,
            lr: 0.001,
            momentum: 0.9,
            epochs: 12,
            k_split: None,
            seed: 42,
            detach_backbone_for_ranking: false,
            reset_sketch_per_epoch: false,
            log_quantile: 0.5,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(FrostError::Config("steps and batch_size must be >= 1".into()));
        }
        if self.alpha_rel < 0.0 || self.alpha_abs < 0.0 {
            return Err(FrostError::Config("loss weights must be >= 0".into()));
        }
        if !(self.delta > 0.0) {
            return Err(FrostError::Config("margin delta must be > 0".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(FrostError::Config("need lr >= 0 and momentum in [0, 1)".into()));
        }
        if 2 * self.effective_k_split() > self.batch_size {
            return Err(FrostError::Config(format!(
                "k_split {} too large for batch size {}",
                self.effective_k_split(),
                self.batch_size
            )));
        }
        Ok(())
    }

    pub fn effective_k_split(&self) -> usize {
        self.k_split.unwrap_or((self.batch_size / 4).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub rank_rel: f64,
    pub rank_abs: f64,
    pub total: f64,
}

/// Weighted sum `task + α_rel·rel + α_abs·abs`.
pub fn total_loss(task: f64, rank_rel: f64, rank_abs: f64, cfg: &TrainingConfig) -> LossBreakdown {
    LossBreakdown {
        task,
        rank_rel,
        rank_abs,
        total: task + cfg.alpha_rel * rank_rel + cfg.alpha_abs * rank_abs,
    }
}

/// Cross-entropy of one logit vector and its gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(FrostError::Index {
            context: "class label",
            index: label,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy of the final-iteration logits over the batch.
pub fn task_loss(logits_final: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits_final.len() != labels.len() {
        return Err(FrostError::shape("task_loss labels", logits_final.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(FrostError::Empty("batch"));
    }
    let mut sum = 0.0;
    for (z, &y) in logits_final.iter().zip(labels) {
        sum += cross_entropy(z, y)?.0;
    }
    Ok(sum / labels.len() as f64)
}

fn check_split(split: &EasyHardSplit, scores: &[Vec<f64>]) -> Result<()> {
    if split.easy.is_empty() || split.hard.is_empty() {
        return Err(FrostError::Config("easy and hard sets must be non-empty".into()));
    }
    for &i in split.easy.iter().chain(&split.hard) {
        if i >= scores.len() {
            return Err(FrostError::Index {
                context: "easy/hard split",
                index: i,
                len: scores.len(),
            });
        }
    }
    Ok(())
}

/// `Σ_t mean_{(i,j) ∈ E×H} max(0, s_{j,t} − s_{i,t} + δ)` and its gradient wrt every score.
pub fn relative_rank_loss_with_grad(
    scores: &[Vec<f64>],
    split: &EasyHardSplit,
    delta: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_split(split, scores)?;
    let steps = scores[split.easy[0]].len();
    let pairs = (split.easy.len() * split.hard.len()) as f64;
    let mut grad: Vec<Vec<f64>> = scores.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut loss = 0.0;
    for t in 0..steps {
        for &i in &split.easy {
            for &j in &split.hard {
                let m = scores[j][t] - scores[i][t] + delta;
                if m > 0.0 {
                    loss += m / pairs;
                    grad[j][t] += 1.0 / pairs;
                    grad[i][t] -= 1.0 / pairs;
                }
            }
        }
    }
    Ok((loss, grad))
}

pub fn relative_rank_loss(scores: &[Vec<f64>], split: &EasyHardSplit, delta: f64) -> Result<f64> {
    Ok(relative_rank_loss_with_grad(scores, split, delta)?.0)
}

/// `−Σ_t [ mean_{i∈E} log s_{i,t} + mean_{j∈H} log(1 − s_{j,t}) ]` with scores
/// clamped to `[1e-7, 1 − 1e-7]`, and its gradient.
pub fn absolute_anchor_loss_with_grad(
    scores: &[Vec<f64>],
    split: &EasyHardSplit,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_split(split, scores)?;
    let steps = scores[split.easy[0]].len();
    let ne = split.easy.len() as f64;
    let nh = split.hard.len() as f64;
    let mut grad: Vec<Vec<f64>> = scores.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut loss = 0.0;
    let clamp = |s: f64| -> Result<(f64, bool)> {
        if !(0.0..=1.0).contains(&s) {
            return Err(FrostError::Numeric(format!("halting score {s} outside [0, 1]")));
        }
        let c = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        Ok((c, c == s))
    };
    for t in 0..steps {
        for &i in &split.easy {
            let (s, live) = clamp(scores[i][t])?;
            loss -= s.ln() / ne;
            if live {
                grad[i][t] -= 1.0 / (ne * s);
            }
        }
        for &j in &split.hard {
            let (s, live) = clamp(scores[j][t])?;
            loss -= (1.0 - s).ln() / nh;
            if live {
                grad[j][t] += 1.0 / (nh * (1.0 - s));
            }
        }
    }
    Ok((loss, grad))
}

pub fn absolute_anchor_loss(scores: &[Vec<f64>], split: &EasyHardSplit) -> Result<f64> {
    Ok(absolute_anchor_loss_with_grad(scores, split)?.0)
}

/// One labelled input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

/// The trainable pair: refinement model and halting head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub model: Model,
    pub head: HaltingHead,
}

impl Network {
    pub fn zeros_like(&self) -> Self {
        Network {
            model: self.model.zeros_like(),
            head: HaltingHead::zeros(self.head.w.len()),
        }
    }
}

impl Params for Network {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.model.collect_params(&p("model"), out);
        self.head.collect_params(&p("head"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.model.collect_params_mut(out);
        self.head.collect_params_mut(out);
    }
}

/// Multipliers applied to the three loss terms when forming gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub task: f64,
    pub rel: f64,
    pub abs: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainingConfig) -> Self {
        LossWeights {
            task: 1.0,
            rel: cfg.alpha_rel,
            abs: cfg.alpha_abs,
        }
    }

    pub fn task_only() -> Self {
        LossWeights { task: 1.0, rel: 0.0, abs: 0.0 }
    }

    pub fn ranking_only(cfg: &TrainingConfig) -> Self {
        LossWeights {
            task: 0.0,
            rel: cfg.alpha_rel,
            abs: cfg.alpha_abs,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    /// Use this split instead of the one derived from ranking.
    pub split: Option<EasyHardSplit>,
    /// Replace the per-iteration losses that feed the ranking.
    pub step_loss_override: Option<Vec<Vec<f64>>>,
    /// Gradient weights; `None` uses the configured objective.
    pub weights: Option<LossWeights>,
    pub compute_grad: bool,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub breakdown: LossBreakdown,
    pub split: EasyHardSplit,
    /// `B × T` halting scores.
    pub scores: Vec<Vec<f64>>,
    /// `B × T` per-iteration cross-entropies.
    pub step_losses: Vec<Vec<f64>>,
    pub final_logits: Vec<Vec<f64>>,
    pub grads: Option<Network>,
}

impl BatchOutcome {
    fn mean_score(&self, set: &[usize]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &i in set {
            sum += self.scores[i].iter().sum::<f64>();
            n += self.scores[i].len();
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn mean_score_easy(&self) -> f64 {
        self.mean_score(&self.split.easy)
    }

    pub fn mean_score_hard(&self) -> f64 {
        self.mean_score(&self.split.hard)
    }
}

struct SampleForward {
    traces: Vec<StepTrace>,
    scores: Vec<f64>,
    losses: Vec<f64>,
    final_logits: Vec<f64>,
    final_ce_grad: Vec<f64>,
}

fn forward_sample(net: &Network, sample: &Sample, steps: usize) -> Result<SampleForward> {
    let model = &net.model;
    let mut h = vec![0.0; model.dims.d_hid];
    let mut traces = Vec::with_capacity(steps);
    let mut scores = Vec::with_capacity(steps);
    let mut losses = Vec::with_capacity(steps);
    let mut final_logits = Vec::new();
    let mut final_ce_grad = Vec::new();
    for t in 0..steps {
        let tr = model.step_traced(&h, &sample.x, t)?;
        h = tr.output.clone();
        let y = model.readout(&h, &sample.x, t)?;
        let (ce, g) = cross_entropy(&y, sample.label)?;
        losses.push(ce);
        scores.push(net.head.score(&h)?);
        if t + 1 == steps {
            final_logits = y;
            final_ce_grad = g;
        }
        traces.push(tr);
    }
    Ok(SampleForward {
        traces,
        scores,
        losses,
        final_logits,
        final_ce_grad,
    })
}

/// Forward pass over a batch, the full objective and (optionally) its gradient
/// by an explicit reverse sweep through the unrolled steps.
pub fn evaluate_batch(
    net: &Network,
    batch: &[Sample],
    cfg: &TrainingConfig,
    opts: &BatchOptions,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(FrostError::Empty("batch"));
    }
    let steps = cfg.steps;
    let forwards = batch
        .iter()
        .map(|s| forward_sample(net, s, steps))
        .collect::<Result<Vec<_>>>()?;

    let step_losses: Vec<Vec<f64>> = forwards.iter().map(|f| f.losses.clone()).collect();
    let scores: Vec<Vec<f64>> = forwards.iter().map(|f| f.scores.clone()).collect();
    let final_logits: Vec<Vec<f64>> = forwards.iter().map(|f| f.final_logits.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let split = match &opts.split {
        Some(s) => s.clone(),
        None => {
            let ranked_losses = opts.step_loss_override.as_ref().unwrap_or(&step_losses);
            let records = batch_time_rank(ranked_losses)?;
            split_easy_hard(&records, cfg.effective_k_split())?
        }
    };

    let task = task_loss(&final_logits, &labels)?;
    let (rel, rel_grad) = relative_rank_loss_with_grad(&scores, &split, cfg.delta)?;
    let (abs, abs_grad) = absolute_anchor_loss_with_grad(&scores, &split)?;
    let breakdown = total_loss(task, rel, abs, cfg);
    if !breakdown.total.is_finite() {
        return Err(FrostError::Numeric("non-finite objective".into()));
    }

    let grads = if opts.compute_grad {
        let w = opts.weights.unwrap_or_else(|| LossWeights::from_config(cfg));
        let b = batch.len() as f64;
        let mut grads = net.zeros_like();
        for (i, (sample, fwd)) in batch.iter().zip(&forwards).enumerate() {
            let mut carry = vec![0.0; net.model.dims.d_hid];
            for k in (0..steps).rev() {
                let h = &fwd.traces[k].output;
                let mut g = std::mem::take(&mut carry);
                if k + 1 == steps && w.task != 0.0 {
                    let gy: Vec<f64> = fwd.final_ce_grad.iter().map(|v| v * w.task / b).collect();
                    let dh = net.model.readout_vjp(h, &sample.x, k, &gy, &mut grads.model)?;
                    axpy(&mut g, 1.0, &dh);
                }
                let ds = w.rel * rel_grad[i][k] + w.abs * abs_grad[i][k];
                if ds != 0.0 {
                    let s = fwd.scores[k];
                    let dz = ds * s * (1.0 - s);
                    axpy(&mut grads.head.w, dz, h);
                    grads.head.b += dz;
                    if !cfg.detach_backbone_for_ranking {
                        axpy(&mut g, dz, &net.head.w);
                    }
                }
                carry = net.model.step_vjp(&fwd.traces[k], &sample.x, &g, &mut grads.model)?;
            }
        }
        if !all_finite(&flatten(&grads)) {
            return Err(FrostError::Numeric("non-finite gradient".into()));
        }
        Some(grads)
    } else {
        None
    };

    Ok(BatchOutcome {
        breakdown,
        split,
        scores,
        step_losses,
        final_logits,
        grads,
    })
}

/// Gradient of the weighted objective as a named bundle.
pub fn objective_gradient(
    net: &Network,
    batch: &[Sample],
    cfg: &TrainingConfig,
    weights: LossWeights,
    split: Option<EasyHardSplit>,
) -> Result<GradientBundle> {
    let out = evaluate_batch(
        net,
        batch,
        cfg,
        &BatchOptions {
            split,
            weights: Some(weights),
            compute_grad: true,
            ..BatchOptions::default()
        },
    )?;
    Ok(GradientBundle::from_params(out.grads.as_ref().expect("gradient requested")))
}

/// SGD with heavy-ball momentum over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn apply(&mut self, net: &mut Network, grads: &Network) -> Result<()> {
        let g = flatten(grads);
        let mut theta = flatten(net);
        if self.velocity.len() != theta.len() {
            self.velocity = vec![0.0; theta.len()];
        }
        for ((p, v), gi) in theta.iter_mut().zip(self.velocity.iter_mut()).zip(&g) {
            *v = self.momentum * *v + gi;
            *p -= self.lr * *v;
        }
        assign_flat(net, &theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub grad_norms: Vec<(String, f64)>,
    pub mean_s_easy: f64,
    pub mean_s_hard: f64,
}

/// One optimisation step on a batch. Detached halting scores are inserted into
/// `sketch`. On any numeric failure the parameters are left untouched.
pub fn train_step(
    net: &mut Network,
    opt: &mut SgdMomentum,
    batch: &[Sample],
    cfg: &TrainingConfig,
    sketch: &mut KllSketch,
) -> Result<StepReport> {
    let out = evaluate_batch(
        net,
        batch,
        cfg,
        &BatchOptions {
            compute_grad: true,
            ..BatchOptions::default()
        },
    )?;
    let mut grads = out.grads.clone().expect("gradient requested");
    let bundle = GradientBundle::from_params(&grads);
    let grad_norm = bundle.norm();
    if let Some(clip) = cfg.grad_clip {
        if grad_norm > clip {
            let mut flat = flatten(&grads);
            flat.iter_mut().for_each(|g| *g *= clip / grad_norm);
            assign_flat(&mut grads, &flat)?;
        }
    }
    let grad_norms = bundle
        .entries
        .iter()
        .map(|e| (e.name.clone(), crate::numerics::norm(&e.data)))
        .collect();
    opt.apply(net, &grads)?;
    for row in &out.scores {
        sketch.extend(row.iter().copied())?;
    }
    Ok(StepReport {
        losses: out.breakdown,
        grad_norm,
        grad_norms,
        mean_s_easy: out.mean_score_easy(),
        mean_s_hard: out.mean_score_hard(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lambda: f64,
    pub loss_task: f64,
    pub loss_rel: f64,
    pub loss_abs: f64,
    pub mean_s_easy: f64,
    pub mean_s_hard: f64,
    pub s_halt: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    /// Rows belonging to the last logged epoch.
    pub fn last_epoch(&self) -> &[LogRow] {
        match self.rows.last() {
            None => &[],
            Some(last) => {
                let start = self.rows.iter().position(|r| r.epoch == last.epoch).unwrap_or(0);
                &self.rows[start..]
            }
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step", "lambda", "loss_task", "loss_rel", "loss_abs", "mean_s_easy", "mean_s_hard", "s_halt",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.lambda.to_string(),
                r.loss_task.to_string(),
                r.loss_rel.to_string(),
                r.loss_abs.to_string(),
                r.mean_s_easy.to_string(),
                r.mean_s_hard.to_string(),
                r.s_halt.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Epochs of shuffled mini-batches. Incomplete trailing batches are skipped.
pub fn train(
    net: &mut Network,
    data: &[Sample],
    cfg: &TrainingConfig,
    sketch: &mut KllSketch,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if data.is_empty() {
        return Err(FrostError::Empty("training set"));
    }
    if data.len() < cfg.batch_size {
        return Err(FrostError::Config(format!(
            "training set of {} samples is smaller than one batch ({})",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut warned = false;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if cfg.reset_sketch_per_epoch {
            sketch.reset();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let rep = train_step(net, &mut opt, &batch, cfg, sketch)?;
            let lambda = net.model.lambda();
            if lambda >= 1.0 && !warned {
                warn!("lambda reached {lambda:.4} (>= 1) at step {step}");
                warned = true;
            }
            log.rows.push(LogRow {
                step,
                epoch,
                lambda,
                loss_task: rep.losses.task,
                loss_rel: rep.losses.rank_rel,
                loss_abs: rep.losses.rank_abs,
                mean_s_easy: rep.mean_s_easy,
                mean_s_hard: rep.mean_s_hard,
                s_halt: sketch.query(cfg.log_quantile)?,
            });
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split1() -> EasyHardSplit {
        EasyHardSplit {
            easy: vec![0],
            hard: vec![1],
            k_split: 1,
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((task_loss(&[vec![0.0; 4]], &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let (l, _) = cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap();
        assert!(l < 1e-20);
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(FrostError::Index { .. })));
    }

    #[test]
    fn relative_loss_examples() {
        let s = vec![vec![0.9], vec![0.2]];
        assert_eq!(relative_rank_loss(&s, &split1(), 0.1).unwrap(), 0.0);
        let s = vec![vec![0.5], vec![0.6]];
        assert!((relative_rank_loss(&s, &split1(), 0.1).unwrap() - 0.2).abs() < 1e-15);
        let s = vec![vec![0.4; 5], vec![0.4; 5]];
        assert!((relative_rank_loss(&s, &split1(), 0.1).unwrap() - 0.5).abs() < 1e-12);
        let empty = EasyHardSplit { easy: vec![], hard: vec![1], k_split: 0 };
        assert!(matches!(relative_rank_loss(&s, &empty, 0.1), Err(FrostError::Config(_))));
    }

    #[test]
    fn absolute_loss_examples() {
        let s = vec![vec![1.0 - 1e-7], vec![1e-7]];
        assert!(absolute_anchor_loss(&s, &split1()).unwrap() < 1e-6);
        let s = vec![vec![0.5], vec![0.5]];
        assert!((absolute_anchor_loss(&s, &split1()).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let a = absolute_anchor_loss(&[vec![0.3, 0.8], vec![0.6, 0.1]], &split1()).unwrap();
        let swapped = EasyHardSplit { easy: vec![1], hard: vec![0], k_split: 1 };
        let b = absolute_anchor_loss(&[vec![0.7, 0.2], vec![0.4, 0.9]], &swapped).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(matches!(absolute_anchor_loss(&[vec![1.5], vec![0.5]], &split1()), Err(FrostError::Numeric(_))));
    }

    #[test]
    fn total_loss_examples() {
        let cfg = TrainingConfig::default();
        let lb = total_loss(1.0, 2.0, 3.0, &cfg);
        assert!((lb.total - 3.3).abs() < 1e-12);
        let zero = TrainingConfig { alpha_rel: 0.0, alpha_abs: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(1.7, 2.0, 3.0, &zero).total, 1.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg).total, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert_eq!(TrainingConfig::default().effective_k_split(), 8);
        let small = TrainingConfig { batch_size: 2, ..TrainingConfig::default() };
        assert_eq!(small.effective_k_split(), 1);
        assert!(TrainingConfig { delta: 0.0, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { k_split: Some(17), ..TrainingConfig::default() }.validate().is_err());
    }

    use crate::dynamics::{ModelConfig, ModelDims, ModelKind};
    use crate::numerics::{finite_difference_gradient, Activation};

    fn tiny(kind: ModelKind, seed: u64) -> (Network, Vec<Sample>, TrainingConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mcfg = ModelConfig {
            kind,
            dims: ModelDims { d_in: 2, d_hid: 3, d_out: 2 },
            t_max: 2,
            activation: Activation::Tanh,
            ..ModelConfig::default()
        };
        let model = Model::init(&mcfg, &mut rng).unwrap();
        let mut head = HaltingHead::init(3, &mut rng);
        head.b = 0.3;
        let batch = vec![
            Sample { x: vec![0.7, -1.1], label: 0 },
            Sample { x: vec![-0.4, 0.9], label: 1 },
        ];
        let cfg = TrainingConfig {
            steps: 2,
            batch_size: 2,
            k_split: Some(1),
            grad_clip: None,
            ..TrainingConfig::default()
        };
        (Network { model, head }, batch, cfg)
    }

    fn fd_check(kind: ModelKind, seed: u64, detach: bool) {
        let (net, batch, mut cfg) = tiny(kind, seed);
        cfg.detach_backbone_for_ranking = detach;
        let out = evaluate_batch(&net, &batch, &cfg, &BatchOptions { compute_grad: true, ..Default::default() }).unwrap();
        let analytic = flatten(out.grads.as_ref().unwrap());
        let split = out.split.clone();
        let theta = flatten(&net);
        let numeric = finite_difference_gradient(
            |th| {
                let mut n = net.clone();
                assign_flat(&mut n, th).unwrap();
                let opts = BatchOptions { split: Some(split.clone()), ..Default::default() };
                evaluate_batch(&n, &batch, &cfg, &opts).unwrap().breakdown.total
            },
            &theta,
            1e-6,
        )
        .unwrap();
        if detach {
            // Ranking terms only reach the head; compare the head entries.
            let nh = net.head.w.len() + 1;
            let off = theta.len() - nh;
            for k in off..theta.len() {
                let err = (analytic[k] - numeric[k]).abs() / analytic[k].abs().max(numeric[k].abs()).max(1e-6);
                assert!(err < 1e-3, "param {k}: {} vs {}", analytic[k], numeric[k]);
            }
            return;
        }
        for (k, (a, f)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
            assert!(err < 1e-3, "{kind:?} param {k}: analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in [ModelKind::Frost, ModelKind::Vanilla, ModelKind::Recurrent, ModelKind::BasicSsm] {
            fd_check(kind, 3, false);
        }
        fd_check(ModelKind::Frost, 11, true);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut net, batch, cfg) = tiny(ModelKind::Frost, 5);
        let before = net.clone();
        let mut opt = SgdMomentum::new(0.0, 0.9);
        let mut sketch = KllSketch::new(16, 0).unwrap();
        let rep = train_step(&mut net, &mut opt, &batch, &cfg, &mut sketch).unwrap();
        assert_eq!(net, before);
        assert!(rep.losses.total > 0.0);
        assert_eq!(sketch.n(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut net, batch, mut cfg) = tiny(ModelKind::Frost, 8);
            cfg.epochs = 3;
            let data: Vec<Sample> = batch.iter().cycle().take(6).cloned().collect();
            let mut sketch = KllSketch::new(16, 1).unwrap();
            let log = train(&mut net, &data, &cfg, &mut sketch).unwrap();
            (log, net)
        };
        let (a, na) = run();
        let (b, nb) = run();
        assert_eq!(a, b);
        assert_eq!(na, nb);
        assert_eq!(a.rows.len(), 9);
        assert!(a.rows.iter().all(|r| r.lambda > 0.0));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut net, batch, mut cfg) = tiny(ModelKind::Frost, 8);
        cfg.epochs = 0;
        let before = net.clone();
        let mut sketch = KllSketch::new(16, 1).unwrap();
        assert!(train(&mut net, &batch, &cfg, &mut sketch).unwrap().rows.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn task_gradient_only_sees_the_final_step() {
        let (net, batch, cfg) = tiny(ModelKind::Vanilla, 4);
        let g = objective_gradient(&net, &batch, &cfg, LossWeights::task_only(), None).unwrap();
        for name in ["model.ops.0.C.weight", "model.ops.0.C.bias", "model.ops.0.D.weight", "model.ops.0.D.bias"] {
            let e = g.get(name).unwrap_or_else(|| panic!("missing {name}"));
            assert!(e.data.iter().all(|&v| v == 0.0), "{name}");
        }
        let e = g.get("model.ops.1.C.weight").unwrap();
        assert!(e.data.iter().any(|&v| v != 0.0));
        assert!(g.get("head.w").unwrap().data.iter().all(|&v| v == 0.0));
    }
}
