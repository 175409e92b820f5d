use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, generate_dataset, write_json, RunConfig, SyntheticDataset};
use crate::analysis::{
    contraction_factor_estimate, cosine_profile, error_decay_check, gradient_bound_check, gradient_conflict,
    latent_dimension, scaling_equivariance_check, ConsistencyProfile, DimensionEstimate, ErrorDecayReport,
    GradientBoundReport, GradientConflict, ScalingReport, DEFAULT_SCALE_LEVELS,
};
use crate::dynamics::{Checkpoint, Model, Trajectory};
use crate::error::{FrostError, Result};
use crate::halting::{adaptive_unroll, trace_rows, write_halting_trace, HaltingHead, HaltingPolicy};
use crate::numerics::DEFAULT_POWER_ITERS;
use crate::sketch::{normalized_rank_error, KllSketch};
use crate::training::{objective_gradient, train, LossWeights, Network, Sample, TrainingConfig, TrainingLog};

const SEED_DATA: u64 = 1;
const SEED_MODEL: u64 = 2;
const SEED_SKETCH: u64 = 3;

pub const COSINE_SLACK: f64 = 0.02;
pub const ACCURACY_SLACK: f64 = 0.01;
pub const SCORE_GAP_MIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub q: f64,
    pub s_halt: f64,
    pub mean_depth: f64,
    pub accuracy: f64,
}

fn write_quantiles(path: &Path, rows: &[QuantileRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Adaptive inference over `data` for each quantile of the score sketch.
pub fn evaluate_quantiles(
    net: &Network,
    sketch: &KllSketch,
    data: &[Sample],
    q_grid: &[f64],
    t_min: usize,
    t_max: usize,
) -> Result<Vec<QuantileRow>> {
    if data.is_empty() {
        return Err(FrostError::Empty("evaluation set"));
    }
    let mut rows = Vec::with_capacity(q_grid.len());
    for &q in q_grid {
        let mut policy = HaltingPolicy::new(q, sketch.clone(), t_min, t_max)?;
        let s_halt = policy.calibrate_threshold()?;
        let mut depth = 0usize;
        let mut correct = 0usize;
        for s in data {
            let out = adaptive_unroll(&net.model, &net.head, &s.x, &policy)?;
            depth += out.depth;
            correct += usize::from(argmax(&out.y) == s.label);
        }
        let n = data.len() as f64;
        rows.push(QuantileRow {
            q,
            s_halt,
            mean_depth: depth as f64 / n,
            accuracy: correct as f64 / n,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendChecks {
    /// Largest drop of the mean cosine profile between consecutive `t ≥ 2`.
    pub cosine_worst_drop: f64,
    pub cosine_nondecreasing: bool,
    /// Largest accuracy drop between consecutive grid quantiles.
    pub accuracy_worst_drop: f64,
    pub accuracy_nondecreasing: bool,
    pub depth_strictly_increasing: bool,
    /// Last-epoch mean of `mean_s_easy − mean_s_hard`.
    pub score_gap: f64,
    pub score_gap_ok: bool,
    pub min_lambda: f64,
    pub lambda_positive: bool,
}

impl TrendChecks {
    pub fn all_pass(&self) -> bool {
        self.cosine_nondecreasing
            && self.accuracy_nondecreasing
            && self.depth_strictly_increasing
            && self.score_gap_ok
            && self.lambda_positive
    }

    pub fn compute(profile: &ConsistencyProfile, quantiles: &[QuantileRow], log: &TrainingLog) -> Self {
        let mut cos_drop: f64 = 0.0;
        for k in 1..profile.mean.len().saturating_sub(1) {
            cos_drop = cos_drop.max(profile.mean[k] - profile.mean[k + 1]);
        }
        let mut sorted = quantiles.to_vec();
        sorted.sort_by(|a, b| a.q.total_cmp(&b.q));
        let mut acc_drop: f64 = 0.0;
        let mut depth_up = true;
        for w in sorted.windows(2) {
            acc_drop = acc_drop.max(w[0].accuracy - w[1].accuracy);
            depth_up &= w[1].mean_depth > w[0].mean_depth;
        }
        let last = log.last_epoch();
        let score_gap = if last.is_empty() {
            f64::NAN
        } else {
            last.iter().map(|r| r.mean_s_easy - r.mean_s_hard).sum::<f64>() / last.len() as f64
        };
        let min_lambda = log.rows.iter().map(|r| r.lambda).fold(f64::INFINITY, f64::min);
        TrendChecks {
            cosine_worst_drop: cos_drop,
            cosine_nondecreasing: cos_drop <= COSINE_SLACK,
            accuracy_worst_drop: acc_drop,
            accuracy_nondecreasing: acc_drop <= ACCURACY_SLACK,
            depth_strictly_increasing: depth_up,
            score_gap,
            score_gap_ok: score_gap >= SCORE_GAP_MIN,
            min_lambda,
            lambda_positive: log.rows.iter().all(|r| r.lambda > 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub alpha_rel: f64,
    pub alpha_abs: f64,
    pub mean_s_easy: f64,
    pub mean_s_hard: f64,
    pub score_gap: f64,
    pub final_lambda: f64,
    pub accuracy_full_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model_kind: String,
    pub seed: u64,
    pub epochs: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub training_steps: usize,
    pub final_lambda: f64,
    pub final_loss_task: Option<f64>,
    pub quantiles: Vec<QuantileRow>,
    pub cosine_profile: Vec<f64>,
    pub latent_dimension: Option<DimensionEstimate>,
    pub contraction_at_origin: f64,
    pub gradient_conflict: Option<GradientConflict>,
    pub trends: TrendChecks,
    pub ablation: Vec<AblationRow>,
    pub artifacts: Vec<String>,
}

fn datasets(cfg: &RunConfig) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let ds = generate_dataset(&cfg.dataset_spec(), derive_seed(cfg.seed, SEED_DATA))?;
    Ok(ds.split_per_class(cfg.data.train_per_class))
}

fn init_network(cfg: &RunConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_MODEL));
    let model = Model::init(&cfg.model, &mut rng)?;
    let head = HaltingHead::init(cfg.model.dims.d_hid, &mut rng);
    Ok(Network { model, head })
}

fn trajectories(net: &Network, data: &[Sample], steps: usize) -> Result<Vec<Trajectory>> {
    data.iter().map(|s| net.model.unroll(&net.head, &s.x, steps)).collect()
}

/// Inserts every detached score of a full unroll over `data`.
fn fill_sketch(sketch: &mut KllSketch, net: &Network, data: &[Sample], steps: usize) -> Result<()> {
    for tr in trajectories(net, data, steps)? {
        sketch.extend(tr.scores.iter().copied())?;
    }
    Ok(())
}

fn write_lambda_csv(path: &Path, log: &TrainingLog) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["step", "lambda"])?;
    for r in &log.rows {
        w.write_record([r.step.to_string(), r.lambda.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, net: &Network, sketch: &KllSketch, data: &[Sample], cfg: &RunConfig) -> Result<()> {
    let mut policy = HaltingPolicy::new(cfg.halting.q, sketch.clone(), cfg.halting.t_min, cfg.model.t_max)?;
    policy.calibrate_threshold()?;
    let mut rows = Vec::new();
    for (i, s) in data.iter().enumerate() {
        rows.extend(trace_rows(i, &adaptive_unroll(&net.model, &net.head, &s.x, &policy)?));
    }
    write_halting_trace(BufWriter::new(File::create(path)?), &rows)
}

fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run_ablation(cfg: &RunConfig, train_set: &[Sample], eval_set: &[Sample]) -> Result<Vec<AblationRow>> {
    let base = cfg.effective_training();
    let arms = [
        ("combined", base.alpha_rel, base.alpha_abs),
        ("relative_only", base.alpha_rel, 0.0),
        ("absolute_only", 0.0, base.alpha_abs),
        ("task_only", 0.0, 0.0),
    ];
    let mut rows = Vec::new();
    for (arm, alpha_rel, alpha_abs) in arms {
        info!("ablation arm {arm}");
        let tcfg = TrainingConfig {
            alpha_rel,
            alpha_abs,
            ..base.clone()
        };
        let mut net = init_network(cfg)?;
        let mut sketch = KllSketch::new(cfg.halting.sketch_k, derive_seed(cfg.seed, SEED_SKETCH))?;
        let log = train(&mut net, train_set, &tcfg, &mut sketch)?;
        let last = log.last_epoch();
        let n = last.len().max(1) as f64;
        let easy = last.iter().map(|r| r.mean_s_easy).sum::<f64>() / n;
        let hard = last.iter().map(|r| r.mean_s_hard).sum::<f64>() / n;
        if sketch.is_empty() {
            fill_sketch(&mut sketch, &net, train_set, tcfg.steps)?;
        }
        let full = evaluate_quantiles(&net, &sketch, eval_set, &[1.0], 1, cfg.model.t_max)?;
        rows.push(AblationRow {
            arm: arm.to_string(),
            alpha_rel,
            alpha_abs,
            mean_s_easy: easy,
            mean_s_hard: hard,
            score_gap: easy - hard,
            final_lambda: net.model.lambda(),
            accuracy_full_depth: full[0].accuracy,
        });
    }
    Ok(rows)
}

fn run_inner(cfg: &RunConfig, dir: &Path, artifacts: &mut Vec<String>) -> Result<RunSummary> {
    let mut emit = |name: &str| {
        artifacts.push(name.to_string());
        dir.join(name)
    };
    let (train_set, eval_set) = datasets(cfg)?;
    let tcfg = cfg.effective_training();
    let mut net = init_network(cfg)?;
    let mut sketch = KllSketch::new(cfg.halting.sketch_k, derive_seed(cfg.seed, SEED_SKETCH))?;

    info!(
        "training {} for {} epochs on {} samples",
        cfg.model.kind.name(),
        tcfg.epochs,
        train_set.len()
    );
    let log = train(&mut net, &train_set.samples, &tcfg, &mut sketch)?;
    if sketch.is_empty() {
        fill_sketch(&mut sketch, &net, &train_set.samples, tcfg.steps)?;
    }
    log.write_csv(BufWriter::new(File::create(emit("training_log.csv"))?))?;
    write_lambda_csv(&emit("lambda_trajectory.csv"), &log)?;

    let t_max = cfg.model.t_max;
    let trajs = trajectories(&net, &eval_set.samples, t_max)?;
    let profile = cosine_profile(&trajs)?;
    profile.write_csv(BufWriter::new(File::create(emit("cosine_profile.csv"))?))?;

    let quantiles = evaluate_quantiles(
        &net,
        &sketch,
        &eval_set.samples,
        &cfg.halting.q_grid,
        cfg.halting.t_min,
        t_max,
    )?;
    write_quantiles(&emit("quantiles.csv"), &quantiles)?;
    write_trace(&emit("halting_trace.csv"), &net, &sketch, &eval_set.samples, cfg)?;

    let latent = match latent_dimension(&trajs, DEFAULT_SCALE_LEVELS) {
        Ok(d) => Some(d),
        Err(e) => {
            info!("latent dimension not estimated: {e}");
            None
        }
    };
    let x0 = &eval_set.samples[0].x;
    let contraction = contraction_factor_estimate(&net.model, &[vec![0.0; cfg.model.dims.d_hid]], x0)?;

    let conflict = {
        let batch: Vec<Sample> = eval_set.samples.iter().take(tcfg.batch_size).cloned().collect();
        let task = objective_gradient(&net, &batch, &tcfg, LossWeights::task_only(), None)?;
        let rank = objective_gradient(&net, &batch, &tcfg, LossWeights::ranking_only(&tcfg), None)?;
        Some(gradient_conflict(&task, &rank)?)
    };

    let ablation = if cfg.ablation {
        let rows = run_ablation(cfg, &train_set.samples, &eval_set.samples)?;
        write_ablation(&emit("ablation.csv"), &rows)?;
        rows
    } else {
        Vec::new()
    };

    Checkpoint::new(net.model.clone(), net.head.clone(), Some(sketch.clone())).save(&emit("checkpoint.json"))?;

    let trends = TrendChecks::compute(&profile, &quantiles, &log);
    let summary_path = emit("summary.json");
    let summary = RunSummary {
        model_kind: cfg.model.kind.name().to_string(),
        seed: cfg.seed,
        epochs: tcfg.epochs,
        train_samples: train_set.len(),
        eval_samples: eval_set.len(),
        training_steps: log.rows.len(),
        final_lambda: net.model.lambda(),
        final_loss_task: log.rows.last().map(|r| r.loss_task),
        quantiles,
        cosine_profile: profile.mean.clone(),
        latent_dimension: latent,
        contraction_at_origin: contraction,
        gradient_conflict: conflict,
        trends,
        ablation,
        artifacts: artifacts.clone(),
    };
    write_json(&summary_path, &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct Status<'a> {
    status: &'a str,
    error: Option<String>,
    artifacts: &'a [String],
}

/// Trains, calibrates the halting threshold, evaluates the quantile grid and
/// writes all artifacts to `cfg.output_dir`. On failure `status.json` records
/// the error and the artifacts written so far.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let mut artifacts = Vec::new();
    let result = run_inner(cfg, &dir, &mut artifacts);
    let status = match &result {
        Ok(_) => Status {
            status: "complete",
            error: None,
            artifacts: &artifacts,
        },
        Err(e) => Status {
            status: "failed",
            error: Some(e.to_string()),
            artifacts: &artifacts,
        },
    };
    write_json(&dir.join("status.json"), &status)?;
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub quantiles: Vec<QuantileRow>,
    pub cosine_profile: Vec<f64>,
}

/// Evaluates a saved checkpoint on the evaluation split implied by `cfg`.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let net = Network {
        model: ck.model,
        head: ck.head,
    };
    let (train_set, eval_set) = datasets(cfg)?;
    let sketch = match ck.sketch {
        Some(s) if !s.is_empty() => s,
        _ => {
            let mut s = KllSketch::new(cfg.halting.sketch_k, derive_seed(cfg.seed, SEED_SKETCH))?;
            fill_sketch(&mut s, &net, &train_set.samples, cfg.training.steps)?;
            s
        }
    };
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let quantiles = evaluate_quantiles(
        &net,
        &sketch,
        &eval_set.samples,
        &cfg.halting.q_grid,
        cfg.halting.t_min,
        net.model.t_max,
    )?;
    write_quantiles(&dir.join("quantiles.csv"), &quantiles)?;
    let profile = cosine_profile(&trajectories(&net, &eval_set.samples, net.model.t_max)?)?;
    profile.write_csv(BufWriter::new(File::create(dir.join("cosine_profile.csv"))?))?;
    write_trace(&dir.join("halting_trace.csv"), &net, &sketch, &eval_set.samples, cfg)?;
    Ok(EvalSummary {
        quantiles,
        cosine_profile: profile.mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub error_decay: Vec<ErrorDecayReport>,
    pub gradient_bound: Vec<GradientBoundReport>,
    pub scaling: ScalingReport,
    pub latent_dimension: Option<DimensionEstimate>,
    pub decay_violations: usize,
    pub gradient_violations: usize,
}

/// Runs the contraction, error-decay, gradient-bound and scaling checks on a
/// saved model and writes one JSON report per check under `analysis/`.
pub fn analyze_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<AnalysisSummary> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let (_, eval_set) = datasets(cfg)?;
    let model = &ck.model;
    let t = model.t_max;
    let inputs: Vec<&Sample> = eval_set.samples.iter().take(cfg.analysis_inputs).collect();
    let mut decay = Vec::new();
    let mut grads = Vec::new();
    for s in &inputs {
        decay.push(error_decay_check(model, &s.x, t)?);
        grads.push(gradient_bound_check(model, &s.x, t)?);
    }
    let scaling = scaling_equivariance_check(&model.operators[0], 100, cfg.seed)?;
    let trajs = trajectories(
        &Network {
            model: model.clone(),
            head: ck.head.clone(),
        },
        &eval_set.samples,
        t,
    )?;
    let latent = latent_dimension(&trajs, DEFAULT_SCALE_LEVELS).ok();
    let summary = AnalysisSummary {
        decay_violations: decay.iter().map(|r| r.violations).sum(),
        gradient_violations: grads.iter().map(|r| r.violations).sum(),
        error_decay: decay,
        gradient_bound: grads,
        scaling,
        latent_dimension: latent,
    };
    let dir = cfg.output_dir.join("analysis");
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("error_decay.json"), &summary.error_decay)?;
    write_json(&dir.join("gradient_bound.json"), &summary.gradient_bound)?;
    write_json(&dir.join("scaling.json"), &summary.scaling)?;
    write_json(&dir.join("latent_dimension.json"), &summary.latent_dimension)?;
    info!(
        "analysis: {} decay and {} gradient-bound violations ({} power iterations per estimate)",
        summary.decay_violations, summary.gradient_violations, DEFAULT_POWER_ITERS
    );
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Random,
    Sorted,
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchBenchRow {
    pub k: usize,
    pub stream: StreamKind,
    pub n: usize,
    pub trials: usize,
    pub max_error: f64,
    pub mean_error: f64,
    pub target: f64,
    /// Trials in which every probed quantile was within `target`.
    pub trials_within_target: usize,
    pub max_stored_items: usize,
}

pub const BENCH_QUANTILES: [f64; 7] = [0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99];

/// Measured normalised rank error of the sketch against an exact sort.
pub fn sketch_bench(ks: &[usize], n: usize, trials: usize, seed: u64) -> Result<Vec<SketchBenchRow>> {
    if n == 0 || trials == 0 {
        return Err(FrostError::Config("sketch bench needs n >= 1 and trials >= 1".into()));
    }
    let mut rows = Vec::new();
    for &k in ks {
        for stream in [StreamKind::Random, StreamKind::Sorted, StreamKind::Reversed] {
            let mut max_error: f64 = 0.0;
            let mut sum_error = 0.0;
            let mut within = 0;
            let mut max_stored = 0;
            for trial in 0..trials {
                let trial_seed = derive_seed(seed, trial as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
                let mut data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let mut sorted = data.clone();
                sorted.sort_by(f64::total_cmp);
                match stream {
                    StreamKind::Random => {}
                    StreamKind::Sorted => data.clone_from(&sorted),
                    StreamKind::Reversed => {
                        data.clone_from(&sorted);
                        data.reverse();
                    }
                }
                let mut sk = KllSketch::new(k, trial_seed)?;
                sk.extend(data)?;
                max_stored = max_stored.max(sk.stored_items());
                let mut ok = true;
                for q in BENCH_QUANTILES {
                    let e = normalized_rank_error(&sorted, sk.query(q)?, q);
                    max_error = max_error.max(e);
                    sum_error += e;
                    ok &= e <= KllSketch::rank_error_target(k);
                }
                within += usize::from(ok);
            }
            rows.push(SketchBenchRow {
                k,
                stream,
                n,
                trials,
                max_error,
                mean_error: sum_error / (trials * BENCH_QUANTILES.len()) as f64,
                target: KllSketch::rank_error_target(k),
                trials_within_target: within,
                max_stored_items: max_stored,
            });
        }
    }
    Ok(rows)
}
