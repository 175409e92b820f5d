use std::time::Instant;

use log::info;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{derive_seed, sketch_bench, write_json, RunConfig};
use crate::analysis::{
    box_counting_dimension, error_decay_check, gradient_bound_check, koch_curve, scaling_equivariance_check,
    DEFAULT_SCALE_LEVELS,
};
use crate::dynamics::{Model, ModelConfig, ModelDims, ModelKind, ScaleParameters};
use crate::error::{FrostError, Result};
use crate::halting::HaltingHead;
use crate::numerics::{
    assign_flat, finite_difference_gradient, flatten, spectral_norm_estimate, Activation, Matrix, MlpMap,
};
use crate::sketch::KllSketch;
use crate::training::{evaluate_batch, train, BatchOptions, Network, Sample, TrainingConfig};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Feed a negative `λ` to the positivity suite, bypassing `λ = exp(ρ)`.
    pub inject_negative_lambda: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub pass: bool,
    pub seconds: f64,
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub pass: bool,
    pub first_failure: Option<String>,
    pub suites: Vec<SuiteReport>,
}

impl VerifyOutcome {
    /// `Err(Verification)` naming the first failing suite.
    pub fn into_result(self) -> Result<Self> {
        match &self.first_failure {
            Some(name) => Err(FrostError::Verification(format!("suite `{name}` failed"))),
            None => Ok(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub kind: ModelKind,
    pub params: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const GRADIENT_REL_TOLERANCE: f64 = 1e-3;

/// Analytic gradient of the total objective against central differences on a
/// `D_hid = 3, T = 2, B = 2` instance, with the easy/hard split held fixed.
pub fn gradient_check(kind: ModelKind, seed: u64) -> Result<GradientCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mcfg = ModelConfig {
        kind,
        dims: ModelDims {
            d_in: 2,
            d_hid: 3,
            d_out: 2,
        },
        t_max: 2,
        ..ModelConfig::default()
    };
    let model = Model::init(&mcfg, &mut rng)?;
    let mut head = HaltingHead::init(3, &mut rng);
    head.b = rng.random_range(-0.5..0.5);
    let net = Network { model, head };
    let batch: Vec<Sample> = (0..2)
        .map(|i| Sample {
            x: (0..2).map(|_| rng.random_range(-1.5..1.5)).collect(),
            label: i,
        })
        .collect();
    let cfg = TrainingConfig {
        steps: 2,
        batch_size: 2,
        k_split: Some(1),
        grad_clip: None,
        ..TrainingConfig::default()
    };
    let out = evaluate_batch(
        &net,
        &batch,
        &cfg,
        &BatchOptions {
            compute_grad: true,
            ..BatchOptions::default()
        },
    )?;
    let analytic = flatten(out.grads.as_ref().expect("gradient requested"));
    let theta = flatten(&net);
    let split = out.split.clone();
    let mut failure = None;
    let numeric = finite_difference_gradient(
        |th| {
            let mut n = net.clone();
            let opts = BatchOptions {
                split: Some(split.clone()),
                ..BatchOptions::default()
            };
            match assign_flat(&mut n, th).and_then(|_| evaluate_batch(&n, &batch, &cfg, &opts)) {
                Ok(o) => o.breakdown.total,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        },
        &theta,
        1e-6,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric?;
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
        .fold(0.0, f64::max);
    Ok(GradientCheckReport {
        kind,
        params: theta.len(),
        max_rel_error,
        tolerance: GRADIENT_REL_TOLERANCE,
        pass: max_rel_error < GRADIENT_REL_TOLERANCE,
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn suite_numerics(seed: u64) -> Result<(bool, Value)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_spec_err: f64 = 0.0;
    for _ in 0..10 {
        let (r, c) = (rng.random_range(2..12), rng.random_range(2..12));
        let m = random_matrix(&mut rng, r, c);
        let dense = DMatrix::from_row_slice(r, c, m.as_slice());
        let sigma = dense.singular_values().max();
        let est = spectral_norm_estimate(&m, 2000, 1e-15);
        max_spec_err = max_spec_err.max((est - sigma).abs());
    }
    let mlp = MlpMap::init_square(5, 2, Activation::Tanh, -0.5, &mut rng);
    let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let trace = mlp.forward(&h)?;
    let (grad, _) = mlp.vjp(&trace, &u)?;
    let analytic = flatten(&grad);
    let fd = finite_difference_gradient(
        |th| {
            let mut m = mlp.clone();
            assign_flat(&mut m, th).expect("same layout");
            crate::numerics::dot(&m.apply(&h).expect("dims"), &u)
        },
        &flatten(&mlp),
        1e-6,
    )?;
    let max_vjp_err = analytic
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
        .fold(0.0, f64::max);
    let pass = max_spec_err < 1e-6 && max_vjp_err < 1e-6;
    Ok((
        pass,
        json!({"spectral_norm_max_abs_error": max_spec_err, "spectral_tolerance": 1e-6,
               "mlp_vjp_max_rel_error": max_vjp_err, "vjp_tolerance": 1e-6}),
    ))
}

fn random_model(rng: &mut ChaCha8Rng, kind: ModelKind) -> Result<Model> {
    let cfg = ModelConfig {
        kind,
        dims: ModelDims {
            d_in: rng.random_range(1..8),
            d_hid: rng.random_range(1..10),
            d_out: rng.random_range(1..5),
        },
        t_max: 4,
        hurst: rng.random_range(0.05..1.0),
        ..ModelConfig::default()
    };
    Model::init(&cfg, rng)
}

fn suite_update_identities(seed: u64) -> Result<(bool, Value)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut err_zero, mut err_one): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let m = random_model(&mut rng, ModelKind::Frost)?;
        let mut ops = m.operators[0].clone();
        let h: Vec<f64> = (0..ops.d_hid()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x: Vec<f64> = (0..ops.d_in()).map(|_| rng.random_range(-3.0..3.0)).collect();
        ops.scale = ScaleParameters::with_lambda(0.0, ops.scale.hurst)?;
        let out = ops.frost_step(&h, &x)?;
        err_zero = out.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(err_zero, f64::max);
        ops.scale = ScaleParameters::with_lambda(1.0, ops.scale.hurst)?;
        let out = ops.frost_step(&h, &x)?;
        let a = ops.a.apply(&h)?;
        let b = ops.b.apply(&x)?;
        for i in 0..h.len() {
            err_one = err_one.max((out[i] - (h[i] + a[i] + b[i])).abs());
        }
    }
    let pass = err_zero <= 1e-12 && err_one <= 1e-12;
    Ok((
        pass,
        json!({"instances": 1000, "lambda0_max_error": err_zero, "lambda1_max_error": err_one, "tolerance": 1e-12}),
    ))
}

fn suite_scaling(seed: u64) -> Result<(bool, Value)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = random_model(&mut rng, ModelKind::Frost)?.operators[0].clone();
    let mut reports = Vec::new();
    for lambda in [0.25, 0.5, 1.0, 2.0] {
        for hurst in [0.2, 0.5, 0.8, 1.0] {
            let mut ops = base.clone();
            ops.scale = ScaleParameters::with_lambda(lambda, hurst)?;
            reports.push(scaling_equivariance_check(&ops, 50, seed)?);
        }
    }
    let pass = reports.iter().all(|r| r.pass);
    Ok((pass, json!({ "grid": reports })))
}

fn suite_sketch(seed: u64) -> Result<(bool, Value)> {
    let main = sketch_bench(&[200], 100_000, 5, seed)?;
    let main_ok = main.iter().all(|r| r.trials_within_target == r.trials);
    let cmp = sketch_bench(&[8, 400], 20_000, 5, seed)?;
    let mean = |k: usize| {
        let rows: Vec<_> = cmp.iter().filter(|r| r.k == k).collect();
        rows.iter().map(|r| r.mean_error).sum::<f64>() / rows.len() as f64
    };
    let (e8, e400) = (mean(8), mean(400));
    Ok((
        main_ok && e8 > e400,
        json!({"k200": main, "mean_error_k8": e8, "mean_error_k400": e400}),
    ))
}

fn suite_contraction(seed: u64) -> Result<(bool, Value)> {
    let mut decay_viol = 0;
    let mut grad_viol = 0;
    let mut skipped = 0;
    let mut instances = Vec::new();
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial));
        let cfg = ModelConfig {
            dims: ModelDims {
                d_in: 8,
                d_hid: 16,
                d_out: 4,
            },
            ..ModelConfig::default()
        };
        let model = Model::init(&cfg, &mut rng)?;
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = error_decay_check(&model, &x, 16)?;
        let g = gradient_bound_check(&model, &x, 16)?;
        decay_viol += d.violations;
        grad_viol += g.violations;
        skipped += usize::from(d.skipped);
        instances.push(json!({"trial": trial, "L": d.contraction, "tightest_ratio": d.tightest_ratio,
                              "gradient_L": g.contraction, "skipped": d.skipped}));
    }
    Ok((
        decay_viol == 0 && grad_viol == 0 && skipped == 0,
        json!({"decay_violations": decay_viol, "gradient_violations": grad_viol, "skipped": skipped,
               "instances": instances}),
    ))
}

fn suite_gradients(seed: u64) -> Result<(bool, Value)> {
    let reports = [ModelKind::Frost, ModelKind::Vanilla, ModelKind::Recurrent, ModelKind::BasicSsm]
        .into_iter()
        .map(|k| gradient_check(k, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok((reports.iter().all(|r| r.pass), json!({ "checks": reports })))
}

fn suite_dimension() -> Result<(bool, Value)> {
    let koch = box_counting_dimension(&koch_curve(7), DEFAULT_SCALE_LEVELS)?;
    let line: Vec<[f64; 2]> = (0..10_000)
        .map(|i| {
            let s = i as f64 / 9_999.0;
            [s, 0.4 * s]
        })
        .collect();
    let line = box_counting_dimension(&line, DEFAULT_SCALE_LEVELS)?;
    let grid: Vec<[f64; 2]> = (0..40_000).map(|i| [(i % 200) as f64, (i / 200) as f64]).collect();
    let grid = box_counting_dimension(&grid, DEFAULT_SCALE_LEVELS)?;
    let koch_ref = 4f64.ln() / 3f64.ln();
    let pass = (koch.dimension - koch_ref).abs() <= 0.05
        && (line.dimension - 1.0).abs() <= 0.05
        && (grid.dimension - 2.0).abs() <= 0.05;
    Ok((
        pass,
        json!({"koch": koch.dimension, "koch_reference": koch_ref, "line": line.dimension,
               "grid": grid.dimension, "tolerance": 0.05}),
    ))
}

fn suite_positivity(seed: u64, inject: bool) -> Result<(bool, Value)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        dims: ModelDims {
            d_in: 4,
            d_hid: 6,
            d_out: 2,
        },
        t_max: 4,
        ..ModelConfig::default()
    };
    let mut net = Network {
        model: Model::init(&cfg, &mut rng)?,
        head: HaltingHead::init(6, &mut rng),
    };
    let data: Vec<Sample> = (0..32)
        .map(|i| Sample {
            x: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: i % 2,
        })
        .collect();
    let tcfg = TrainingConfig {
        steps: 4,
        batch_size: 8,
        epochs: 2,
        lr: 0.5,
        seed,
        ..TrainingConfig::default()
    };
    let mut sketch = KllSketch::new(16, seed)?;
    let log = train(&mut net, &data, &tcfg, &mut sketch)?;
    let mut lambdas: Vec<f64> = log.rows.iter().map(|r| r.lambda).collect();
    if inject {
        lambdas.push(-net.model.lambda());
    }
    let bad = lambdas.iter().filter(|&&l| !(l > 0.0)).count();
    Ok((
        bad == 0,
        json!({"logged_steps": lambdas.len(), "non_positive": bad, "injected": inject}),
    ))
}

/// Runs every property suite, writing `verify/<suite>.json` and
/// `verify/summary.json` under `cfg.output_dir`.
pub fn verify(cfg: &RunConfig, opts: &VerifyOptions) -> Result<VerifyOutcome> {
    let dir = cfg.output_dir.join("verify");
    std::fs::create_dir_all(&dir)?;
    let seed = cfg.seed;
    type Suite<'a> = (&'static str, Box<dyn Fn() -> Result<(bool, Value)> + 'a>);
    let suites: Vec<Suite> = vec![
        ("numerics", Box::new(move || suite_numerics(seed))),
        ("update_identities", Box::new(move || suite_update_identities(seed))),
        ("scaling", Box::new(move || suite_scaling(seed))),
        ("sketch", Box::new(move || suite_sketch(seed))),
        ("contraction", Box::new(move || suite_contraction(seed))),
        ("gradients", Box::new(move || suite_gradients(seed))),
        ("dimension", Box::new(suite_dimension)),
        ("positivity", Box::new(move || suite_positivity(seed, opts.inject_negative_lambda))),
    ];
    let mut reports = Vec::new();
    for (name, run) in suites {
        let start = Instant::now();
        let (pass, details) = match run() {
            Ok(r) => r,
            Err(e) => (false, json!({ "error": e.to_string() })),
        };
        let report = SuiteReport {
            name: name.to_string(),
            pass,
            seconds: start.elapsed().as_secs_f64(),
            details,
        };
        info!("suite {name}: {}", if pass { "pass" } else { "FAIL" });
        write_json(&dir.join(format!("{name}.json")), &report)?;
        reports.push(report);
    }
    let first_failure = reports.iter().find(|r| !r.pass).map(|r| r.name.clone());
    let outcome = VerifyOutcome {
        pass: first_failure.is_none(),
        first_failure,
        suites: reports,
    };
    write_json(&dir.join("summary.json"), &outcome)?;
    Ok(outcome)
}
