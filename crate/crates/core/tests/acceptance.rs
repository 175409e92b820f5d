//! Acceptance checks. Prints one PASS/FAIL line per criterion with its
//! runtime budget and exits non-zero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use frost::analysis::{
    box_counting_dimension, error_decay_check, gradient_bound_check, koch_curve, scaling_equivariance_check,
    DEFAULT_SCALE_LEVELS,
};
use frost::dynamics::{Model, ModelConfig, ModelDims, ModelKind, ScaleParameters};
use frost::harness::{gradient_check, run_experiment, RunConfig};
use frost::sketch::{normalized_rank_error, KllSketch};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

fn random_frost(rng: &mut ChaCha8Rng) -> Model {
    let cfg = ModelConfig {
        kind: ModelKind::Frost,
        dims: ModelDims {
            d_in: rng.random_range(1..8),
            d_hid: rng.random_range(1..10),
            d_out: rng.random_range(1..5),
        },
        t_max: 4,
        hurst: rng.random_range(0.05..1.0),
        ..ModelConfig::default()
    };
    Model::init(&cfg, rng).unwrap()
}

fn update_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut e0, mut e1): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let mut ops = random_frost(&mut rng).operators[0].clone();
        let h = random_vec(&mut rng, ops.d_hid(), 3.0);
        let x = random_vec(&mut rng, ops.d_in(), 3.0);
        let hurst = ops.scale.hurst;

        ops.scale = ScaleParameters::with_lambda(0.0, hurst).unwrap();
        let out = ops.frost_step(&h, &x).unwrap();
        e0 = out.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(e0, f64::max);

        ops.scale = ScaleParameters::with_lambda(1.0, hurst).unwrap();
        let out = ops.frost_step(&h, &x).unwrap();
        let a = ops.a.apply(&h).unwrap();
        let b = ops.b.apply(&x).unwrap();
        for i in 0..h.len() {
            e1 = e1.max((out[i] - (h[i] + a[i] + b[i])).abs());
        }
    }
    outcome(
        e0 <= 1e-12 && e1 <= 1e-12,
        format!("1000 instances, max |err| λ=0 {e0:.1e}, λ=1 {e1:.1e}"),
    )
}

fn scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let base = random_frost(&mut rng).operators[0].clone();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    let mut cells = 0;
    for lambda in [0.1, 0.25, 0.5, 1.0, 2.0, 4.0] {
        for hurst in [0.1, 0.3, 0.5, 0.8, 1.0] {
            let mut ops = base.clone();
            ops.scale = ScaleParameters::with_lambda(lambda, hurst).unwrap();
            let r = scaling_equivariance_check(&ops, 50, cells).unwrap();
            pass &= r.pass && r.tolerance <= 1e-12;
            worst = worst
                .max(r.max_err_transition)
                .max(r.max_err_input)
                .max(r.max_err_output)
                .max(r.max_err_feedthrough);
            cells += 1;
        }
    }
    outcome(pass, format!("{cells} grid cells, worst error {worst:.1e}"))
}

fn contractive_instances() -> Vec<(Model, Vec<f64>)> {
    (0..20u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let cfg = ModelConfig {
                dims: ModelDims {
                    d_in: 8,
                    d_hid: 16,
                    d_out: 4,
                },
                ..ModelConfig::default()
            };
            let model = Model::init(&cfg, &mut rng).unwrap();
            let x = random_vec(&mut rng, 8, 1.0);
            (model, x)
        })
        .collect()
}

fn error_decay() -> Outcome {
    let mut violations = 0;
    let mut contractive = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_l: f64 = 0.0;
    for (model, x) in contractive_instances() {
        let r = error_decay_check(&model, &x, 16).unwrap();
        if r.skipped {
            continue;
        }
        contractive += 1;
        violations += r.violations;
        worst_ratio = worst_ratio.max(r.tightest_ratio);
        worst_l = worst_l.max(r.contraction);
    }
    outcome(
        contractive == 20 && violations == 0,
        format!("{contractive}/20 contractive (max L {worst_l:.3}), {violations} violations, tightest error/bound {worst_ratio:.3}"),
    )
}

fn gradient_bound() -> Outcome {
    let mut violations = 0;
    let mut checked = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for (model, x) in contractive_instances() {
        let r = gradient_bound_check(&model, &x, 16).unwrap();
        if r.skipped {
            continue;
        }
        checked += 1;
        violations += r.violations;
        for (n, b) in r.norms.iter().zip(&r.bounds) {
            worst_excess = worst_excess.max(n - b);
        }
        assert!(r.slack <= 1e-6);
    }
    outcome(
        checked == 20 && violations == 0,
        format!("{checked}/20 instances, {violations} violations, max ‖J_t‖ − L^t = {worst_excess:.2e}"),
    )
}

fn gradients() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [ModelKind::Frost, ModelKind::Vanilla, ModelKind::Recurrent, ModelKind::BasicSsm] {
        let r = gradient_check(kind, 7).unwrap();
        pass &= r.max_rel_error < 1e-3;
        parts.push(format!("{} {:.1e}", kind.name(), r.max_rel_error));
    }
    outcome(pass, format!("max rel error: {}", parts.join(", ")))
}

fn sketch() -> Outcome {
    const QS: [f64; 7] = [0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99];
    const N: usize = 100_000;
    const TRIALS: u64 = 50;
    let mut pass = true;
    let mut parts = Vec::new();
    for stream in ["random", "sorted", "reversed"] {
        let mut good = 0;
        let mut worst: f64 = 0.0;
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let mut values: Vec<f64> = (0..N).map(|i| i as f64 + rng.random::<f64>() * 0.5).collect();
            match stream {
                "random" => values.shuffle(&mut rng),
                "reversed" => values.reverse(),
                _ => {}
            }
            let mut sk = KllSketch::new(200, trial).unwrap();
            sk.extend(values.iter().copied()).unwrap();
            values.sort_by(f64::total_cmp);
            let err = QS
                .iter()
                .map(|&q| normalized_rank_error(&values, sk.query(q).unwrap(), q))
                .fold(0.0, f64::max);
            worst = worst.max(err);
            good += usize::from(err <= 0.02);
        }
        let frac = good as f64 / TRIALS as f64;
        pass &= frac >= 0.99;
        parts.push(format!("{stream} {good}/{TRIALS} (worst {worst:.4})"));
    }
    outcome(pass, format!("k=200, n=1e5: {}", parts.join(", ")))
}

fn dimension() -> Outcome {
    let koch = box_counting_dimension(&koch_curve(7), DEFAULT_SCALE_LEVELS).unwrap().dimension;
    let line: Vec<[f64; 2]> = (0..20_000)
        .map(|i| {
            let s = i as f64 / 19_999.0;
            [0.3 + s, 0.7 * s - 1.0]
        })
        .collect();
    let line = box_counting_dimension(&line, DEFAULT_SCALE_LEVELS).unwrap().dimension;
    let grid: Vec<[f64; 2]> = (0..256 * 256).map(|i| [(i % 256) as f64, (i / 256) as f64]).collect();
    let grid = box_counting_dimension(&grid, DEFAULT_SCALE_LEVELS).unwrap().dimension;
    let pass = (koch - 1.2619).abs() <= 0.05 && (line - 1.0).abs() <= 0.05 && (grid - 2.0).abs() <= 0.05;
    outcome(pass, format!("koch {koch:.4}, line {line:.4}, grid {grid:.4}"))
}

fn trends(dir: &Path) -> Outcome {
    let cfg = RunConfig {
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    let s = run_experiment(&cfg).unwrap();
    let t = &s.trends;
    let a = t.cosine_worst_drop <= 0.02;
    let b = t.accuracy_worst_drop <= 0.01 && t.depth_strictly_increasing;
    let c = t.score_gap >= 0.1;
    let d = t.min_lambda > 0.0;
    outcome(
        a && b && c && d,
        format!(
            "(a) cosine drop {:.4} {} (b) acc drop {:.4}, depth increasing {} {} (c) gap {:.3} {} (d) min λ {:.4} {}",
            t.cosine_worst_drop,
            mark(a),
            t.accuracy_worst_drop,
            t.depth_strictly_increasing,
            mark(b),
            t.score_gap,
            mark(c),
            t.min_lambda,
            mark(d)
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

fn determinism(first: &Path) -> Outcome {
    let second = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        output_dir: second.path().to_path_buf(),
        ..RunConfig::default()
    };
    run_experiment(&cfg).unwrap();
    let names = csv_files(first);
    if names != csv_files(second.path()) || names.is_empty() {
        return outcome(false, "CSV artifact sets differ");
    }
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(first.join(n)).unwrap() != std::fs::read(second.path().join(n)).unwrap())
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} CSV files compared, differing: {:?}", names.len(), differing),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

type Criterion<'a> = (u32, &'static str, Duration, Box<dyn Fn() -> Outcome + 'a>);

fn main() -> ExitCode {
    let run_dir = tempfile::tempdir().unwrap();
    let run_path = run_dir.path().to_path_buf();
    let criteria: Vec<Criterion> = vec![
        (1, "update identities", Duration::from_secs(1), Box::new(update_identities)),
        (2, "scaling equivariance", Duration::from_secs(1), Box::new(scaling)),
        (3, "contraction and error decay", Duration::from_secs(10), Box::new(error_decay)),
        (4, "gradient bound", Duration::from_secs(30), Box::new(gradient_bound)),
        (5, "gradient correctness", Duration::from_secs(10), Box::new(gradients)),
        (6, "quantile sketch", Duration::from_secs(30), Box::new(sketch)),
        (7, "box-counting dimension", Duration::from_secs(10), Box::new(dimension)),
        (8, "trend reproduction", Duration::from_secs(300), Box::new(move || trends(&run_path))),
        (9, "determinism", Duration::from_secs(300), Box::new(|| determinism(run_dir.path()))),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in &criteria {
        let start = Instant::now();
        let r = check();
        let elapsed = start.elapsed();
        let ok = r.pass && elapsed <= *limit;
        failed += usize::from(!ok);
        println!(
            "criterion {id} {:<28} {}  [{:.2}s / {}s] {}",
            name,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            r.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
