//! Scale-consistency profiles, box-counting dimension, and numerical checks of
//! the contraction, error-decay, gradient-bound and scaling properties of the
//! update.
//!
//! Every check returns a serialisable report with the measured values, the
//! tolerance that was applied and a pass flag.

use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Model, ModelKind, OperatorSet, ScaleParameters, Trajectory};
use crate::error::{FrostError, Result};
use crate::numerics::{
    dot, norm, power_iteration, sub, FnOperator, GradientBundle, DEFAULT_POWER_ITERS,
};

pub const SCALING_TOLERANCE: f64 = 1e-12;
pub const DECAY_REL_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_BOUND_SLACK: f64 = 1e-6;
pub const FIXED_POINT_TOL: f64 = 1e-12;
const FIXED_POINT_MAX_ITERS: usize = 1_000_000;
pub const DEFAULT_SCALE_LEVELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyProfile {
    /// Mean of `cos(h_t, h_T)` for `t = 1..=T`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Number of states contributing at each `t`.
    pub counts: Vec<usize>,
    /// States dropped because `h_t` or `h_T` had zero norm.
    pub excluded: usize,
}

impl ConsistencyProfile {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mean_cos", "std_cos", "count"])?;
        for k in 0..self.mean.len() {
            w.write_record([
                (k + 1).to_string(),
                self.mean[k].to_string(),
                self.std[k].to_string(),
                self.counts[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-depth mean and standard deviation of `cos(h_t, h_T)`.
pub fn cosine_profile(trajectories: &[Trajectory]) -> Result<ConsistencyProfile> {
    let first = trajectories.first().ok_or(FrostError::Empty("trajectory set"))?;
    let steps = first.steps();
    if steps == 0 {
        return Err(FrostError::Empty("trajectory"));
    }
    let mut sums = vec![0.0; steps];
    let mut sq = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    let mut excluded = 0;
    for tr in trajectories {
        if tr.steps() != steps || tr.states.len() != steps + 1 {
            return Err(FrostError::shape("cosine_profile trajectory length", steps, tr.steps()));
        }
        let last = &tr.states[steps];
        let nl = norm(last);
        if nl == 0.0 {
            excluded += steps;
            continue;
        }
        for t in 1..=steps {
            let h = &tr.states[t];
            let nh = norm(h);
            if nh == 0.0 {
                excluded += 1;
                continue;
            }
            let c = if t == steps {
                1.0
            } else {
                (dot(h, last) / (nh * nl)).clamp(-1.0, 1.0)
            };
            sums[t - 1] += c;
            sq[t - 1] += c * c;
            counts[t - 1] += 1;
        }
    }
    let mut mean = vec![0.0; steps];
    let mut std = vec![0.0; steps];
    for k in 0..steps {
        if counts[k] > 0 {
            let n = counts[k] as f64;
            mean[k] = sums[k] / n;
            std[k] = (sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt();
        }
    }
    Ok(ConsistencyProfile {
        mean,
        std,
        counts,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    pub dimension: f64,
    /// Box sizes used in the fit, relative to the normalised extent.
    pub scales: Vec<f64>,
    /// Geometric mean of the box counts over grid placements, per scale.
    pub counts: Vec<f64>,
    /// RMS residual of the log-log fit.
    pub residual: f64,
    pub degenerate: bool,
}

/// Number of placements of the normalised set along its slack axis.
pub const BOX_PLACEMENTS: usize = 16;

/// Box-counting dimension of a planar point set.
///
/// Points are shifted and scaled into the unit square by their largest
/// extent and counted on a dyadic ladder `ε = 2^-1 … 2^-levels`. A set that
/// is thinner than the square along one axis is slid across the free room in
/// [`BOX_PLACEMENTS`] even steps and the log counts are averaged, which
/// removes most of the dependence on where the grid lines happen to fall.
/// Finest levels where more than half the points sit in their own box are
/// dropped.
pub fn box_counting_dimension(points: &[[f64; 2]], scale_levels: usize) -> Result<DimensionEstimate> {
    if points.len() < 100 {
        return Err(FrostError::Config(format!(
            "box counting needs at least 100 points, got {}",
            points.len()
        )));
    }
    if scale_levels < 4 {
        return Err(FrostError::Config("box counting needs at least 4 scale levels".into()));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(FrostError::Numeric("non-finite point in box counting input".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = [hi[0] - lo[0], hi[1] - lo[1]];
    let extent = span[0].max(span[1]);
    if extent == 0.0 {
        return Ok(DimensionEstimate {
            dimension: 0.0,
            scales: Vec::new(),
            counts: Vec::new(),
            residual: 0.0,
            degenerate: true,
        });
    }
    let slack = [1.0 - span[0] / extent, 1.0 - span[1] / extent];
    let unit: Vec<[f64; 2]> = points
        .iter()
        .map(|p| [(p[0] - lo[0]) / extent, (p[1] - lo[1]) / extent])
        .collect();

    let mut log_counts = vec![0.0; scale_levels];
    let mut max_counts = vec![0usize; scale_levels];
    let mut seen = HashSet::with_capacity(unit.len());
    for k in 0..BOX_PLACEMENTS {
        let f = k as f64 / (BOX_PLACEMENTS - 1) as f64;
        let shift = [slack[0] * f, slack[1] * f];
        for level in 1..=scale_levels {
            let boxes = 1u64 << level;
            seen.clear();
            for p in &unit {
                let ix = (((p[0] + shift[0]) * boxes as f64) as u64).min(boxes - 1);
                let iy = (((p[1] + shift[1]) * boxes as f64) as u64).min(boxes - 1);
                seen.insert((ix, iy));
            }
            log_counts[level - 1] += (seen.len() as f64).ln() / BOX_PLACEMENTS as f64;
            max_counts[level - 1] = max_counts[level - 1].max(seen.len());
        }
    }
    let mut scales: Vec<f64> = (1..=scale_levels).map(|l| 0.5f64.powi(l as i32)).collect();
    while log_counts.len() > 2 && *max_counts.last().unwrap() > unit.len() / 2 {
        log_counts.pop();
        max_counts.pop();
        scales.pop();
    }

    let xs: Vec<f64> = scales.iter().map(|e| (1.0 / e).ln()).collect();
    let (slope, intercept) = least_squares(&xs, &log_counts);
    let residual = (xs
        .iter()
        .zip(&log_counts)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum::<f64>()
        / xs.len() as f64)
        .sqrt();
    Ok(DimensionEstimate {
        dimension: slope,
        scales,
        counts: log_counts.iter().map(|l| l.exp()).collect(),
        residual,
        degenerate: false,
    })
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Projection of the rows onto their top two principal components.
pub fn pca_project_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let first = points.first().ok_or(FrostError::Empty("point set"))?;
    let d = first.len();
    if d == 0 {
        return Err(FrostError::Empty("point dimension"));
    }
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        if p.len() != d {
            return Err(FrostError::shape("pca point", d, p.len()));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centred.transpose() * &centred;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // Fix the sign so the largest component is positive.
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = centred.row(i).iter().copied().collect();
            let a = dot(&row, &axes[0]);
            let b = axes.get(1).map_or(0.0, |ax| dot(&row, ax));
            [a, b]
        })
        .collect())
}

/// Pools `h_1 … h_T` from every trajectory, projects onto the top two
/// principal components and box-counts the resulting cloud.
pub fn latent_dimension(trajectories: &[Trajectory], scale_levels: usize) -> Result<DimensionEstimate> {
    let pooled: Vec<Vec<f64>> = trajectories
        .iter()
        .flat_map(|t| t.states.iter().skip(1).cloned())
        .collect();
    box_counting_dimension(&pca_project_2d(&pooled)?, scale_levels)
}

fn require_stationary(model: &Model) -> Result<()> {
    if model.kind == ModelKind::Vanilla {
        return Err(FrostError::Config(
            "fixed-point checks need a stationary step; vanilla has per-step operators".into(),
        ));
    }
    Ok(())
}

/// Largest step Jacobian norm over the probe states. This is the reported `L`.
pub fn contraction_factor_estimate(model: &Model, probe_states: &[Vec<f64>], x: &[f64]) -> Result<f64> {
    if probe_states.is_empty() {
        return Err(FrostError::Empty("probe states"));
    }
    let mut l: f64 = 0.0;
    for h in probe_states {
        l = l.max(model.step_jacobian_norm(h, x, 0)?);
    }
    Ok(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecayReport {
    pub contraction: f64,
    pub skipped: bool,
    pub fixed_point_iters: usize,
    /// `‖h_t − h*‖` for `t = 0..=T`.
    pub errors: Vec<f64>,
    /// `L^t / (1 − L) · ‖h_1 − h_0‖`.
    pub bounds: Vec<f64>,
    /// Largest `error / bound` over `t`.
    pub tightest_ratio: f64,
    pub violations: usize,
    pub rel_tolerance: f64,
    pub pass: bool,
}

/// Iterates `h ↦ step(h, x)` from `h_0 = 0` to a numerical fixed point and
/// checks the a-priori error bound for every `t ≤ T`.
///
/// `L` is the largest Jacobian norm over the iterates, the fixed point and
/// the midpoints between each iterate and the fixed point. A first step that
/// does not move the state makes the bound trivially `0 ≤ 0`.
pub fn error_decay_check(model: &Model, x: &[f64], t_check: usize) -> Result<ErrorDecayReport> {
    require_stationary(model)?;
    let h0 = vec![0.0; model.dims.d_hid];
    let skipped = |l: f64, iters: usize, errors: Vec<f64>| ErrorDecayReport {
        contraction: l,
        skipped: true,
        fixed_point_iters: iters,
        errors,
        bounds: Vec::new(),
        tightest_ratio: f64::NAN,
        violations: 0,
        rel_tolerance: DECAY_REL_TOLERANCE,
        pass: true,
    };
    let h1 = model.step(&h0, x, 0)?;
    if h1 != h0 {
        let l0 = contraction_factor_estimate(model, &[h0.clone(), h1], x)?;
        if l0 >= 1.0 {
            return Ok(skipped(l0, 0, Vec::new()));
        }
    }
    let mut iterates = vec![h0.clone()];
    let mut h = h0;
    let mut iters = 0;
    loop {
        let next = model.step(&h, x, 0)?;
        let inc = norm(&sub(&next, &h));
        iters += 1;
        h = next;
        if iterates.len() <= t_check {
            iterates.push(h.clone());
        }
        if inc < FIXED_POINT_TOL || iters >= FIXED_POINT_MAX_ITERS {
            if inc >= FIXED_POINT_TOL {
                return Err(FrostError::Numeric(format!(
                    "no fixed point after {iters} iterations (last increment {inc:e})"
                )));
            }
            break;
        }
    }
    while iterates.len() <= t_check {
        let next = model.step(iterates.last().unwrap(), x, 0)?;
        iterates.push(next);
    }
    let fixed = h;
    let errors: Vec<f64> = iterates.iter().map(|v| norm(&sub(v, &fixed))).collect();
    let first_move = norm(&sub(&iterates[1], &iterates[0]));

    if first_move == 0.0 {
        let n = t_check + 1;
        let violations = errors.iter().filter(|&&e| e > 0.0).count();
        return Ok(ErrorDecayReport {
            contraction: 0.0,
            skipped: false,
            fixed_point_iters: iters,
            errors,
            bounds: vec![0.0; n],
            tightest_ratio: 0.0,
            violations,
            rel_tolerance: DECAY_REL_TOLERANCE,
            pass: violations == 0,
        });
    }

    let mut probes = iterates.clone();
    probes.push(fixed.clone());
    for v in &iterates {
        probes.push(v.iter().zip(&fixed).map(|(a, b)| 0.5 * (a + b)).collect());
    }
    let l = contraction_factor_estimate(model, &probes, x)?;
    if l >= 1.0 {
        return Ok(skipped(l, iters, errors));
    }
    // The fixed point is only known to within `tol · L / (1 − L)`.
    let fp_slack = FIXED_POINT_TOL * l / (1.0 - l);
    let bounds: Vec<f64> = (0..=t_check)
        .map(|t| l.powi(t as i32) / (1.0 - l) * first_move)
        .collect();
    let mut violations = 0;
    let mut tightest: f64 = 0.0;
    for (e, b) in errors.iter().zip(&bounds) {
        if *e > b * (1.0 + DECAY_REL_TOLERANCE) + fp_slack {
            violations += 1;
        }
        tightest = tightest.max(e / b);
    }
    Ok(ErrorDecayReport {
        contraction: l,
        skipped: false,
        fixed_point_iters: iters,
        errors,
        bounds,
        tightest_ratio: tightest,
        violations,
        rel_tolerance: DECAY_REL_TOLERANCE,
        pass: violations == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoundReport {
    pub contraction: f64,
    pub skipped: bool,
    /// Estimated `‖∂h_t/∂h_0‖` for `t = 0..=T`.
    pub norms: Vec<f64>,
    /// `L^t`.
    pub bounds: Vec<f64>,
    pub violations: usize,
    pub slack: f64,
    pub pass: bool,
}

/// Power-iteration norm of the composed state Jacobian along the trajectory
/// from `h_0 = 0`, compared with `L^t` where `L` is the largest single-step
/// Jacobian norm along the same trajectory.
pub fn gradient_bound_check(model: &Model, x: &[f64], t_check: usize) -> Result<GradientBoundReport> {
    require_stationary(model)?;
    let n = model.dims.d_hid;
    let mut h = vec![0.0; n];
    let mut traces = Vec::with_capacity(t_check);
    let mut probes = Vec::with_capacity(t_check.max(1));
    probes.push(h.clone());
    for _ in 0..t_check {
        let tr = model.step_traced(&h, x, 0)?;
        h = tr.output.clone();
        traces.push(tr);
        probes.push(h.clone());
    }
    probes.pop();
    let l = contraction_factor_estimate(model, &probes, x)?;

    let mut norms = vec![1.0];
    for t in 1..=t_check {
        let used = &traces[..t];
        let op = FnOperator {
            dim_in: n,
            dim_out: n,
            forward: |v: &[f64]| {
                let mut v = v.to_vec();
                for tr in used {
                    v = model.step_jvp(tr, &v);
                }
                v
            },
            transpose: |u: &[f64]| {
                let mut u = u.to_vec();
                for tr in used.iter().rev() {
                    u = model.step_vjp_input(tr, &u);
                }
                u
            },
        };
        let est = power_iteration(&op, DEFAULT_POWER_ITERS, 1e-12).estimate;
        if !est.is_finite() {
            return Err(FrostError::Numeric("power iteration diverged".into()));
        }
        norms.push(est);
    }
    let bounds: Vec<f64> = (0..=t_check).map(|t| l.powi(t as i32)).collect();
    let violations = norms
        .iter()
        .zip(&bounds)
        .filter(|(nrm, b)| **nrm > **b + GRADIENT_BOUND_SLACK)
        .count();
    Ok(GradientBoundReport {
        contraction: l,
        skipped: l >= 1.0,
        norms,
        bounds,
        violations,
        slack: GRADIENT_BOUND_SLACK,
        pass: violations == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub lambda: f64,
    pub hurst: f64,
    pub trials: usize,
    pub max_err_transition: f64,
    pub max_err_input: f64,
    pub max_err_output: f64,
    pub max_err_feedthrough: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Checks, on random `h` and `x`, that the scaled operators are the base
/// operators times `λ`, `λ^{1+H}`, `λ^{−H}` and that the feedthrough path does
/// not depend on `λ`.
pub fn scaling_equivariance_check(ops: &OperatorSet, trials: usize, seed: u64) -> Result<ScalingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = ops.scale.lambda();
    let hurst = ops.scale.hurst;
    let gin = lambda.powf(1.0 + hurst);
    let gout = lambda.powf(-hurst);
    let mut other = ops.clone();
    other.scale = ScaleParameters::with_lambda(if lambda == 1.0 { 0.5 } else { 1.0 }, hurst)?;
    other.c.weight.scale_in_place(0.0);
    other.c.bias.iter_mut().for_each(|b| *b = 0.0);
    let mut no_c = ops.clone();
    no_c.c = other.c.clone();

    let (mut et, mut ei, mut eo, mut ef) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let h = random_vec(&mut rng, ops.d_hid());
        let x = random_vec(&mut rng, ops.d_in());
        let a: Vec<f64> = ops.a.apply(&h)?.iter().map(|v| lambda * v).collect();
        et = et.max(rel_err(&ops.scaled_transition(&h)?, &a));
        let b: Vec<f64> = ops.b.apply(&x)?.iter().map(|v| gin * v).collect();
        ei = ei.max(rel_err(&ops.scaled_input(&x)?, &b));
        let c = ops.c.apply(&h)?;
        let d = ops.d.apply(&x)?;
        let expect: Vec<f64> = c.iter().zip(&d).map(|(c, d)| gout * c + d).collect();
        eo = eo.max(rel_err(&ops.readout(&h, &x)?, &expect));
        ef = ef.max(rel_err(&no_c.readout(&h, &x)?, &other.readout(&h, &x)?));
        ef = ef.max(rel_err(&no_c.readout(&h, &x)?, &d));
    }
    let pass = [et, ei, eo, ef].iter().all(|&e| e <= SCALING_TOLERANCE);
    Ok(ScalingReport {
        lambda,
        hurst,
        trials,
        max_err_transition: et,
        max_err_input: ei,
        max_err_output: eo,
        max_err_feedthrough: ef,
        tolerance: SCALING_TOLERANCE,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientConflict {
    pub cosine: f64,
    /// Set when either gradient is exactly zero; `cosine` is then 0.
    pub degenerate: bool,
}

/// Cosine similarity between two gradient bundles over the same parameters.
pub fn gradient_conflict(grad_task: &GradientBundle, grad_rank: &GradientBundle) -> Result<GradientConflict> {
    if !grad_task.same_layout(grad_rank) {
        return Err(FrostError::Config("gradient bundles cover different parameters".into()));
    }
    let (na, nb) = (grad_task.norm(), grad_rank.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(GradientConflict {
            cosine: 0.0,
            degenerate: true,
        });
    }
    let c = grad_task.dot(grad_rank)? / (na * nb);
    Ok(GradientConflict {
        cosine: c.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Vertex set of the Koch curve on the unit segment after `iterations`
/// refinements (`4^iterations + 1` points).
pub fn koch_curve(iterations: usize) -> Vec<[f64; 2]> {
    let mut pts = vec![[0.0, 0.0], [1.0, 0.0]];
    let (s, c) = (std::f64::consts::FRAC_PI_3.sin(), std::f64::consts::FRAC_PI_3.cos());
    for _ in 0..iterations {
        let mut next = Vec::with_capacity(pts.len() * 4);
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let d = [(b[0] - a[0]) / 3.0, (b[1] - a[1]) / 3.0];
            let p1 = [a[0] + d[0], a[1] + d[1]];
            let p3 = [a[0] + 2.0 * d[0], a[1] + 2.0 * d[1]];
            let peak = [p1[0] + c * d[0] - s * d[1], p1[1] + s * d[0] + c * d[1]];
            next.extend([a, p1, peak, p3]);
        }
        next.push(*pts.last().unwrap());
        pts = next;
    }
    pts
}
