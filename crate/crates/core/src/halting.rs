//! Halting head, batch-time ranking and early-exit inference.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Model, ModelKind, Trajectory};
use crate::error::{FrostError, Result};
use crate::numerics::{check_dim, dot, sigmoid, ParamSlot, Params};
use crate::sketch::KllSketch;

/// `s = σ(w·h + b)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltingHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl HaltingHead {
    pub fn zeros(d_hid: usize) -> Self {
        HaltingHead {
            w: vec![0.0; d_hid],
            b: 0.0,
        }
    }

    pub fn init<R: Rng + ?Sized>(d_hid: usize, rng: &mut R) -> Self {
        let a = (6.0 / (d_hid + 1) as f64).sqrt();
        HaltingHead {
            w: (0..d_hid).map(|_| rng.random_range(-a..=a)).collect(),
            b: 0.0,
        }
    }

    pub fn logit(&self, h: &[f64]) -> Result<f64> {
        check_dim("HaltingHead", self.w.len(), h)?;
        Ok(dot(&self.w, h) + self.b)
    }

    pub fn score(&self, h: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(h)?))
    }
}

impl Params for HaltingHead {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        let name = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        out.push(ParamSlot {
            name: name("w"),
            shape: vec![self.w.len()],
            values: &self.w,
        });
        out.push(ParamSlot {
            name: name("b"),
            shape: vec![1],
            values: std::slice::from_ref(&self.b),
        });
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(&mut self.w);
        out.push(std::slice::from_mut(&mut self.b));
    }
}

/// Halting score of one state.
pub fn halting_score(head: &HaltingHead, h: &[f64]) -> Result<f64> {
    head.score(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub sample: usize,
    /// 1-based iteration.
    pub iteration: usize,
    pub loss: f64,
    /// 1-based rank among all `B·T` losses, ascending.
    pub rank: usize,
}

/// Ranks every `(sample, iteration)` loss of a `B × T` grid jointly.
///
/// Ranks run `1..=B·T` in ascending loss order; equal losses keep `(i, t)`
/// order. Records are returned in `(i, t)` order.
pub fn batch_time_rank(losses: &[Vec<f64>]) -> Result<Vec<RankRecord>> {
    let steps = losses.first().map_or(0, Vec::len);
    let mut records = Vec::with_capacity(losses.len() * steps);
    for (i, row) in losses.iter().enumerate() {
        if row.len() != steps {
            return Err(FrostError::shape("batch_time_rank row", steps, row.len()));
        }
        for (t, &loss) in row.iter().enumerate() {
            if !loss.is_finite() {
                return Err(FrostError::Numeric(format!("non-finite loss at sample {i}, iteration {}", t + 1)));
            }
            records.push(RankRecord {
                sample: i,
                iteration: t + 1,
                loss,
                rank: 0,
            });
        }
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    // Stable sort keeps (i, t) order among ties.
    order.sort_by(|&a, &b| records[a].loss.total_cmp(&records[b].loss));
    for (r, idx) in order.into_iter().enumerate() {
        records[idx].rank = r + 1;
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EasyHardSplit {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
    pub k_split: usize,
}

/// Per-sample mean rank over iterations, indexed by sample.
pub fn mean_ranks(records: &[RankRecord]) -> Vec<f64> {
    let b = records.iter().map(|r| r.sample + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; b];
    let mut count = vec![0usize; b];
    for r in records {
        sum[r.sample] += r.rank as f64;
        count[r.sample] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect()
}

/// Easy set: the `k_split` samples with the lowest mean rank. Hard set: the
/// `k_split` with the highest. Samples are ordered by `(mean rank, index)`,
/// so among equal mean ranks the lower index counts as easier.
pub fn split_easy_hard(records: &[RankRecord], k_split: usize) -> Result<EasyHardSplit> {
    let means = mean_ranks(records);
    let b = means.len();
    if 2 * k_split > b {
        return Err(FrostError::Config(format!(
            "k_split = {k_split} needs at least {} samples, batch has {b}",
            2 * k_split
        )));
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&a, &c| means[a].total_cmp(&means[c]).then(a.cmp(&c)));
    let easy = order[..k_split].to_vec();
    let hard = order[b - k_split..].iter().rev().copied().collect();
    Ok(EasyHardSplit { easy, hard, k_split })
}

/// Quantile-calibrated early-exit rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltingPolicy {
    pub q: f64,
    pub sketch: KllSketch,
    pub t_min: usize,
    pub t_max: usize,
    threshold: Option<f64>,
}

impl HaltingPolicy {
    /// `q` in `(0, 1]`; `q = 1` never halts before `t_max`.
    pub fn new(q: f64, sketch: KllSketch, t_min: usize, t_max: usize) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(FrostError::Config(format!("halting quantile must be in (0, 1], got {q}")));
        }
        if t_min == 0 || t_min > t_max {
            return Err(FrostError::Config(format!("need 1 <= t_min <= t_max, got {t_min} / {t_max}")));
        }
        Ok(HaltingPolicy {
            q,
            sketch,
            t_min,
            t_max,
            threshold: None,
        })
    }

    /// Sets `s_halt` to the sketch's `q`-quantile and returns it.
    pub fn calibrate_threshold(&mut self) -> Result<f64> {
        if self.sketch.is_empty() {
            return Err(FrostError::Empty("halting score sketch"));
        }
        let t = if self.q >= 1.0 {
            f64::INFINITY
        } else {
            self.sketch.query(self.q)?
        };
        self.threshold = Some(t);
        Ok(t)
    }

    /// Overrides the calibrated threshold.
    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = Some(threshold);
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }
}

/// First 1-based step `t ≥ t_min` whose score reaches `threshold`, else `t_max`.
pub fn first_crossing<I>(scores: I, t_min: usize, t_max: usize, threshold: f64) -> usize
where
    I: IntoIterator<Item = f64>,
{
    for (k, s) in scores.into_iter().take(t_max).enumerate() {
        let t = k + 1;
        if t >= t_min && s >= threshold {
            return t;
        }
    }
    t_max
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub y: Vec<f64>,
    pub depth: usize,
    pub trajectory: Trajectory,
}

/// Refines `x` until the halting score reaches the calibrated threshold
/// (from `t_min` on) or `t_max` steps have run.
pub fn adaptive_unroll(
    model: &Model,
    head: &HaltingHead,
    x: &[f64],
    policy: &HaltingPolicy,
) -> Result<AdaptiveOutcome> {
    let threshold = policy
        .threshold()
        .ok_or_else(|| FrostError::Config("halting threshold has not been calibrated".into()))?;
    if model.kind == ModelKind::Vanilla && policy.t_max > model.operators.len() {
        return Err(FrostError::Config("t_max exceeds the number of vanilla operator copies".into()));
    }
    let mut h = vec![0.0; model.dims.d_hid];
    let mut traj = Trajectory {
        input: x.to_vec(),
        states: vec![h.clone()],
        outputs: Vec::new(),
        scores: Vec::new(),
    };
    for step in 0..policy.t_max {
        h = model.step(&h, x, step)?;
        let s = head.score(&h)?;
        traj.outputs.push(model.readout(&h, x, step)?);
        traj.scores.push(s);
        traj.states.push(h.clone());
        let t = step + 1;
        if t >= policy.t_min && s >= threshold {
            break;
        }
    }
    let depth = traj.outputs.len();
    Ok(AdaptiveOutcome {
        y: traj.outputs[depth - 1].clone(),
        depth,
        trajectory: traj,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltingTraceRow {
    pub sample_id: usize,
    pub t: usize,
    pub score: f64,
    pub halted_flag: u8,
}

/// One row per visited step; the last step of each sample carries `halted_flag = 1`.
pub fn trace_rows(sample_id: usize, outcome: &AdaptiveOutcome) -> Vec<HaltingTraceRow> {
    let n = outcome.trajectory.scores.len();
    outcome
        .trajectory
        .scores
        .iter()
        .enumerate()
        .map(|(k, &score)| HaltingTraceRow {
            sample_id,
            t: k + 1,
            score,
            halted_flag: u8::from(k + 1 == n),
        })
        .collect()
}

pub fn write_halting_trace<W: Write>(out: W, rows: &[HaltingTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        assert_eq!(HaltingHead::zeros(3).score(&[1.0, 2.0, 3.0]).unwrap(), 0.5);
        let head = HaltingHead { w: vec![1.0, -1.0], b: 0.0 };
        assert!((head.score(&[2.0, 1.0]).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-15);
        let sat = HaltingHead { w: vec![0.0, 0.0], b: 1e3 };
        assert_eq!(sat.score(&[2.0, 1.0]).unwrap(), 1.0);
        assert!(head.score(&[1.0]).is_err());
    }

    #[test]
    fn rank_examples() {
        let r = batch_time_rank(&[vec![0.3], vec![0.1], vec![0.2]]).unwrap();
        assert_eq!(r.iter().map(|x| x.rank).collect::<Vec<_>>(), vec![3, 1, 2]);
        let r = batch_time_rank(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(r.iter().map(|x| x.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(batch_time_rank(&[vec![0.1, f64::NAN]]).is_err());
        assert!(batch_time_rank(&[vec![0.1, 0.2], vec![0.3]]).is_err());
    }

    #[test]
    fn split_examples() {
        let r = batch_time_rank(&[vec![0.1], vec![0.9]]).unwrap();
        let s = split_easy_hard(&r, 1).unwrap();
        assert_eq!((s.easy, s.hard), (vec![0], vec![1]));

        let r = batch_time_rank(&vec![vec![0.5; 3]; 8]).unwrap();
        let s = split_easy_hard(&r, 2).unwrap();
        assert_eq!(s.easy, vec![0, 1]);
        assert_eq!(s.hard, vec![7, 6]);

        assert!(matches!(split_easy_hard(&r, 5), Err(FrostError::Config(_))));
    }

    #[test]
    fn split_is_disjoint_under_mean_rank_ties() {
        // Mean ranks: sample 0 → (1+4)/2, sample 1 → (2+3)/2.
        let r = batch_time_rank(&[vec![0.1, 0.4], vec![0.2, 0.3]]).unwrap();
        let s = split_easy_hard(&r, 1).unwrap();
        assert_eq!(s.easy, vec![0]);
        assert_eq!(s.hard, vec![1]);
    }

    #[test]
    fn first_crossing_examples() {
        let scores: Vec<f64> = (1..=16).map(|t| t as f64 / 16.0).collect();
        assert_eq!(first_crossing(scores.iter().copied(), 1, 16, 0.5), 8);
        assert_eq!(first_crossing(scores.iter().copied(), 1, 16, 0.0), 1);
        assert_eq!(first_crossing(scores.iter().copied(), 3, 16, 0.0), 3);
        assert_eq!(first_crossing(scores.iter().copied(), 1, 16, 1.01), 16);
    }

    #[test]
    fn calibration() {
        let mut sk = KllSketch::new(200, 0).unwrap();
        sk.insert(0.5).unwrap();
        let mut p = HaltingPolicy::new(0.3, sk.clone(), 1, 4).unwrap();
        assert_eq!(p.calibrate_threshold().unwrap(), 0.5);

        let empty = KllSketch::new(200, 0).unwrap();
        let mut p = HaltingPolicy::new(0.3, empty, 1, 4).unwrap();
        assert!(matches!(p.calibrate_threshold(), Err(FrostError::Empty(_))));

        let mut sk = KllSketch::new(200, 0).unwrap();
        sk.extend((0..=900).map(|i| i as f64 / 1000.0)).unwrap();
        let mut p = HaltingPolicy::new(0.999, sk.clone(), 1, 4).unwrap();
        assert!(p.calibrate_threshold().unwrap() <= 0.9);
        let mut p = HaltingPolicy::new(1.0, sk, 1, 4).unwrap();
        assert_eq!(p.calibrate_threshold().unwrap(), f64::INFINITY);

        let sk = KllSketch::new(200, 0).unwrap();
        assert!(HaltingPolicy::new(0.0, sk.clone(), 1, 4).is_err());
        assert!(HaltingPolicy::new(0.5, sk.clone(), 5, 4).is_err());
        assert!(HaltingPolicy::new(0.5, sk, 0, 4).is_err());
    }

    #[test]
    fn trace_csv_format() {
        let rows = vec![
            HaltingTraceRow { sample_id: 0, t: 1, score: 0.25, halted_flag: 0 },
            HaltingTraceRow { sample_id: 0, t: 2, score: 0.75, halted_flag: 1 },
        ];
        let mut buf = Vec::new();
        write_halting_trace(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sample_id,t,score,halted_flag\n0,1,0.25,0\n0,2,0.75,1\n"
        );
    }
}
