//! KLL streaming quantile sketch.
//!
//! A stack of compactors: level `ℓ` holds items of weight `2^ℓ`. When the
//! total number of stored items exceeds the capacity schedule, the lowest
//! full level is sorted and every other item (random offset) is promoted to
//! the next level. Level capacities shrink geometrically by `2/3` from the
//! top, so memory stays `O(k)` plus one small buffer per level.
//!
//! Compaction coins come from a counter-based generator keyed by the
//! sketch seed, so the same seed and stream always give the same state.

use serde::{Deserialize, Serialize};

use crate::error::{FrostError, Result};

pub const DEFAULT_K: usize = 200;
pub const MIN_K: usize = 8;
const CAPACITY_DECAY: f64 = 2.0 / 3.0;
const MIN_LEVEL_CAPACITY: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KllSketch {
    k: usize,
    seed: u64,
    counter: u64,
    n: u64,
    levels: Vec<Vec<f64>>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl KllSketch {
    pub fn new(k: usize, seed: u64) -> Result<Self> {
        if k < MIN_K {
            return Err(FrostError::Config(format!("sketch k must be >= {MIN_K}, got {k}")));
        }
        Ok(KllSketch {
            k,
            seed,
            counter: 0,
            n: 0,
            levels: vec![Vec::new()],
        })
    }

    /// Normalised rank-error target for capacity `k`: `4 / k` (0.02 at `k = 200`).
    pub fn rank_error_target(k: usize) -> f64 {
        4.0 / k as f64
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total number of inserted items.
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn stored_items(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// `Σ_ℓ |level ℓ| · 2^ℓ`; always equals [`n`](Self::n).
    pub fn weighted_count(&self) -> u64 {
        self.levels
            .iter()
            .enumerate()
            .map(|(l, buf)| (buf.len() as u64) << l)
            .sum()
    }

    pub fn level_capacity(&self, level: usize) -> usize {
        let depth = self.levels.len() - 1 - level;
        let cap = (self.k as f64 * CAPACITY_DECAY.powi(depth as i32)).ceil() as usize;
        cap.max(MIN_LEVEL_CAPACITY)
    }

    fn total_capacity(&self) -> usize {
        (0..self.levels.len()).map(|l| self.level_capacity(l)).sum()
    }

    /// Upper bound on [`stored_items`](Self::stored_items) implied by the
    /// capacity schedule: `k / (1 − 2/3) + 2·levels`.
    pub fn memory_bound(&self) -> usize {
        3 * self.k + MIN_LEVEL_CAPACITY * self.levels.len() + 1
    }

    pub fn reset(&mut self) {
        self.levels = vec![Vec::new()];
        self.n = 0;
        self.counter = 0;
    }

    pub fn insert(&mut self, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(FrostError::Numeric(format!("cannot insert non-finite value {v} into sketch")));
        }
        self.levels[0].push(v);
        self.n += 1;
        if self.stored_items() > self.total_capacity() {
            self.compress();
        }
        Ok(())
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, values: I) -> Result<()> {
        for v in values {
            self.insert(v)?;
        }
        Ok(())
    }

    fn coin(&mut self) -> usize {
        let r = splitmix64(self.seed ^ splitmix64(self.counter));
        self.counter = self.counter.wrapping_add(1);
        (r & 1) as usize
    }

    fn compact_level(&mut self, level: usize) {
        if level + 1 == self.levels.len() {
            self.levels.push(Vec::new());
        }
        let mut buf = std::mem::take(&mut self.levels[level]);
        buf.sort_by(f64::total_cmp);
        // An odd item stays behind so promoted weight is exact.
        let leftover = if buf.len() % 2 == 1 { buf.pop() } else { None };
        let offset = self.coin();
        let promoted: Vec<f64> = buf.iter().skip(offset).step_by(2).copied().collect();
        self.levels[level + 1].extend(promoted);
        if let Some(v) = leftover {
            self.levels[level].push(v);
        }
    }

    fn compress(&mut self) {
        while self.stored_items() > self.total_capacity() {
            let full = (0..self.levels.len()).find(|&l| self.levels[l].len() >= self.level_capacity(l));
            match full {
                Some(l) => self.compact_level(l),
                None => break,
            }
        }
    }

    /// Sorted `(value, weight)` pairs.
    fn weighted_items(&self) -> Vec<(f64, u64)> {
        let mut items: Vec<(f64, u64)> = self
            .levels
            .iter()
            .enumerate()
            .flat_map(|(l, buf)| buf.iter().map(move |&v| (v, 1u64 << l)))
            .collect();
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        items
    }

    /// Value whose rank in the stream is approximately `q·n`.
    ///
    /// Each stored item sits at the centre of its weighted rank interval;
    /// targets between two centres are linearly interpolated.
    pub fn query(&self, q: f64) -> Result<f64> {
        if self.n == 0 {
            return Err(FrostError::Empty("quantile sketch"));
        }
        if !(0.0..=1.0).contains(&q) {
            return Err(FrostError::Config(format!("quantile must be in [0, 1], got {q}")));
        }
        let items = self.weighted_items();
        let target = q * self.n as f64;
        let mut cum = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for &(v, w) in &items {
            let centre = cum + w as f64 / 2.0;
            if target <= centre {
                return Ok(match prev {
                    None => v,
                    Some((pv, pc)) => {
                        let frac = (target - pc) / (centre - pc);
                        pv + frac * (v - pv)
                    }
                });
            }
            prev = Some((v, centre));
            cum += w as f64;
        }
        Ok(items[items.len() - 1].0)
    }

    /// Approximate normalised rank of `v` (fraction of the stream `≤ v`).
    pub fn rank(&self, v: f64) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let below: u64 = self
            .levels
            .iter()
            .enumerate()
            .map(|(l, buf)| (buf.iter().filter(|&&x| x <= v).count() as u64) << l)
            .sum();
        below as f64 / self.n as f64
    }

    /// Combines two sketches built with the same `k`.
    pub fn merge(&self, other: &KllSketch) -> Result<KllSketch> {
        if self.k != other.k {
            return Err(FrostError::Config(format!(
                "cannot merge sketches with k = {} and k = {}",
                self.k, other.k
            )));
        }
        let depth = self.levels.len().max(other.levels.len());
        let mut levels = vec![Vec::new(); depth];
        for (l, buf) in levels.iter_mut().enumerate() {
            if let Some(a) = self.levels.get(l) {
                buf.extend_from_slice(a);
            }
            if let Some(b) = other.levels.get(l) {
                buf.extend_from_slice(b);
            }
        }
        let mut merged = KllSketch {
            k: self.k,
            seed: self.seed,
            counter: self.counter.wrapping_add(other.counter),
            n: self.n + other.n,
            levels,
        };
        merged.compress();
        Ok(merged)
    }

    /// Checks the bookkeeping invariants of a deserialised sketch.
    pub fn validate(&self) -> Result<()> {
        if self.k < MIN_K || self.levels.is_empty() {
            return Err(FrostError::Config("malformed sketch document".into()));
        }
        if self.weighted_count() != self.n {
            return Err(FrostError::Config(format!(
                "sketch weight {} does not match n = {}",
                self.weighted_count(),
                self.n
            )));
        }
        if self.levels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FrostError::Numeric("sketch holds non-finite values".into()));
        }
        Ok(())
    }
}

/// Distance, as a fraction of `n`, between `q·n` and the exact rank interval
/// `[#{x < v}, #{x ≤ v}]` of `value` in the sorted stream.
pub fn normalized_rank_error(sorted: &[f64], value: f64, q: f64) -> f64 {
    let n = sorted.len() as f64;
    let below = sorted.partition_point(|&x| x < value) as f64;
    let upto = sorted.partition_point(|&x| x <= value) as f64;
    let target = q * n;
    if target < below {
        (below - target) / n
    } else if target > upto {
        (target - upto) / n
    } else {
        0.0
    }
}
