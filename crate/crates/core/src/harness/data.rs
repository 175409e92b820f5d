use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FrostError, Result};
use crate::training::Sample;

/// Hard samples sit this fraction of the way from their own class mean to
/// another class mean.
pub const HARD_MIX: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub boundary_fraction: f64,
    pub separation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Far,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
    pub tiers: Vec<Tier>,
    pub means: Vec<Vec<f64>>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples of each class versus the rest, preserving order.
    pub fn split_per_class(&self, n: usize) -> (SyntheticDataset, SyntheticDataset) {
        let mut seen = vec![0usize; self.means.len()];
        let mut a = SyntheticDataset {
            samples: Vec::new(),
            tiers: Vec::new(),
            means: self.means.clone(),
        };
        let mut b = a.clone();
        for (s, &t) in self.samples.iter().zip(&self.tiers) {
            let dst = if seen[s.label] < n { &mut a } else { &mut b };
            seen[s.label] += 1;
            dst.samples.push(s.clone());
            dst.tiers.push(t);
        }
        (a, b)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Standard normal coordinates resampled until `|z| ≤ 2`.
fn truncated_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z;
            }
        })
        .collect()
}

/// Gaussian class clusters with unit-variance noise. A `boundary_fraction`
/// of each class is drawn around a point between its mean and a random other
/// class mean. Samples are interleaved class by class.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.d_in == 0 {
        return Err(FrostError::Config("dataset needs >= 2 classes, >= 1 sample per class and d_in >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.boundary_fraction) {
        return Err(FrostError::Config("boundary_fraction must be in [0, 1]".into()));
    }
    if !(spec.separation > 0.0) {
        return Err(FrostError::Config("separation must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let g = gaussian(&mut rng, spec.d_in);
            let n = crate::numerics::norm(&g).max(f64::MIN_POSITIVE);
            g.iter().map(|v| v * spec.separation / n).collect()
        })
        .collect();
    let n_hard = (spec.boundary_fraction * spec.per_class as f64).round() as usize;

    let mut per_class: Vec<Vec<(Sample, Tier)>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let mut rows = Vec::with_capacity(spec.per_class);
        for i in 0..spec.per_class {
            let (centre, noise, tier) = if i < n_hard {
                let mut other = rng.random_range(0..spec.classes - 1);
                if other >= c {
                    other += 1;
                }
                let centre: Vec<f64> = means[c]
                    .iter()
                    .zip(&means[other])
                    .map(|(a, b)| a + HARD_MIX * (b - a))
                    .collect();
                (centre, gaussian(&mut rng, spec.d_in), Tier::Boundary)
            } else {
                (means[c].clone(), truncated_gaussian(&mut rng, spec.d_in), Tier::Far)
            };
            let x = centre.iter().zip(&noise).map(|(m, z)| m + z).collect();
            rows.push((Sample { x, label: c }, tier));
        }
        rows.shuffle(&mut rng);
        per_class.push(rows);
    }
    let mut out = SyntheticDataset {
        samples: Vec::with_capacity(spec.classes * spec.per_class),
        tiers: Vec::with_capacity(spec.classes * spec.per_class),
        means,
    };
    for i in 0..spec.per_class {
        for rows in &per_class {
            out.samples.push(rows[i].0.clone());
            out.tiers.push(rows[i].1);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bf: f64) -> DatasetSpec {
        DatasetSpec {
            classes: 4,
            per_class: 250,
            d_in: 16,
            boundary_fraction: bf,
            separation: 3.0,
        }
    }

    #[test]
    fn counts_are_balanced() {
        let ds = generate_dataset(&spec(0.3), 1).unwrap();
        assert_eq!(ds.len(), 1000);
        for c in 0..4 {
            assert_eq!(ds.samples.iter().filter(|s| s.label == c).count(), 250);
        }
        assert_eq!(ds.tiers.iter().filter(|&&t| t == Tier::Boundary).count(), 4 * 75);
    }

    #[test]
    fn far_samples_stay_within_two_sigma() {
        let ds = generate_dataset(&spec(0.0), 2).unwrap();
        for s in &ds.samples {
            for (x, m) in s.x.iter().zip(&ds.means[s.label]) {
                assert!((x - m).abs() <= 2.0);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_dataset(&spec(0.3), 5).unwrap(), generate_dataset(&spec(0.3), 5).unwrap());
        assert_ne!(generate_dataset(&spec(0.3), 5).unwrap(), generate_dataset(&spec(0.3), 6).unwrap());
    }

    #[test]
    fn split_keeps_classes_balanced() {
        let ds = generate_dataset(&spec(0.3), 3).unwrap();
        let (a, b) = ds.split_per_class(200);
        assert_eq!(a.len(), 800);
        assert_eq!(b.len(), 200);
        for c in 0..4 {
            assert_eq!(b.samples.iter().filter(|s| s.label == c).count(), 50);
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(generate_dataset(&DatasetSpec { classes: 1, ..spec(0.0) }, 0).is_err());
        assert!(generate_dataset(&DatasetSpec { per_class: 0, ..spec(0.0) }, 0).is_err());
        assert!(generate_dataset(&spec(1.5), 0).is_err());
    }
}
