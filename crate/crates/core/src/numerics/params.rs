use serde::{Deserialize, Serialize};

use crate::error::{FrostError, Result};

/// Borrowed view of one named parameter array.
#[derive(Debug)]
pub struct ParamSlot<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

/// Anything holding trainable arrays. Both collectors must visit the
/// arrays in the same order.
pub trait Params {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamSlot<'a>>);

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);

    fn param_slots(&self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.param_slots().iter().map(|s| s.values.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    for slot in p.param_slots() {
        out.extend_from_slice(slot.values);
    }
    out
}

pub fn assign_flat<P: Params + ?Sized>(p: &mut P, flat: &[f64]) -> Result<()> {
    let mut slots = Vec::new();
    p.collect_params_mut(&mut slots);
    let total: usize = slots.iter().map(|s| s.len()).sum();
    if total != flat.len() {
        return Err(FrostError::shape("assign_flat", total, flat.len()));
    }
    let mut off = 0;
    for s in slots {
        let n = s.len();
        s.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Owned, named gradient arrays whose layout mirrors a parameter set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub entries: Vec<GradEntry>,
}

impl GradientBundle {
    pub fn from_params<P: Params + ?Sized>(p: &P) -> Self {
        GradientBundle {
            entries: p
                .param_slots()
                .into_iter()
                .map(|s| GradEntry {
                    name: s.name,
                    shape: s.shape,
                    data: s.values.to_vec(),
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.data.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_layout(&self, other: &GradientBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len())
    }

    pub fn dot(&self, other: &GradientBundle) -> Result<f64> {
        if !self.same_layout(other) {
            return Err(FrostError::shape("GradientBundle::dot", self.len(), other.len()));
        }
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| super::dot(&a.data, &b.data))
            .sum())
    }

    pub fn get(&self, name: &str) -> Option<&GradEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}
