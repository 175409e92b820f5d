use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{FrostError, Result};
use crate::halting::HaltingHead;
use crate::sketch::KllSketch;

pub const CHECKPOINT_FORMAT: &str = "frost-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON document holding every parameter array, the model kind,
/// dimensions, `ρ` and `H`, the halting head and optionally the score sketch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: Model,
    pub head: HaltingHead,
    #[serde(default)]
    pub sketch: Option<KllSketch>,
}

impl Checkpoint {
    pub fn new(model: Model, head: HaltingHead, sketch: Option<KllSketch>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
            head,
            sketch,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(FrostError::Config(format!("not a checkpoint document: format '{}'", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(FrostError::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.head.w.len() != ck.model.dims.d_hid {
            return Err(FrostError::shape("checkpoint halting head", ck.model.dims.d_hid, ck.head.w.len()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ModelConfig, ModelKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in [ModelKind::Frost, ModelKind::Vanilla] {
            let cfg = ModelConfig {
                kind,
                gating: kind == ModelKind::Frost,
                ..ModelConfig::default()
            };
            let model = Model::init(&cfg, &mut rng).unwrap();
            let head = HaltingHead::init(32, &mut rng);
            let mut sketch = KllSketch::new(64, 3).unwrap();
            for i in 0..1000 {
                sketch.insert((i as f64 * 0.37).sin()).unwrap();
            }
            let ck = Checkpoint::new(model, head, Some(sketch));
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_foreign_documents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::init(&ModelConfig::default(), &mut rng).unwrap();
        let mut ck = Checkpoint::new(model, HaltingHead::zeros(32), None);
        ck.version = 99;
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
        ck.version = CHECKPOINT_VERSION;
        ck.head = HaltingHead::zeros(3);
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}
