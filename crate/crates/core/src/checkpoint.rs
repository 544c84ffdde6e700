//! Model checkpoints.
//!
//! A checkpoint is a UTF-8 JSON object:
//!
//! ```text
//! {
//!   "format": "actembed-checkpoint",
//!   "version": 1,
//!   "stage": "stage1" | "stage2",
//!   "global_step": <u64>,
//!   "params": { "arch": {...widths...}, "tensors": [{"shape": [r, c], "data": [...]}, ...] },
//!   "norm": { "mean": [...], "std": [...] },
//!   "config": { ...TrainConfig... }
//! }
//! ```
//!
//! Tensors appear in declared order (block by block: `w1, b1, w2, b2[, wp, bp]`),
//! data row-major. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::model::ModelParams;
use crate::training::Stage;

pub const FORMAT: &str = "actembed-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub global_step: u64,
    pub params: ModelParams,
    pub norm: NormStats,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(stage: Stage, global_step: u64, params: ModelParams, norm: NormStats, config: TrainConfig) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            stage,
            global_step,
            params,
            norm,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        self.params.validate()?;
        if self.norm.dim() != self.params.input_dim() || self.norm.std.len() != self.norm.dim() {
            return Err(Error::Checkpoint(format!(
                "normalizer has {} dims, model expects {}",
                self.norm.dim(),
                self.params.input_dim()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `<run>/stage1.ckpt` or `<run>/stage2.ckpt`.
pub fn checkpoint_path(run_dir: impl AsRef<Path>, stage: Stage) -> PathBuf {
    run_dir.as_ref().join(match stage {
        Stage::One => "stage1.ckpt",
        Stage::Two => "stage2.ckpt",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn sample() -> Checkpoint {
        let params = ModelParams::init(Architecture::new(5, vec![4], 3), 11).unwrap();
        let norm = NormStats {
            mean: vec![0.1, -2.0, 1.0 / 3.0, 0.0, 1e-300],
            std: vec![1.0, 0.0, 2.5, std::f64::consts::PI, 7.0],
        };
        Checkpoint::new(Stage::Two, 1234, params, norm, TrainConfig::default())
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in ck.params.tensors.iter().zip(&back.params.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let x = [0.3, -1.2, 0.7, 2.0, 0.0];
        let ea = ck.params.encode(&x).unwrap();
        let eb = back.params.encode(&x).unwrap();
        assert!(ea.iter().zip(&eb).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_foreign_or_mismatched_files() {
        let ck = sample();
        let text = ck.to_json().replace(FORMAT, "other");
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Checkpoint(_))));
        let mut bad = ck.clone();
        bad.params.tensors.pop();
        assert!(Checkpoint::from_json(&bad.to_json()).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }

    #[test]
    fn path_convention() {
        assert_eq!(checkpoint_path("run", Stage::One), Path::new("run/stage1.ckpt"));
        assert_eq!(checkpoint_path("run", Stage::Two), Path::new("run/stage2.ckpt"));
    }
}
