use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamConfig;
use crate::data::{TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{ModelConfig, RecursionConfig};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Learning rate reached at the end of the cosine decay.
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Size of the training index pool; batches cycle through it.
    pub n_train: usize,
    pub n_eval: usize,
    /// Evaluate every this many updates (and after the last one); 0 means
    /// only at the end.
    pub eval_every: u64,
    pub eval_batch_size: usize,
    pub model: ModelConfig,
    pub recursion: RecursionConfig,
    pub loss: LossConfig,
    pub task: TaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 5000,
            batch_size: 32,
            lr: 3e-4,
            min_lr: 0.0,
            warmup_steps: 0,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            n_train: 200_000,
            n_eval: 512,
            eval_every: 500,
            eval_batch_size: 64,
            model: ModelConfig::default(),
            recursion: RecursionConfig::default(),
            loss: LossConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.recursion.validate()?;
        self.loss.validate()?;
        self.task.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch_size and eval_batch_size must be >= 1".into()));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("lr, min_lr and grad_clip must be >= 0".into()));
        }
        let need = self.task.required_vocab();
        if self.model.vocab_size < need {
            return Err(Error::Config(format!(
                "model.vocab_size {} is smaller than the {need} tokens the task needs",
                self.model.vocab_size
            )));
        }
        if self.task.task == TaskKind::GridColor
            && !self.task.text_only
            && self.model.patch_dim != self.task.patch_dim()
        {
            return Err(Error::Config(format!(
                "model.patch_dim {} must equal the task patch width {}",
                self.model.patch_dim,
                self.task.patch_dim()
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }

    pub fn clip_norm(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

/// Hex SHA-256 of the crate version and the canonical JSON of `value`.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let mut h = Sha256::new();
    h.update(concat!("loopformer/", env!("CARGO_PKG_VERSION"), "\n"));
    h.update(serde_json::to_vec(value).expect("value serialises"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `fingerprint.txt` into `dir`.
pub fn write_fingerprint(dir: &Path, fingerprint: &str) -> Result<()> {
    let path = dir.join("fingerprint.txt");
    std::fs::write(&path, format!("{fingerprint}\n")).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.loss.beta = 1.25;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let a = TrainConfig::default();
        let back: TrainConfig = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(a, back);
        let partial: TrainConfig =
            serde_json::from_str(r#"{"steps": 3, "recursion": {"steps": 3}}"#).unwrap();
        assert_eq!(partial.steps, 3);
        assert_eq!(partial.recursion.steps, 3);
        assert_eq!(partial.batch_size, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
    }

    #[test]
    fn mismatched_task_and_model_rejected() {
        let mut c = TrainConfig::default();
        c.model.patch_dim = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.model.vocab_size = 10;
        assert!(c.validate().is_err());
    }
}
