//! Run configuration: a TOML document whose sections mirror the library
//! configs. Unknown keys are rejected. Command-line flags are applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use boottod_core::data::synthetic::SyntheticConfig;
use boottod_core::data::{MaskConfig, SamplerConfig};
use boottod_core::encoder::EncoderConfig;
use boottod_core::eval::FinetuneConfig;
use boottod_core::objective::AlignmentConfig;
use boottod_core::trainer::{LrSchedule, TrainConfig};
use boottod_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub dev_batches: usize,
    pub lr_schedule: LrSchedule,
    pub mlm_warmup_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            patience: t.patience,
            dev_batches: t.dev_batches,
            lr_schedule: t.lr_schedule,
            mlm_warmup_steps: t.mlm_warmup_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    /// Candidates per response-selection query, truth included.
    pub pool_size: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            steps: f.steps,
            lr: f.lr,
            batch_size: f.batch_size,
            freeze_encoder: f.freeze_encoder,
            pool_size: 100,
            ks: vec![1, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub min_freq: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { min_freq: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub corpus: SyntheticConfig,
    pub vocab: VocabSection,
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub mask: MaskConfig,
    pub alignment: AlignmentConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, Error> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            patience: t.patience,
            seed: self.seed,
            dev_batches: t.dev_batches,
            lr_schedule: t.lr_schedule,
            mlm_warmup_steps: t.mlm_warmup_steps,
            mask: self.mask.clone(),
            alignment: self.alignment.clone(),
            sampler: self.sampler.clone(),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.eval.steps,
            lr: self.eval.lr,
            batch_size: self.eval.batch_size,
            seed: self.seed,
            freeze_encoder: self.eval.freeze_encoder,
        }
    }

    /// The encoder configuration with the vocabulary size filled in.
    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig, Error> {
        let cfg = EncoderConfig {
            vocab_size,
            ..self.encoder.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::parse("[alignment]\nkk = 2\n").is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::parse("seed = 9\n[alignment]\nk = 1\n[sampler]\np_mode = \"fix\"\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.alignment.k, 1);
        assert_eq!(c.train_config().sampler.p_mode, boottod_core::data::PMode::Fix);
        assert_eq!(c.encoder, EncoderConfig::default());
    }
}
