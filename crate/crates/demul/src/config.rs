//! Flat JSON run configuration.
//!
//! Every field is optional in the file; missing fields take the defaults of
//! the reference toy experiment. Unknown fields are rejected.

use std::path::{Path, PathBuf};

use demul_core::encoders::EncoderConfig;
use demul_core::eval::{ExperimentConfig, TaskConfig};
use demul_core::mapping::PretrainConfig;
use demul_core::objective::LossConfig;
use demul_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Toy,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // task
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub sigma_x: f64,
    pub sigma_p: f64,

    // encoders
    pub d_tok: usize,
    pub d_vlm: usize,
    pub d_llm: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    pub sigma_h: f64,
    pub token_std: f64,
    pub text_gain: f64,
    pub text_bias_std: f64,
    pub image_gain: f64,
    pub image_bias_std: f64,

    // mapping corpus and pre-training
    pub corpus_size: usize,
    pub held_out_fraction: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,

    // training
    pub prompts: usize,
    pub context_len: usize,
    pub epochs: usize,
    pub lr: f64,
    pub phi_lr_ratio: f64,
    pub batch_size: usize,
    pub prompt_batch: usize,
    pub weighted: bool,
    pub tau: f64,
    pub tau_distill: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub trace: bool,

    // LLM embeddings
    pub backend: Backend,
    pub remote_url: Option<String>,
    pub remote_model: Option<String>,
    pub embed_cache: Option<PathBuf>,

    // paths
    pub mapping: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_experiment(&ExperimentConfig::default())
    }
}

impl RunConfig {
    pub fn from_experiment(e: &ExperimentConfig) -> Self {
        let (enc, task, pre, train) = (&e.encoder, &e.task, &e.pretrain, &e.train);
        RunConfig {
            seed: e.seed(),
            classes: task.classes,
            shots: task.shots,
            test_per_class: task.test_per_class,
            sigma_x: task.sigma_x,
            sigma_p: task.sigma_p,
            d_tok: enc.d_tok,
            d_vlm: enc.d_vlm,
            d_llm: enc.d_llm,
            d_img: enc.d_img,
            vocab_size: enc.vocab_size,
            sigma_h: enc.sigma_h,
            token_std: enc.token_std,
            text_gain: enc.text_gain,
            text_bias_std: enc.text_bias_std,
            image_gain: enc.image_gain,
            image_bias_std: enc.image_bias_std,
            corpus_size: e.corpus_size,
            held_out_fraction: e.held_out_fraction,
            pretrain_steps: pre.steps,
            pretrain_lr: pre.lr,
            pretrain_batch_size: pre.batch_size,
            prompts: train.prompts,
            context_len: train.context_len,
            epochs: train.epochs,
            lr: train.lr,
            phi_lr_ratio: train.phi_lr_ratio,
            batch_size: train.batch_size,
            prompt_batch: train.prompt_batch,
            weighted: train.weighted,
            tau: train.loss.tau,
            tau_distill: train.loss.tau_distill,
            alpha: train.loss.alpha,
            lambda: train.loss.lambda,
            trace: train.trace,
            backend: Backend::Toy,
            remote_url: None,
            remote_model: None,
            embed_cache: None,
            mapping: None,
            out: None,
        }
    }

    /// The core experiment; every seed is set from `seed`.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            encoder: EncoderConfig {
                seed: self.seed,
                d_tok: self.d_tok,
                d_vlm: self.d_vlm,
                d_llm: self.d_llm,
                d_img: self.d_img,
                vocab_size: self.vocab_size,
                sigma_h: self.sigma_h,
                token_std: self.token_std,
                text_gain: self.text_gain,
                text_bias_std: self.text_bias_std,
                image_gain: self.image_gain,
                image_bias_std: self.image_bias_std,
            },
            corpus_size: self.corpus_size,
            held_out_fraction: self.held_out_fraction,
            pretrain: PretrainConfig {
                steps: self.pretrain_steps,
                lr: self.pretrain_lr,
                batch_size: self.pretrain_batch_size,
                seed: self.seed,
            },
            task: TaskConfig {
                classes: self.classes,
                shots: self.shots,
                test_per_class: self.test_per_class,
                sigma_x: self.sigma_x,
                sigma_p: self.sigma_p,
            },
            train: TrainConfig {
                prompts: self.prompts,
                context_len: self.context_len,
                epochs: self.epochs,
                lr: self.lr,
                phi_lr_ratio: self.phi_lr_ratio,
                loss: LossConfig {
                    tau: self.tau,
                    tau_distill: self.tau_distill,
                    alpha: self.alpha,
                    lambda: self.lambda,
                },
                batch_size: self.batch_size,
                prompt_batch: self.prompt_batch,
                weighted: self.weighted,
                seed: self.seed,
                trace: self.trace,
            },
        }
    }

    /// Range checks; a prompt batch larger than the bank is a usage error,
    /// everything else a configuration error.
    pub fn validate(&self) -> Result<()> {
        if self.prompt_batch > self.prompts {
            return Err(Error::Usage(format!(
                "prompt batch {} exceeds the number of prompts {}",
                self.prompt_batch, self.prompts
            )));
        }
        let e = self.experiment();
        let checks = [
            e.encoder.validate(),
            e.task.validate(),
            e.train.validate(),
        ];
        for c in checks {
            c.map_err(|err| Error::Config(err.to_string()))?;
        }
        if !(self.held_out_fraction >= 0.0 && self.held_out_fraction < 1.0) {
            return Err(Error::Config(format!(
                "held_out_fraction {} must be in [0, 1)",
                self.held_out_fraction
            )));
        }
        if self.pretrain_batch_size == 0 || !(self.pretrain_lr >= 0.0 && self.pretrain_lr.is_finite()) {
            return Err(Error::Config("pretrain_batch_size must be positive and pretrain_lr finite and >= 0".into()));
        }
        if self.backend == Backend::Remote && (self.remote_url.is_none() || self.remote_model.is_none()) {
            return Err(Error::Config("the remote backend needs remote_url and remote_model".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_to_the_reference_experiment() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.experiment(), ExperimentConfig::default());
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn small_experiment_survives_conversion() {
        let e = ExperimentConfig::small().with_seed(7);
        assert_eq!(RunConfig::from_experiment(&e).experiment(), e);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "shots": 16, "backend": "toy"}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.shots, 16);
        assert_eq!(cfg.prompts, RunConfig::default().prompts);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = RunConfig::from_json(r#"{"sedd": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn oversized_prompt_batch_is_a_usage_error() {
        let cfg = RunConfig {
            prompt_batch: 40,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn remote_backend_requires_endpoint() {
        let cfg = RunConfig {
            backend: Backend::Remote,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
