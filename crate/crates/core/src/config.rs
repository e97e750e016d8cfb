//! Run configuration: one TOML document that pins every choice a command
//! makes, so a config file plus its seeds reproduces any artifact bitwise.

use crate::decoding::SelectionMode;
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::mdlm::PretrainConfig;
use crate::model::{AttentionKind, PlannerConfig, TransformerConfig};
use crate::planner_init::PlannerInitConfig;
use crate::rewards::{task_vocab, TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed; every stage tags its own stream off this value.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskKind,
    pub backbone: TransformerConfig,
    pub planner: PlannerConfig,
    /// Training sequences for denoiser pretraining.
    pub corpus_size: usize,
    pub pretrain: PretrainConfig,
    /// Teacher for the distillation reward; omit to train without one.
    pub teacher_pretrain: Option<PretrainConfig>,
    /// Prompts labeled by the confidence heuristic for planner warm-up.
    pub label_prompts: usize,
    pub planner_init: PlannerInitConfig,
    pub grpo: GrpoConfig,
    pub eval_prompts: usize,
    /// Stochastic trials per evaluation point in planner mode.
    pub eval_trials: usize,
    /// Planner scaling factors swept by evaluation.
    pub alphas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskKind::ModularAddition;
        let spec = TaskSpec::new(task);
        let l_max = spec.prompt_len() + spec.completion_len();
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            task,
            backbone: TransformerConfig {
                vocab_size: task_vocab().size(),
                d_model: 32,
                n_heads: 2,
                n_layers: 2,
                l_max,
                attention: AttentionKind::Bidirectional,
            },
            planner: PlannerConfig::matching(32, 2),
            corpus_size: 400,
            pretrain: PretrainConfig::default(),
            teacher_pretrain: Some(PretrainConfig::default()),
            label_prompts: 80,
            planner_init: PlannerInitConfig::default(),
            grpo: GrpoConfig::default(),
            eval_prompts: 40,
            eval_trials: 5,
            alphas: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl ExperimentConfig {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::new(self.task)
    }

    /// One seed to rule the whole run: the GRPO stage keeps its own seed
    /// field, so overriding must set both.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.grpo.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.task_spec();
        let needed = spec.prompt_len() + spec.completion_len();
        if self.backbone.vocab_size != task_vocab().size() {
            return Err(Error::Config(format!(
                "backbone vocabulary {} does not match the task vocabulary {}",
                self.backbone.vocab_size,
                task_vocab().size()
            )));
        }
        if self.backbone.attention != AttentionKind::Bidirectional {
            return Err(Error::Config("the denoiser must attend bidirectionally".into()));
        }
        if self.backbone.l_max < needed {
            return Err(Error::Config(format!(
                "l_max {} is shorter than prompt plus completion {}",
                self.backbone.l_max, needed
            )));
        }
        self.backbone.validate()?;
        if self.planner.d_model != self.backbone.d_model {
            return Err(Error::Config(format!(
                "planner width {} does not match the backbone width {}",
                self.planner.d_model, self.backbone.d_model
            )));
        }
        self.planner.validate()?;
        if self.corpus_size == 0 || self.label_prompts == 0 || self.eval_prompts == 0 {
            return Err(Error::Config("empty dataset section".into()));
        }
        if self.eval_trials == 0 {
            return Err(Error::Config("evaluation needs at least one trial".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::Config(format!(
                "alpha sweep {:?} must be positive and finite",
                self.alphas
            )));
        }
        if self.grpo.decode.mode != SelectionMode::Planner {
            return Err(Error::Config("training rollouts must run in planner mode".into()));
        }
        self.grpo.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| Error::Config(format!("cannot write config {}: {e}", path.display())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn the_default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn configs_round_trip_through_toml_including_infinite_clip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = ExperimentConfig::default();
        cfg.grpo.clip = f64::NEG_INFINITY;
        cfg.teacher_pretrain = None;
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back.grpo.clip, f64::NEG_INFINITY);
        assert!(back.teacher_pretrain.is_none());
        assert_eq!(
            serde_json::to_string(&cfg).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }

    #[test]
    fn loading_a_missing_file_names_the_path() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }

    #[test]
    fn mismatched_sections_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.vocab_size = 7;
        assert!(cfg.validate().is_err());

        cfg = ExperimentConfig::default();
        cfg.planner.d_model = 64;
        assert!(cfg.validate().is_err());

        cfg = ExperimentConfig::default();
        cfg.backbone.l_max = 5;
        assert!(cfg.validate().is_err());

        cfg = ExperimentConfig::default();
        cfg.backbone.attention = AttentionKind::Causal;
        assert!(cfg.validate().is_err());

        cfg = ExperimentConfig::default();
        cfg.alphas = vec![1.0, -2.0];
        assert!(cfg.validate().is_err());

        cfg = ExperimentConfig::default();
        cfg.grpo.decode.mode = SelectionMode::Heuristic;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_overrides_reach_the_training_stage() {
        let mut cfg = ExperimentConfig::default();
        cfg.override_seed(99);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.grpo.seed, 99);
    }
}
