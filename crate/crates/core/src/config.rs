//! Run configuration: every tunable in one serializable struct.
//!
//! Two presets exist: `desk` (the default) is calibrated so the complete
//! pipeline finishes in minutes on a laptop core while still clearing the
//! quality gates; `reference` mirrors the full-scale training recipe and is
//! only practical on real hardware.

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptKind;
use crate::data::CorpusSpec;
use crate::diffusion::{CfgWeights, ScheduleKind};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;

/// Evaluation protocol: how many input motions supply the persona at
/// sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// One input clip per sample.
    SingleInput,
    /// Several input clips fused into one conditioning signal.
    MultiInput,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::SingleInput, Protocol::MultiInput];

    pub fn label(self) -> &'static str {
        match self {
            Protocol::SingleInput => "si",
            Protocol::MultiInput => "mi",
        }
    }

    pub fn parse(s: &str) -> Option<Protocol> {
        Self::ALL.into_iter().find(|p| p.label() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // corpus
    pub seed: u64,
    pub num_personas: usize,
    pub takes_per_content: usize,
    pub pretrain_takes: usize,
    pub eval_takes: usize,

    // contrastive pretraining
    pub clip_epochs: usize,
    pub clip_batch: usize,
    pub clip_lr: f64,
    pub clip_tau: f32,
    pub min_recall: f64,

    // denoiser pretraining
    pub diffusion_epochs: usize,
    pub diffusion_batch: usize,
    pub diffusion_lr: f64,
    pub cond_drop: f64,
    pub schedule: ScheduleKind,
    pub t_steps: usize,
    pub train_window: usize,

    // personalization finetune
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub lambda_pc: f32,
    pub pc_tau: f32,
    pub adapt_kind: AdaptKind,
    pub s_train: f32,
    pub s_inference: f32,

    // guidance and fusion
    pub g_t: f32,
    pub g_v: f32,
    pub blend_si: f32,
    pub blend_mi: f32,
    pub fusion_k: usize,
    pub all_inputs_denominator: bool,
    pub multi_inputs: usize,

    // sampling / evaluation
    pub samples_per_content: usize,
    pub sample_frames: usize,
    pub classifier_epochs: usize,
    pub classifier_min_accuracy: f64,

    pub weight_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            num_personas: 4,
            takes_per_content: 4,
            pretrain_takes: 16,
            eval_takes: 2,

            clip_epochs: 30,
            clip_batch: 32,
            clip_lr: 3e-4,
            clip_tau: 0.1,
            min_recall: 0.8,

            diffusion_epochs: 36,
            diffusion_batch: 16,
            diffusion_lr: 3e-4,
            cond_drop: 0.1,
            schedule: ScheduleKind::Cosine,
            t_steps: 50,
            train_window: 32,

            finetune_epochs: 20,
            finetune_batch: 8,
            finetune_lr: 3e-4,
            lambda_pc: 0.01,
            pc_tau: 0.1,
            adapt_kind: AdaptKind::SelfAttn,
            s_train: 1.0,
            s_inference: 0.3,

            g_t: 10.0,
            g_v: 15.0,
            blend_si: 0.7,
            blend_mi: 0.5,
            fusion_k: 5,
            all_inputs_denominator: false,
            multi_inputs: 6,

            samples_per_content: 4,
            sample_frames: 48,
            classifier_epochs: 30,
            classifier_min_accuracy: 0.9,

            weight_decay: 0.01,
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-scale recipe: hundreds of epochs, large batches, conservative
    /// learning rate. Kept for fidelity; do not run this on a laptop.
    pub fn reference() -> Self {
        RunConfig {
            num_personas: 8,
            takes_per_content: 12,
            pretrain_takes: 120,
            eval_takes: 6,
            clip_epochs: 200,
            clip_batch: 64,
            clip_lr: 1e-4,
            diffusion_epochs: 500,
            diffusion_batch: 64,
            diffusion_lr: 1e-4,
            finetune_epochs: 300,
            finetune_batch: 64,
            finetune_lr: 1e-4,
            samples_per_content: 4,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "reference" => Ok(Self::reference()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `desk` or `reference`)"
            ))),
        }
    }

    /// Apply one `key=value` override; keys are the snake_case field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::Config(format!("invalid value `{v}` for `{key}`"))
            })
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "num_personas" => self.num_personas = num(key, value)?,
            "takes_per_content" => self.takes_per_content = num(key, value)?,
            "pretrain_takes" => self.pretrain_takes = num(key, value)?,
            "eval_takes" => self.eval_takes = num(key, value)?,
            "clip_epochs" => self.clip_epochs = num(key, value)?,
            "clip_batch" => self.clip_batch = num(key, value)?,
            "clip_lr" => self.clip_lr = num(key, value)?,
            "clip_tau" => self.clip_tau = num(key, value)?,
            "min_recall" => self.min_recall = num(key, value)?,
            "diffusion_epochs" => self.diffusion_epochs = num(key, value)?,
            "diffusion_batch" => self.diffusion_batch = num(key, value)?,
            "diffusion_lr" => self.diffusion_lr = num(key, value)?,
            "cond_drop" => self.cond_drop = num(key, value)?,
            "schedule" => {
                self.schedule = ScheduleKind::parse(value).ok_or_else(|| {
                    Error::Config(format!(
                        "invalid value `{value}` for `schedule` (cosine|linear)"
                    ))
                })?
            }
            "t_steps" => self.t_steps = num(key, value)?,
            "train_window" => self.train_window = num(key, value)?,
            "finetune_epochs" => self.finetune_epochs = num(key, value)?,
            "finetune_batch" => self.finetune_batch = num(key, value)?,
            "finetune_lr" => self.finetune_lr = num(key, value)?,
            "lambda_pc" => self.lambda_pc = num(key, value)?,
            "pc_tau" => self.pc_tau = num(key, value)?,
            "adapt_kind" => {
                self.adapt_kind = AdaptKind::parse(value).ok_or_else(|| {
                    Error::Config(format!(
                        "invalid value `{value}` for `adapt_kind` (self-attn|cross-attn|ada-in)"
                    ))
                })?
            }
            "s_train" => self.s_train = num(key, value)?,
            "s_inference" => self.s_inference = num(key, value)?,
            "g_t" => self.g_t = num(key, value)?,
            "g_v" => self.g_v = num(key, value)?,
            "blend_si" => self.blend_si = num(key, value)?,
            "blend_mi" => self.blend_mi = num(key, value)?,
            "fusion_k" => self.fusion_k = num(key, value)?,
            "all_inputs_denominator" => self.all_inputs_denominator = num(key, value)?,
            "multi_inputs" => self.multi_inputs = num(key, value)?,
            "samples_per_content" => self.samples_per_content = num(key, value)?,
            "sample_frames" => self.sample_frames = num(key, value)?,
            "classifier_epochs" => self.classifier_epochs = num(key, value)?,
            "classifier_min_accuracy" => self.classifier_min_accuracy = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        fn ensure(ok: bool, what: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(what.to_string()))
            }
        }
        ensure(self.num_personas >= 2, "need at least 2 personas")?;
        ensure(self.takes_per_content >= 1, "takes_per_content must be >= 1")?;
        ensure(self.eval_takes >= 1, "eval_takes must be >= 1")?;
        ensure(
            (0.0..=1.0).contains(&self.cond_drop),
            "cond_drop must lie in [0, 1]",
        )?;
        ensure(self.t_steps >= 2, "t_steps must be >= 2")?;
        ensure(self.fusion_k >= 1, "fusion_k must be >= 1")?;
        ensure(self.multi_inputs >= 1, "multi_inputs must be >= 1")?;
        ensure(self.train_window >= 2, "train_window must be >= 2")?;
        ensure(self.sample_frames >= 2, "sample_frames must be >= 2")?;
        ensure(self.clip_tau > 0.0, "clip_tau must be positive")?;
        ensure(self.pc_tau > 0.0, "pc_tau must be positive")?;
        ensure(
            (0.0..=1.0).contains(&self.blend_si) && (0.0..=1.0).contains(&self.blend_mi),
            "blend weights must lie in [0, 1]",
        )?;
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            num_personas: self.num_personas,
            takes_per: self.takes_per_content,
            pretrain_takes: self.pretrain_takes,
            eval_takes: self.eval_takes,
        }
    }

    pub fn cfg_weights(&self, protocol: Protocol) -> CfgWeights {
        CfgWeights {
            g_t: self.g_t,
            g_v: self.g_v,
            blend: match protocol {
                Protocol::SingleInput => self.blend_si,
                Protocol::MultiInput => self.blend_mi,
            },
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            k: self.fusion_k,
            all_inputs_denominator: self.all_inputs_denominator,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::reference().validate().unwrap();
    }

    #[test]
    fn preset_lookup() {
        assert_eq!(RunConfig::preset("desk").unwrap(), RunConfig::default());
        assert!(RunConfig::preset("enormous").is_err());
    }

    #[test]
    fn set_overrides_each_value_kind() {
        let mut c = RunConfig::desk();
        c.set("finetune_epochs", "7").unwrap();
        assert_eq!(c.finetune_epochs, 7);
        c.set("g_t", "2.5").unwrap();
        assert_eq!(c.g_t, 2.5);
        c.set("schedule", "linear").unwrap();
        assert_eq!(c.schedule, ScheduleKind::Linear);
        c.set("adapt_kind", "ada-in").unwrap();
        assert_eq!(c.adapt_kind, AdaptKind::AdaIn);
        c.set("all_inputs_denominator", "true").unwrap();
        assert!(c.all_inputs_denominator);
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("seed", "not-a-number").is_err());
        assert!(c.set("cond_drop", "1.5").is_err(), "validation must run after set");
    }

    #[test]
    fn serde_round_trip_is_identity() {
        let mut c = RunConfig::desk();
        c.set("schedule", "linear").unwrap();
        c.set("lambda_pc", "0.0").unwrap();
        let json = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn protocol_labels_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(Protocol::parse(p.label()), Some(p));
        }
        assert_eq!(Protocol::parse("both"), None);
    }
}
