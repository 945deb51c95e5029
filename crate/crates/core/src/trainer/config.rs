use serde::{Deserialize, Serialize};

use crate::brainmod::BrainModuleConfig;
use crate::diffgen::{
    is_cross_attn_param, is_linear_param, is_unet_param, make_schedule, NoiseSchedule, SamplerSettings,
};
use crate::diffgen::{TimestepSampling, UNetConfig};
use crate::error::{Error, Result};
use crate::prep::WindowSpec;
use crate::synthcortex::TR;

/// Which generator weights are trained jointly with the brain module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    All,
    Linear,
    CrossAttn,
    None,
    Lora,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::All, Regime::Linear, Regime::CrossAttn, Regime::None, Regime::Lora];

    pub fn name(self) -> &'static str {
        match self {
            Regime::All => "all",
            Regime::Linear => "linear",
            Regime::CrossAttn => "cross_attn",
            Regime::None => "none",
            Regime::Lora => "lora",
        }
    }

    /// Whether a U-Net tensor is trained under this regime.
    pub fn trains_unet_param(self, name: &str) -> bool {
        is_unet_param(name)
            && match self {
                Regime::All => true,
                Regime::Linear => is_linear_param(name),
                Regime::CrossAttn => is_cross_attn_param(name),
                Regime::None | Regime::Lora => false,
            }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config { key: "finetune_regime".into(), msg: format!("unknown regime `{s}`") })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Architecture of the whole decoder: generator, brain module, sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub brain: BrainModuleConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let unet = UNetConfig::default();
        let brain = BrainModuleConfig { tokens: unet.tokens, token_dim: unet.token_dim, ..Default::default() };
        Self { unet, brain, schedule: ScheduleConfig::default(), sampler: SamplerSettings::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.brain.validate()?;
        self.schedule.build()?;
        if self.brain.tokens != self.unet.tokens || self.brain.token_dim != self.unet.token_dim {
            return Err(Error::Config {
                key: "brain.tokens".into(),
                msg: format!(
                    "brain module emits {}x{} tokens but the generator expects {}x{}",
                    self.brain.tokens, self.brain.token_dim, self.unet.tokens, self.unet.token_dim
                ),
            });
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.t_max {
            return Err(Error::Config {
                key: "sampler.steps".into(),
                msg: format!("{} outside 1..={}", self.sampler.steps, self.schedule.t_max),
            });
        }
        Ok(())
    }

    /// Checks that the brain module's window length matches a window.
    pub fn check_window(&self, window: &WindowSpec) -> Result<()> {
        let t = window.n_samples(TR);
        if t != self.brain.window_len {
            return Err(Error::Config {
                key: "brain.window_len".into(),
                msg: format!(
                    "window d={} s spans {t} volumes but the brain module expects {}",
                    window.d, self.brain.window_len
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub cond_dropout: f64,
    pub finetune_regime: Regime,
    pub window: WindowSpec,
    /// Window shift in seconds.
    pub delta: f64,
    pub seed: u64,
    pub offset_noise: f64,
    pub timestep_sampling: TimestepSampling,
    /// Abort when the loss stays above `divergence_factor` × the first
    /// loss for `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: u64,
    /// Pair every training epoch with a random other trial's image
    /// (control run).
    pub shuffle_conditioning: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 32,
            max_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 500,
            cond_dropout: 0.1,
            finetune_regime: Regime::Lora,
            window: WindowSpec::default(),
            delta: 0.0,
            seed: 0,
            offset_noise: 0.1,
            timestep_sampling: TimestepSampling::Bicubic,
            divergence_factor: 10.0,
            divergence_patience: 500,
            shuffle_conditioning: false,
        }
    }
}

impl TrainConfig {
    /// Generator pretraining defaults: 5k steps, uniform timesteps.
    pub fn pretrain() -> Self {
        Self { steps: 5_000, timestep_sampling: TimestepSampling::Uniform, cond_dropout: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout", format!("{} not in [0, 1)", self.cond_dropout));
        }
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return bad("warmup_steps", format!("{} must be below steps = {}", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.max_lr <= 0.0 || !self.max_lr.is_finite() {
            return bad("max_lr", format!("{} must be positive", self.max_lr));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)".into());
        }
        if self.offset_noise < 0.0 {
            return bad("offset_noise", "must be non-negative".into());
        }
        if self.window.d <= 0.0 {
            return bad("window.d", "must be positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> crate::substrate::AdamWConfig {
        crate::substrate::AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
        TrainConfig::pretrain().validate().unwrap();
        ModelConfig::default().check_window(&WindowSpec::default()).unwrap();
    }

    #[test]
    fn config_errors_name_the_key() {
        let cfg = TrainConfig { cond_dropout: 1.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "cond_dropout"));
        let cfg = TrainConfig { warmup_steps: 20, steps: 20, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "warmup_steps"));
        let err = serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).unwrap_err();
        assert!(err.to_string().contains("stepz"));
        assert!("bogus".parse::<Regime>().is_err());
        assert_eq!("cross_attn".parse::<Regime>().unwrap(), Regime::CrossAttn);
    }
}
