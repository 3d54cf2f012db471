//! Flat `key = value` run configuration with dotted keys, `#` comments, and
//! strict schema validation: unknown keys are rejected, not ignored.

use std::path::Path;

use crate::adalora::BudgetSchedule;
use crate::encoder::EncoderConfig;
use crate::error::{Result, SsomError};
use crate::trainer::{default_schedule, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScheduleOverrides {
    pub b_init: Option<usize>,
    pub b_target: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub final_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleOverrides::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SsomError::Config(format!("invalid value {value:?} for key {key}")))
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SsomError::Config(format!("line {}: expected `key = value`, found {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.encoder.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SsomError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.image_size" => self.encoder.image_size = parse_value(key, value)?,
            "model.patch_size" => self.encoder.patch_size = parse_value(key, value)?,
            "model.embed_dim" => self.encoder.embed_dim = parse_value(key, value)?,
            "model.num_blocks" => self.encoder.num_blocks = parse_value(key, value)?,
            "model.num_heads" => self.encoder.num_heads = parse_value(key, value)?,
            "model.adapter_rank" => self.encoder.adapter_rank = parse_value(key, value)?,
            "train.epochs" => self.train.epochs = parse_value(key, value)?,
            "train.base_lr" => self.train.base_lr = parse_value(key, value)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = parse_value(key, value)?,
            "train.lr_decay_every_epochs" => self.train.lr_decay_every_epochs = parse_value(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, value)?,
            "train.lambda_reg" => self.train.lambda_reg = parse_value(key, value)?,
            "train.seed" => self.train.seed = parse_value(key, value)?,
            "train.optimizer" => {
                self.train.optimizer = match value {
                    "adam" => OptimizerKind::default(),
                    "sgd" => OptimizerKind::Sgd,
                    other => {
                        return Err(SsomError::Config(format!(
                            "invalid value {other:?} for key train.optimizer (expected adam or sgd)"
                        )))
                    }
                }
            }
            "train.adam_beta1" | "train.adam_beta2" | "train.adam_eps" => {
                let v: f64 = parse_value(key, value)?;
                if let OptimizerKind::Adam { beta1, beta2, eps } = &mut self.train.optimizer {
                    match key {
                        "train.adam_beta1" => *beta1 = v,
                        "train.adam_beta2" => *beta2 = v,
                        _ => *eps = v,
                    }
                } else {
                    return Err(SsomError::Config(format!(
                        "{key} requires train.optimizer = adam (set it first)"
                    )));
                }
            }
            "schedule.b_init" => self.schedule.b_init = Some(parse_value(key, value)?),
            "schedule.b_target" => self.schedule.b_target = Some(parse_value(key, value)?),
            "schedule.warmup_steps" => self.schedule.warmup_steps = Some(parse_value(key, value)?),
            "schedule.final_steps" => self.schedule.final_steps = Some(parse_value(key, value)?),
            other => return Err(SsomError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Concrete budget schedule for a run of `total_steps` over a model with
    /// `total_slots` singular values, with any overrides applied.
    pub fn resolve_schedule(&self, total_steps: usize, total_slots: usize) -> Result<BudgetSchedule> {
        let default = default_schedule(total_steps, total_slots)?;
        BudgetSchedule::new(
            total_steps,
            self.schedule.warmup_steps.unwrap_or(default.warmup_steps),
            self.schedule.final_steps.unwrap_or(default.final_steps),
            self.schedule.b_init.unwrap_or(default.b_init),
            self.schedule.b_target.unwrap_or(default.b_target),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let text = "
# a comment
model.image_size = 16   # trailing comment
model.patch_size = 4
train.epochs = 5
train.base_lr = 0.001
train.optimizer = sgd
schedule.b_init = 12
";
        let cfg = RunConfig::from_str(text).unwrap();
        assert_eq!(cfg.encoder.image_size, 16);
        assert_eq!(cfg.encoder.patch_size, 4);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.base_lr, 0.001);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.schedule.b_init, Some(12));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_str("model.imgsize = 16").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn malformed_line_and_value_are_rejected() {
        assert!(RunConfig::from_str("just words").is_err());
        assert!(RunConfig::from_str("train.epochs = many").is_err());
    }

    #[test]
    fn invalid_combination_fails_validation() {
        // patch size does not divide image size
        assert!(RunConfig::from_str("model.image_size = 10\nmodel.patch_size = 4").is_err());
    }

    #[test]
    fn schedule_overrides_apply() {
        let cfg = RunConfig::from_str("schedule.b_init = 20\nschedule.b_target = 10").unwrap();
        let s = cfg.resolve_schedule(100, 24).unwrap();
        assert_eq!(s.b_init, 20);
        assert_eq!(s.b_target, 10);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.final_steps, 20);
        // no overrides: half of all slots
        let s = RunConfig::default().resolve_schedule(100, 24).unwrap();
        assert_eq!(s.b_init, 24);
        assert_eq!(s.b_target, 12);
    }
}
