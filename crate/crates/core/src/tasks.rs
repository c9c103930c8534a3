//! Synthetic prompt generator and the deterministic cloud oracle.
//!
//! Feature layout of every generated prompt:
//!
//! * `features[..B]` - solution block, one coordinate per device slot, where
//!   `B` is the largest device-table size over all tiers. When the device can
//!   solve the prompt the block carries a centred one-hot at the slot holding
//!   the correct answer plus noise; otherwise it is pure noise.
//! * `features[B]` - tier coordinate: tier centroid plus unit noise.
//! * `features[B + 1..]` - unit-noise distractors.
//!
//! The tier coordinate is what a prompt-level classifier can exploit. The
//! solution block is only informative nonlinearly (through the maximum over
//! slots), which is what the device policy's own softmax sees.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{ActionSpec, Prompt};
use crate::error::{from_toml, Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub tier: u32,
    pub fraction: f64,
    pub device_solvability: f64,
    pub n_wrong_actions: usize,
    #[serde(default = "default_cloud_capability")]
    pub cloud_capability: f64,
}

fn default_cloud_capability() -> f64 {
    0.95
}

fn default_tier_signal() -> f64 {
    1.05
}

fn default_solution_signal() -> f64 {
    1.0
}

fn default_solution_noise() -> f64 {
    0.1
}

fn default_format_ok_prob() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGenConfig {
    pub n_prompts: usize,
    pub feature_dim: usize,
    pub tiers: Vec<TierSpec>,
    /// Distance between adjacent tier centroids on the tier coordinate, in
    /// units of the noise standard deviation. 1.05 gives a two-tier linear
    /// probe ~70% accuracy.
    #[serde(default = "default_tier_signal")]
    pub tier_signal: f64,
    /// Amplitude of the one-hot in the solution block.
    #[serde(default = "default_solution_signal")]
    pub solution_signal: f64,
    #[serde(default = "default_solution_noise")]
    pub solution_noise: f64,
    /// Probability that any device answer follows the required format.
    #[serde(default = "default_format_ok_prob")]
    pub format_ok_prob: f64,
    pub seed: u64,
}

impl TaskGenConfig {
    /// Two-tier dataset used by the experiments: an easy tier the device can
    /// mostly solve and a hard tier it mostly cannot.
    pub fn two_tier_default() -> Self {
        TaskGenConfig {
            n_prompts: 1500,
            feature_dim: 10,
            tiers: vec![
                TierSpec {
                    tier: 0,
                    fraction: 0.6,
                    device_solvability: 0.95,
                    n_wrong_actions: 5,
                    cloud_capability: 0.95,
                },
                TierSpec {
                    tier: 1,
                    fraction: 0.4,
                    device_solvability: 0.3,
                    n_wrong_actions: 5,
                    cloud_capability: 0.95,
                },
            ],
            tier_signal: default_tier_signal(),
            solution_signal: default_solution_signal(),
            solution_noise: default_solution_noise(),
            format_ok_prob: default_format_ok_prob(),
            seed: 20240601,
        }
    }

    /// Width of the solution block.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        from_toml(text, "task config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("task config", e.to_string()))
    }

    pub fn solution_width(&self) -> usize {
        self.tiers.iter().map(|t| t.n_wrong_actions + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 {
            return Err(Error::config("n_prompts", "must be >= 1"));
        }
        if self.tiers.is_empty() {
            return Err(Error::config("tiers", "at least one tier is required"));
        }
        let total: f64 = self.tiers.iter().map(|t| t.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "tiers.fraction",
                format!("fractions sum to {total}, expected 1"),
            ));
        }
        for (i, t) in self.tiers.iter().enumerate() {
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !unit(t.fraction) {
                return Err(Error::config(format!("tiers[{i}].fraction"), "must be in [0, 1]"));
            }
            if !unit(t.device_solvability) {
                return Err(Error::config(
                    format!("tiers[{i}].device_solvability"),
                    "must be in [0, 1]",
                ));
            }
            if !unit(t.cloud_capability) {
                return Err(Error::config(
                    format!("tiers[{i}].cloud_capability"),
                    "must be in [0, 1]",
                ));
            }
            if t.n_wrong_actions == 0 {
                return Err(Error::config(
                    format!("tiers[{i}].n_wrong_actions"),
                    "must be >= 1 so unsolvable prompts still have a device action",
                ));
            }
        }
        if self.feature_dim <= self.solution_width() {
            return Err(Error::config(
                "feature_dim",
                format!("must exceed the solution block width {}", self.solution_width()),
            ));
        }
        if !(0.0..=1.0).contains(&self.format_ok_prob) {
            return Err(Error::config("format_ok_prob", "must be in [0, 1]"));
        }
        for (name, v) in [
            ("tier_signal", self.tier_signal),
            ("solution_signal", self.solution_signal),
            ("solution_noise", self.solution_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Generates `cfg.n_prompts` prompts with ids `0..n`. Pure function of `cfg`.
pub fn generate(cfg: &TaskGenConfig) -> Result<Vec<Prompt>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Purpose::Tasks, &[]);
    let width = cfg.solution_width();
    let n_tiers = cfg.tiers.len();
    let centre = (n_tiers as f64 - 1.0) / 2.0;

    let mut prompts = Vec::with_capacity(cfg.n_prompts);
    for id in 0..cfg.n_prompts {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut tier_idx = n_tiers - 1;
        for (i, t) in cfg.tiers.iter().enumerate() {
            acc += t.fraction;
            if u < acc {
                tier_idx = i;
                break;
            }
        }
        let tier = &cfg.tiers[tier_idx];

        let solvable = rng.random::<f64>() < tier.device_solvability;
        let device_slots = tier.n_wrong_actions + usize::from(solvable);
        let correct_slot = rng.random_range(0..tier.n_wrong_actions + 1);

        let mut action_table = Vec::with_capacity(device_slots + 1);
        for slot in 0..device_slots {
            let format_ok = rng.random::<f64>() < cfg.format_ok_prob;
            action_table.push(ActionSpec::device(solvable && slot == correct_slot, format_ok));
        }
        action_table.push(ActionSpec::call_help());

        let cloud_correct = rng.random::<f64>() < tier.cloud_capability;

        let mut features = Vec::with_capacity(cfg.feature_dim);
        for slot in 0..width {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let signal = if solvable {
                let hot = if slot == correct_slot { 1.0 } else { 0.0 };
                cfg.solution_signal * (hot - 1.0 / width as f64)
            } else {
                0.0
            };
            features.push(signal + cfg.solution_noise * noise);
        }
        let noise: f64 = StandardNormal.sample(&mut rng);
        features.push((tier_idx as f64 - centre) * cfg.tier_signal + noise);
        for _ in width + 1..cfg.feature_dim {
            features.push(StandardNormal.sample(&mut rng));
        }

        prompts.push(Prompt {
            id,
            features,
            difficulty: tier.tier,
            action_table,
            cloud_correct,
        });
    }
    Ok(prompts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudAnswer {
    Correct,
    Incorrect,
}

impl CloudAnswer {
    pub fn is_correct(self) -> bool {
        self == CloudAnswer::Correct
    }
}

/// The cloud model: deterministic per prompt.
pub fn cloud_answer(prompt: &Prompt) -> CloudAnswer {
    if prompt.cloud_correct {
        CloudAnswer::Correct
    } else {
        CloudAnswer::Incorrect
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_dataset, ActionKind};

    fn single_tier(solvability: f64, capability: f64) -> TaskGenConfig {
        TaskGenConfig {
            n_prompts: 300,
            feature_dim: 6,
            tiers: vec![TierSpec {
                tier: 0,
                fraction: 1.0,
                device_solvability: solvability,
                n_wrong_actions: 2,
                cloud_capability: capability,
            }],
            seed: 3,
            ..TaskGenConfig::two_tier_default()
        }
    }

    #[test]
    fn full_solvability_gives_every_prompt_a_correct_action() {
        let prompts = generate(&single_tier(1.0, 0.5)).unwrap();
        assert!(prompts.iter().all(Prompt::has_correct_device_action));
    }

    #[test]
    fn full_cloud_capability_makes_cloud_always_correct() {
        let mut cfg = TaskGenConfig::two_tier_default();
        for t in &mut cfg.tiers {
            t.cloud_capability = 1.0;
        }
        let prompts = generate(&cfg).unwrap();
        assert!(prompts.iter().all(|p| p.cloud_correct));
    }

    #[test]
    fn generated_prompts_are_valid() {
        let prompts = generate(&TaskGenConfig::two_tier_default()).unwrap();
        assert!(validate_dataset(&prompts).unwrap().is_ok());
        for p in &prompts {
            assert_eq!(p.action_table.last().unwrap().kind, ActionKind::CallHelp);
            assert_eq!(p.features.len(), 10);
        }
    }

    fn two_tier_probe() -> TaskGenConfig {
        let mut cfg = TaskGenConfig::two_tier_default();
        cfg.n_prompts = 1000;
        cfg.tiers[0].fraction = 0.5;
        cfg.tiers[0].device_solvability = 0.9;
        cfg.tiers[1].fraction = 0.5;
        cfg.tiers[1].device_solvability = 0.2;
        cfg
    }

    #[test]
    fn hard_tier_solvable_fraction_is_frozen() {
        let prompts = generate(&two_tier_probe()).unwrap();
        let hard: Vec<_> = prompts.iter().filter(|p| p.difficulty == 1).collect();
        let solvable = hard.iter().filter(|p| p.has_correct_device_action()).count();
        assert_eq!((hard.len(), solvable), (475, 95));
    }

    #[test]
    fn tier_fractions_are_within_four_sigma() {
        let prompts = generate(&two_tier_probe()).unwrap();
        let n = prompts.len() as f64;
        let hard = prompts.iter().filter(|p| p.difficulty == 1).count() as f64;
        let sigma = (0.5 * 0.5 / n).sqrt();
        assert!((hard / n - 0.5).abs() <= 4.0 * sigma);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TaskGenConfig::two_tier_default();
        let back = TaskGenConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let err = TaskGenConfig::from_toml_str("n_prompts = 10\nfeature_dim = 4\nseed = 1\n[[tiers]]\ntier = 0\nfraction = 1.0\ndevice_solvability = 0.5\nn_wrong_actions = 2\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("tiers"), "{err}");
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let mut cfg = TaskGenConfig::two_tier_default();
        cfg.tiers[0].fraction = 0.7;
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn solvability_outside_unit_interval_is_rejected() {
        assert!(generate(&single_tier(1.5, 0.5)).is_err());
    }

    #[test]
    fn cloud_answer_follows_label_and_is_repeatable() {
        let mut p = generate(&single_tier(0.5, 0.5)).unwrap().remove(0);
        p.cloud_correct = true;
        assert_eq!(cloud_answer(&p), CloudAnswer::Correct);
        assert_eq!(cloud_answer(&p), cloud_answer(&p));
        p.cloud_correct = false;
        assert_eq!(cloud_answer(&p), CloudAnswer::Incorrect);
        assert_eq!(cloud_answer(&p), cloud_answer(&p));
    }
}
