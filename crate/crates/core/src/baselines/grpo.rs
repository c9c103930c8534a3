use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{IterationRecord, Prompt, RewardParams, RunMetrics, TrainerConfig};
use crate::error::{Error, Result};
use crate::gapg::{response_stats, sample_and_score, sample_batch, ScoredGroup};
use crate::policy::{ActionMask, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    pub inner_epochs: usize,
    /// Added to the group standard deviation before dividing.
    pub std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            clip_epsilon: 0.2,
            kl_coef: 0.0,
            inner_epochs: 1,
            std_floor: 1e-6,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config("grpo.clip_epsilon", "must be in (0, 1)"));
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return Err(Error::config("grpo.kl_coef", "must be finite and >= 0"));
        }
        if self.inner_epochs == 0 {
            return Err(Error::config("grpo.inner_epochs", "must be >= 1"));
        }
        if !(self.std_floor.is_finite() && self.std_floor >= 0.0) {
            return Err(Error::config("grpo.std_floor", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Task-Tuning Only trains with the help action masked out; Collaborative
/// keeps it and scores help calls with the hierarchical reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrpoMode {
    TaskOnly,
    Collaborative,
}

impl GrpoMode {
    pub fn mask(self) -> ActionMask {
        match self {
            GrpoMode::TaskOnly => ActionMask::DeviceOnly,
            GrpoMode::Collaborative => ActionMask::All,
        }
    }
}

/// `(r_i - mean) / (std + std_floor)` with the population standard deviation.
/// A constant group maps to all zeros.
pub fn normalized_advantage(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 || rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let denom = var.sqrt() + std_floor;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

struct PreparedGroup<'a> {
    prompt: &'a Prompt,
    scored: ScoredGroup,
    advantages: Vec<f64>,
    old_log_probs: Vec<f64>,
    ref_log_probs: Vec<f64>,
}

/// Gradient of one prompt's clipped surrogate minus the exact KL penalty.
fn surrogate_gradient(
    params: &PolicyParams,
    g: &PreparedGroup<'_>,
    grpo: &GrpoConfig,
    mask: ActionMask,
) -> Result<PolicyParams> {
    let mut out = params.zeros_like();
    let log_probs = params.log_probs_masked(g.prompt, mask)?;
    let n = g.scored.group.len() as f64;
    let (lo, hi) = (1.0 - grpo.clip_epsilon, 1.0 + grpo.clip_epsilon);
    for (resp, &adv) in g.scored.group.responses.iter().zip(&g.advantages) {
        if adv == 0.0 {
            continue;
        }
        let a = resp.action_index;
        let ratio = (log_probs[a] - g.old_log_probs[a]).exp();
        // The min() picks the constant clipped branch outside the trust region.
        let unclipped = if adv > 0.0 { ratio <= hi } else { ratio >= lo };
        if unclipped {
            params.accumulate_grad_log_prob(g.prompt, a, mask, adv * ratio / n, &mut out)?;
        }
    }
    if grpo.kl_coef > 0.0 {
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let diff: Vec<f64> = log_probs
            .iter()
            .zip(&g.ref_log_probs)
            .zip(&probs)
            .map(|((l, r), p)| if *p > 0.0 { l - r } else { 0.0 })
            .collect();
        let expected: f64 = probs.iter().zip(&diff).map(|(p, d)| p * d).sum();
        let coeffs: Vec<f64> = probs
            .iter()
            .zip(&diff)
            .map(|(p, d)| -grpo.kl_coef * p * (d - expected))
            .collect();
        params.accumulate_logit_weighted(g.prompt, &coeffs, &mut out)?;
    }
    Ok(out)
}

/// One GRPO iteration: sample from the stale policy, normalise advantages,
/// then take `inner_epochs` ascent steps on the clipped surrogate.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    params: &mut PolicyParams,
    batch: &[&Prompt],
    cfg: &TrainerConfig,
    grpo: &GrpoConfig,
    mode: GrpoMode,
    rp: &RewardParams,
    reference: &PolicyParams,
    iteration: usize,
) -> Result<IterationRecord> {
    cfg.validate()?;
    grpo.validate()?;
    let mask = mode.mask();
    let prepared: Vec<PreparedGroup<'_>> = {
        let stale: &PolicyParams = params;
        batch
            .par_iter()
            .map(|&prompt| {
                let scored = sample_and_score(stale, prompt, cfg, rp, iteration, mask)?;
                let advantages = normalized_advantage(&scored.group.rewards(), grpo.std_floor);
                Ok(PreparedGroup {
                    prompt,
                    old_log_probs: stale.log_probs_masked(prompt, mask)?,
                    ref_log_probs: reference.log_probs_masked(prompt, mask)?,
                    scored,
                    advantages,
                })
            })
            .collect::<Result<_>>()?
    };

    let scored: Vec<ScoredGroup> = prepared.iter().map(|g| g.scored.clone()).collect();
    let mut record = response_stats(batch, &scored, iteration);

    let step = cfg.learning_rate / batch.len().max(1) as f64;
    let mut moved = false;
    for _ in 0..grpo.inner_epochs {
        let grads: Vec<PolicyParams> = {
            let current: &PolicyParams = params;
            prepared
                .par_iter()
                .map(|g| surrogate_gradient(current, g, grpo, mask))
                .collect::<Result<_>>()?
        };
        for g in &grads {
            moved |= g.max_abs() > 0.0;
            params.axpy(step, g)?;
        }
    }
    record.skipped_update = !moved;
    Ok(record)
}

/// GRPO training loop; the KL reference is the initial policy.
pub fn grpo_train_observed<F>(
    mut params: PolicyParams,
    dataset: &[Prompt],
    cfg: &TrainerConfig,
    grpo: &GrpoConfig,
    mode: GrpoMode,
    rp: &RewardParams,
    mut observer: F,
) -> Result<(PolicyParams, RunMetrics)>
where
    F: FnMut(&IterationRecord, &PolicyParams) -> Result<()>,
{
    cfg.validate()?;
    grpo.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reference = params.clone();
    let mut metrics = RunMetrics::default();
    for iteration in 1..=cfg.total_steps {
        let batch: Vec<&Prompt> = sample_batch(dataset.len(), cfg.batch_size, cfg.seed, iteration)
            .into_iter()
            .map(|i| &dataset[i])
            .collect();
        let record = grpo_step(&mut params, &batch, cfg, grpo, mode, rp, &reference, iteration)?;
        observer(&record, &params)?;
        metrics.push(record);
    }
    Ok((params, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ActionSpec;
    use crate::policy::PolicyKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_advantage_is_sqrt_g_minus_one() {
        let mut r = vec![0.0; 8];
        r[0] = 2.2;
        let a = normalized_advantage(&r, 0.0);
        assert!((a[0] - 7f64.sqrt()).abs() < 1e-12);
        r[0] = 0.5;
        let b = normalized_advantage(&r, 0.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rewards_have_zero_advantage() {
        assert_eq!(normalized_advantage(&[1.0; 4], 0.0), vec![0.0; 4]);
        assert_eq!(normalized_advantage(&[1.0; 4], 1e-6), vec![0.0; 4]);
    }

    #[test]
    fn epsilon_outside_unit_interval_is_rejected() {
        let cfg = GrpoConfig {
            clip_epsilon: 1.5,
            ..GrpoConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn prompts(n: usize) -> Vec<Prompt> {
        (0..n)
            .map(|id| Prompt {
                id,
                features: vec![1.0, (id as f64).sin()],
                difficulty: 0,
                action_table: vec![
                    ActionSpec::device(id % 2 == 0, true),
                    ActionSpec::device(false, false),
                    ActionSpec::device(id % 2 == 1, true),
                    ActionSpec::call_help(),
                ],
                cloud_correct: true,
            })
            .collect()
    }

    #[test]
    fn single_epoch_update_matches_direct_advantage_sum() {
        let data = prompts(6);
        let batch: Vec<&Prompt> = data.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = (0..4 * 2 + 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let start = PolicyParams::from_values(PolicyKind::LinearSoftmax, 4, 2, values).unwrap();
        let cfg = TrainerConfig {
            learning_rate: 0.3,
            seed: 5,
            ..TrainerConfig::default()
        };
        let grpo = GrpoConfig {
            clip_epsilon: 0.999,
            kl_coef: 0.0,
            inner_epochs: 1,
            std_floor: 1e-6,
        };
        let rp = RewardParams::default();
        let mut updated = start.clone();
        grpo_step(
            &mut updated,
            &batch,
            &cfg,
            &grpo,
            GrpoMode::Collaborative,
            &rp,
            &start,
            1,
        )
        .unwrap();

        let mut direct = start.clone();
        let mut total = start.zeros_like();
        for p in &batch {
            let s = sample_and_score(&start, p, &cfg, &rp, 1, ActionMask::All).unwrap();
            let adv = normalized_advantage(&s.group.rewards(), grpo.std_floor);
            for (resp, a) in s.group.responses.iter().zip(adv) {
                let g = start.grad_log_prob(p, resp.action_index).unwrap();
                total.axpy(a / cfg.group_size as f64, &g).unwrap();
            }
        }
        direct.axpy(cfg.learning_rate / batch.len() as f64, &total).unwrap();
        assert!(updated.max_abs_diff(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn equal_rewards_without_kl_do_not_move() {
        let data: Vec<Prompt> = prompts(4)
            .into_iter()
            .map(|mut p| {
                for a in &mut p.action_table {
                    a.is_correct = false;
                    a.format_ok = false;
                }
                p.cloud_correct = false;
                p
            })
            .collect();
        let batch: Vec<&Prompt> = data.iter().collect();
        let start = PolicyParams::linear(4, 2);
        let mut params = start.clone();
        let rec = grpo_step(
            &mut params,
            &batch,
            &TrainerConfig::default(),
            &GrpoConfig::default(),
            GrpoMode::Collaborative,
            &RewardParams::default(),
            &start,
            1,
        )
        .unwrap();
        assert_eq!(params, start);
        assert!(rec.skipped_update);
    }

    #[test]
    fn kl_gradient_vanishes_at_the_reference() {
        let data = prompts(1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let values = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = PolicyParams::from_values(PolicyKind::LinearSoftmax, 4, 2, values).unwrap();
        let lp = params.log_probs_masked(&data[0], ActionMask::All).unwrap();
        let group = crate::domain::GroupSample::from_actions(&data[0], &[0, 1]).unwrap();
        let prepared = PreparedGroup {
            prompt: &data[0],
            scored: ScoredGroup { group, cloud: None },
            advantages: vec![0.0, 0.0],
            old_log_probs: lp.clone(),
            ref_log_probs: lp,
        };
        let grpo = GrpoConfig {
            kl_coef: 0.7,
            ..GrpoConfig::default()
        };
        let g = surrogate_gradient(&params, &prepared, &grpo, ActionMask::All).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn task_only_mode_never_calls_help() {
        let data = prompts(8);
        let batch: Vec<&Prompt> = data.iter().collect();
        let start = PolicyParams::linear(4, 2);
        let mut params = start.clone();
        let rec = grpo_step(
            &mut params,
            &batch,
            &TrainerConfig::default(),
            &GrpoConfig::default(),
            GrpoMode::TaskOnly,
            &RewardParams::default(),
            &start,
            1,
        )
        .unwrap();
        assert_eq!(rec.call_ratio, 0.0);
        assert_eq!(rec.cloud_queries, 0);
    }

    proptest! {
        #[test]
        fn advantages_are_centred_and_scale_free(
            rewards in prop::collection::vec(0.0f64..3.0, 2..12),
            c in 0.01f64..100.0,
        ) {
            let a = normalized_advantage(&rewards, 0.0);
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-12);
            let scaled: Vec<f64> = rewards.iter().map(|r| r * c).collect();
            let b = normalized_advantage(&scaled, 0.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
