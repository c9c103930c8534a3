//! Group-adaptive policy gradient: the unbiased group estimator, adaptive
//! prompt filtering under the cloud budget, and the training loop.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{GroupSample, IterationRecord, Prompt, RewardParams, RunMetrics, TrainerConfig};
use crate::error::{Error, Result};
use crate::policy::{ActionMask, PolicyParams};
use crate::reward::{self, mean};
use crate::rng::{self, Purpose};
use crate::tasks::{cloud_answer, CloudAnswer};

/// Prompt ids kept for the update.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterResult {
    /// Prompts whose group holds at least one correct device answer.
    pub d1: Vec<usize>,
    /// Cloud-rescuable prompts, capped at `floor(rho * |d1|)`.
    pub d2: Vec<usize>,
    pub eligible_d2: usize,
}

/// `floor(rho * n)`, guarded against representation error in `rho`.
pub fn budget_cap(rho: f64, n: usize) -> usize {
    (rho * n as f64 + 1e-9).floor() as usize
}

/// Adds `scale * (G/(G-1)) * (1/G) * sum_i grad log pi(a_i) (r_i - mean)` into
/// `out`. Help calls contribute through the help action's own log-probability;
/// the cloud's part of the response carries no parameters.
pub fn accumulate_group_gradient(
    params: &PolicyParams,
    prompt: &Prompt,
    group: &GroupSample,
    scale: f64,
    out: &mut PolicyParams,
) -> Result<()> {
    let g = group.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    if group.rewards_all_equal() {
        return Ok(());
    }
    let rewards = group.rewards();
    let baseline = mean(&rewards);
    let factor = scale / (g as f64 - 1.0);
    for (resp, r) in group.responses.iter().zip(&rewards) {
        let centred = r - baseline;
        if centred != 0.0 {
            params.accumulate_grad_log_prob(prompt, resp.action_index, ActionMask::All, factor * centred, out)?;
        }
    }
    Ok(())
}

pub fn group_gradient(params: &PolicyParams, prompt: &Prompt, group: &GroupSample) -> Result<PolicyParams> {
    let mut out = params.zeros_like();
    accumulate_group_gradient(params, prompt, group, 1.0, &mut out)?;
    Ok(out)
}

fn has_correct_device_response(prompt: &Prompt, group: &GroupSample) -> bool {
    group.responses.iter().any(|r| {
        prompt
            .action_table
            .get(r.action_index)
            .is_some_and(|a| a.is_device_correct())
    })
}

/// Splits a scored batch into the two training sets.
///
/// `d1` keeps every prompt the device solved at least once, including groups
/// whose rewards are all equal: those add no gradient, but they still count
/// toward the `floor(rho * |d1|)` cloud budget, which would otherwise shrink
/// to nothing as the device masters its prompts.
///
/// A prompt is eligible for `d2` only if its group queried the cloud, so the
/// filter never needs an answer that was not already fetched.
pub fn filter_prompts<R: Rng + ?Sized>(batch: &[(&Prompt, &GroupSample)], rho: f64, rng: &mut R) -> FilterResult {
    let mut d1 = Vec::new();
    let mut eligible = Vec::new();
    for (prompt, group) in batch {
        if has_correct_device_response(prompt, group) {
            d1.push(prompt.id);
        } else if group.cloud_queried && cloud_answer(prompt).is_correct() {
            eligible.push(prompt.id);
        }
    }
    let cap = budget_cap(rho, d1.len()).min(eligible.len());
    let mut picked = index::sample(rng, eligible.len(), cap).into_vec();
    picked.sort_unstable();
    let d2 = picked.into_iter().map(|i| eligible[i]).collect();
    FilterResult {
        d1,
        d2,
        eligible_d2: eligible.len(),
    }
}

/// One sampled and scored group plus whether the cloud was asked.
#[derive(Debug, Clone)]
pub(crate) struct ScoredGroup {
    pub group: GroupSample,
    pub cloud: Option<CloudAnswer>,
}

/// Samples a group from the per-prompt stream and scores it, querying the
/// cloud at most once and only when some response calls for help.
pub(crate) fn sample_and_score(
    params: &PolicyParams,
    prompt: &Prompt,
    cfg: &TrainerConfig,
    rp: &RewardParams,
    iteration: usize,
    mask: ActionMask,
) -> Result<ScoredGroup> {
    let mut rng = rng::stream(cfg.seed, Purpose::Sampling, &[iteration as u64, prompt.id as u64]);
    let group = params.sample_group_masked(prompt, cfg.group_size, mask, &mut rng)?;
    let cloud = group.any_help().then(|| cloud_answer(prompt));
    let group = reward::score_group_with(prompt, &group, cloud, rp)?;
    Ok(ScoredGroup { group, cloud })
}

/// Batch-level response statistics shared by every trainer.
pub(crate) fn response_stats(batch: &[&Prompt], scored: &[ScoredGroup], iteration: usize) -> IterationRecord {
    let mut n = 0usize;
    let mut reward_sum = 0.0;
    let mut calls = 0usize;
    let mut device_correct = 0usize;
    let mut final_correct = 0usize;
    for (prompt, s) in batch.iter().zip(scored) {
        for r in &s.group.responses {
            n += 1;
            reward_sum += r.reward;
            if r.used_cloud {
                calls += 1;
                if s.cloud.is_some_and(CloudAnswer::is_correct) {
                    final_correct += 1;
                }
            } else if prompt.action_table[r.action_index].is_correct {
                device_correct += 1;
                final_correct += 1;
            }
        }
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    IterationRecord {
        iteration,
        mean_reward: if n == 0 { 0.0 } else { reward_sum / n as f64 },
        call_ratio: frac(calls),
        device_accuracy: frac(device_correct),
        collaborative_accuracy: frac(final_correct),
        d1: 0,
        d2: 0,
        eligible_d2: 0,
        cloud_queries: scored.iter().filter(|s| s.cloud.is_some()).count(),
        skipped_update: false,
    }
}

/// One iteration: sample, query, score, filter, and ascend on `d1 ∪ d2`.
///
/// Randomness comes from counter streams keyed by `(cfg.seed, iteration,
/// prompt id)`, so the result does not depend on the rayon pool size.
pub fn train_step(
    params: &mut PolicyParams,
    batch: &[&Prompt],
    cfg: &TrainerConfig,
    rp: &RewardParams,
    iteration: usize,
) -> Result<IterationRecord> {
    cfg.validate()?;
    let scored: Vec<ScoredGroup> = {
        let p: &PolicyParams = params;
        batch
            .par_iter()
            .map(|prompt| sample_and_score(p, prompt, cfg, rp, iteration, ActionMask::All))
            .collect::<Result<_>>()?
    };

    let pairs: Vec<(&Prompt, &GroupSample)> = batch.iter().copied().zip(scored.iter().map(|s| &s.group)).collect();
    let mut filter_rng = rng::stream(cfg.seed, Purpose::Filter, &[iteration as u64]);
    let filtered = filter_prompts(&pairs, cfg.rho, &mut filter_rng);
    assert!(
        filtered.d2.len() <= budget_cap(cfg.rho, filtered.d1.len()),
        "cloud budget violated: |d2| = {} with |d1| = {}",
        filtered.d2.len(),
        filtered.d1.len()
    );

    let mut record = response_stats(batch, &scored, iteration);
    record.d1 = filtered.d1.len();
    record.d2 = filtered.d2.len();
    record.eligible_d2 = filtered.eligible_d2;

    let selected: HashSet<usize> = filtered.d1.iter().chain(&filtered.d2).copied().collect();
    if selected.is_empty() {
        record.skipped_update = true;
        return Ok(record);
    }

    let grads: Vec<PolicyParams> = {
        let p: &PolicyParams = params;
        pairs
            .par_iter()
            .filter(|(prompt, _)| selected.contains(&prompt.id))
            .map(|(prompt, group)| group_gradient(p, prompt, group))
            .collect::<Result<_>>()?
    };
    let step = cfg.learning_rate / selected.len() as f64;
    for g in &grads {
        params.axpy(step, g)?;
    }
    Ok(record)
}

/// Draws the iteration's batch (without replacement) from the batch stream.
pub fn sample_batch(n: usize, batch_size: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, Purpose::Batch, &[iteration as u64]);
    index::sample(&mut rng, n, batch_size.min(n)).into_vec()
}

/// Runs `cfg.total_steps` iterations, calling `observer` after each.
pub fn train_observed<F>(
    mut params: PolicyParams,
    dataset: &[Prompt],
    cfg: &TrainerConfig,
    rp: &RewardParams,
    mut observer: F,
) -> Result<(PolicyParams, RunMetrics)>
where
    F: FnMut(&IterationRecord, &PolicyParams) -> Result<()>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut metrics = RunMetrics::default();
    for iteration in 1..=cfg.total_steps {
        let batch: Vec<&Prompt> = sample_batch(dataset.len(), cfg.batch_size, cfg.seed, iteration)
            .into_iter()
            .map(|i| &dataset[i])
            .collect();
        let record = train_step(&mut params, &batch, cfg, rp, iteration)?;
        observer(&record, &params)?;
        metrics.push(record);
    }
    Ok((params, metrics))
}

pub fn train(
    params: PolicyParams,
    dataset: &[Prompt],
    cfg: &TrainerConfig,
    rp: &RewardParams,
) -> Result<(PolicyParams, RunMetrics)> {
    train_observed(params, dataset, cfg, rp, |_, _| Ok(()))
}
