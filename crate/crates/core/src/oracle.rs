//! Independent verification engines.
//!
//! `true_gradient` is built only from softmax probabilities and the logit
//! Jacobian, never from the sampled estimators. `estimator_expectation`
//! enumerates every ordered group of actions with its product probability, so
//! comparing the two checks unbiasedness exactly rather than statistically.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::normalized_advantage;
use crate::domain::{ActionSpec, GroupSample, Prompt, RewardParams};
use crate::error::{Error, Result};
use crate::gapg;
use crate::policy::{ActionMask, PolicyKind, PolicyParams};
use crate::reward;
use crate::rng::{self, Purpose, StreamRng};
use crate::tasks::cloud_answer;

/// Largest number of ordered tuples `estimator_expectation` will enumerate.
pub const ENUMERATION_BOUND: u64 = 1_000_000;

/// Reward of every action, with the cloud answer fetched once.
pub fn action_rewards(prompt: &Prompt, rp: &RewardParams) -> Result<Vec<f64>> {
    let cloud = Some(cloud_answer(prompt));
    (0..prompt.num_actions())
        .map(|a| reward::action_reward(prompt, a, cloud, rp))
        .collect()
}

/// `E_{a ~ pi}[r(a)]` by summing over the action set.
pub fn expected_reward(params: &PolicyParams, prompt: &Prompt, rp: &RewardParams) -> Result<f64> {
    let probs = params.probs(prompt)?;
    let rewards = action_rewards(prompt, rp)?;
    Ok(probs.iter().zip(&rewards).map(|(p, r)| p * r).sum())
}

/// `sum_a grad pi(a) r(a)`, using `d pi_a / d logit_j = pi_a (delta_aj - pi_j)`,
/// which collapses to `sum_j pi_j (r_j - E[r]) d logit_j / d theta`.
pub fn true_gradient(params: &PolicyParams, prompt: &Prompt, rp: &RewardParams) -> Result<PolicyParams> {
    let probs = params.probs(prompt)?;
    let rewards = action_rewards(prompt, rp)?;
    let expected: f64 = probs.iter().zip(&rewards).map(|(p, r)| p * r).sum();
    let coeffs: Vec<f64> = probs.iter().zip(&rewards).map(|(p, r)| p * (r - expected)).collect();
    let mut out = params.zeros_like();
    params.accumulate_logit_weighted(prompt, &coeffs, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// The group estimator with its `G/(G-1)` correction, as used in training.
    Gapg,
    /// Same estimator without the correction factor.
    GapgUncorrected,
    /// `(1/G) sum_i A_i grad log pi(a_i)` with normalised advantages.
    GrpoDirection,
}

fn apply_estimator(
    estimator: Estimator,
    params: &PolicyParams,
    prompt: &Prompt,
    group: &GroupSample,
    weight: f64,
    out: &mut PolicyParams,
) -> Result<()> {
    let g = group.len() as f64;
    match estimator {
        Estimator::Gapg => gapg::accumulate_group_gradient(params, prompt, group, weight, out),
        Estimator::GapgUncorrected => {
            let rewards = group.rewards();
            let mean = rewards.iter().sum::<f64>() / g;
            for (resp, r) in group.responses.iter().zip(&rewards) {
                params.accumulate_grad_log_prob(
                    prompt,
                    resp.action_index,
                    ActionMask::All,
                    weight * (r - mean) / g,
                    out,
                )?;
            }
            Ok(())
        }
        Estimator::GrpoDirection => {
            let adv = normalized_advantage(&group.rewards(), 0.0);
            for (resp, a) in group.responses.iter().zip(adv) {
                params.accumulate_grad_log_prob(prompt, resp.action_index, ActionMask::All, weight * a / g, out)?;
            }
            Ok(())
        }
    }
}

/// Exact expectation of `estimator` over all `k^G` ordered groups.
///
/// Work is split by the first action of the tuple; partial sums are combined
/// in index order so the result is independent of scheduling.
pub fn estimator_expectation(
    params: &PolicyParams,
    prompt: &Prompt,
    group_size: usize,
    estimator: Estimator,
    rp: &RewardParams,
) -> Result<PolicyParams> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    let k = prompt.num_actions();
    let too_large = Error::EnumerationTooLarge {
        actions: k,
        group: group_size,
        bound: ENUMERATION_BOUND,
    };
    let total = (k as u64).checked_pow(group_size as u32).ok_or(too_large)?;
    if total > ENUMERATION_BOUND {
        return Err(Error::EnumerationTooLarge {
            actions: k,
            group: group_size,
            bound: ENUMERATION_BOUND,
        });
    }
    let probs = params.probs(prompt)?;
    let cloud = Some(cloud_answer(prompt));
    let chunks: Vec<PolicyParams> = (0..k)
        .into_par_iter()
        .map(|first| {
            let mut acc = params.zeros_like();
            let mut tuple = vec![0usize; group_size];
            tuple[0] = first;
            let rest = total / k as u64;
            for _ in 0..rest {
                let weight: f64 = tuple.iter().map(|&a| probs[a]).product();
                if weight > 0.0 {
                    let group = GroupSample::from_actions(prompt, &tuple)?;
                    let cloud = if group.any_help() { cloud } else { None };
                    let group = reward::score_group_with(prompt, &group, cloud, rp)?;
                    apply_estimator(estimator, params, prompt, &group, weight, &mut acc)?;
                }
                // odometer over positions 1..G
                for pos in (1..group_size).rev() {
                    tuple[pos] += 1;
                    if tuple[pos] < k {
                        break;
                    }
                    tuple[pos] = 0;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut out = params.zeros_like();
    for c in &chunks {
        out.axpy(1.0, c)?;
    }
    Ok(out)
}

/// Central differences of `f` in every parameter coordinate.
pub fn finite_diff<F>(f: F, params: &PolicyParams, step: f64) -> Result<PolicyParams>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::config("step", "must be > 0"));
    }
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    for i in 0..params.len() {
        let x = params.values()[i];
        probe.values_mut()[i] = x + step;
        let up = f(&probe)?;
        probe.values_mut()[i] = x - step;
        let down = f(&probe)?;
        probe.values_mut()[i] = x;
        out.values_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// Scale below which coordinates are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, RELATIVE_FLOOR)`.
pub fn relative_error(a: &PolicyParams, b: &PolicyParams) -> Result<f64> {
    a.max_abs_diff(b)?;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max))
}

/// Cosine similarity of two gradients (0 if either is zero).
pub fn cosine(a: &PolicyParams, b: &PolicyParams) -> Result<f64> {
    let dot = a.dot(b)?;
    let na = a.dot(a)?.sqrt();
    let nb = b.dot(b)?.sqrt();
    Ok(if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) })
}

/// Random single-prompt instance with `k` actions, the last being CallHelp.
pub fn random_prompt(rng: &mut StreamRng, k: usize, feature_dim: usize) -> Prompt {
    let mut action_table: Vec<ActionSpec> = (0..k - 1)
        .map(|_| ActionSpec::device(rng.random_bool(0.4), rng.random_bool(0.6)))
        .collect();
    action_table.push(ActionSpec::call_help());
    Prompt {
        id: 0,
        features: (0..feature_dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
        difficulty: 0,
        action_table,
        cloud_correct: rng.random_bool(0.7),
    }
}

/// Random weights respecting `alpha_a > alpha_c >= alpha_f >= 0`.
pub fn random_reward_params(rng: &mut StreamRng) -> RewardParams {
    let alpha_a = rng.random_range(0.5..3.0);
    let alpha_c = alpha_a * rng.random_range(0.05..0.95);
    let alpha_f = if rng.random_bool(0.2) {
        0.0
    } else {
        alpha_c * rng.random_range(0.0..1.0)
    };
    RewardParams::new(alpha_a, alpha_c, alpha_f).expect("constructed within the ordering")
}

pub fn random_params(rng: &mut StreamRng, kind: PolicyKind, k: usize, feature_dim: usize) -> PolicyParams {
    let (rows, cols, extra) = match kind {
        PolicyKind::Tabular => (1, k, 0),
        PolicyKind::LinearSoftmax => (k, feature_dim, 2),
    };
    let values = (0..rows * cols + extra).map(|_| rng.random_range(-2.0..2.0)).collect();
    PolicyParams::from_values(kind, rows, cols, values).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessCase {
    pub seed: u64,
    pub actions: usize,
    pub group_size: usize,
    /// `max |E[gapg] - true_gradient|` per coordinate.
    pub max_error: f64,
    /// `max |E[uncorrected] - (G-1)/G * true_gradient|` per coordinate.
    pub uncorrected_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub tolerance: f64,
    pub cases: Vec<UnbiasednessCase>,
    pub max_error: f64,
    pub max_uncorrected_error: f64,
    pub passed: bool,
}

/// Unbiasedness sweep over `seeds` random tabular instances with
/// `k in {2,3,4}` and `G in {2,3}`.
pub fn verify_unbiasedness(seeds: usize, tolerance: f64) -> Result<UnbiasednessReport> {
    let cases = (0..seeds as u64)
        .map(|seed| {
            let mut rng = rng::stream(seed, Purpose::Verify, &[1]);
            let k = rng.random_range(2..=4);
            let group_size = rng.random_range(2..=3);
            let prompt = random_prompt(&mut rng, k, 1);
            let rp = random_reward_params(&mut rng);
            let params = random_params(&mut rng, PolicyKind::Tabular, k, 1);
            let exact = true_gradient(&params, &prompt, &rp)?;
            let est = estimator_expectation(&params, &prompt, group_size, Estimator::Gapg, &rp)?;
            let raw = estimator_expectation(&params, &prompt, group_size, Estimator::GapgUncorrected, &rp)?;
            let mut scaled = exact.clone();
            scaled.scale((group_size as f64 - 1.0) / group_size as f64);
            Ok(UnbiasednessCase {
                seed,
                actions: k,
                group_size,
                max_error: est.max_abs_diff(&exact)?,
                uncorrected_error: raw.max_abs_diff(&scaled)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_error = cases.iter().map(|c| c.max_error).fold(0.0, f64::max);
    let max_uncorrected_error = cases.iter().map(|c| c.uncorrected_error).fold(0.0, f64::max);
    Ok(UnbiasednessReport {
        tolerance,
        passed: !cases.is_empty() && max_error <= tolerance && max_uncorrected_error <= tolerance,
        cases,
        max_error,
        max_uncorrected_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_log_prob_error: f64,
    pub max_true_gradient_error: f64,
    pub passed: bool,
}

/// Compares `grad_log_prob` and `true_gradient` with central differences on
/// random tabular and linear instances.
pub fn verify_gradcheck(instances: usize, step: f64, tolerance: f64) -> Result<GradcheckReport> {
    let mut max_lp = 0.0f64;
    let mut max_tg = 0.0f64;
    for i in 0..instances as u64 {
        let mut rng = rng::stream(i, Purpose::Verify, &[2]);
        let kind = if i % 2 == 0 {
            PolicyKind::Tabular
        } else {
            PolicyKind::LinearSoftmax
        };
        let k = rng.random_range(2..=5);
        let prompt = random_prompt(&mut rng, k, 3);
        let rp = random_reward_params(&mut rng);
        let params = random_params(&mut rng, kind, k, 3);
        let action = rng.random_range(0..k);

        let analytic = params.grad_log_prob(&prompt, action)?;
        let numeric = finite_diff(|p| p.log_prob(&prompt, action), &params, step)?;
        max_lp = max_lp.max(relative_error(&analytic, &numeric)?);

        let exact = true_gradient(&params, &prompt, &rp)?;
        let numeric = finite_diff(|p| expected_reward(p, &prompt, &rp), &params, step)?;
        max_tg = max_tg.max(relative_error(&exact, &numeric)?);
    }
    Ok(GradcheckReport {
        instances,
        step,
        tolerance,
        max_log_prob_error: max_lp,
        max_true_gradient_error: max_tg,
        passed: instances > 0 && max_lp <= tolerance && max_tg <= tolerance,
    })
}
