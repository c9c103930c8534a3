//! Greedy evaluation under a cloud-call cap.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::router::RouterParams;
use crate::domain::{ActionKind, Prompt};
use crate::error::{Error, Result};
use crate::policy::{ActionMask, PolicyParams};
use crate::rng::{self, Purpose};
use crate::tasks::cloud_answer;

#[derive(Debug, Clone, Copy)]
pub enum EvalMode<'a> {
    /// No offloading.
    Device,
    /// A uniformly random cap-fraction goes to the cloud.
    Naive,
    /// The cap-fraction with the lowest router probability goes to the cloud.
    Router(&'a RouterParams),
    /// The policy's own help calls, honoured up to the cap in seeded-shuffle
    /// order; the rest fall back to the best device answer.
    PolicyRouted,
}

impl EvalMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Device => "device",
            EvalMode::Naive => "naive",
            EvalMode::Router(_) => "router",
            EvalMode::PolicyRouted => "policy-routed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub cap: f64,
    pub n_prompts: usize,
    /// Accuracy of the best device answer on every prompt.
    pub device_accuracy: f64,
    /// Accuracy after routing.
    pub collaborative_accuracy: f64,
    pub cloud_calls: usize,
    pub cloud_call_ratio: f64,
    /// Prompts on which the greedy policy itself chose to call for help.
    pub help_requests: usize,
    pub help_request_ratio: f64,
    /// Help requests sent back to the device because of the cap.
    pub redirected: usize,
}

/// Number of prompts the cap allows to reach the cloud.
fn cloud_budget(cap: f64, n: usize) -> usize {
    ((cap * n as f64 + 1e-9).floor() as usize).min(n)
}

fn mode_tag(mode: &EvalMode<'_>) -> u64 {
    match mode {
        EvalMode::Device => 0,
        EvalMode::Naive => 1,
        EvalMode::Router(_) => 2,
        EvalMode::PolicyRouted => 3,
    }
}

pub fn route_and_eval(
    policy: &PolicyParams,
    mode: EvalMode<'_>,
    dataset: &[Prompt],
    cap: f64,
    seed: u64,
) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&cap) {
        return Err(Error::config("cap", "must be in [0, 1]"));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len();
    let budget = cloud_budget(cap, n);

    let device_correct: Vec<bool> = dataset
        .iter()
        .map(|p| Ok(p.action_table[policy.greedy(p, ActionMask::DeviceOnly)?].is_correct))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Eval, &[mode_tag(&mode)]));

    let mut help_requests = 0;
    let offloaded: Vec<usize> = match mode {
        EvalMode::Device => Vec::new(),
        EvalMode::Naive => order[..budget].to_vec(),
        EvalMode::Router(router) => {
            let mut ranked: Vec<(f64, usize)> = order
                .iter()
                .map(|&i| (router.probability(&dataset[i].features), i))
                .collect();
            // stable sort keeps the shuffled order among ties
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
            ranked.into_iter().take(budget).map(|(_, i)| i).collect()
        }
        EvalMode::PolicyRouted => {
            let mut wants = Vec::new();
            for &i in &order {
                let p = &dataset[i];
                let a = policy.greedy(p, ActionMask::All)?;
                if p.action_table[a].kind == ActionKind::CallHelp {
                    wants.push(i);
                }
            }
            help_requests = wants.len();
            wants.truncate(budget);
            wants
        }
    };

    let mut to_cloud = vec![false; n];
    for &i in &offloaded {
        to_cloud[i] = true;
    }
    let correct = (0..n)
        .filter(|&i| {
            if to_cloud[i] {
                cloud_answer(&dataset[i]).is_correct()
            } else {
                device_correct[i]
            }
        })
        .count();
    let device_hits = device_correct.iter().filter(|&&c| c).count();

    Ok(EvalReport {
        mode: mode.name().to_string(),
        cap,
        n_prompts: n,
        device_accuracy: device_hits as f64 / n as f64,
        collaborative_accuracy: correct as f64 / n as f64,
        cloud_calls: offloaded.len(),
        cloud_call_ratio: offloaded.len() as f64 / n as f64,
        help_requests,
        help_request_ratio: help_requests as f64 / n as f64,
        redirected: help_requests.saturating_sub(offloaded.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;
    use crate::tasks::{generate, TaskGenConfig};

    fn data(cloud_perfect: bool) -> Vec<Prompt> {
        let mut cfg = TaskGenConfig::two_tier_default();
        cfg.n_prompts = 400;
        if cloud_perfect {
            for t in &mut cfg.tiers {
                t.cloud_capability = 1.0;
            }
        }
        generate(&cfg).unwrap()
    }

    #[test]
    fn zero_cap_means_device_accuracy() {
        let d = data(false);
        let policy = PolicyParams::for_dataset(PolicyKind::LinearSoftmax, &d).unwrap();
        for mode in [EvalMode::Naive, EvalMode::PolicyRouted, EvalMode::Device] {
            let r = route_and_eval(&policy, mode, &d, 0.0, 1).unwrap();
            assert_eq!(r.collaborative_accuracy, r.device_accuracy);
            assert_eq!(r.cloud_calls, 0);
        }
    }

    #[test]
    fn full_cap_with_perfect_cloud_is_perfect() {
        let d = data(true);
        let policy = PolicyParams::for_dataset(PolicyKind::LinearSoftmax, &d).unwrap();
        let r = route_and_eval(&policy, EvalMode::Naive, &d, 1.0, 1).unwrap();
        assert_eq!(r.collaborative_accuracy, 1.0);
        assert_eq!(r.cloud_calls, d.len());
    }

    #[test]
    fn help_calls_beyond_the_cap_are_redirected() {
        let d = data(true);
        let mut policy = PolicyParams::for_dataset(PolicyKind::LinearSoftmax, &d).unwrap();
        let n = policy.len();
        policy.values_mut()[n - 1] = 10.0; // help bias
        let r = route_and_eval(&policy, EvalMode::PolicyRouted, &d, 0.3, 4).unwrap();
        assert_eq!(r.help_requests, d.len());
        assert_eq!(r.cloud_calls, 120);
        assert_eq!(r.redirected, d.len() - 120);
    }

    #[test]
    fn router_offloads_lowest_probabilities() {
        let d = data(true);
        let policy = PolicyParams::for_dataset(PolicyKind::LinearSoftmax, &d).unwrap();
        let tier_coord = TaskGenConfig::two_tier_default().solution_width();
        let mut weights = vec![0.0; d[0].features.len()];
        weights[tier_coord] = -3.0;
        let router = RouterParams { weights, bias: 0.0 };
        let r = route_and_eval(&policy, EvalMode::Router(&router), &d, 0.25, 1).unwrap();
        assert_eq!(r.cloud_calls, 100);
        assert!(r.collaborative_accuracy >= r.device_accuracy);
    }

    #[test]
    fn cap_outside_unit_interval_is_rejected() {
        let d = data(false);
        let policy = PolicyParams::for_dataset(PolicyKind::LinearSoftmax, &d).unwrap();
        assert!(route_and_eval(&policy, EvalMode::Naive, &d, 1.2, 0).is_err());
    }
}
