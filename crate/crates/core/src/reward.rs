//! Collaboration-aware hierarchical reward.
//!
//! | response                              | reward            |
//! |---------------------------------------|-------------------|
//! | device answer, correct, format ok     | `alpha_a + alpha_f` |
//! | device answer, correct, bad format    | `alpha_a`         |
//! | call for help, cloud correct          | `alpha_c`         |
//! | device answer, wrong, format ok       | `alpha_f`         |
//! | anything else                         | `0`               |
//!
//! A help call never earns the format bonus.

use crate::domain::{ActionKind, GroupSample, Prompt, ResponseAction, RewardParams};
use crate::error::Result;
use crate::tasks::{cloud_answer, CloudAnswer};

/// Reward of taking `action_index` on `prompt`, given the cloud's answer
/// (only consulted for help calls; `None` means the cloud was not queried).
pub fn action_reward(
    prompt: &Prompt,
    action_index: usize,
    cloud: Option<CloudAnswer>,
    params: &RewardParams,
) -> Result<f64> {
    let spec = prompt.action(action_index)?;
    Ok(match spec.kind {
        ActionKind::CallHelp => match cloud {
            Some(CloudAnswer::Correct) => params.alpha_c(),
            _ => 0.0,
        },
        ActionKind::DeviceAnswer => match (spec.is_correct, spec.format_ok) {
            (true, true) => params.alpha_a() + params.alpha_f(),
            (true, false) => params.alpha_a(),
            (false, true) => params.alpha_f(),
            (false, false) => 0.0,
        },
    })
}

pub fn score(prompt: &Prompt, response: &ResponseAction, params: &RewardParams) -> Result<f64> {
    action_reward(prompt, response.action_index, Some(cloud_answer(prompt)), params)
}

/// Scores every member against a single (possibly cached) cloud answer.
pub fn score_group_with(
    prompt: &Prompt,
    group: &GroupSample,
    cloud: Option<CloudAnswer>,
    params: &RewardParams,
) -> Result<GroupSample> {
    let mut scored = group.clone();
    for r in &mut scored.responses {
        r.reward = action_reward(prompt, r.action_index, cloud, params)?;
    }
    scored.mean_reward = mean(&scored.rewards());
    scored.cloud_queried = scored.any_help();
    Ok(scored)
}

pub fn score_group(prompt: &Prompt, group: &GroupSample, params: &RewardParams) -> Result<GroupSample> {
    score_group_with(prompt, group, Some(cloud_answer(prompt)), params)
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ActionSpec;
    use crate::error::Error;
    use proptest::prelude::*;

    fn prompt(cloud_correct: bool) -> Prompt {
        Prompt {
            id: 0,
            features: vec![0.0],
            difficulty: 0,
            action_table: vec![
                ActionSpec::device(true, true),
                ActionSpec::device(true, false),
                ActionSpec::device(false, true),
                ActionSpec::device(false, false),
                ActionSpec::call_help(),
            ],
            cloud_correct,
        }
    }

    fn rp() -> RewardParams {
        RewardParams::new(2.0, 0.5, 0.2).unwrap()
    }

    fn response(i: usize) -> ResponseAction {
        ResponseAction {
            prompt_id: 0,
            action_index: i,
            used_cloud: i == 4,
            reward: 0.0,
        }
    }

    #[test]
    fn five_reward_cases() {
        let p = prompt(true);
        assert_eq!(score(&p, &response(0), &rp()).unwrap(), 2.2);
        assert_eq!(score(&p, &response(1), &rp()).unwrap(), 2.0);
        assert_eq!(score(&p, &response(2), &rp()).unwrap(), 0.2);
        assert_eq!(score(&p, &response(3), &rp()).unwrap(), 0.0);
        assert_eq!(score(&p, &response(4), &rp()).unwrap(), 0.5);
        assert_eq!(score(&prompt(false), &response(4), &rp()).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let err = score(&prompt(true), &response(9), &rp()).unwrap_err();
        assert!(matches!(err, Error::ActionIndexOutOfRange { index: 9, .. }));
    }

    #[test]
    fn identical_help_calls_score_equally() {
        let p = prompt(true);
        let g = GroupSample::from_actions(&p, &[4, 4]).unwrap();
        let s = score_group(&p, &g, &rp()).unwrap();
        assert_eq!(s.rewards(), vec![0.5, 0.5]);
        assert_eq!(s.mean_reward, 0.5);
        assert!(s.cloud_queried);
    }

    #[test]
    fn mixed_group_mean() {
        let p = prompt(true);
        let g = GroupSample::from_actions(&p, &[0, 3]).unwrap();
        let s = score_group(&p, &g, &rp()).unwrap();
        assert_eq!(s.rewards(), vec![2.2, 0.0]);
        assert!((s.mean_reward - 1.1).abs() < 1e-15);
        assert!(!s.cloud_queried);
    }

    #[test]
    fn one_hot_group_of_eight() {
        let p = prompt(true);
        let g = GroupSample::from_actions(&p, &[0, 3, 3, 3, 3, 3, 3, 3]).unwrap();
        let s = score_group(&p, &g, &rp()).unwrap();
        assert!((s.mean_reward - 0.275).abs() < 1e-15);
        let again = score_group(&p, &s, &rp()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn unqueried_cloud_earns_nothing() {
        let p = prompt(true);
        assert_eq!(action_reward(&p, 4, None, &rp()).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn reward_is_bounded_and_hierarchical(
            a in 0.5f64..5.0,
            c_frac in 0.01f64..0.99,
            f_frac in 0.0f64..1.0,
            idx in 0usize..5,
            cloud in any::<bool>(),
        ) {
            let c = a * c_frac;
            let f = c * f_frac;
            let params = RewardParams::new(a, c, f).unwrap();
            let p = prompt(cloud);
            let r = action_reward(&p, idx, Some(cloud_answer(&p)), &params).unwrap();
            prop_assert!(r >= 0.0 && r <= a + f);
            let correct = action_reward(&p, 1, None, &params).unwrap();
            let help = action_reward(&prompt(true), 4, Some(CloudAnswer::Correct), &params).unwrap();
            let format_only = action_reward(&p, 2, None, &params).unwrap();
            prop_assert!(correct > help);
            prop_assert!(help > format_only);
        }
    }
}
