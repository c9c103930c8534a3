//! Core data types shared by every module.
//!
//! Datasets are stored as JSON Lines: one [`Prompt`] per line, fields in
//! declaration order (`id`, `features`, `difficulty`, `action_table`,
//! `cloud_correct`).

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    DeviceAnswer,
    CallHelp,
}

/// One entry of a prompt's action table.
///
/// `is_correct` and `format_ok` only carry meaning for device answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub kind: ActionKind,
    pub is_correct: bool,
    pub format_ok: bool,
}

impl ActionSpec {
    pub fn device(is_correct: bool, format_ok: bool) -> Self {
        ActionSpec {
            kind: ActionKind::DeviceAnswer,
            is_correct,
            format_ok,
        }
    }

    pub fn call_help() -> Self {
        ActionSpec {
            kind: ActionKind::CallHelp,
            is_correct: false,
            format_ok: false,
        }
    }

    pub fn is_device_correct(&self) -> bool {
        self.kind == ActionKind::DeviceAnswer && self.is_correct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub features: Vec<f64>,
    pub difficulty: u32,
    pub action_table: Vec<ActionSpec>,
    pub cloud_correct: bool,
}

impl Prompt {
    pub fn num_actions(&self) -> usize {
        self.action_table.len()
    }

    pub fn action(&self, index: usize) -> Result<&ActionSpec> {
        self.action_table.get(index).ok_or(Error::ActionIndexOutOfRange {
            prompt_id: self.id,
            index,
            len: self.action_table.len(),
        })
    }

    /// Position of the CallHelp action, if the table has one.
    pub fn help_index(&self) -> Option<usize> {
        self.action_table.iter().position(|a| a.kind == ActionKind::CallHelp)
    }

    pub fn has_correct_device_action(&self) -> bool {
        self.action_table.iter().any(ActionSpec::is_device_correct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseAction {
    pub prompt_id: usize,
    pub action_index: usize,
    pub used_cloud: bool,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub prompt_id: usize,
    pub responses: Vec<ResponseAction>,
    pub mean_reward: f64,
    pub cloud_queried: bool,
}

impl GroupSample {
    /// Builds an unscored group from chosen action indices.
    pub fn from_actions(prompt: &Prompt, actions: &[usize]) -> Result<Self> {
        let responses = actions
            .iter()
            .map(|&i| {
                let spec = prompt.action(i)?;
                Ok(ResponseAction {
                    prompt_id: prompt.id,
                    action_index: i,
                    used_cloud: spec.kind == ActionKind::CallHelp,
                    reward: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cloud_queried = responses.iter().any(|r| r.used_cloud);
        Ok(GroupSample {
            prompt_id: prompt.id,
            responses,
            mean_reward: 0.0,
            cloud_queried,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn any_help(&self) -> bool {
        self.responses.iter().any(|r| r.used_cloud)
    }

    pub fn rewards_all_equal(&self) -> bool {
        match self.responses.first() {
            None => true,
            Some(first) => self.responses.iter().all(|r| r.reward == first.reward),
        }
    }
}

/// Weights of the hierarchical reward: accuracy, coordination, format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRewardParams")]
pub struct RewardParams {
    alpha_a: f64,
    alpha_c: f64,
    alpha_f: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRewardParams {
    alpha_a: f64,
    alpha_c: f64,
    alpha_f: f64,
}

impl TryFrom<RawRewardParams> for RewardParams {
    type Error = Error;

    fn try_from(raw: RawRewardParams) -> Result<Self> {
        RewardParams::new(raw.alpha_a, raw.alpha_c, raw.alpha_f)
    }
}

impl RewardParams {
    /// Requires `alpha_a > alpha_c >= alpha_f >= 0`. Equality of the last two
    /// admits the format-free configuration (`alpha_f = 0`).
    pub fn new(alpha_a: f64, alpha_c: f64, alpha_f: f64) -> Result<Self> {
        if ![alpha_a, alpha_c, alpha_f].iter().all(|v| v.is_finite()) {
            return Err(Error::config("reward", "weights must be finite"));
        }
        if alpha_f < 0.0 {
            return Err(Error::config("reward.alpha_f", "must be >= 0"));
        }
        if alpha_c < alpha_f {
            return Err(Error::config("reward.alpha_c", "must be >= alpha_f"));
        }
        if alpha_a <= alpha_c {
            return Err(Error::config("reward.alpha_a", "must be > alpha_c"));
        }
        Ok(RewardParams {
            alpha_a,
            alpha_c,
            alpha_f,
        })
    }

    pub fn alpha_a(&self) -> f64 {
        self.alpha_a
    }

    pub fn alpha_c(&self) -> f64 {
        self.alpha_c
    }

    pub fn alpha_f(&self) -> f64 {
        self.alpha_f
    }
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            alpha_a: 2.0,
            alpha_c: 0.5,
            alpha_f: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub group_size: usize,
    /// Cloud-to-device usage budget.
    pub rho: f64,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 8,
            rho: 3.0 / 7.0,
            learning_rate: 1.0,
            total_steps: 400,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("trainer.group_size", "must be >= 2"));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::config("trainer.rho", "must be finite and > 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("trainer.learning_rate", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Telemetry for one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Fraction of sampled responses that called the cloud.
    pub call_ratio: f64,
    /// Fraction of sampled responses that are correct device answers.
    pub device_accuracy: f64,
    /// Fraction of sampled responses whose final answer is correct.
    pub collaborative_accuracy: f64,
    pub d1: usize,
    pub d2: usize,
    pub eligible_d2: usize,
    pub cloud_queries: usize,
    pub skipped_update: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<IterationRecord>,
}

impl RunMetrics {
    pub fn push(&mut self, record: IterationRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean training call ratio over the last `window` iterations.
    pub fn trailing_call_ratio(&self, window: usize) -> Option<f64> {
        let n = self.records.len().min(window);
        if n == 0 {
            return None;
        }
        let tail = &self.records[self.records.len() - n..];
        Some(tail.iter().map(|r| r.call_ratio).sum::<f64>() / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    MissingCallHelp,
    MultipleCallHelp,
    NoDeviceAction,
    TooFewActions,
    InconsistentFeatureDim { expected: usize, found: usize },
    NonFiniteFeature,
    DuplicateId,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::MissingCallHelp => write!(f, "missing CallHelp"),
            ViolationKind::MultipleCallHelp => write!(f, "multiple CallHelp"),
            ViolationKind::NoDeviceAction => write!(f, "no device action"),
            ViolationKind::TooFewActions => write!(f, "fewer than two actions"),
            ViolationKind::InconsistentFeatureDim { expected, found } => {
                write!(f, "inconsistent feature dim (expected {expected}, found {found})")
            }
            ViolationKind::NonFiniteFeature => write!(f, "non-finite feature"),
            ViolationKind::DuplicateId => write!(f, "duplicate id"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub prompt_id: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "prompt {}: {}", v.prompt_id, v.kind)?;
        }
        Ok(())
    }
}

/// Checks every prompt invariant. Feature dimension is compared to the first
/// prompt.
pub fn validate_dataset(prompts: &[Prompt]) -> Result<ValidationReport> {
    let first = prompts.first().ok_or(Error::EmptyDataset)?;
    let dim = first.features.len();
    let mut report = ValidationReport::default();
    let mut seen = HashSet::with_capacity(prompts.len());
    for p in prompts {
        let mut flag = |kind| report.violations.push(Violation { prompt_id: p.id, kind });
        if !seen.insert(p.id) {
            flag(ViolationKind::DuplicateId);
        }
        let helps = p.action_table.iter().filter(|a| a.kind == ActionKind::CallHelp).count();
        match helps {
            0 => flag(ViolationKind::MissingCallHelp),
            1 => {}
            _ => flag(ViolationKind::MultipleCallHelp),
        }
        if p.action_table.len() == helps {
            flag(ViolationKind::NoDeviceAction);
        }
        if p.action_table.len() < 2 {
            flag(ViolationKind::TooFewActions);
        }
        if p.features.len() != dim {
            flag(ViolationKind::InconsistentFeatureDim {
                expected: dim,
                found: p.features.len(),
            });
        }
        if p.features.iter().any(|x| !x.is_finite()) {
            flag(ViolationKind::NonFiniteFeature);
        }
    }
    Ok(report)
}

pub fn write_dataset(path: &Path, prompts: &[Prompt]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut out, prompts)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(out: &mut W, prompts: &[Prompt]) -> Result<()> {
    for p in prompts {
        serde_json::to_writer(&mut *out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Prompt>> {
    let file = File::open(path)?;
    read_dataset_from(BufReader::new(file))
}

pub fn read_dataset_from<R: BufRead>(input: R) -> Result<Vec<Prompt>> {
    let mut prompts = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let prompt =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("dataset line {}", lineno + 1), e))?;
        prompts.push(prompt);
    }
    Ok(prompts)
}
