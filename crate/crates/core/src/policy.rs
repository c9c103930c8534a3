//! Differentiable categorical device policies.
//!
//! Two parameterizations share one flat storage type:
//!
//! * `Tabular`: an independent logit per `(prompt id, action position)`.
//!   `rows` = number of prompt ids, `cols` = widest action table.
//! * `LinearSoftmax`: `logit_j = W[row(j)] . features + bias[kind(j)]`.
//!   Device actions at table position `j` use row `j`; the help action always
//!   uses the last row. `rows` = widest table, `cols` = feature dimension,
//!   followed by two kind biases (device, help).
//!
//! Gradients are returned with the same shape as the parameters.
//!
//! Checkpoint format (text, one item per line):
//!
//! ```text
//! policy-checkpoint 1
//! variant linear-softmax
//! shape <rows> <cols> <extra>
//! <value>
//! ...
//! ```
//! Values are printed in shortest round-trip form, so loading is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ActionKind, GroupSample, Prompt};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Tabular,
    LinearSoftmax,
}

impl PolicyKind {
    fn tag(self) -> &'static str {
        match self {
            PolicyKind::Tabular => "tabular",
            PolicyKind::LinearSoftmax => "linear-softmax",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tabular" => Some(PolicyKind::Tabular),
            "linear-softmax" => Some(PolicyKind::LinearSoftmax),
            _ => None,
        }
    }
}

/// Which actions the softmax ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActionMask {
    #[default]
    All,
    /// The help action is removed from the support.
    DeviceOnly,
}

impl ActionMask {
    fn allows(self, kind: ActionKind) -> bool {
        match self {
            ActionMask::All => true,
            ActionMask::DeviceOnly => kind == ActionKind::DeviceAnswer,
        }
    }
}

const BIAS_DEVICE: usize = 0;
const BIAS_HELP: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    kind: PolicyKind,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn tabular(n_prompts: usize, max_actions: usize) -> Self {
        PolicyParams {
            kind: PolicyKind::Tabular,
            rows: n_prompts,
            cols: max_actions,
            values: vec![0.0; n_prompts * max_actions],
        }
    }

    pub fn linear(max_actions: usize, feature_dim: usize) -> Self {
        PolicyParams {
            kind: PolicyKind::LinearSoftmax,
            rows: max_actions,
            cols: feature_dim,
            values: vec![0.0; max_actions * feature_dim + 2],
        }
    }

    /// Zero-initialised (uniform) policy sized to cover `prompts`.
    pub fn for_dataset(kind: PolicyKind, prompts: &[Prompt]) -> Result<Self> {
        let first = prompts.first().ok_or(Error::EmptyDataset)?;
        let max_actions = prompts.iter().map(Prompt::num_actions).max().unwrap_or(0);
        Ok(match kind {
            PolicyKind::Tabular => {
                let n = prompts.iter().map(|p| p.id).max().unwrap_or(0) + 1;
                PolicyParams::tabular(n, max_actions)
            }
            PolicyKind::LinearSoftmax => PolicyParams::linear(max_actions, first.features.len()),
        })
    }

    pub fn from_values(kind: PolicyKind, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let expected = rows * cols + if kind == PolicyKind::LinearSoftmax { 2 } else { 0 };
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} params of shape {rows}x{cols} need {expected} values, got {}",
                kind.tag(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("policy", "parameters must be finite"));
        }
        Ok(PolicyParams {
            kind,
            rows,
            cols,
            values,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &PolicyParams) -> Result<()> {
        if self.kind != other.kind || self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "{} {}x{} vs {} {}x{}",
                self.kind.tag(),
                self.rows,
                self.cols,
                other.kind.tag(),
                other.rows,
                other.cols
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn dot(&self, other: &PolicyParams) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &PolicyParams) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Help-kind bias of a linear policy.
    pub fn help_bias(&self) -> Option<f64> {
        match self.kind {
            PolicyKind::LinearSoftmax => Some(self.values[self.rows * self.cols + BIAS_HELP]),
            PolicyKind::Tabular => None,
        }
    }

    fn linear_row(&self, prompt: &Prompt, position: usize, kind: ActionKind) -> Result<usize> {
        match kind {
            ActionKind::CallHelp => Ok(self.rows - 1),
            ActionKind::DeviceAnswer if position + 1 < self.rows => Ok(position),
            ActionKind::DeviceAnswer => Err(Error::DimensionMismatch(format!(
                "prompt {} has a device action at position {position} but the policy has {} device rows",
                prompt.id,
                self.rows.saturating_sub(1)
            ))),
        }
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        match self.kind {
            PolicyKind::Tabular => {
                if prompt.id >= self.rows {
                    return Err(Error::DimensionMismatch(format!(
                        "prompt id {} outside tabular policy with {} rows",
                        prompt.id, self.rows
                    )));
                }
                if prompt.num_actions() > self.cols {
                    return Err(Error::DimensionMismatch(format!(
                        "prompt {} has {} actions, tabular policy has {} columns",
                        prompt.id,
                        prompt.num_actions(),
                        self.cols
                    )));
                }
            }
            PolicyKind::LinearSoftmax => {
                if prompt.features.len() != self.cols {
                    return Err(Error::DimensionMismatch(format!(
                        "prompt {} has {} features, policy expects {}",
                        prompt.id,
                        prompt.features.len(),
                        self.cols
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        match self.kind {
            PolicyKind::Tabular => {
                let start = prompt.id * self.cols;
                Ok(self.values[start..start + prompt.num_actions()].to_vec())
            }
            PolicyKind::LinearSoftmax => {
                let bias = &self.values[self.rows * self.cols..];
                prompt
                    .action_table
                    .iter()
                    .enumerate()
                    .map(|(j, spec)| {
                        let row = self.linear_row(prompt, j, spec.kind)?;
                        let w = &self.values[row * self.cols..(row + 1) * self.cols];
                        let dot: f64 = w.iter().zip(&prompt.features).map(|(a, b)| a * b).sum();
                        let b = match spec.kind {
                            ActionKind::DeviceAnswer => bias[BIAS_DEVICE],
                            ActionKind::CallHelp => bias[BIAS_HELP],
                        };
                        Ok(dot + b)
                    })
                    .collect()
            }
        }
    }

    /// Log-probabilities over the prompt's table; masked actions get `-inf`.
    pub fn log_probs_masked(&self, prompt: &Prompt, mask: ActionMask) -> Result<Vec<f64>> {
        let logits = self.logits(prompt)?;
        let active = |j: usize| mask.allows(prompt.action_table[j].kind);
        let max = (0..logits.len())
            .filter(|&j| active(j))
            .map(|j| logits[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..logits.len())
            .filter(|&j| active(j))
            .map(|j| (logits[j] - max).exp())
            .sum();
        let log_norm = max + sum.ln();
        Ok((0..logits.len())
            .map(|j| {
                if active(j) {
                    logits[j] - log_norm
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }

    pub fn probs_masked(&self, prompt: &Prompt, mask: ActionMask) -> Result<Vec<f64>> {
        Ok(self.log_probs_masked(prompt, mask)?.into_iter().map(f64::exp).collect())
    }

    pub fn probs(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.probs_masked(prompt, ActionMask::All)
    }

    pub fn log_prob(&self, prompt: &Prompt, action_index: usize) -> Result<f64> {
        prompt.action(action_index)?;
        Ok(self.log_probs_masked(prompt, ActionMask::All)?[action_index])
    }

    /// Adds `sum_j coeffs[j] * d logit_j / d theta` into `out`.
    pub fn accumulate_logit_weighted(&self, prompt: &Prompt, coeffs: &[f64], out: &mut PolicyParams) -> Result<()> {
        self.check_same_shape(out)?;
        self.check_prompt(prompt)?;
        if coeffs.len() != prompt.num_actions() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} actions",
                coeffs.len(),
                prompt.num_actions()
            )));
        }
        match self.kind {
            PolicyKind::Tabular => {
                let start = prompt.id * self.cols;
                for (slot, c) in out.values[start..start + coeffs.len()].iter_mut().zip(coeffs) {
                    *slot += c;
                }
            }
            PolicyKind::LinearSoftmax => {
                let bias_start = self.rows * self.cols;
                for (j, (&c, spec)) in coeffs.iter().zip(&prompt.action_table).enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let row = self.linear_row(prompt, j, spec.kind)?;
                    let w = &mut out.values[row * self.cols..(row + 1) * self.cols];
                    for (slot, x) in w.iter_mut().zip(&prompt.features) {
                        *slot += c * x;
                    }
                    let b = match spec.kind {
                        ActionKind::DeviceAnswer => BIAS_DEVICE,
                        ActionKind::CallHelp => BIAS_HELP,
                    };
                    out.values[bias_start + b] += c;
                }
            }
        }
        Ok(())
    }

    /// Adds `scale * grad log pi(action | prompt)` into `out`.
    pub fn accumulate_grad_log_prob(
        &self,
        prompt: &Prompt,
        action_index: usize,
        mask: ActionMask,
        scale: f64,
        out: &mut PolicyParams,
    ) -> Result<()> {
        let spec = prompt.action(action_index)?;
        if !mask.allows(spec.kind) {
            return Err(Error::MaskedAction {
                prompt_id: prompt.id,
                index: action_index,
            });
        }
        let probs = self.probs_masked(prompt, mask)?;
        let coeffs: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, p)| scale * (f64::from(u8::from(j == action_index)) - p))
            .collect();
        self.accumulate_logit_weighted(prompt, &coeffs, out)
    }

    pub fn grad_log_prob_masked(&self, prompt: &Prompt, action_index: usize, mask: ActionMask) -> Result<PolicyParams> {
        let mut out = self.zeros_like();
        self.accumulate_grad_log_prob(prompt, action_index, mask, 1.0, &mut out)?;
        Ok(out)
    }

    pub fn grad_log_prob(&self, prompt: &Prompt, action_index: usize) -> Result<PolicyParams> {
        self.grad_log_prob_masked(prompt, action_index, ActionMask::All)
    }

    /// Draws `group_size` i.i.d. actions. The returned group is unscored.
    pub fn sample_group_masked<R: Rng + ?Sized>(
        &self,
        prompt: &Prompt,
        group_size: usize,
        mask: ActionMask,
        rng: &mut R,
    ) -> Result<GroupSample> {
        if group_size < 2 {
            return Err(Error::GroupTooSmall(group_size));
        }
        let probs = self.probs_masked(prompt, mask)?;
        let actions: Vec<usize> = (0..group_size).map(|_| sample_categorical(&probs, rng)).collect();
        GroupSample::from_actions(prompt, &actions)
    }

    pub fn sample_group<R: Rng + ?Sized>(
        &self,
        prompt: &Prompt,
        group_size: usize,
        rng: &mut R,
    ) -> Result<GroupSample> {
        self.sample_group_masked(prompt, group_size, ActionMask::All, rng)
    }

    /// Argmax action under the mask; ties go to the lowest position.
    pub fn greedy(&self, prompt: &Prompt, mask: ActionMask) -> Result<usize> {
        let logits = self.logits(prompt)?;
        let mut best: Option<usize> = None;
        for (j, spec) in prompt.action_table.iter().enumerate() {
            if !mask.allows(spec.kind) {
                continue;
            }
            if best.is_none_or(|b| logits[j] > logits[b]) {
                best = Some(j);
            }
        }
        best.ok_or_else(|| Error::config("mask", format!("no action of prompt {} is allowed", prompt.id)))
    }

    pub fn to_checkpoint_string(&self) -> String {
        let extra = self.values.len() - self.rows * self.cols;
        let mut s = String::with_capacity(self.values.len() * 20 + 64);
        s.push_str("policy-checkpoint 1\n");
        let _ = writeln!(s, "variant {}", self.kind.tag());
        let _ = writeln!(s, "shape {} {} {}", self.rows, self.cols, extra);
        for v in &self.values {
            let _ = writeln!(s, "{v:?}");
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::parse("policy checkpoint", reason);
        let mut lines = text.lines();
        if lines.next() != Some("policy-checkpoint 1") {
            return Err(bad("missing `policy-checkpoint 1` header"));
        }
        let kind = lines
            .next()
            .and_then(|l| l.strip_prefix("variant "))
            .and_then(PolicyKind::from_tag)
            .ok_or_else(|| bad("missing or unknown variant"))?;
        let shape: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("shape "))
            .ok_or_else(|| bad("missing shape line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("shape entries must be integers")))
            .collect::<Result<_>>()?;
        let [rows, cols, extra] = shape[..] else {
            return Err(bad("shape line needs three entries"));
        };
        let values: Vec<f64> = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.trim().parse().map_err(|_| bad("value is not a float")))
            .collect::<Result<_>>()?;
        if values.len() != rows * cols + extra {
            return Err(bad("value count does not match the shape header"));
        }
        PolicyParams::from_values(kind, rows, cols, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        PolicyParams::from_checkpoint_str(&fs::read_to_string(path)?)
    }
}

/// Inverse-CDF draw; falls back to the last positive-probability index when
/// rounding leaves the cumulative sum just below the uniform draw.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
