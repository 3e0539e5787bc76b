//! Per-step objectives over recursion steps, including the monotonic
//! recursion loss.
//!
//! A token whose cross-entropy at step `r` rises above its step `r - 1` value
//! has its step-`r` loss multiplied by `beta`. The previous-step losses and the
//! comparison are constants: no gradient flows through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    FinalStepOnly,
    EachStep,
    Monotonic,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_step_only" => Ok(LossVariant::FinalStepOnly),
            "each_step" => Ok(LossVariant::EachStep),
            "monotonic" => Ok(LossVariant::Monotonic),
            other => Err(Error::Config(format!(
                "unknown loss variant `{other}` (expected final_step_only, each_step or monotonic)"
            ))),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::FinalStepOnly => "final_step_only",
            LossVariant::EachStep => "each_step",
            LossVariant::Monotonic => "monotonic",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::Monotonic,
            beta: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 1.0 {
            return Err(Error::Config(format!("loss.beta must be >= 1, got {}", self.beta)));
        }
        if self.variant == LossVariant::Monotonic && self.beta == 1.0 {
            log::warn!("monotonic loss with beta = 1 is identical to each_step");
        }
        Ok(())
    }
}

/// Per-step summary of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Masked mean raw cross-entropy of every step.
    pub per_step_raw: Vec<f64>,
    /// Masked mean of the step's term before variant selection: raw for step
    /// 1, penalised for later steps under the monotonic variant.
    pub per_step_adjusted: Vec<f64>,
    pub total: f64,
    /// Share of masked tokens whose loss rose versus the previous step; 0 for
    /// step 1.
    pub degraded_fraction: Vec<f64>,
    /// Whether each step contributes to `total`.
    pub step_in_objective: Vec<bool>,
}

/// `beta * cur` where `cur > prev` (strictly), else `cur`.
pub fn monotonic_adjust(cur: &[f64], prev: &[f64], beta: f64) -> Result<Vec<f64>> {
    if cur.len() != prev.len() {
        return Err(Error::shape("monotonic_adjust", &[cur.len()], &[prev.len()]));
    }
    Ok(cur
        .iter()
        .zip(prev)
        .map(|(&c, &p)| if c > p { beta * c } else { c })
        .collect())
}

/// Per-token weights such that `sum_i w_i * loss_i^(r)` is step `r`'s
/// contribution to the total, together with the breakdown.
///
/// Weights are `mask_i / N` times `beta` where the penalty fires; steps that
/// do not enter the objective get all-zero weights.
pub fn loss_weights(
    step_losses: &[Vec<f64>],
    mask: &[bool],
    config: &LossConfig,
) -> Result<(Vec<Vec<f64>>, LossBreakdown)> {
    config.validate()?;
    let steps = step_losses.len();
    if steps == 0 {
        return Err(Error::InvalidArgument("loss needs at least one recursion step".into()));
    }
    for l in step_losses {
        if l.len() != mask.len() {
            return Err(Error::shape("total_loss", &[l.len()], &[mask.len()]));
        }
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / n as f64;
    let masked_mean = |v: &[f64]| {
        v.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x)
            .sum::<f64>()
            * inv_n
    };

    let mut breakdown = LossBreakdown::default();
    let mut weights = Vec::with_capacity(steps);
    for (r, cur) in step_losses.iter().enumerate() {
        let in_objective = match config.variant {
            LossVariant::FinalStepOnly => r + 1 == steps,
            LossVariant::EachStep | LossVariant::Monotonic => true,
        };
        let mut w: Vec<f64> = mask.iter().map(|&m| if m { inv_n } else { 0.0 }).collect();
        let mut degraded = 0usize;
        if r > 0 {
            let prev = &step_losses[r - 1];
            for i in 0..mask.len() {
                if mask[i] && cur[i] > prev[i] {
                    degraded += 1;
                    if config.variant == LossVariant::Monotonic {
                        w[i] *= config.beta;
                    }
                }
            }
        }
        let adjusted: f64 = w.iter().zip(cur).map(|(w, c)| w * c).sum();
        breakdown.per_step_raw.push(masked_mean(cur));
        breakdown.per_step_adjusted.push(adjusted);
        breakdown.degraded_fraction.push(degraded as f64 * inv_n);
        breakdown.step_in_objective.push(in_objective);
        if in_objective {
            breakdown.total += adjusted;
        } else {
            w.iter_mut().for_each(|x| *x = 0.0);
        }
        weights.push(w);
    }
    Ok((weights, breakdown))
}

/// Value-only objective over per-step token losses.
pub fn total_loss(
    step_losses: &[Vec<f64>],
    mask: &[bool],
    config: &LossConfig,
) -> Result<(f64, LossBreakdown)> {
    let (_, breakdown) = loss_weights(step_losses, mask, config)?;
    Ok((breakdown.total, breakdown))
}

/// Records the objective on the tape from each step's `(N)` token-loss node.
///
/// Weights are computed from the current loss values and enter the tape as
/// constants, so the previous step and the comparison carry no gradient.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    token_losses: &[Var],
    mask: &[bool],
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let values: Vec<Vec<f64>> = token_losses.iter().map(|&v| tape.value(v).to_f64_vec()).collect();
    let (weights, breakdown) = loss_weights(&values, mask, config)?;
    let mut total: Option<Var> = None;
    for ((&v, w), &used) in token_losses.iter().zip(&weights).zip(&breakdown.step_in_objective) {
        if !used {
            continue;
        }
        let w: Vec<T> = w.iter().map(|&x| T::of(x)).collect();
        let term = tape.weighted_sum(v, &w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one step is in every objective");
    if !tape.value(total).is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok((total, breakdown))
}
