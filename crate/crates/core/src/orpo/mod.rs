//! Listwise preference alignment: odds-ratio preference optimization over
//! whole slates, with three negative-construction strategies (permute,
//! replace-with-disliked, anchor-repeat).

pub mod pairs;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::crqvae::SemanticID;
use crate::error::{HigrError, Result};
use crate::formats::PairRecord;
use crate::hsd::{slate_logits, HsdModel, SlateSample, UserContext};
use crate::tensor::{Scalar, Tape, Var};

/// Probability clamp bound for the per-token log-odds.
pub const ODDS_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Permute,
    ReplaceNegative,
    AnchorRepeat,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Permute => "permute",
            Strategy::ReplaceNegative => "replace_negative",
            Strategy::AnchorRepeat => "anchor_repeat",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "permute" => Ok(Strategy::Permute),
            "replace_negative" => Ok(Strategy::ReplaceNegative),
            "anchor_repeat" => Ok(Strategy::AnchorRepeat),
            other => Err(HigrError::Data(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreferencePair {
    pub context: UserContext,
    pub y_plus: Vec<SemanticID>,
    pub y_minus: Vec<SemanticID>,
    pub strategy: Strategy,
}

impl PreferencePair {
    pub fn to_record(&self, context_ref: usize) -> PairRecord {
        PairRecord {
            context_ref,
            y_plus: self.y_plus.iter().map(|s| s.codes.clone()).collect(),
            y_minus: self.y_minus.iter().map(|s| s.codes.clone()).collect(),
            strategy: self.strategy.name().to_string(),
        }
    }
}

/// Alignment hyperparameters. `mix` is (permute, replace, anchor-repeat).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub alpha: f32,
    pub mix: [f32; 3],
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            alpha: 0.1,
            mix: [0.4, 0.3, 0.3],
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(HigrError::Config("align: alpha must be >= 0".into()));
        }
        let s: f32 = self.mix.iter().sum();
        if self.mix.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-6 {
            return Err(HigrError::Config(format!(
                "align: strategy mix must be non-negative and sum to 1, got {:?}",
                self.mix
            )));
        }
        Ok(())
    }
}

fn sample_from(context: &UserContext, slate: &[SemanticID]) -> SlateSample {
    SlateSample {
        context: context.clone(),
        slate: slate.to_vec(),
        feedback: vec![0.0; slate.len()],
        effective_view: vec![false; slate.len()],
        slate_item_ids: Vec::new(),
        disliked: Vec::new(),
    }
}

/// Per-token log-odds vector `[M·D]` and teacher-forced logits for one
/// slate. π is the softmax probability of each true token, clamped to
/// `[ε, 1−ε]`; the log-odds is `log(π/(1−π))`.
pub fn token_log_odds<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    context: &UserContext,
    y: &[SemanticID],
) -> Result<(Var, Var)> {
    let sample = sample_from(context, y);
    let (logits, targets) = slate_logits(tape, vars, model, &sample)?;
    let lps = tape.target_log_probs(logits, &targets)?;
    let pi = tape.clamp(
        tape.exp(lps)?,
        F::from_f64(ODDS_EPS),
        F::from_f64(1.0 - ODDS_EPS),
    )?;
    let one_minus = tape.add_scalar(tape.neg(pi)?, F::one())?;
    let odds = tape.sub(tape.ln(pi)?, tape.ln(one_minus)?)?;
    Ok((odds, logits))
}

/// Log-odds of token `t` (1-based over the M·D positions).
pub fn per_step_log_odds<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    context: &UserContext,
    y: &[SemanticID],
    t: usize,
) -> Result<Var> {
    let n = model.cfg.slate_size * model.cfg.depth;
    if t < 1 || t > n {
        return Err(HigrError::Index(format!(
            "per_step_log_odds: t {t} out of [1, {n}]"
        )));
    }
    let (odds, _) = token_log_odds(tape, vars, model, context, y)?;
    let mut mask = vec![F::zero(); n];
    mask[t - 1] = F::one();
    let mv = tape.constant(mask, vec![n])?;
    tape.dot(odds, mv)
}

/// Slate-level log-odds: sum over all M·D token positions.
pub fn slate_log_odds<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    context: &UserContext,
    y: &[SemanticID],
) -> Result<Var> {
    let (odds, _) = token_log_odds(tape, vars, model, context, y)?;
    tape.sum(odds)
}

pub struct OrpoParts {
    pub total: Var,
    pub nll_plus: Var,
    pub z_plus: Var,
    pub z_minus: Var,
    /// The odds-ratio term −log σ(z⁺ − z⁻), before scaling by α.
    pub penalty: Var,
}

/// Combined objective: teacher-forced NLL of the positive slate plus
/// α · (−log σ(z⁺ − z⁻)). Exactly two policy forwards, no reference model.
pub fn orpo_loss<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    pair: &PreferencePair,
    alpha: F,
) -> Result<OrpoParts> {
    let (odds_plus, logits_plus) =
        token_log_odds(tape, vars, model, &pair.context, &pair.y_plus)?;
    let targets: Vec<usize> = pair
        .y_plus
        .iter()
        .flat_map(|s| s.codes.iter().copied())
        .collect();
    let n = targets.len();
    let nll_plus = tape.scale(
        tape.softmax_ce(logits_plus, &targets)?,
        F::from_f64(n as f64),
    )?;
    let z_plus = tape.sum(odds_plus)?;
    let z_minus = slate_log_odds(tape, vars, model, &pair.context, &pair.y_minus)?;
    let margin = tape.sub(z_plus, z_minus)?;
    let penalty = tape.neg(tape.log_sigmoid(margin)?)?;
    let total = tape.add(nll_plus, tape.scale(penalty, alpha)?)?;
    Ok(OrpoParts {
        total,
        nll_plus,
        z_plus,
        z_minus,
        penalty,
    })
}

/// Mean ORPO loss over a batch of pairs.
pub fn orpo_batch_loss<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    pairs: &[&PreferencePair],
    alpha: F,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(HigrError::Contract("orpo_batch_loss: empty batch".into()));
    }
    let mut total = tape.scalar(F::zero())?;
    for p in pairs {
        total = tape.add(total, orpo_loss(tape, vars, model, p, alpha)?.total)?;
    }
    tape.scale(total, F::one() / F::from_f64(pairs.len() as f64))
}

#[cfg(test)]
mod tests;
