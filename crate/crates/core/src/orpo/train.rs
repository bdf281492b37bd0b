//! Alignment loop: Adam on the mean pair objective, with margin logging.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{orpo_batch_loss, slate_log_odds, AlignConfig, PreferencePair};
use crate::error::{HigrError, Result};
use crate::hsd::HsdModel;
use crate::optim::Adam;
use crate::tensor::Tape;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for AlignOpts {
    fn default() -> Self {
        AlignOpts {
            steps: 200,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignLog {
    pub step: usize,
    pub loss: f64,
}

/// Mean slate-level log-odds margin z(y⁺) − z(y⁻) over pairs (evaluation
/// only, no gradients kept).
pub fn mean_margin(model: &HsdModel, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(HigrError::Contract("mean_margin: no pairs".into()));
    }
    let mut total = 0.0f64;
    for p in pairs {
        let tape: Tape<f32> = Tape::new();
        let vars = model.params.bind(&tape)?;
        let zp = slate_log_odds(&tape, &vars, model, &p.context, &p.y_plus)?;
        let zm = slate_log_odds(&tape, &vars, model, &p.context, &p.y_minus)?;
        total += (tape.scalar_value(zp) - tape.scalar_value(zm)) as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Align a pretrained model in place on a pair dataset.
pub fn align(
    model: &mut HsdModel,
    pairs: &[PreferencePair],
    cfg: &AlignConfig,
    opts: &AlignOpts,
) -> Result<Vec<AlignLog>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(HigrError::Data("align: no pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(&model.params, opts.lr, opts.weight_decay);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut logs = Vec::new();
    for step in 0..opts.steps {
        let bsz = opts.batch_size.min(pairs.len());
        if cursor + bsz > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&PreferencePair> = order[cursor..cursor + bsz]
            .iter()
            .map(|&i| &pairs[i])
            .collect();
        cursor += bsz;
        let tape: Tape<f32> = Tape::new();
        let vars = model.params.bind(&tape)?;
        let loss = orpo_batch_loss(&tape, &vars, model, &batch, cfg.alpha)?;
        let grads = tape.backward(loss)?;
        opt.step(&mut model.params, &vars, &grads);
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            logs.push(AlignLog {
                step,
                loss: tape.scalar_value(loss) as f64,
            });
        }
    }
    Ok(logs)
}
