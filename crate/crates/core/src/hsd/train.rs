//! Teacher-forced pretraining of the slate decoder (hierarchical or flat).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{slate_nll_batch, HsdModel, ModelConfig, SlateSample};
use crate::error::{HigrError, Result};
use crate::optim::Adam;
use crate::tensor::Tape;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        PretrainOpts {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    /// Batch-mean slate NLL (summed over the M·D positions of each slate).
    pub loss: f64,
}

/// Train a fresh decoder on teacher-forced slate NLL with Adam.
pub fn pretrain(
    samples: &[SlateSample],
    cfg: ModelConfig,
    opts: &PretrainOpts,
) -> Result<(HsdModel, Vec<PretrainLog>)> {
    if samples.is_empty() {
        return Err(HigrError::Data("pretrain: no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = HsdModel::init(cfg, &mut rng)?;
    let logs = pretrain_existing(&mut model, samples, opts, &mut rng)?;
    Ok((model, logs))
}

/// Continue training an existing model in place (model sizes fixed).
pub fn pretrain_existing(
    model: &mut HsdModel,
    samples: &[SlateSample],
    opts: &PretrainOpts,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PretrainLog>> {
    let mut opt = Adam::new(&model.params, opts.lr, opts.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::new();
    let mut cursor = 0usize;
    order.shuffle(rng);
    for step in 0..opts.steps {
        let bsz = opts.batch_size.min(samples.len());
        if cursor + bsz > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let batch: Vec<&SlateSample> = order[cursor..cursor + bsz]
            .iter()
            .map(|&i| &samples[i])
            .collect();
        cursor += bsz;
        let tape: Tape<f32> = Tape::new();
        let vars = model.params.bind(&tape)?;
        let loss = slate_nll_batch(&tape, &vars, model, &batch)?;
        let grads = tape.backward(loss)?;
        opt.step(&mut model.params, &vars, &grads);
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            logs.push(PretrainLog {
                step,
                loss: tape.scalar_value(loss) as f64,
            });
        }
    }
    Ok(logs)
}
