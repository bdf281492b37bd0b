//! CRQ-VAE training: k-means codebook warmup, Adam updates, dead-codeword
//! reseeding, deterministic batch sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    crqvae_batch_loss, mine_pairs, residual_quantize, CrqConfig, CrqLossParts, CrqModel,
    ItemEmbedding, SemanticID,
};
use crate::error::{HigrError, Result};
use crate::optim::Adam;
use crate::tensor::Tape;

const DEAD_CODE_STEPS: usize = 200;
const KMEANS_ITERS: usize = 10;
const WARMUP_LIMIT: usize = 512;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrqTrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for CrqTrainOpts {
    fn default() -> Self {
        CrqTrainOpts {
            steps: 1000,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrqTrainLog {
    pub step: usize,
    pub parts: CrqLossParts,
}

/// Lloyd's k-means; empty clusters keep their previous centroid.
fn kmeans(points: &[Vec<f32>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let dim = points[0].len();
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.shuffle(rng);
    let mut centroids: Vec<Vec<f32>> = (0..k)
        .map(|i| points[idx[i % idx.len()]].clone())
        .collect();
    for _ in 0..KMEANS_ITERS {
        let mut sums = vec![vec![0.0f32; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let mut best = 0;
            let mut best_dist = f32::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d: f32 = p.iter().zip(cent).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if d < best_dist {
                    best_dist = d;
                    best = c;
                }
            }
            counts[best] += 1;
            for (s, &v) in sums[best].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c][j] = sums[c][j] / counts[c] as f32;
                }
            }
        }
    }
    centroids
}

/// Initialize each layer's codebook by k-means over that layer's residual
/// distribution on a warmup subset, peeling residuals greedily.
fn warmup_codebooks(model: &mut CrqModel, corpus: &[ItemEmbedding], rng: &mut ChaCha8Rng) -> Result<()> {
    let take = corpus.len().min(WARMUP_LIMIT);
    let mut residuals: Vec<Vec<f32>> = corpus[..take]
        .iter()
        .map(|it| model.encode_f32(&it.x))
        .collect::<Result<_>>()?;
    let (k, d_z, depth) = (model.cfg.codebook_size, model.cfg.d_z, model.cfg.depth);
    for d in 0..depth {
        let centroids = kmeans(&residuals, k, rng);
        let table = model.params.get_mut(model.layout.codebooks[d]);
        for (c, cent) in centroids.iter().enumerate() {
            table.data[c * d_z..(c + 1) * d_z].copy_from_slice(cent);
        }
        // peel: subtract the nearest centroid from each residual
        for r in residuals.iter_mut() {
            let mut best = 0;
            let mut best_dist = f32::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let dist: f32 = r.iter().zip(cent).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            for (rv, &cv) in r.iter_mut().zip(&centroids[best]) {
                *rv -= cv;
            }
        }
    }
    Ok(())
}

/// Train a CRQ-VAE on the corpus. Deterministic given `opts.seed`.
pub fn train_crq(
    corpus: &[ItemEmbedding],
    cfg: CrqConfig,
    opts: &CrqTrainOpts,
) -> Result<(CrqModel, Vec<CrqTrainLog>)> {
    if corpus.len() < 2 {
        return Err(HigrError::Data("train_crq: corpus must have >= 2 items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = CrqModel::init(cfg, &mut rng)?;
    warmup_codebooks(&mut model, corpus, &mut rng)?;

    // global anchor→positives adjacency, best-cosine first
    let pairs = mine_pairs(corpus, model.cfg.positive_threshold);
    let mut positives: Vec<Vec<usize>> = vec![Vec::new(); corpus.len()];
    for &(a, p) in &pairs {
        positives[a].push(p);
    }

    let mut opt = Adam::new(&model.params, opts.lr, opts.weight_decay);
    let mut last_used = vec![vec![0usize; model.cfg.codebook_size]; model.cfg.depth];
    let mut logs = Vec::new();

    for step in 0..opts.steps {
        let batch: Vec<usize> = (0..opts.batch_size)
            .map(|_| rng.gen_range(0..corpus.len()))
            .collect();
        // in-batch anchor/positive edges: a randomly chosen positive heads
        // each anchor's list (it forms the contrastive group); the rest are
        // listed so the loss keeps them out of the negative pool
        let mut in_batch: Vec<(usize, usize)> = Vec::new();
        for (bi, &item) in batch.iter().enumerate() {
            let cands: Vec<usize> = batch
                .iter()
                .enumerate()
                .filter(|&(bp, &other)| {
                    bp != bi && (other == item || positives[item].contains(&other))
                })
                .map(|(bp, _)| bp)
                .collect();
            if cands.is_empty() {
                continue;
            }
            let head = cands[rng.gen_range(0..cands.len())];
            in_batch.push((bi, head));
            in_batch.extend(cands.into_iter().filter(|&bp| bp != head).map(|bp| (bi, bp)));
        }

        let tape: Tape<f32> = Tape::new();
        let bound = model.params.bind(&tape)?;
        let xs: Vec<Vec<f32>> = batch.iter().map(|&i| corpus[i].x.clone()).collect();
        let loss = crqvae_batch_loss(&tape, &bound, &model.layout, &model.cfg, &xs, &in_batch)?;
        let parts = loss.parts(&tape);
        let grads = tape.backward(loss.total)?;
        opt.step(&mut model.params, &bound, &grads);

        for sid in &loss.codes {
            for (d, &c) in sid.codes.iter().enumerate() {
                last_used[d][c] = step;
            }
        }
        reseed_dead_codewords(&mut model, &loss.latents, &mut last_used, step, &mut rng);

        if step % opts.log_every == 0 || step + 1 == opts.steps {
            logs.push(CrqTrainLog { step, parts });
        }
    }
    Ok((model, logs))
}

/// Codewords unused for `DEAD_CODE_STEPS` steps are reseeded to the
/// layer-input residual of a random batch item.
fn reseed_dead_codewords(
    model: &mut CrqModel,
    batch_latents: &[Vec<f32>],
    last_used: &mut [Vec<usize>],
    step: usize,
    rng: &mut ChaCha8Rng,
) {
    if step < DEAD_CODE_STEPS || batch_latents.is_empty() {
        return;
    }
    let d_z = model.cfg.d_z;
    for d in 0..model.cfg.depth {
        for c in 0..model.cfg.codebook_size {
            if step - last_used[d][c] > DEAD_CODE_STEPS {
                let z = &batch_latents[rng.gen_range(0..batch_latents.len())];
                let trace = residual_quantize(z, &model.codebook());
                let target = trace.residuals[d].clone();
                let table = model.params.get_mut(model.layout.codebooks[d]);
                table.data[c * d_z..(c + 1) * d_z].copy_from_slice(&target);
                last_used[d][c] = step;
            }
        }
    }
}

/// Tokenize the whole corpus with a frozen model.
pub fn assign_sids(model: &CrqModel, corpus: &[ItemEmbedding]) -> Result<Vec<SemanticID>> {
    corpus.iter().map(|it| model.assign_sid(&it.x)).collect()
}
