//! Preference-pair construction: feedback-ranked positives and three
//! negative strategies sampled per a configurable mix.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AlignConfig, PreferencePair, Strategy};
use crate::crqvae::SemanticID;
use crate::error::{HigrError, Result};
use crate::hsd::{HsdModel, SlateSample};

const PERMUTE_RETRIES: usize = 64;

/// Positive slate: exposure slate reranked by feedback, descending.
/// Stable: ties keep exposure order.
pub fn build_positive(sample: &SlateSample) -> Vec<SemanticID> {
    let mut order: Vec<usize> = (0..sample.slate.len()).collect();
    order.sort_by(|&a, &b| {
        sample.feedback[b]
            .partial_cmp(&sample.feedback[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.into_iter().map(|i| sample.slate[i].clone()).collect()
}

/// Cosine similarity of SID-embedding sums under the frozen model tables.
fn sid_cosine(model: &HsdModel, a: &SemanticID, b: &SemanticID) -> f64 {
    let d = model.cfg.d_model;
    let sum = |sid: &SemanticID| -> Vec<f64> {
        let mut out = vec![0.0f64; d];
        for (l, &c) in sid.codes.iter().enumerate() {
            let t = model.params.get(model.layout.sid_emb[l]);
            for j in 0..d {
                out[j] += t.data[c * d + j] as f64;
            }
        }
        out
    };
    let (va, vb) = (sum(a), sum(b));
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// One negative slate, or `None` when the strategy is unavailable for
/// this sample (caller falls back per the mix).
pub fn build_negative(
    y_plus: &[SemanticID],
    sample: &SlateSample,
    strategy: Strategy,
    model: &HsdModel,
    catalog: &[SemanticID],
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<SemanticID>>> {
    let m = y_plus.len();
    match strategy {
        Strategy::Permute => {
            if m < 2 || y_plus.iter().all(|s| s == &y_plus[0]) {
                return Ok(None);
            }
            let mut perm = y_plus.to_vec();
            for _ in 0..PERMUTE_RETRIES {
                perm.shuffle(rng);
                if perm != y_plus {
                    return Ok(Some(perm));
                }
            }
            Ok(None)
        }
        Strategy::ReplaceNegative => {
            if sample.disliked.is_empty() {
                return Ok(None);
            }
            let n_replace = rng.gen_range(1..=m.min(sample.disliked.len()));
            let mut positions: Vec<usize> = (0..m).collect();
            positions.shuffle(rng);
            let mut out = y_plus.to_vec();
            for &p in positions.iter().take(n_replace) {
                out[p] = sample.disliked[rng.gen_range(0..sample.disliked.len())].clone();
            }
            if out == y_plus {
                return Ok(None); // disliked item identical to the original
            }
            Ok(Some(out))
        }
        Strategy::AnchorRepeat => {
            if m < 2 {
                return Ok(None);
            }
            let anchor = &y_plus[0];
            let mut scored: Vec<(&SemanticID, f64)> = catalog
                .iter()
                .filter(|s| *s != anchor)
                .map(|s| (s, sid_cosine(model, anchor, s)))
                .collect();
            if scored.len() < m - 1 {
                return Ok(None);
            }
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.codes.cmp(&b.0.codes))
            });
            let mut out = vec![anchor.clone()];
            out.extend(scored.into_iter().take(m - 1).map(|(s, _)| s.clone()));
            if out == y_plus {
                return Ok(None);
            }
            Ok(Some(out))
        }
    }
}

/// Draw a strategy per the mix, falling back over the remaining ones when
/// a strategy is unavailable for the sample.
pub fn build_pair(
    sample: &SlateSample,
    model: &HsdModel,
    catalog: &[SemanticID],
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<PreferencePair>> {
    let y_plus = build_positive(sample);
    let all = [
        Strategy::Permute,
        Strategy::ReplaceNegative,
        Strategy::AnchorRepeat,
    ];
    let mut remaining: Vec<(Strategy, f32)> = all
        .iter()
        .zip(cfg.mix.iter())
        .filter(|(_, &w)| w > 0.0)
        .map(|(&s, &w)| (s, w))
        .collect();
    while !remaining.is_empty() {
        let total: f32 = remaining.iter().map(|(_, w)| w).sum();
        let mut draw = rng.gen_range(0.0..total);
        let mut pick = 0usize;
        for (i, (_, w)) in remaining.iter().enumerate() {
            if draw < *w {
                pick = i;
                break;
            }
            draw -= w;
        }
        let (strategy, _) = remaining.remove(pick);
        if let Some(y_minus) = build_negative(&y_plus, sample, strategy, model, catalog, rng)? {
            return Ok(Some(PreferencePair {
                context: sample.context.clone(),
                y_plus,
                y_minus,
                strategy,
            }));
        }
    }
    Ok(None)
}

/// Pair dataset over samples; samples with no available strategy are
/// skipped. Errors if nothing is buildable at all.
pub fn build_pairs(
    samples: &[SlateSample],
    model: &HsdModel,
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    // catalog: every SID seen anywhere in the dataset
    let mut catalog: Vec<SemanticID> = samples
        .iter()
        .flat_map(|s| {
            s.slate
                .iter()
                .chain(s.context.history.iter())
                .chain(s.disliked.iter())
                .cloned()
        })
        .collect();
    catalog.sort();
    catalog.dedup();
    let mut pairs = Vec::new();
    for sample in samples {
        if let Some(p) = build_pair(sample, model, &catalog, cfg, rng)? {
            pairs.push(p);
        }
    }
    if pairs.is_empty() {
        return Err(HigrError::Data(
            "build_pairs: no preference pair constructible from dataset".into(),
        ));
    }
    Ok(pairs)
}
