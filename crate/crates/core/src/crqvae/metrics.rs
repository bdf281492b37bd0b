//! Codebook quality statistics: collision, concentration, consistency.

use std::collections::HashMap;

use super::SemanticID;
use crate::error::{HigrError, Result};

#[derive(Clone, Copy, Debug)]
pub struct CodebookMetrics {
    /// Fraction of items whose full D-tuple SID is shared with ≥1 other item.
    pub collision: f64,
    /// Per layer: fraction of the codebook needed to cover 90% of items
    /// when codewords are taken in decreasing usage order, averaged over
    /// layers. Higher means more balanced utilization.
    pub concentration: f64,
    /// Among mined positive pairs, fraction sharing the layer-1 code.
    pub consistency: f64,
}

pub fn codebook_metrics(
    sids: &[SemanticID],
    pairs: &[(usize, usize)],
    codebook_size: usize,
) -> Result<CodebookMetrics> {
    if sids.is_empty() {
        return Err(HigrError::Data("codebook_metrics: empty corpus".into()));
    }
    let depth = sids[0].depth();

    let mut full_counts: HashMap<&SemanticID, usize> = HashMap::new();
    for sid in sids {
        *full_counts.entry(sid).or_insert(0) += 1;
    }
    let collided = sids
        .iter()
        .filter(|sid| full_counts[*sid] > 1)
        .count();
    let collision = collided as f64 / sids.len() as f64;

    let mut concentration = 0.0;
    for d in 0..depth {
        let mut usage = vec![0usize; codebook_size];
        for sid in sids {
            usage[sid.codes[d]] += 1;
        }
        usage.sort_unstable_by(|a, b| b.cmp(a));
        let target = (0.9 * sids.len() as f64).ceil() as usize;
        let mut covered = 0usize;
        let mut needed = 0usize;
        for &u in &usage {
            if covered >= target {
                break;
            }
            covered += u;
            needed += 1;
        }
        concentration += needed as f64 / codebook_size as f64;
    }
    concentration /= depth as f64;

    let consistency = if pairs.is_empty() {
        0.0
    } else {
        let matching = pairs
            .iter()
            .filter(|&&(a, p)| sids[a].codes[0] == sids[p].codes[0])
            .count();
        matching as f64 / pairs.len() as f64
    };

    Ok(CodebookMetrics {
        collision,
        concentration,
        consistency,
    })
}

/// Shannon entropy (nats) of the code-usage distribution at one layer.
pub fn layer_usage_entropy(sids: &[SemanticID], layer: usize, codebook_size: usize) -> f64 {
    let mut usage = vec![0usize; codebook_size];
    for sid in sids {
        usage[sid.codes[layer]] += 1;
    }
    let total: usize = usage.iter().sum();
    let mut h = 0.0;
    for &u in &usage {
        if u > 0 {
            let p = u as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}
