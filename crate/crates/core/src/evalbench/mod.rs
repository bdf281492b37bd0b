//! Ranking metrics (hit/recall/NDCG at k, macro-averaged) and the
//! decoding-efficiency benchmark comparing hierarchical and flat modes.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{HigrError, Result};
use crate::gsbi::{CostLedger, Engine, SidIndex};
use crate::hsd::{HsdModel, UserContext};

/// One evaluation record: the grounded predicted slate plus the two truth
/// sets (positively engaged vs. merely exposed).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub predicted: Vec<String>,
    pub truth_effective: BTreeSet<String>,
    pub truth_impressed: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruthKind {
    Effective,
    Impressed,
}

impl TruthKind {
    pub fn name(self) -> &'static str {
        match self {
            TruthKind::Effective => "effective",
            TruthKind::Impressed => "impressed",
        }
    }

    pub fn select(self, r: &EvalRecord) -> &BTreeSet<String> {
        match self {
            TruthKind::Effective => &r.truth_effective,
            TruthKind::Impressed => &r.truth_impressed,
        }
    }
}

/// 1 iff any of the top-k predictions is in the truth set.
/// Returns `None` when the truth set is empty (record skipped).
pub fn hit_at_k(predicted: &[String], truth: &BTreeSet<String>, k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let k = k.min(predicted.len());
    Some(if predicted[..k].iter().any(|p| truth.contains(p)) {
        1.0
    } else {
        0.0
    })
}

/// |top-k ∩ truth| / |truth|.
pub fn recall_at_k(predicted: &[String], truth: &BTreeSet<String>, k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let k = k.min(predicted.len());
    let inter = predicted[..k].iter().filter(|p| truth.contains(*p)).count();
    Some(inter as f64 / truth.len() as f64)
}

/// Binary-gain NDCG: DCG = Σ_{r≤k, rel} 1/log₂(r+1); IDCG places
/// min(k, |truth|) hits at the top ranks.
pub fn ndcg_at_k(predicted: &[String], truth: &BTreeSet<String>, k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let k = k.min(predicted.len());
    let mut dcg = 0.0f64;
    for (i, p) in predicted[..k].iter().enumerate() {
        if truth.contains(p) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let ideal = k.min(truth.len());
    let mut idcg = 0.0f64;
    for i in 0..ideal {
        idcg += 1.0 / ((i + 2) as f64).log2();
    }
    if idcg == 0.0 {
        return Some(0.0);
    }
    Some(dcg / idcg)
}

/// Macro-averaged metrics for one (k, truth-kind) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub k: usize,
    pub truth: &'static str,
    pub hit: f64,
    pub recall: f64,
    pub ndcg: f64,
    /// Records with non-empty truth that entered the average.
    pub counted: usize,
    /// Records skipped for empty truth.
    pub skipped: usize,
}

/// Macro-average over records; empty-truth records are skipped and counted.
pub fn evaluate(records: &[EvalRecord], ks: &[usize], kinds: &[TruthKind]) -> Result<Vec<MetricRow>> {
    if records.is_empty() {
        return Err(HigrError::Data("evaluate: empty dataset".into()));
    }
    let m = records[0].predicted.len();
    for r in records {
        if r.predicted.len() != m {
            return Err(HigrError::Data(format!(
                "evaluate: ragged predicted lengths ({} vs {m})",
                r.predicted.len()
            )));
        }
    }
    for &k in ks {
        if k == 0 || k > m {
            return Err(HigrError::Config(format!(
                "evaluate: k {k} outside [1, {m}]"
            )));
        }
    }
    let mut rows = Vec::new();
    for &kind in kinds {
        for &k in ks {
            let mut sums = (0.0f64, 0.0f64, 0.0f64);
            let mut counted = 0usize;
            let mut skipped = 0usize;
            for r in records {
                let truth = kind.select(r);
                match (
                    hit_at_k(&r.predicted, truth, k),
                    recall_at_k(&r.predicted, truth, k),
                    ndcg_at_k(&r.predicted, truth, k),
                ) {
                    (Some(h), Some(rc), Some(n)) => {
                        sums.0 += h;
                        sums.1 += rc;
                        sums.2 += n;
                        counted += 1;
                    }
                    _ => skipped += 1,
                }
            }
            let denom = counted.max(1) as f64;
            rows.push(MetricRow {
                k,
                truth: kind.name(),
                hit: sums.0 / denom,
                recall: sums.1 / denom,
                ndcg: sums.2 / denom,
                counted,
                skipped,
            });
        }
    }
    Ok(rows)
}

pub const METRICS_CSV_HEADER: &str = "k,truth,hit,recall,ndcg,counted,skipped";

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.9},{:.9},{:.9},{},{}",
            r.k, r.truth, r.hit, r.recall, r.ndcg, r.counted, r.skipped
        )?;
    }
    Ok(())
}

// ── Efficiency benchmark ─────────────────────────────────────────────

/// One benchmark configuration's measurements.
#[derive(Clone, Debug)]
pub struct BenchResult {
    pub mode: String,
    pub slate_size: usize,
    pub beam_width: usize,
    pub kv_cache: bool,
    pub samples_per_minute: f64,
    pub recall_at_5: Option<f64>,
    pub attention_flops: u64,
    pub planner_steps: u64,
    pub generator_steps: u64,
    pub wall_ms: f64,
}

pub const BENCH_CSV_HEADER: &str =
    "mode,slate_size,beam_width,kv_cache,samples_per_minute,recall_at_5,attention_flops,planner_steps,generator_steps,wall_ms";

pub fn write_bench_csv<W: Write>(w: &mut W, rows: &[BenchResult]) -> Result<()> {
    writeln!(w, "{BENCH_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.3},{},{},{},{},{:.3}",
            r.mode,
            r.slate_size,
            r.beam_width,
            r.kv_cache,
            r.samples_per_minute,
            r.recall_at_5
                .map(|v| format!("{v:.9}"))
                .unwrap_or_default(),
            r.attention_flops,
            r.planner_steps,
            r.generator_steps,
            r.wall_ms
        )?;
    }
    Ok(())
}

/// Truth sets for the benchmark's recall column, aligned with the contexts.
pub struct BenchTruth<'a> {
    pub index: &'a SidIndex,
    pub truth_effective: &'a [BTreeSet<String>],
}

/// Decode every context under one configuration and aggregate the ledgers.
pub fn bench_one(
    label: &str,
    model: &HsdModel,
    contexts: &[UserContext],
    beam_width: usize,
    kv_cache: bool,
    truth: Option<&BenchTruth>,
) -> Result<BenchResult> {
    if contexts.is_empty() {
        return Err(HigrError::Data("bench: no contexts".into()));
    }
    let mut engine = Engine::new(model, kv_cache);
    if let Some(t) = truth {
        engine = engine.with_catalog(t.index);
    }
    let mut total = CostLedger::default();
    let mut records: Vec<EvalRecord> = Vec::new();
    let start = Instant::now();
    for (i, ctx) in contexts.iter().enumerate() {
        let out = engine.generate(ctx, beam_width)?;
        total.planner_steps += out.ledger.planner_steps;
        total.generator_steps += out.ledger.generator_steps;
        total.attention_flops += out.ledger.attention_flops;
        if let Some(t) = truth {
            let predicted = t.index.ground_slate(&out.beams)?;
            records.push(EvalRecord {
                predicted,
                truth_effective: t.truth_effective[i].clone(),
                truth_impressed: BTreeSet::new(),
            });
        }
    }
    let wall = start.elapsed();
    let recall_at_5 = if records.is_empty() {
        None
    } else {
        let k = 5.min(records[0].predicted.len());
        let rows = evaluate(&records, &[k], &[TruthKind::Effective])?;
        Some(rows[0].recall)
    };
    let minutes = wall.as_secs_f64() / 60.0;
    Ok(BenchResult {
        mode: label.to_string(),
        slate_size: model.cfg.slate_size,
        beam_width,
        kv_cache,
        samples_per_minute: contexts.len() as f64 / minutes.max(1e-12),
        recall_at_5,
        attention_flops: total.attention_flops,
        planner_steps: total.planner_steps,
        generator_steps: total.generator_steps,
        wall_ms: wall.as_secs_f64() * 1e3,
    })
}

/// Sweep labeled models × beam widths × cache settings.
pub fn bench_efficiency(
    models: &[(String, &HsdModel)],
    contexts: &[UserContext],
    beam_widths: &[usize],
    kv_settings: &[bool],
    truth: Option<&BenchTruth>,
) -> Result<Vec<BenchResult>> {
    let mut out = Vec::new();
    for (label, model) in models {
        for &b in beam_widths {
            for &kv in kv_settings {
                out.push(bench_one(label, model, contexts, b, kv, truth)?);
            }
        }
    }
    Ok(out)
}
