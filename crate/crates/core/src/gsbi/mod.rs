//! Tape-free f32 inference: greedy slate planning with per-item beam
//! search, optional KV caching, cost accounting, and SID-to-catalog
//! grounding.
//!
//! Cached and uncached decoding share the same row-level primitives, so
//! their logits are bitwise identical; the uncached path just replays the
//! whole prefix on every step.

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use crate::crqvae::SemanticID;
use crate::error::{HigrError, Result};
use crate::hsd::{BlockLayout, HsdModel, ModelKind, UserContext};
use crate::params::PIdx;
use crate::tensor::TensorData;

const RMS_EPS: f32 = 1e-6;

/// Decode-time accounting. `attention_flops` counts 4·L·d per attention
/// row actually evaluated (score and mix multiply-adds over L keys).
#[derive(Clone, Debug, Default)]
pub struct CostLedger {
    pub planner_steps: u64,
    pub generator_steps: u64,
    pub attention_flops: u64,
    pub wall: Duration,
}

/// One scored SID candidate from beam search, best first.
#[derive(Clone, Debug)]
pub struct BeamHypothesis {
    pub codes: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub slate: Vec<SemanticID>,
    /// Per-slot hypotheses, sorted by descending log-probability.
    pub beams: Vec<Vec<BeamHypothesis>>,
    pub ledger: CostLedger,
}

// ── Row-level primitives (shared by cached and uncached paths) ───────

fn linear_row(x: &[f32], w: &TensorData) -> Vec<f32> {
    let (k, n) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), k);
    let mut out = vec![0.0f32; n];
    for (p, &xv) in x.iter().enumerate() {
        let wrow = &w.data[p * n..(p + 1) * n];
        for j in 0..n {
            out[j] += xv * wrow[j];
        }
    }
    out
}

fn rms_row(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let d = x.len();
    let ms: f32 = x.iter().map(|&v| v * v).sum::<f32>() / d as f32;
    let ir = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * ir * g).collect()
}

/// One query row attending to `len` stored key/value rows (flat `[len×d]`).
fn attn_row(q: &[f32], keys: &[f32], values: &[f32], len: usize, n_heads: usize) -> Vec<f32> {
    let d = q.len();
    let dh = d / n_heads;
    let inv_s = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; d];
    for h in 0..n_heads {
        let off = h * dh;
        let mut scores = vec![0.0f32; len];
        let mut m = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for t in 0..dh {
                acc += q[off + t] * values_at(keys, j, d)[off + t];
            }
            *s = acc * inv_s;
            m = m.max(*s);
        }
        let mut z = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        for (j, &s) in scores.iter().enumerate() {
            let p = s / z;
            let vr = values_at(values, j, d);
            for t in 0..dh {
                out[off + t] += p * vr[off + t];
            }
        }
    }
    out
}

fn values_at(flat: &[f32], row: usize, d: usize) -> &[f32] {
    &flat[row * d..(row + 1) * d]
}

fn log_softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = logits.iter().map(|&v| (v - m).exp()).sum::<f32>().ln() + m;
    logits.iter().map(|&v| v - lse).collect()
}

// ── Streams ──────────────────────────────────────────────────────────

/// Cross-attention keys/values over the fixed context, per block.
#[derive(Clone)]
struct CrossKV {
    k: Vec<f32>,
    v: Vec<f32>,
    rows: usize,
}

#[derive(Clone, Default)]
struct SelfKV {
    k: Vec<f32>,
    v: Vec<f32>,
    rows: usize,
}

/// One autoregressive stream through a block stack. With caching off,
/// every append replays all stored input rows from scratch.
#[derive(Clone)]
struct Stream<'a> {
    model: &'a HsdModel,
    blocks: &'a [BlockLayout],
    cached: bool,
    input_rows: Vec<Vec<f32>>,
    self_kv: Vec<SelfKV>,
    /// Cross k/v per block; rebuilt on every replay when caching is off.
    cross_kv: Vec<Option<CrossKV>>,
    context: Option<Vec<f32>>,
    context_rows: usize,
}

impl<'a> Stream<'a> {
    fn new(
        model: &'a HsdModel,
        blocks: &'a [BlockLayout],
        context: Option<(&[f32], usize)>,
        cached: bool,
    ) -> Self {
        Stream {
            model,
            blocks,
            cached,
            input_rows: Vec::new(),
            self_kv: vec![SelfKV::default(); blocks.len()],
            cross_kv: vec![None; blocks.len()],
            context: context.map(|(c, _)| c.to_vec()),
            context_rows: context.map(|(_, r)| r).unwrap_or(0),
        }
    }

    fn ensure_cross(&mut self, b: usize) {
        if self.cross_kv[b].is_some() {
            return;
        }
        let model = self.model;
        let blocks = self.blocks;
        let Some(cl) = &blocks[b].cross else { return };
        let ctx = self.context.as_ref().expect("cross block without context");
        let d = model.cfg.d_model;
        let kg = &model.params.get(cl.k_norm).data;
        let vg = &model.params.get(cl.v_norm).data;
        let mut k = Vec::with_capacity(self.context_rows * d);
        let mut v = Vec::with_capacity(self.context_rows * d);
        for r in 0..self.context_rows {
            let row = &ctx[r * d..(r + 1) * d];
            k.extend(linear_row(&rms_row(row, kg), model.params.get(cl.wk)));
            v.extend(linear_row(&rms_row(row, vg), model.params.get(cl.wv)));
        }
        self.cross_kv[b] = Some(CrossKV {
            k,
            v,
            rows: self.context_rows,
        });
    }

    /// Push one row through all blocks using (and extending) the caches.
    fn advance(&mut self, row: &[f32], ledger: &mut CostLedger) -> Vec<f32> {
        let model = self.model;
        let blocks = self.blocks;
        let d = model.cfg.d_model;
        let heads = model.cfg.n_heads;
        let p = |i: PIdx| model.params.get(i);
        let mut h = row.to_vec();
        for b in 0..blocks.len() {
            let block = &blocks[b];
            if let Some(cl) = &block.cross {
                self.ensure_cross(b);
                let ckv = self.cross_kv[b].as_ref().unwrap();
                let q = linear_row(&rms_row(&h, &p(cl.norm).data), p(cl.wq));
                let a = attn_row(&q, &ckv.k, &ckv.v, ckv.rows, heads);
                ledger.attention_flops += 4 * ckv.rows as u64 * d as u64;
                let o = linear_row(&a, p(cl.wo));
                for i in 0..d {
                    h[i] += o[i];
                }
            }
            {
                let x = rms_row(&h, &p(block.self_norm).data);
                let q = linear_row(&x, p(block.self_wq));
                let k = linear_row(&x, p(block.self_wk));
                let v = linear_row(&x, p(block.self_wv));
                let kv = &mut self.self_kv[b];
                kv.k.extend_from_slice(&k);
                kv.v.extend_from_slice(&v);
                kv.rows += 1;
                let a = attn_row(&q, &kv.k, &kv.v, kv.rows, heads);
                ledger.attention_flops += 4 * kv.rows as u64 * d as u64;
                let o = linear_row(&a, p(block.self_wo));
                for i in 0..d {
                    h[i] += o[i];
                }
            }
            {
                let x = rms_row(&h, &p(block.ffn_norm).data);
                let mut u = linear_row(&x, p(block.ffn_w1));
                let b1 = &p(block.ffn_b1).data;
                for (ui, &bi) in u.iter_mut().zip(b1.iter()) {
                    *ui = (*ui + bi).tanh();
                }
                let y = linear_row(&u, p(block.ffn_w2));
                let b2 = &p(block.ffn_b2).data;
                for i in 0..d {
                    h[i] += y[i] + b2[i];
                }
            }
        }
        h
    }

    /// Append an input row and return the stack output for that position.
    fn append(&mut self, row: Vec<f32>, ledger: &mut CostLedger) -> Vec<f32> {
        self.input_rows.push(row);
        if self.cached {
            let row = self.input_rows.last().unwrap().clone();
            self.advance(&row, ledger)
        } else {
            // replay everything: identical per-row arithmetic, more work
            for kv in self.self_kv.iter_mut() {
                *kv = SelfKV::default();
            }
            for c in self.cross_kv.iter_mut() {
                *c = None;
            }
            let rows = self.input_rows.clone();
            let mut last = Vec::new();
            for r in &rows {
                last = self.advance(r, ledger);
            }
            last
        }
    }
}

// ── Engine ───────────────────────────────────────────────────────────

pub struct Engine<'a> {
    pub model: &'a HsdModel,
    pub use_cache: bool,
    /// Optional catalog: decoding is constrained to occupied code
    /// prefixes, and duplicate SIDs are tolerated while the catalog still
    /// holds unclaimed items for them.
    pub catalog: Option<&'a SidIndex>,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a HsdModel, use_cache: bool) -> Self {
        Engine {
            model,
            use_cache,
            catalog: None,
        }
    }

    pub fn with_catalog(mut self, catalog: &'a SidIndex) -> Self {
        self.catalog = Some(catalog);
        self
    }

    fn prefix_allowed(&self, prefix: &[usize]) -> bool {
        self.catalog.map_or(true, |c| c.allows_prefix(prefix))
    }

    fn cfg(&self) -> &crate::hsd::ModelConfig {
        &self.model.cfg
    }

    fn param(&self, i: PIdx) -> &TensorData {
        self.model.params.get(i)
    }

    fn pos_row(&self, table: PIdx, i: usize) -> Vec<f32> {
        let t = self.param(table);
        let d = t.shape[1];
        t.data[i * d..(i + 1) * d].to_vec()
    }

    fn sid_sum(&self, sid: &SemanticID) -> Result<Vec<f32>> {
        self.model.validate_sid(sid)?;
        let d = self.cfg().d_model;
        let mut out = vec![0.0f32; d];
        for (l, &c) in sid.codes.iter().enumerate() {
            let t = self.param(self.model.layout.sid_emb[l]);
            for j in 0..d {
                out[j] += t.data[c * d + j];
            }
        }
        Ok(out)
    }

    fn head_logits(&self, h: &[f32], layer: usize) -> Vec<f32> {
        linear_row(h, self.param(self.model.layout.heads[layer]))
    }

    /// Context matrix `[(1+n)×d]` via the context-encoder blocks.
    pub fn encode_context(&self, ctx: &UserContext, ledger: &mut CostLedger) -> Result<Vec<f32>> {
        let cfg = self.cfg();
        if ctx.features.len() != cfg.d_user {
            return Err(HigrError::Dim(format!(
                "encode_context: user dim {} vs d_user {}",
                ctx.features.len(),
                cfg.d_user
            )));
        }
        if ctx.history.len() > cfg.max_history {
            return Err(HigrError::Contract(format!(
                "encode_context: history {} exceeds max {}",
                ctx.history.len(),
                cfg.max_history
            )));
        }
        let d = cfg.d_model;
        let mut user = linear_row(&ctx.features, self.param(self.model.layout.user_w));
        let ub = &self.param(self.model.layout.user_b).data;
        for j in 0..d {
            user[j] += ub[j];
        }
        let mut stream = Stream::new(self.model, &self.model.layout.ctx_blocks, None, true);
        let mut out = Vec::with_capacity((1 + ctx.history.len()) * d);
        let p0 = self.pos_row(self.model.layout.pos_ctx, 0);
        let row0: Vec<f32> = user.iter().zip(&p0).map(|(&a, &b)| a + b).collect();
        out.extend(stream.append(row0, ledger));
        for (j, sid) in ctx.history.iter().enumerate() {
            let mut row = self.sid_sum(sid)?;
            let p = self.pos_row(self.model.layout.pos_ctx, 1 + j);
            for t in 0..d {
                row[t] += p[t];
            }
            out.extend(stream.append(row, ledger));
        }
        Ok(out)
    }

    /// Whether a completed SID should be dropped from the beam because
    /// every catalog item behind it has already been committed.
    fn sid_exhausted(&self, codes: &[usize], claimed: &HashMap<Vec<usize>, usize>) -> bool {
        match self.catalog {
            None => false,
            Some(c) => {
                let taken = claimed.get(codes).copied().unwrap_or(0);
                taken > 0 && taken >= c.item_count(codes)
            }
        }
    }

    /// Beam search over one item's layer-wise code vocabulary. `claimed`
    /// counts SIDs already committed to earlier slots (catalog mode only).
    fn beam_decode_item(
        &self,
        pref: &[f32],
        context: &[f32],
        ctx_rows: usize,
        beam_width: usize,
        claimed: &HashMap<Vec<usize>, usize>,
        ledger: &mut CostLedger,
    ) -> Result<Vec<BeamHypothesis>> {
        let cfg = self.cfg();
        let d = cfg.d_model;
        let k_size = cfg.codebook_size;
        let b_width = beam_width.max(1);
        let mut base = Stream::new(
            self.model,
            &self.model.layout.gen_blocks,
            Some((context, ctx_rows)),
            self.use_cache,
        );
        let p0 = self.pos_row(self.model.layout.pos_gen, 0);
        let row0: Vec<f32> = pref.iter().zip(&p0).map(|(&a, &b)| a + b).collect();
        let h = base.append(row0, ledger);
        ledger.generator_steps += 1;
        let lp0 = log_softmax(&self.head_logits(&h, 0));
        let mut beams: Vec<(Vec<usize>, f64, Stream)> = {
            let mut cands: Vec<(usize, f64)> = (0..k_size)
                .filter(|&c| self.prefix_allowed(&[c]))
                .map(|c| (c, lp0[c] as f64))
                .collect();
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            cands
                .into_iter()
                .take(b_width)
                .map(|(c, lp)| (vec![c], lp, base.clone()))
                .collect()
        };
        for layer in 1..cfg.depth {
            let mut cands: Vec<(Vec<usize>, f64, usize)> = Vec::new();
            let mut streams = Vec::with_capacity(beams.len());
            for (bi, (codes, lp, stream)) in beams.iter_mut().enumerate() {
                let code = *codes.last().unwrap();
                let emb = self.param(self.model.layout.sid_emb[layer - 1]);
                let pos = self.pos_row(self.model.layout.pos_gen, layer);
                let row: Vec<f32> = (0..d).map(|j| emb.data[code * d + j] + pos[j]).collect();
                let h = stream.append(row, ledger);
                ledger.generator_steps += 1;
                let lps = log_softmax(&self.head_logits(&h, layer));
                for (c, &l) in lps.iter().enumerate() {
                    let mut codes2 = codes.clone();
                    codes2.push(c);
                    if !self.prefix_allowed(&codes2) {
                        continue;
                    }
                    if codes2.len() == cfg.depth && self.sid_exhausted(&codes2, claimed) {
                        continue;
                    }
                    cands.push((codes2, *lp + l as f64, bi));
                }
                streams.push(stream.clone());
            }
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            beams = cands
                .into_iter()
                .take(b_width)
                .map(|(codes, lp, bi)| (codes, lp, streams[bi].clone()))
                .collect();
        }
        Ok(beams
            .into_iter()
            .map(|(codes, lp, _)| BeamHypothesis {
                codes,
                log_prob: lp,
            })
            .collect())
    }

    /// Greedy slate planning with per-item beam search. The top non-duplicate
    /// hypothesis of each slot is committed and its SID-embedding sum feeds
    /// the planner for the next slot.
    pub fn generate(&self, ctx: &UserContext, beam_width: usize) -> Result<DecodeOutput> {
        let start = Instant::now();
        let cfg = self.cfg().clone();
        let mut ledger = CostLedger::default();
        let context = self.encode_context(ctx, &mut ledger)?;
        let ctx_rows = 1 + ctx.history.len();
        let out = match cfg.kind {
            ModelKind::Hierarchical => {
                self.generate_hier(&context, ctx_rows, beam_width, &mut ledger)?
            }
            ModelKind::Flat => self.generate_flat(&context, ctx_rows, beam_width, &mut ledger)?,
        };
        let (slate, beams) = out;
        ledger.wall = start.elapsed();
        Ok(DecodeOutput {
            slate,
            beams,
            ledger,
        })
    }

    fn generate_hier(
        &self,
        context: &[f32],
        ctx_rows: usize,
        beam_width: usize,
        ledger: &mut CostLedger,
    ) -> Result<(Vec<SemanticID>, Vec<Vec<BeamHypothesis>>)> {
        let cfg = self.cfg();
        let d = cfg.d_model;
        let mut planner = Stream::new(
            self.model,
            &self.model.layout.planner_blocks,
            Some((context, ctx_rows)),
            self.use_cache,
        );
        let bos = self.param(self.model.layout.bos).data.clone();
        let p0 = self.pos_row(self.model.layout.pos_planner, 0);
        let row0: Vec<f32> = bos.iter().zip(&p0).map(|(&a, &b)| a + b).collect();
        let mut pref = planner.append(row0, ledger);
        ledger.planner_steps += 1;
        let mut slate: Vec<SemanticID> = Vec::with_capacity(cfg.slate_size);
        let mut all_beams = Vec::with_capacity(cfg.slate_size);
        let mut chosen_counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for m in 0..cfg.slate_size {
            // in catalog mode an exhausted beam widens and retries instead
            // of failing, so greedy decoding still fills every slot
            let mut width = beam_width.max(1);
            let (beams, pick_codes) = loop {
                let beams = self.beam_decode_item(
                    &pref,
                    context,
                    ctx_rows,
                    width,
                    &chosen_counts,
                    ledger,
                )?;
                // a repeated SID is acceptable only while the catalog still
                // has more distinct items behind it than we have committed
                let pick = beams.iter().find(|h| {
                    let taken = chosen_counts.get(&h.codes).copied().unwrap_or(0);
                    match self.catalog {
                        None => taken == 0,
                        Some(c) => taken == 0 || taken < c.item_count(&h.codes),
                    }
                });
                if let Some(p) = pick {
                    let codes = p.codes.clone();
                    break (beams, codes);
                }
                let cap = self.catalog.map_or(0, |c| c.len());
                if self.catalog.is_none() || width >= cap {
                    return Err(HigrError::Generation(format!(
                        "slot {m}: all {} hypotheses duplicate earlier items",
                        beams.len()
                    )));
                }
                width = (width * 2).min(cap);
            };
            let sid = SemanticID::new(pick_codes.clone());
            *chosen_counts.entry(pick_codes).or_insert(0) += 1;
            if m + 1 < cfg.slate_size {
                let mut row = self.sid_sum(&sid)?;
                let pos = self.pos_row(self.model.layout.pos_planner, m + 1);
                for j in 0..d {
                    row[j] += pos[j];
                }
                pref = planner.append(row, ledger);
                ledger.planner_steps += 1;
            }
            slate.push(sid);
            all_beams.push(beams);
        }
        Ok((slate, all_beams))
    }

    /// Flat baseline: beam search over the whole M·D token stream; the top
    /// final hypothesis is split into M SIDs.
    fn generate_flat(
        &self,
        context: &[f32],
        ctx_rows: usize,
        beam_width: usize,
        ledger: &mut CostLedger,
    ) -> Result<(Vec<SemanticID>, Vec<Vec<BeamHypothesis>>)> {
        let cfg = self.cfg();
        let d = cfg.d_model;
        let b_width = beam_width.max(1);
        let total = cfg.flat_tokens();
        let mut base = Stream::new(
            self.model,
            &self.model.layout.planner_blocks,
            Some((context, ctx_rows)),
            self.use_cache,
        );
        let bos = self.param(self.model.layout.bos).data.clone();
        let p0 = self.pos_row(self.model.layout.pos_planner, 0);
        let row0: Vec<f32> = bos.iter().zip(&p0).map(|(&a, &b)| a + b).collect();
        let h0 = base.append(row0, ledger);
        ledger.planner_steps += 1;
        // beams: (codes, logprob, stream, last hidden row)
        let mut beams: Vec<(Vec<usize>, f64, Stream, Vec<f32>)> =
            vec![(Vec::new(), 0.0, base, h0)];
        for t in 0..total {
            let layer = t % cfg.depth;
            let mut cands: Vec<(Vec<usize>, f64, usize)> = Vec::new();
            for (bi, (codes, lp, _, h)) in beams.iter().enumerate() {
                let lps = log_softmax(&self.head_logits(h, layer));
                for (c, &l) in lps.iter().enumerate() {
                    let mut codes2 = codes.clone();
                    codes2.push(c);
                    // constrain within the current slot's code prefix
                    if !self.prefix_allowed(&codes2[t - layer..]) {
                        continue;
                    }
                    cands.push((codes2, *lp + l as f64, bi));
                }
            }
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            cands.truncate(b_width);
            if cands.is_empty() {
                return Err(HigrError::Generation(
                    "beam: no catalog-compatible hypothesis".into(),
                ));
            }
            let mut next = Vec::with_capacity(cands.len());
            for (codes, lp, bi) in cands {
                let mut stream = beams[bi].2.clone();
                let h = if t + 1 < total {
                    let code = *codes.last().unwrap();
                    let emb = self.param(self.model.layout.sid_emb[layer]);
                    let pos = self.pos_row(self.model.layout.pos_planner, t + 1);
                    let row: Vec<f32> =
                        (0..d).map(|j| emb.data[code * d + j] + pos[j]).collect();
                    let h = stream.append(row, ledger);
                    ledger.planner_steps += 1;
                    h
                } else {
                    Vec::new()
                };
                next.push((codes, lp, stream, h));
            }
            beams = next;
        }
        let best = &beams[0];
        let slate: Vec<SemanticID> = best.0
            .chunks(cfg.depth)
            .map(|c| SemanticID::new(c.to_vec()))
            .collect();
        // expose whole-sequence hypotheses per slot for grounding fallback
        let per_slot: Vec<Vec<BeamHypothesis>> = (0..cfg.slate_size)
            .map(|m| {
                beams
                    .iter()
                    .map(|(codes, lp, _, _)| BeamHypothesis {
                        codes: codes[m * cfg.depth..(m + 1) * cfg.depth].to_vec(),
                        log_prob: *lp,
                    })
                    .collect()
            })
            .collect();
        Ok((slate, per_slot))
    }

    /// Teacher-forced log-probabilities of a full slate (consistency oracle
    /// against the training-tape forward).
    pub fn score_slate(&self, ctx: &UserContext, slate: &[SemanticID]) -> Result<f64> {
        let cfg = self.cfg().clone();
        if slate.len() != cfg.slate_size {
            return Err(HigrError::Dim(format!(
                "score_slate: {} items vs M {}",
                slate.len(),
                cfg.slate_size
            )));
        }
        let mut ledger = CostLedger::default();
        let context = self.encode_context(ctx, &mut ledger)?;
        let ctx_rows = 1 + ctx.history.len();
        let d = cfg.d_model;
        let mut total = 0.0f64;
        match cfg.kind {
            ModelKind::Hierarchical => {
                let mut planner = Stream::new(
                    self.model,
                    &self.model.layout.planner_blocks,
                    Some((&context, ctx_rows)),
                    self.use_cache,
                );
                let bos = self.param(self.model.layout.bos).data.clone();
                let p0 = self.pos_row(self.model.layout.pos_planner, 0);
                let row0: Vec<f32> = bos.iter().zip(&p0).map(|(&a, &b)| a + b).collect();
                let mut pref = planner.append(row0, &mut ledger);
                for (m, sid) in slate.iter().enumerate() {
                    self.model.validate_sid(sid)?;
                    let mut gen = Stream::new(
                        self.model,
                        &self.model.layout.gen_blocks,
                        Some((&context, ctx_rows)),
                        self.use_cache,
                    );
                    let g0 = self.pos_row(self.model.layout.pos_gen, 0);
                    let row: Vec<f32> = pref.iter().zip(&g0).map(|(&a, &b)| a + b).collect();
                    let mut h = gen.append(row, &mut ledger);
                    for layer in 0..cfg.depth {
                        let lps = log_softmax(&self.head_logits(&h, layer));
                        total += lps[sid.codes[layer]] as f64;
                        if layer + 1 < cfg.depth {
                            let emb = self.param(self.model.layout.sid_emb[layer]);
                            let pos = self.pos_row(self.model.layout.pos_gen, layer + 1);
                            let c = sid.codes[layer];
                            let row: Vec<f32> =
                                (0..d).map(|j| emb.data[c * d + j] + pos[j]).collect();
                            h = gen.append(row, &mut ledger);
                        }
                    }
                    if m + 1 < cfg.slate_size {
                        let mut row = self.sid_sum(sid)?;
                        let pos = self.pos_row(self.model.layout.pos_planner, m + 1);
                        for j in 0..d {
                            row[j] += pos[j];
                        }
                        pref = planner.append(row, &mut ledger);
                    }
                }
            }
            ModelKind::Flat => {
                let tokens: Vec<(usize, usize)> = slate
                    .iter()
                    .flat_map(|s| s.codes.iter().enumerate().map(|(l, &c)| (l, c)))
                    .collect();
                let mut stream = Stream::new(
                    self.model,
                    &self.model.layout.planner_blocks,
                    Some((&context, ctx_rows)),
                    self.use_cache,
                );
                let bos = self.param(self.model.layout.bos).data.clone();
                let p0 = self.pos_row(self.model.layout.pos_planner, 0);
                let row0: Vec<f32> = bos.iter().zip(&p0).map(|(&a, &b)| a + b).collect();
                let mut h = stream.append(row0, &mut ledger);
                for (t, &(layer, code)) in tokens.iter().enumerate() {
                    let lps = log_softmax(&self.head_logits(&h, layer));
                    total += lps[code] as f64;
                    if t + 1 < tokens.len() {
                        let emb = self.param(self.model.layout.sid_emb[layer]);
                        let pos = self.pos_row(self.model.layout.pos_planner, t + 1);
                        let row: Vec<f32> =
                            (0..d).map(|j| emb.data[code * d + j] + pos[j]).collect();
                        h = stream.append(row, &mut ledger);
                    }
                }
            }
        }
        Ok(total)
    }
}

// ── Grounding ────────────────────────────────────────────────────────

/// Catalog index from semantic IDs to item ids, collisions ranked by
/// descending feedback score (ties broken by item id).
#[derive(Clone, Debug, Default)]
pub struct SidIndex {
    entries: HashMap<Vec<usize>, Vec<(String, f32)>>,
    /// Every code prefix (length 1..=D) occupied by at least one item,
    /// for constrained decoding.
    prefixes: HashSet<Vec<usize>>,
}

impl SidIndex {
    pub fn build(items: &[(String, SemanticID, f32)]) -> Self {
        let mut entries: HashMap<Vec<usize>, Vec<(String, f32)>> = HashMap::new();
        let mut prefixes = HashSet::new();
        for (id, sid, score) in items {
            entries
                .entry(sid.codes.clone())
                .or_default()
                .push((id.clone(), *score));
            for l in 1..=sid.codes.len() {
                prefixes.insert(sid.codes[..l].to_vec());
            }
        }
        for list in entries.values_mut() {
            list.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
        }
        SidIndex { entries, prefixes }
    }

    /// Whether some catalog item's codes start with `prefix`.
    pub fn allows_prefix(&self, prefix: &[usize]) -> bool {
        self.prefixes.contains(prefix)
    }

    /// Number of catalog items behind one full SID.
    pub fn item_count(&self, codes: &[usize]) -> usize {
        self.entries.get(codes).map_or(0, |v| v.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, sid: &SemanticID) -> Option<&[(String, f32)]> {
        self.entries.get(&sid.codes).map(|v| v.as_slice())
    }

    /// Map each slot's beam to a distinct catalog item: walk hypotheses in
    /// score order, take the best-feedback unused item behind the SID, fall
    /// back to the next hypothesis when a SID is unknown or exhausted.
    pub fn ground_slate(&self, beams: &[Vec<BeamHypothesis>]) -> Result<Vec<String>> {
        let mut used: HashSet<&str> = HashSet::new();
        let mut out = Vec::with_capacity(beams.len());
        for (slot, hyps) in beams.iter().enumerate() {
            let mut found: Option<&str> = None;
            'hyp: for h in hyps {
                if let Some(list) = self.entries.get(&h.codes) {
                    for (id, _) in list {
                        if !used.contains(id.as_str()) {
                            found = Some(id);
                            break 'hyp;
                        }
                    }
                }
            }
            let id = found.ok_or_else(|| {
                HigrError::Generation(format!(
                    "slot {slot}: no groundable hypothesis among {}",
                    hyps.len()
                ))
            })?;
            used.insert(id);
            out.push(id.to_string());
        }
        Ok(out)
    }
}
