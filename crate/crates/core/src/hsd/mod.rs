//! Hierarchical Slate Decoder: context encoder, coarse-grained slate
//! planner, and a shared fine-grained item generator decoding preference
//! embeddings into SID sequences. Also hosts the flat single-stream
//! baseline used by the efficiency benchmark.

pub mod train;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::crqvae::SemanticID;
use crate::error::{HigrError, Result};
use crate::formats::SampleRecord;
use crate::params::{PIdx, ParamSet};
use crate::tensor::{Scalar, Tape, TensorData, Var};

/// User features plus chronological positive-interaction history.
#[derive(Clone, Debug)]
pub struct UserContext {
    pub features: Vec<f32>,
    pub history: Vec<SemanticID>,
}

/// One training sample: context, ground-truth slate, and feedback signals.
#[derive(Clone, Debug)]
pub struct SlateSample {
    pub context: UserContext,
    pub slate: Vec<SemanticID>,
    /// Watch-time-like engagement scalar per slate item, >= 0.
    pub feedback: Vec<f32>,
    pub effective_view: Vec<bool>,
    pub slate_item_ids: Vec<String>,
    /// Disliked impressions, the negative-feedback pool.
    pub disliked: Vec<SemanticID>,
}

impl SlateSample {
    pub fn from_record(r: &SampleRecord) -> Self {
        SlateSample {
            context: UserContext {
                features: r.user_features.clone(),
                history: r.history.iter().cloned().map(SemanticID::new).collect(),
            },
            slate: r.slate.iter().cloned().map(SemanticID::new).collect(),
            feedback: r.feedback.clone(),
            effective_view: r.effective_view.clone(),
            slate_item_ids: r.slate_item_ids.clone(),
            disliked: r.disliked.iter().cloned().map(SemanticID::new).collect(),
        }
    }

    pub fn to_record(&self) -> SampleRecord {
        SampleRecord {
            user_features: self.context.features.clone(),
            history: self.context.history.iter().map(|s| s.codes.clone()).collect(),
            slate: self.slate.iter().map(|s| s.codes.clone()).collect(),
            feedback: self.feedback.clone(),
            effective_view: self.effective_view.clone(),
            slate_item_ids: self.slate_item_ids.clone(),
            disliked: self.disliked.iter().map(|s| s.codes.clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Coarse-to-fine: slate planner + shared item generator.
    Hierarchical,
    /// All M·D tokens through one causal stream (efficiency baseline).
    Flat,
}

/// Decoder hyperparameters. Desk-scale defaults; the reference
/// configuration uses d_model=512, d_ffn=2048, l_slate=14, l_item=2.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub d_ffn: usize,
    pub l_ctx: usize,
    pub l_slate: usize,
    pub l_item: usize,
    pub n_heads: usize,
    /// SID depth D.
    pub depth: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Slate size M.
    pub slate_size: usize,
    /// Default beam width B.
    pub beam_width: usize,
    pub d_user: usize,
    pub max_history: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Hierarchical,
            d_model: 64,
            d_ffn: 256,
            l_ctx: 2,
            l_slate: 4,
            l_item: 2,
            n_heads: 4,
            depth: 3,
            codebook_size: 256,
            slate_size: 5,
            beam_width: 5,
            d_user: 8,
            max_history: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(HigrError::Config(format!(
                "model: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.kind == ModelKind::Hierarchical && !(self.l_slate > self.l_item && self.l_item >= 1)
        {
            return Err(HigrError::Config(format!(
                "model: need l_slate > l_item >= 1, got {} and {}",
                self.l_slate, self.l_item
            )));
        }
        if self.depth < 2 || self.codebook_size < 2 || self.slate_size < 1 {
            return Err(HigrError::Config("model: degenerate depth/K/M".into()));
        }
        Ok(())
    }

    /// Token count of one flat-decoded slate.
    pub fn flat_tokens(&self) -> usize {
        self.slate_size * self.depth
    }
}

#[derive(Clone, Debug)]
pub struct CrossLayout {
    pub norm: PIdx,
    pub k_norm: PIdx,
    pub v_norm: PIdx,
    pub wq: PIdx,
    pub wk: PIdx,
    pub wv: PIdx,
    pub wo: PIdx,
}

#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub cross: Option<CrossLayout>,
    pub self_norm: PIdx,
    pub self_wq: PIdx,
    pub self_wk: PIdx,
    pub self_wv: PIdx,
    pub self_wo: PIdx,
    pub ffn_norm: PIdx,
    pub ffn_w1: PIdx,
    pub ffn_b1: PIdx,
    pub ffn_w2: PIdx,
    pub ffn_b2: PIdx,
}

#[derive(Clone, Debug)]
pub struct HsdLayout {
    /// Per-layer SID embedding tables, D of `[K×d_model]`.
    pub sid_emb: Vec<PIdx>,
    pub bos: PIdx,
    pub pad: PIdx,
    pub user_w: PIdx,
    pub user_b: PIdx,
    pub pos_ctx: PIdx,
    /// Planner positions (hierarchical: M rows; flat: M·D rows).
    pub pos_planner: PIdx,
    pub pos_gen: PIdx,
    pub ctx_blocks: Vec<BlockLayout>,
    pub planner_blocks: Vec<BlockLayout>,
    pub gen_blocks: Vec<BlockLayout>,
    /// Per-layer output heads, D of `[d_model×K]`, zero-initialized.
    pub heads: Vec<PIdx>,
}

pub struct HsdModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub layout: HsdLayout,
    /// Policy forward-pass counter (alignment instrumentation).
    pub forward_counter: Cell<u64>,
}

fn add_block<R: rand::Rng>(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &ModelConfig,
    with_cross: bool,
    rng: &mut R,
) -> BlockLayout {
    let d = cfg.d_model;
    let std = 1.0 / (d as f32).sqrt();
    let std_ffn = 1.0 / (cfg.d_ffn as f32).sqrt();
    let ones = TensorData::new(vec![d], vec![1.0; d]);
    let cross = if with_cross {
        Some(CrossLayout {
            norm: params.add(format!("{prefix}.cross.norm"), ones.clone()),
            k_norm: params.add(format!("{prefix}.cross.k_norm"), ones.clone()),
            v_norm: params.add(format!("{prefix}.cross.v_norm"), ones.clone()),
            wq: params.add(
                format!("{prefix}.cross.wq"),
                TensorData::randn(vec![d, d], std, rng),
            ),
            wk: params.add(
                format!("{prefix}.cross.wk"),
                TensorData::randn(vec![d, d], std, rng),
            ),
            wv: params.add(
                format!("{prefix}.cross.wv"),
                TensorData::randn(vec![d, d], std, rng),
            ),
            wo: params.add(
                format!("{prefix}.cross.wo"),
                TensorData::randn(vec![d, d], std, rng),
            ),
        })
    } else {
        None
    };
    BlockLayout {
        cross,
        self_norm: params.add(format!("{prefix}.self.norm"), ones.clone()),
        self_wq: params.add(
            format!("{prefix}.self.wq"),
            TensorData::randn(vec![d, d], std, rng),
        ),
        self_wk: params.add(
            format!("{prefix}.self.wk"),
            TensorData::randn(vec![d, d], std, rng),
        ),
        self_wv: params.add(
            format!("{prefix}.self.wv"),
            TensorData::randn(vec![d, d], std, rng),
        ),
        self_wo: params.add(
            format!("{prefix}.self.wo"),
            TensorData::randn(vec![d, d], std, rng),
        ),
        ffn_norm: params.add(format!("{prefix}.ffn.norm"), ones),
        ffn_w1: params.add(
            format!("{prefix}.ffn.w1"),
            TensorData::randn(vec![d, cfg.d_ffn], std, rng),
        ),
        ffn_b1: params.add(format!("{prefix}.ffn.b1"), TensorData::zeros(vec![cfg.d_ffn])),
        ffn_w2: params.add(
            format!("{prefix}.ffn.w2"),
            TensorData::randn(vec![cfg.d_ffn, d], std_ffn, rng),
        ),
        ffn_b2: params.add(format!("{prefix}.ffn.b2"), TensorData::zeros(vec![d])),
    }
}

impl HsdModel {
    pub fn init(cfg: ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let emb_std = 0.1;
        let sid_emb = (0..cfg.depth)
            .map(|l| {
                params.add(
                    format!("sid_emb.{l}"),
                    TensorData::randn(vec![cfg.codebook_size, d], emb_std, rng),
                )
            })
            .collect();
        let bos = params.add("bos", TensorData::randn(vec![d], emb_std, rng));
        let pad = params.add("pad", TensorData::randn(vec![d], emb_std, rng));
        let user_w = params.add(
            "user.w",
            TensorData::randn(vec![cfg.d_user, d], 1.0 / (cfg.d_user as f32).sqrt(), rng),
        );
        let user_b = params.add("user.b", TensorData::zeros(vec![d]));
        let pos_ctx = params.add(
            "pos.ctx",
            TensorData::randn(vec![1 + cfg.max_history, d], emb_std, rng),
        );
        let planner_positions = match cfg.kind {
            ModelKind::Hierarchical => cfg.slate_size,
            ModelKind::Flat => cfg.flat_tokens(),
        };
        let pos_planner = params.add(
            "pos.planner",
            TensorData::randn(vec![planner_positions, d], emb_std, rng),
        );
        let pos_gen = params.add("pos.gen", TensorData::randn(vec![cfg.depth, d], emb_std, rng));
        let ctx_blocks = (0..cfg.l_ctx)
            .map(|l| add_block(&mut params, &format!("ctx.{l}"), &cfg, false, rng))
            .collect();
        let planner_blocks = (0..cfg.l_slate)
            .map(|l| add_block(&mut params, &format!("planner.{l}"), &cfg, true, rng))
            .collect();
        let gen_blocks = match cfg.kind {
            ModelKind::Hierarchical => (0..cfg.l_item)
                .map(|l| add_block(&mut params, &format!("gen.{l}"), &cfg, true, rng))
                .collect(),
            ModelKind::Flat => Vec::new(),
        };
        // zero-initialized heads: an untrained model emits uniform logits
        let heads = (0..cfg.depth)
            .map(|l| {
                params.add(
                    format!("head.{l}"),
                    TensorData::zeros(vec![d, cfg.codebook_size]),
                )
            })
            .collect();
        Ok(HsdModel {
            cfg,
            params,
            layout: HsdLayout {
                sid_emb,
                bos,
                pad,
                user_w,
                user_b,
                pos_ctx,
                pos_planner,
                pos_gen,
                ctx_blocks,
                planner_blocks,
                gen_blocks,
                heads,
            },
            forward_counter: Cell::new(0),
        })
    }

    pub fn validate_sid(&self, sid: &SemanticID) -> Result<()> {
        if sid.depth() != self.cfg.depth {
            return Err(HigrError::Vocab(format!(
                "sid depth {} vs model depth {}",
                sid.depth(),
                self.cfg.depth
            )));
        }
        for &c in &sid.codes {
            if c >= self.cfg.codebook_size {
                return Err(HigrError::Vocab(format!(
                    "code {c} out of vocabulary {}",
                    self.cfg.codebook_size
                )));
            }
        }
        Ok(())
    }
}

// ── Tape-side forward passes ─────────────────────────────────────────

/// One transformer block per the planner equation: optional cross-attention
/// to C (with per-layer key/value RMSNorms), self-attention, FFN; each
/// pre-normalized with a residual connection.
pub fn block_forward<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    block: &BlockLayout,
    h: Var,
    context: Option<Var>,
    causal_self: bool,
    n_heads: usize,
) -> Result<Var> {
    let mut h = h;
    if let Some(cl) = &block.cross {
        let c = context.ok_or_else(|| {
            HigrError::Contract("block_forward: cross block without context".into())
        })?;
        let q = tape.matmul(tape.rms_norm(h, vars[cl.norm.0])?, vars[cl.wq.0])?;
        let k = tape.matmul(tape.rms_norm(c, vars[cl.k_norm.0])?, vars[cl.wk.0])?;
        let v = tape.matmul(tape.rms_norm(c, vars[cl.v_norm.0])?, vars[cl.wv.0])?;
        let a = tape.attention(q, k, v, false, n_heads)?;
        h = tape.add(h, tape.matmul(a, vars[cl.wo.0])?)?;
    }
    {
        let x = tape.rms_norm(h, vars[block.self_norm.0])?;
        let q = tape.matmul(x, vars[block.self_wq.0])?;
        let k = tape.matmul(x, vars[block.self_wk.0])?;
        let v = tape.matmul(x, vars[block.self_wv.0])?;
        let a = tape.attention(q, k, v, causal_self, n_heads)?;
        h = tape.add(h, tape.matmul(a, vars[block.self_wo.0])?)?;
    }
    {
        let x = tape.rms_norm(h, vars[block.ffn_norm.0])?;
        let u = tape.add_row(tape.matmul(x, vars[block.ffn_w1.0])?, vars[block.ffn_b1.0])?;
        let u = tape.tanh(u)?;
        let y = tape.add_row(tape.matmul(u, vars[block.ffn_w2.0])?, vars[block.ffn_b2.0])?;
        h = tape.add(h, y)?;
    }
    Ok(h)
}

/// Ground-truth preference embedding: sum of the item's SID embeddings,
/// shape `[1×d_model]`.
pub fn sid_pref_embedding<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    sid: &SemanticID,
) -> Result<Var> {
    model.validate_sid(sid)?;
    let mut acc: Option<Var> = None;
    for (d, &code) in sid.codes.iter().enumerate() {
        let e = tape.gather_rows(vars[model.layout.sid_emb[d].0], &[code])?;
        acc = Some(match acc {
            None => e,
            Some(a) => tape.add(a, e)?,
        });
    }
    Ok(acc.unwrap())
}

/// Encode user features and history into the context matrix
/// `C [(1+n)×d_model]`: user token at position 0, history causal behind it.
pub fn encode_context<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    ctx: &UserContext,
) -> Result<Var> {
    let cfg = &model.cfg;
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
    let feats: Vec<F> = ctx.features.iter().map(|&v| F::from_f32(v)).collect();
    let fv = tape.constant(feats, vec![1, cfg.d_user])?;
    let user_tok = tape.add_row(
        tape.matmul(fv, vars[model.layout.user_w.0])?,
        vars[model.layout.user_b.0],
    )?;
    let mut rows = Vec::with_capacity(1 + ctx.history.len());
    let pos0 = tape.gather_rows(vars[model.layout.pos_ctx.0], &[0])?;
    rows.push(tape.add(user_tok, pos0)?);
    for (j, sid) in ctx.history.iter().enumerate() {
        let emb = sid_pref_embedding(tape, vars, model, sid)?;
        let pos = tape.gather_rows(vars[model.layout.pos_ctx.0], &[1 + j])?;
        rows.push(tape.add(emb, pos)?);
    }
    let mut h = tape.stack_rows(&rows)?;
    for block in &model.layout.ctx_blocks {
        h = block_forward(tape, vars, block, h, None, true, cfg.n_heads)?;
    }
    Ok(h)
}

/// Slate planner: BOS followed by teacher-forced (or decoded) preference
/// embeddings, producing one predicted preference per row.
pub fn planner_forward<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    prefs: &[Var],
    context: Var,
) -> Result<Var> {
    let cfg = &model.cfg;
    if prefs.len() + 1 > cfg.slate_size {
        return Err(HigrError::Dim(format!(
            "planner_forward: {} inputs exceed slate size {}",
            prefs.len() + 1,
            cfg.slate_size
        )));
    }
    let bos = tape.stack_rows(&[vars[model.layout.bos.0]])?;
    let mut rows = Vec::with_capacity(prefs.len() + 1);
    let pos0 = tape.gather_rows(vars[model.layout.pos_planner.0], &[0])?;
    rows.push(tape.add(bos, pos0)?);
    for (m, &p) in prefs.iter().enumerate() {
        let pos = tape.gather_rows(vars[model.layout.pos_planner.0], &[m + 1])?;
        rows.push(tape.add(p, pos)?);
    }
    let mut h = tape.stack_rows(&rows)?;
    for block in &model.layout.planner_blocks {
        h = block_forward(tape, vars, block, h, Some(context), true, cfg.n_heads)?;
    }
    Ok(h)
}

/// Shared item generator: preference embedding plus a SID prefix in,
/// per-position logits out (`logits[t]` is `[1×K]` over layer-(t+1) codes).
pub fn item_generator_forward<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    pref: Var,
    sid_prefix: &[usize],
    context: Var,
) -> Result<Vec<Var>> {
    let cfg = &model.cfg;
    if sid_prefix.len() > cfg.depth - 1 {
        return Err(HigrError::Contract(format!(
            "item_generator_forward: prefix {} too long for depth {}",
            sid_prefix.len(),
            cfg.depth
        )));
    }
    let mut rows = Vec::with_capacity(1 + sid_prefix.len());
    let pos0 = tape.gather_rows(vars[model.layout.pos_gen.0], &[0])?;
    let pref = tape.stack_rows(&[pref])?;
    rows.push(tape.add(pref, pos0)?);
    for (t, &code) in sid_prefix.iter().enumerate() {
        if code >= cfg.codebook_size {
            return Err(HigrError::Vocab(format!(
                "item_generator_forward: code {code} out of vocabulary"
            )));
        }
        let emb = tape.gather_rows(vars[model.layout.sid_emb[t].0], &[code])?;
        let pos = tape.gather_rows(vars[model.layout.pos_gen.0], &[t + 1])?;
        rows.push(tape.add(emb, pos)?);
    }
    let mut h = tape.stack_rows(&rows)?;
    for block in &model.layout.gen_blocks {
        h = block_forward(tape, vars, block, h, Some(context), true, cfg.n_heads)?;
    }
    let n_rows = rows.len();
    let mut logits = Vec::with_capacity(n_rows);
    for t in 0..n_rows {
        let ht = tape.stack_rows(&[tape.row(h, t)?])?;
        logits.push(tape.matmul(ht, vars[model.layout.heads[t].0])?);
    }
    Ok(logits)
}

/// All M·D teacher-forced logits of a hierarchical model on one sample,
/// stacked `[M·D×K]`, with flat targets in the same order.
pub fn slate_logits<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    sample: &SlateSample,
) -> Result<(Var, Vec<usize>)> {
    let cfg = &model.cfg;
    if sample.slate.len() != cfg.slate_size {
        return Err(HigrError::Dim(format!(
            "slate_logits: slate length {} vs M {}",
            sample.slate.len(),
            cfg.slate_size
        )));
    }
    for sid in &sample.slate {
        model.validate_sid(sid)?;
    }
    model.forward_counter.set(model.forward_counter.get() + 1);
    let context = encode_context(tape, vars, model, &sample.context)?;
    match cfg.kind {
        ModelKind::Hierarchical => {
            let prefs: Vec<Var> = sample.slate[..cfg.slate_size - 1]
                .iter()
                .map(|sid| sid_pref_embedding(tape, vars, model, sid))
                .collect::<Result<_>>()?;
            let planned = planner_forward(tape, vars, model, &prefs, context)?;
            let mut rows = Vec::with_capacity(cfg.slate_size * cfg.depth);
            let mut targets = Vec::with_capacity(cfg.slate_size * cfg.depth);
            for (m, sid) in sample.slate.iter().enumerate() {
                let pref = tape.row(planned, m)?;
                let prefix = &sid.codes[..cfg.depth - 1];
                let logits = item_generator_forward(tape, vars, model, pref, prefix, context)?;
                for (d, l) in logits.into_iter().enumerate() {
                    rows.push(l);
                    targets.push(sid.codes[d]);
                }
            }
            Ok((tape.stack_rows(&rows)?, targets))
        }
        ModelKind::Flat => {
            let tokens: Vec<(usize, usize)> = sample
                .slate
                .iter()
                .flat_map(|sid| sid.codes.iter().enumerate().map(|(d, &c)| (d, c)))
                .collect();
            let bos = tape.stack_rows(&[vars[model.layout.bos.0]])?;
            let pos0 = tape.gather_rows(vars[model.layout.pos_planner.0], &[0])?;
            let mut rows = vec![tape.add(bos, pos0)?];
            for (t, &(d, c)) in tokens[..tokens.len() - 1].iter().enumerate() {
                if c >= cfg.codebook_size {
                    return Err(HigrError::Vocab(format!("flat: code {c} out of vocabulary")));
                }
                let emb = tape.gather_rows(vars[model.layout.sid_emb[d].0], &[c])?;
                let pos = tape.gather_rows(vars[model.layout.pos_planner.0], &[t + 1])?;
                rows.push(tape.add(emb, pos)?);
            }
            let mut h = tape.stack_rows(&rows)?;
            for block in &model.layout.planner_blocks {
                h = block_forward(tape, vars, block, h, Some(context), true, cfg.n_heads)?;
            }
            let mut out_rows = Vec::with_capacity(tokens.len());
            let mut targets = Vec::with_capacity(tokens.len());
            for (t, &(d, c)) in tokens.iter().enumerate() {
                let ht = tape.stack_rows(&[tape.row(h, t)?])?;
                out_rows.push(tape.matmul(ht, vars[model.layout.heads[d].0])?);
                targets.push(c);
            }
            Ok((tape.stack_rows(&out_rows)?, targets))
        }
    }
}

/// Teacher-forced negative log-likelihood summed over all M·D positions.
pub fn slate_nll<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    sample: &SlateSample,
) -> Result<Var> {
    let (logits, targets) = slate_logits(tape, vars, model, sample)?;
    let mean = tape.softmax_ce(logits, &targets)?;
    tape.scale(mean, F::from_f64(targets.len() as f64))
}

/// Mean of `slate_nll` over a batch.
pub fn slate_nll_batch<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    model: &HsdModel,
    samples: &[&SlateSample],
) -> Result<Var> {
    if samples.is_empty() {
        return Err(HigrError::Contract("slate_nll_batch: empty batch".into()));
    }
    let mut total = tape.scalar(F::zero())?;
    for s in samples {
        total = tape.add(total, slate_nll(tape, vars, model, s)?)?;
    }
    tape.scale(total, F::one() / F::from_f64(samples.len() as f64))
}

#[cfg(test)]
mod tests;
