//! Contrastive residual-quantized auto-encoder: tokenizes item embeddings
//! into D-level semantic IDs. Trained with reconstruction, layer/global
//! quantization, and prefix-level contrastive losses.

pub mod metrics;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{HigrError, Result};
use crate::params::{PIdx, ParamSet};
use crate::tensor::{Scalar, Tape, TensorData, Var};

/// Externally produced content embedding for one item.
#[derive(Clone, Debug)]
pub struct ItemEmbedding {
    pub item_id: String,
    pub x: Vec<f32>,
}

/// Ordered tuple of D codeword indices, coarse-to-fine.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticID {
    pub codes: Vec<usize>,
}

impl SemanticID {
    pub fn new(codes: Vec<usize>) -> Self {
        SemanticID { codes }
    }

    pub fn depth(&self) -> usize {
        self.codes.len()
    }
}

/// Frozen view of the D×K codeword tables.
#[derive(Clone, Debug)]
pub struct Codebook {
    /// One `[K×d_z]` table per quantization layer.
    pub layers: Vec<TensorData>,
}

impl Codebook {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn size(&self) -> usize {
        self.layers[0].shape[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[0].shape[1]
    }

    pub fn codeword(&self, layer: usize, code: usize) -> &[f32] {
        let d = self.latent_dim();
        &self.layers[layer].data[code * d..(code + 1) * d]
    }
}

/// Full record of one greedy residual quantization.
#[derive(Clone, Debug)]
pub struct QuantizationTrace {
    pub codes: SemanticID,
    /// r⁰..r^D; r⁰ = z, r^d = r^{d−1} − e_{c^d}^d.
    pub residuals: Vec<Vec<f32>>,
    /// ẑ = Σ_d e_{c^d}^d.
    pub z_hat: Vec<f32>,
}

/// Tokenizer hyperparameters. Defaults follow the reference configuration
/// (D=3, K=256, η=0.1, λ₁=0.1, λ₂=0.01, w=(1,0.1), cosine threshold 0.8).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrqConfig {
    pub d_in: usize,
    pub d_z: usize,
    pub depth: usize,
    pub codebook_size: usize,
    pub eta: f32,
    pub lambda1: f32,
    pub lambda2: f32,
    pub tau: f32,
    /// Per-layer InfoNCE weights, length depth−1.
    pub infonce_weights: Vec<f32>,
    pub positive_threshold: f32,
    /// Weight of the per-layer commitment term kept alongside the global
    /// quantization loss.
    pub layer_quant_weight: f32,
}

impl Default for CrqConfig {
    fn default() -> Self {
        CrqConfig {
            d_in: 128,
            d_z: 64,
            depth: 3,
            codebook_size: 256,
            eta: 0.1,
            lambda1: 0.1,
            lambda2: 0.01,
            tau: 0.1,
            infonce_weights: vec![1.0, 0.1],
            positive_threshold: 0.8,
            layer_quant_weight: 1.0,
        }
    }
}

impl CrqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(HigrError::Config("crq: depth must be >= 2".into()));
        }
        if self.codebook_size < 2 {
            return Err(HigrError::Config("crq: codebook_size must be >= 2".into()));
        }
        if self.tau <= 0.0 {
            return Err(HigrError::Config("crq: tau must be positive".into()));
        }
        if !(self.positive_threshold > 0.0 && self.positive_threshold <= 1.0) {
            return Err(HigrError::Config(
                "crq: positive_threshold must lie in (0,1]".into(),
            ));
        }
        if self.infonce_weights.len() != self.depth - 1 {
            return Err(HigrError::Config(format!(
                "crq: need {} infonce weights, got {}",
                self.depth - 1,
                self.infonce_weights.len()
            )));
        }
        if self.infonce_weights.iter().any(|&w| w <= 0.0) {
            return Err(HigrError::Config("crq: infonce weights must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        2 * self.d_z
    }
}

/// Parameter layout of the auto-encoder plus codebooks.
#[derive(Clone, Debug)]
pub struct CrqLayout {
    pub enc_w1: PIdx,
    pub enc_b1: PIdx,
    pub enc_w2: PIdx,
    pub enc_b2: PIdx,
    pub dec_w1: PIdx,
    pub dec_b1: PIdx,
    pub dec_w2: PIdx,
    pub dec_b2: PIdx,
    pub codebooks: Vec<PIdx>,
}

pub struct CrqModel {
    pub cfg: CrqConfig,
    pub params: ParamSet,
    pub layout: CrqLayout,
}

impl CrqModel {
    pub fn init(cfg: CrqConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let (d_in, d_z, h) = (cfg.d_in, cfg.d_z, cfg.hidden());
        let std_in = 1.0 / (d_in as f32).sqrt();
        let std_h = 1.0 / (h as f32).sqrt();
        let std_z = 1.0 / (d_z as f32).sqrt();
        let layout = CrqLayout {
            enc_w1: params.add("enc.w1", TensorData::randn(vec![d_in, h], std_in, rng)),
            enc_b1: params.add("enc.b1", TensorData::zeros(vec![h])),
            enc_w2: params.add("enc.w2", TensorData::randn(vec![h, d_z], std_h, rng)),
            enc_b2: params.add("enc.b2", TensorData::zeros(vec![d_z])),
            dec_w1: params.add("dec.w1", TensorData::randn(vec![d_z, h], std_z, rng)),
            dec_b1: params.add("dec.b1", TensorData::zeros(vec![h])),
            dec_w2: params.add("dec.w2", TensorData::randn(vec![h, d_in], std_h, rng)),
            dec_b2: params.add("dec.b2", TensorData::zeros(vec![d_in])),
            codebooks: (0..cfg.depth)
                .map(|d| {
                    params.add(
                        format!("codebook.{d}"),
                        TensorData::randn(vec![cfg.codebook_size, d_z], 0.1, rng),
                    )
                })
                .collect(),
        };
        Ok(CrqModel {
            cfg,
            params,
            layout,
        })
    }

    /// Frozen codebook view.
    pub fn codebook(&self) -> Codebook {
        Codebook {
            layers: self
                .layout
                .codebooks
                .iter()
                .map(|&i| self.params.get(i).clone())
                .collect(),
        }
    }

    /// Plain f32 encoder forward (no tape).
    pub fn encode_f32(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cfg.d_in {
            return Err(HigrError::Dim(format!(
                "encode: input dim {} vs corpus d_in {}",
                x.len(),
                self.cfg.d_in
            )));
        }
        let h = mlp_layer(
            x,
            self.params.get(self.layout.enc_w1),
            self.params.get(self.layout.enc_b1),
            true,
        );
        Ok(mlp_layer(
            &h,
            self.params.get(self.layout.enc_w2),
            self.params.get(self.layout.enc_b2),
            false,
        ))
    }

    /// Plain f32 decoder forward (no tape).
    pub fn decode_f32(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.cfg.d_z {
            return Err(HigrError::Dim(format!(
                "decode: latent dim {} vs d_z {}",
                z.len(),
                self.cfg.d_z
            )));
        }
        let h = mlp_layer(
            z,
            self.params.get(self.layout.dec_w1),
            self.params.get(self.layout.dec_b1),
            true,
        );
        Ok(mlp_layer(
            &h,
            self.params.get(self.layout.dec_w2),
            self.params.get(self.layout.dec_b2),
            false,
        ))
    }

    /// Tokenize one embedding with the frozen codebooks.
    pub fn assign_sid(&self, x: &[f32]) -> Result<SemanticID> {
        let z = self.encode_f32(x)?;
        Ok(residual_quantize(&z, &self.codebook()).codes)
    }
}

fn mlp_layer(x: &[f32], w: &TensorData, b: &TensorData, nonlinear: bool) -> Vec<f32> {
    let (n_in, n_out) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), n_in);
    let mut out = b.data.clone();
    for i in 0..n_in {
        let xi = x[i];
        for j in 0..n_out {
            out[j] += xi * w.data[i * n_out + j];
        }
    }
    if nonlinear {
        for v in out.iter_mut() {
            *v = v.tanh();
        }
    }
    out
}

/// Greedy residual quantization: per layer pick the nearest codeword
/// (squared L2, ties to the lowest index) and subtract it.
pub fn residual_quantize(z: &[f32], cb: &Codebook) -> QuantizationTrace {
    let d_z = cb.latent_dim();
    debug_assert_eq!(z.len(), d_z);
    let mut residuals = vec![z.to_vec()];
    let mut codes = Vec::with_capacity(cb.depth());
    let mut z_hat = vec![0.0f32; d_z];
    for layer in 0..cb.depth() {
        let r = residuals.last().unwrap().clone();
        let mut best = 0usize;
        let mut best_dist = f32::INFINITY;
        for k in 0..cb.size() {
            let e = cb.codeword(layer, k);
            let dist: f32 = r.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        let e = cb.codeword(layer, best);
        let next: Vec<f32> = r.iter().zip(e).map(|(&a, &b)| a - b).collect();
        for (zh, &ev) in z_hat.iter_mut().zip(e) {
            *zh += ev;
        }
        codes.push(best);
        residuals.push(next);
    }
    QuantizationTrace {
        codes: SemanticID::new(codes),
        residuals,
        z_hat,
    }
}

/// Anchor/positive mining by embedding cosine similarity: every ordered
/// pair (a, p), a ≠ p, with cos(x_a, x_p) ≥ threshold.
pub fn mine_pairs(corpus: &[ItemEmbedding], threshold: f32) -> Vec<(usize, usize)> {
    let norms: Vec<f32> = corpus
        .iter()
        .map(|it| it.x.iter().map(|v| v * v).sum::<f32>().sqrt())
        .collect();
    let mut pairs = Vec::new();
    for a in 0..corpus.len() {
        for p in 0..corpus.len() {
            if a == p {
                continue;
            }
            let denom = norms[a] * norms[p];
            if denom == 0.0 {
                continue;
            }
            let dot: f32 = corpus[a]
                .x
                .iter()
                .zip(&corpus[p].x)
                .map(|(&u, &v)| u * v)
                .sum();
            if dot / denom >= threshold {
                pairs.push((a, p));
            }
        }
    }
    pairs
}

// ── Tape-side loss builders ──────────────────────────────────────────

fn linear<F: Scalar>(tape: &Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Encoder forward on a tape: 2-layer MLP with tanh, input `[1×d_in]`.
pub fn encode_var<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    layout: &CrqLayout,
    x: Var,
) -> Result<Var> {
    let h = linear(tape, x, vars[layout.enc_w1.0], vars[layout.enc_b1.0])?;
    let h = tape.tanh(h)?;
    linear(tape, h, vars[layout.enc_w2.0], vars[layout.enc_b2.0])
}

/// Decoder forward on a tape, input `[1×d_z]`.
pub fn decode_var<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    layout: &CrqLayout,
    z: Var,
) -> Result<Var> {
    let h = linear(tape, z, vars[layout.dec_w1.0], vars[layout.dec_b1.0])?;
    let h = tape.tanh(h)?;
    linear(tape, h, vars[layout.dec_w2.0], vars[layout.dec_b2.0])
}

/// Σ_d (‖r^{d−1} − sg(e_d)‖² + η‖e_d − sg(r^{d−1})‖²).
/// `residual_inputs[d]` is r^{d−1}; `codewords[d]` is e_{c^d}^d.
pub fn layer_quant_loss<F: Scalar>(
    tape: &Tape<F>,
    residual_inputs: &[Var],
    codewords: &[Var],
    eta: F,
) -> Result<Var> {
    debug_assert_eq!(residual_inputs.len(), codewords.len());
    let mut total = tape.scalar(F::zero())?;
    for (&r, &e) in residual_inputs.iter().zip(codewords) {
        let commit = tape.sq_diff_sum(r, tape.detach(e)?)?;
        let codebook_pull = tape.sq_diff_sum(e, tape.detach(r)?)?;
        let term = tape.add(commit, tape.scale(codebook_pull, eta)?)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// ‖ẑ − sg(z)‖² + η‖z − sg(ẑ)‖².
pub fn global_quant_loss<F: Scalar>(tape: &Tape<F>, z: Var, z_hat: Var, eta: F) -> Result<Var> {
    let a = tape.sq_diff_sum(z_hat, tape.detach(z)?)?;
    let b = tape.sq_diff_sum(z, tape.detach(z_hat)?)?;
    tape.add(a, tape.scale(b, eta)?)
}

/// One anchor/positive group for the prefix contrastive loss: matched
/// codeword vars per layer (layers 1..D, index 0-based).
pub struct ContrastiveGroup {
    pub anchor: Vec<Var>,
    pub positive: Vec<Var>,
    /// Per negative sample, its codeword vars per layer.
    pub negatives: Vec<Vec<Var>>,
}

/// Temperature-scaled InfoNCE on codeword prefixes, layers 1..D−1 only;
/// averaged over groups.
pub fn prefix_contrastive_loss<F: Scalar>(
    tape: &Tape<F>,
    groups: &[ContrastiveGroup],
    cfg: &CrqConfig,
) -> Result<Var> {
    if groups.is_empty() {
        return Err(HigrError::Contract(
            "prefix_contrastive_loss: empty anchor-positive set".into(),
        ));
    }
    let inv_tau = F::from_f32(1.0 / cfg.tau);
    let mut total = tape.scalar(F::zero())?;
    for g in groups {
        let mut per_pair = tape.scalar(F::zero())?;
        for d in 0..cfg.depth - 1 {
            let cos_ap = tape.cosine(g.anchor[d], g.positive[d])?;
            let psi_ap = tape.exp(tape.scale(cos_ap, inv_tau)?)?;
            let mut denom = psi_ap;
            for neg in &g.negatives {
                let cos_an = tape.cosine(g.anchor[d], neg[d])?;
                let psi_an = tape.exp(tape.scale(cos_an, inv_tau)?)?;
                denom = tape.add(denom, psi_an)?;
            }
            let frac = tape.div(psi_ap, denom)?;
            let term = tape.ln(frac)?;
            per_pair = tape.add(per_pair, tape.scale(term, F::from_f32(cfg.infonce_weights[d]))?)?;
        }
        let scaled = tape.scale(per_pair, -F::one() / F::from_f64((cfg.depth - 1) as f64))?;
        total = tape.add(total, scaled)?;
    }
    tape.scale(total, F::one() / F::from_f64(groups.len() as f64))
}

/// Everything produced by one batch forward.
pub struct CrqBatchLoss {
    pub total: Var,
    pub recon: Var,
    pub layer_quant: Var,
    pub global_quant: Var,
    pub contrastive: Var,
    pub codes: Vec<SemanticID>,
    /// Latent z per item, read back from the tape (f32, for reseeding).
    pub latents: Vec<Vec<f32>>,
}

/// Scalar snapshot of the loss components.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrqLossParts {
    pub total: f64,
    pub recon: f64,
    pub layer_quant: f64,
    pub global_quant: f64,
    pub contrastive: f64,
}

impl CrqBatchLoss {
    pub fn parts<F: Scalar>(&self, tape: &Tape<F>) -> CrqLossParts {
        CrqLossParts {
            total: tape.scalar_value(self.total).to_f64(),
            recon: tape.scalar_value(self.recon).to_f64(),
            layer_quant: tape.scalar_value(self.layer_quant).to_f64(),
            global_quant: tape.scalar_value(self.global_quant).to_f64(),
            contrastive: tape.scalar_value(self.contrastive).to_f64(),
        }
    }
}

/// Nearest-codeword assignment against tape-held codebook values.
fn assign_codes_on_tape<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    layout: &CrqLayout,
    cfg: &CrqConfig,
    z: &[F],
) -> Vec<usize> {
    let (k, d_z) = (cfg.codebook_size, cfg.d_z);
    let mut r: Vec<F> = z.to_vec();
    let mut codes = Vec::with_capacity(cfg.depth);
    for d in 0..cfg.depth {
        let table = tape.value(vars[layout.codebooks[d].0]);
        let mut best = 0usize;
        let mut best_dist = F::infinity();
        for c in 0..k {
            let e = &table[c * d_z..(c + 1) * d_z];
            let mut dist = F::zero();
            for j in 0..d_z {
                let diff = r[j] - e[j];
                dist = dist + diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        let e = &table[best * d_z..(best + 1) * d_z];
        for j in 0..d_z {
            r[j] = r[j] - e[j];
        }
        codes.push(best);
    }
    codes
}

/// Full CRQ-VAE batch loss:
/// L = L_recon + L_layer_quan + λ₁·L_global_quan + λ₂·L_cont,
/// each term averaged over the batch. `pairs` lists every in-batch
/// (anchor, positive) edge: the first edge per anchor forms its
/// contrastive group, and all listed positives of the anchor are kept out
/// of that group's negative pool (only sub-threshold items may repel).
/// With no pairs, the contrastive term is 0.
pub fn crqvae_batch_loss<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    layout: &CrqLayout,
    cfg: &CrqConfig,
    xs: &[Vec<F>],
    pairs: &[(usize, usize)],
) -> Result<CrqBatchLoss> {
    crqvae_batch_loss_impl(tape, vars, layout, cfg, xs, pairs, None)
}

/// Frozen stop-gradient operands for gradient checking. Finite differences
/// evaluate the true function, which sees through sg(·); pinning the sg
/// arguments to their unperturbed values makes the checked surrogate match
/// what the tape differentiates, without changing value or gradient at the
/// evaluation point.
#[derive(Clone, Debug)]
pub struct SgPins {
    pub per_item: Vec<ItemSgPins>,
}

#[derive(Clone, Debug)]
pub struct ItemSgPins {
    /// e_{c^d}^d values, for sg(e) in the layer loss.
    pub codewords: Vec<Vec<f64>>,
    /// r^{d−1} values, for sg(r) in the layer loss.
    pub residual_inputs: Vec<Vec<f64>>,
    /// z values, for sg(z) in the global loss.
    pub z: Vec<f64>,
    /// ẑ values, for sg(ẑ) in the global loss.
    pub z_hat: Vec<f64>,
    /// ẑ − z, the straight-through offset added to z before decoding.
    pub st_offset: Vec<f64>,
}

/// Capture quantizer assignments and sg operand values at the current
/// parameter point (for `crqvae_batch_loss_pinned`).
pub fn collect_sg_pins(
    model: &CrqModel,
    xs: &[Vec<f64>],
) -> Result<(Vec<SemanticID>, SgPins)> {
    let tape: Tape<f64> = Tape::new();
    let bound = model.params.bind(&tape)?;
    let cfg = &model.cfg;
    let mut codes_out = Vec::with_capacity(xs.len());
    let mut pins = Vec::with_capacity(xs.len());
    for x in xs {
        let xv = tape.constant(x.clone(), vec![1, cfg.d_in])?;
        let z = encode_var(&tape, &bound, &model.layout, xv)?;
        let z_vals = tape.value(z).as_ref().clone();
        let codes = assign_codes_on_tape(&tape, &bound, &model.layout, cfg, &z_vals);
        let mut residual_inputs = Vec::with_capacity(cfg.depth);
        let mut codewords = Vec::with_capacity(cfg.depth);
        let mut r = z_vals.clone();
        let mut z_hat = vec![0.0f64; cfg.d_z];
        for d in 0..cfg.depth {
            let table = tape.value(bound[model.layout.codebooks[d].0]);
            let e = table[codes[d] * cfg.d_z..(codes[d] + 1) * cfg.d_z].to_vec();
            residual_inputs.push(r.clone());
            for j in 0..cfg.d_z {
                z_hat[j] += e[j];
                r[j] -= e[j];
            }
            codewords.push(e);
        }
        let st_offset: Vec<f64> = z_hat.iter().zip(&z_vals).map(|(&a, &b)| a - b).collect();
        pins.push(ItemSgPins {
            codewords,
            residual_inputs,
            z: z_vals,
            z_hat,
            st_offset,
        });
        codes_out.push(SemanticID::new(codes));
    }
    Ok((codes_out, SgPins { per_item: pins }))
}

/// Batch loss with pinned quantizer assignments and sg operands; value and
/// gradient agree with `crqvae_batch_loss` at the pinning point.
pub fn crqvae_batch_loss_pinned<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    layout: &CrqLayout,
    cfg: &CrqConfig,
    xs: &[Vec<F>],
    pairs: &[(usize, usize)],
    codes: &[SemanticID],
    pins: &SgPins,
) -> Result<CrqBatchLoss> {
    crqvae_batch_loss_impl(tape, vars, layout, cfg, xs, pairs, Some((codes, pins)))
}

fn crqvae_batch_loss_impl<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    layout: &CrqLayout,
    cfg: &CrqConfig,
    xs: &[Vec<F>],
    pairs: &[(usize, usize)],
    fixed: Option<(&[SemanticID], &SgPins)>,
) -> Result<CrqBatchLoss> {
    if xs.is_empty() {
        return Err(HigrError::Contract("crqvae_batch_loss: empty batch".into()));
    }
    let eta = F::from_f32(cfg.eta);
    let n = xs.len();
    let inv_n = F::one() / F::from_f64(n as f64);

    let mut recon_sum = tape.scalar(F::zero())?;
    let mut layer_sum = tape.scalar(F::zero())?;
    let mut global_sum = tape.scalar(F::zero())?;
    let mut all_codes: Vec<SemanticID> = Vec::with_capacity(n);
    let mut latents: Vec<Vec<f32>> = Vec::with_capacity(n);
    // codeword vars per item per layer, reused by the contrastive term
    let mut e_vars: Vec<Vec<Var>> = Vec::with_capacity(n);

    for (item_idx, x) in xs.iter().enumerate() {
        if x.len() != cfg.d_in {
            return Err(HigrError::Dim(format!(
                "crqvae_batch_loss: item dim {} vs d_in {}",
                x.len(),
                cfg.d_in
            )));
        }
        let xv = tape.constant(x.clone(), vec![1, cfg.d_in])?;
        let z = encode_var(tape, vars, layout, xv)?;
        let z_vals = tape.value(z);
        latents.push(z_vals.iter().map(|&v| v.to_f32()).collect());
        let codes = match fixed {
            Some((cs, _)) => cs[item_idx].codes.clone(),
            None => assign_codes_on_tape(tape, vars, layout, cfg, &z_vals),
        };

        let mut residual_inputs = Vec::with_capacity(cfg.depth);
        let mut codewords = Vec::with_capacity(cfg.depth);
        let mut r = z;
        let mut z_hat: Option<Var> = None;
        for d in 0..cfg.depth {
            let e = tape.gather_rows(vars[layout.codebooks[d].0], &[codes[d]])?;
            residual_inputs.push(r);
            codewords.push(e);
            r = tape.sub(r, e)?;
            z_hat = Some(match z_hat {
                None => e,
                Some(acc) => tape.add(acc, e)?,
            });
        }
        let z_hat = z_hat.unwrap();

        let (layer_term, global_term, st) = match fixed {
            None => {
                let lt = layer_quant_loss(tape, &residual_inputs, &codewords, eta)?;
                let gt = global_quant_loss(tape, z, z_hat, eta)?;
                // straight-through: decoder sees ẑ, encoder identity gradient
                let st = tape.add(z, tape.detach(tape.sub(z_hat, z)?)?)?;
                (lt, gt, st)
            }
            Some((_, pins)) => {
                // sg operands replaced by pinned constants
                let pin = &pins.per_item[item_idx];
                let cvec = |v: &[f64]| -> Result<Var> {
                    tape.constant(v.iter().map(|&x| F::from_f64(x)).collect(), vec![1, cfg.d_z])
                };
                let mut lt = tape.scalar(F::zero())?;
                for d in 0..cfg.depth {
                    let commit = tape.sq_diff_sum(residual_inputs[d], cvec(&pin.codewords[d])?)?;
                    let pull = tape.sq_diff_sum(codewords[d], cvec(&pin.residual_inputs[d])?)?;
                    lt = tape.add(lt, tape.add(commit, tape.scale(pull, eta)?)?)?;
                }
                let ga = tape.sq_diff_sum(z_hat, cvec(&pin.z)?)?;
                let gb = tape.sq_diff_sum(z, cvec(&pin.z_hat)?)?;
                let gt = tape.add(ga, tape.scale(gb, eta)?)?;
                let st = tape.add(z, cvec(&pin.st_offset)?)?;
                (lt, gt, st)
            }
        };
        layer_sum = tape.add(layer_sum, layer_term)?;
        global_sum = tape.add(global_sum, global_term)?;
        let x_hat = decode_var(tape, vars, layout, st)?;
        recon_sum = tape.add(recon_sum, tape.sq_diff_sum(x_hat, xv)?)?;

        all_codes.push(SemanticID::new(codes));
        e_vars.push(codewords);
    }

    let recon = tape.scale(recon_sum, inv_n)?;
    let layer_quant = tape.scale(layer_sum, inv_n)?;
    let global_quant = tape.scale(global_sum, inv_n)?;

    let contrastive = if pairs.is_empty() || cfg.lambda2 == 0.0 {
        tape.scalar(F::zero())?
    } else {
        // one group per anchor (first listed positive); every listed
        // positive of the anchor is masked out of its negatives
        let mut pos_of: Vec<std::collections::HashSet<usize>> =
            vec![std::collections::HashSet::new(); n];
        let mut group_pairs: Vec<(usize, usize)> = Vec::new();
        for &(a, p) in pairs {
            if pos_of[a].is_empty() {
                group_pairs.push((a, p));
            }
            pos_of[a].insert(p);
        }
        let groups: Vec<ContrastiveGroup> = group_pairs
            .iter()
            .map(|&(a, p)| ContrastiveGroup {
                anchor: e_vars[a].clone(),
                positive: e_vars[p].clone(),
                negatives: (0..n)
                    .filter(|&i| i != a && !pos_of[a].contains(&i))
                    .map(|i| e_vars[i].clone())
                    .collect(),
            })
            .collect();
        prefix_contrastive_loss(tape, &groups, cfg)?
    };

    let mut total = tape.add(
        recon,
        tape.scale(layer_quant, F::from_f32(cfg.layer_quant_weight))?,
    )?;
    total = tape.add(total, tape.scale(global_quant, F::from_f32(cfg.lambda1))?)?;
    total = tape.add(total, tape.scale(contrastive, F::from_f32(cfg.lambda2))?)?;

    Ok(CrqBatchLoss {
        total,
        recon,
        layer_quant,
        global_quant,
        contrastive,
        codes: all_codes,
        latents,
    })
}
