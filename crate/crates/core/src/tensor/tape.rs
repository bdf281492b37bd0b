//! Wengert tape: operations record their backward closures during the
//! forward pass; `backward` replays them in reverse topological order.
//!
//! Every op validates its output for non-finite values and surfaces a
//! `NonFinite` error at the op boundary instead of propagating NaN/Inf.

use std::cell::RefCell;
use std::rc::Rc;

use super::Scalar;
use crate::error::{HigrError, Result};

const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackFn<F> = Box<dyn Fn(&[F], &mut GradBuf<F>)>;

struct Node<F: Scalar> {
    data: Rc<Vec<F>>,
    shape: Vec<usize>,
    requires_grad: bool,
    back: Option<BackFn<F>>,
}

/// Per-node gradient accumulator used during the backward sweep.
pub struct GradBuf<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
    sizes: Vec<usize>,
}

impl<F: Scalar> GradBuf<F> {
    fn new(sizes: Vec<usize>) -> Self {
        let n = sizes.len();
        GradBuf {
            grads: vec![None; n],
            sizes,
        }
    }

    /// Gradient slot for node `id`, zero-initialized on first touch.
    pub fn slot(&mut self, id: usize) -> &mut [F] {
        let size = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![F::zero(); size])
    }
}

/// Gradients extracted after a backward sweep, indexed by `Var`.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root w.r.t. `v`; `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}

/// Recording tape. One per forward/backward pass.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op: &'static str,
        data: Vec<F>,
        shape: Vec<usize>,
        requires_grad: bool,
        back: Option<BackFn<F>>,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(HigrError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            data: Rc::new(data),
            shape,
            requires_grad,
            back: if requires_grad { back } else { None },
        });
        Ok(Var(id))
    }

    fn node_data(&self, v: Var) -> Rc<Vec<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].data)
    }

    fn node_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Value of a node (cheap Rc clone).
    pub fn value(&self, v: Var) -> Rc<Vec<F>> {
        self.node_data(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].data.len()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> F {
        let d = self.node_data(v);
        assert_eq!(d.len(), 1, "scalar_value on non-scalar");
        d[0]
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", data, shape, requires_grad, None)
    }

    pub fn constant(&self, data: Vec<F>, shape: Vec<usize>) -> Result<Var> {
        self.push("constant", data, shape, false, None)
    }

    pub fn scalar(&self, v: F) -> Result<Var> {
        self.constant(vec![v], vec![1])
    }

    /// Copy of `x` that blocks gradient flow (stop-gradient).
    pub fn detach(&self, x: Var) -> Result<Var> {
        let d = self.node_data(x);
        let shape = self.shape(x);
        self.push("detach", d.as_ref().clone(), shape, false, None)
    }

    // ── Elementwise binary ───────────────────────────────────────────

    fn check_same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(HigrError::Dim(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let (da, db) = (self.node_data(a), self.node_data(b));
        let out: Vec<F> = da.iter().zip(db.iter()).map(|(&x, &y)| x + y).collect();
        let (ga, gb) = (self.node_grad(a), self.node_grad(b));
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            if ga {
                let s = gb_buf.slot(a.0);
                for (si, &gi) in s.iter_mut().zip(g) {
                    *si = *si + gi;
                }
            }
            if gb {
                let s = gb_buf.slot(b.0);
                for (si, &gi) in s.iter_mut().zip(g) {
                    *si = *si + gi;
                }
            }
        });
        self.push("add", out, self.shape(a), ga || gb, Some(back))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let (da, db) = (self.node_data(a), self.node_data(b));
        let out: Vec<F> = da.iter().zip(db.iter()).map(|(&x, &y)| x - y).collect();
        let (ga, gb) = (self.node_grad(a), self.node_grad(b));
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            if ga {
                let s = gb_buf.slot(a.0);
                for (si, &gi) in s.iter_mut().zip(g) {
                    *si = *si + gi;
                }
            }
            if gb {
                let s = gb_buf.slot(b.0);
                for (si, &gi) in s.iter_mut().zip(g) {
                    *si = *si - gi;
                }
            }
        });
        self.push("sub", out, self.shape(a), ga || gb, Some(back))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let (da, db) = (self.node_data(a), self.node_data(b));
        let out: Vec<F> = da.iter().zip(db.iter()).map(|(&x, &y)| x * y).collect();
        let (ga, gb) = (self.node_grad(a), self.node_grad(b));
        let (ca, cb) = (Rc::clone(&da), Rc::clone(&db));
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            if ga {
                let s = gb_buf.slot(a.0);
                for i in 0..g.len() {
                    s[i] = s[i] + g[i] * cb[i];
                }
            }
            if gb {
                let s = gb_buf.slot(b.0);
                for i in 0..g.len() {
                    s[i] = s[i] + g[i] * ca[i];
                }
            }
        });
        self.push("mul", out, self.shape(a), ga || gb, Some(back))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let (da, db) = (self.node_data(a), self.node_data(b));
        let out: Vec<F> = da.iter().zip(db.iter()).map(|(&x, &y)| x / y).collect();
        let (ga, gb) = (self.node_grad(a), self.node_grad(b));
        let (ca, cb) = (Rc::clone(&da), Rc::clone(&db));
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            if ga {
                let s = gb_buf.slot(a.0);
                for i in 0..g.len() {
                    s[i] = s[i] + g[i] / cb[i];
                }
            }
            if gb {
                let s = gb_buf.slot(b.0);
                for i in 0..g.len() {
                    s[i] = s[i] - g[i] * ca[i] / (cb[i] * cb[i]);
                }
            }
        });
        self.push("div", out, self.shape(a), ga || gb, Some(back))
    }

    /// `a[n×d] + row[d]` broadcast over rows (bias add).
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let sa = self.shape(a);
        let d = *sa.last().ok_or_else(|| HigrError::Dim("add_row: scalar lhs".into()))?;
        if self.numel(row) != d {
            return Err(HigrError::Dim(format!(
                "add_row: last dim {d} vs row len {}",
                self.numel(row)
            )));
        }
        let (da, dr) = (self.node_data(a), self.node_data(row));
        let out: Vec<F> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| x + dr[i % d])
            .collect();
        let (ga, gr) = (self.node_grad(a), self.node_grad(row));
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            if ga {
                let s = gb_buf.slot(a.0);
                for (si, &gi) in s.iter_mut().zip(g) {
                    *si = *si + gi;
                }
            }
            if gr {
                let s = gb_buf.slot(row.0);
                for (i, &gi) in g.iter().enumerate() {
                    s[i % d] = s[i % d] + gi;
                }
            }
        });
        self.push("add_row", out, sa, ga || gr, Some(back))
    }

    pub fn scale(&self, a: Var, c: F) -> Result<Var> {
        let da = self.node_data(a);
        let out: Vec<F> = da.iter().map(|&x| x * c).collect();
        let ga = self.node_grad(a);
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            let s = gb_buf.slot(a.0);
            for (si, &gi) in s.iter_mut().zip(g) {
                *si = *si + gi * c;
            }
        });
        self.push("scale", out, self.shape(a), ga, Some(back))
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Result<Var> {
        let da = self.node_data(a);
        let out: Vec<F> = da.iter().map(|&x| x + c).collect();
        let ga = self.node_grad(a);
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            let s = gb_buf.slot(a.0);
            for (si, &gi) in s.iter_mut().zip(g) {
                *si = *si + gi;
            }
        });
        self.push("add_scalar", out, self.shape(a), ga, Some(back))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -F::one())
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(
        &self,
        op: &'static str,
        a: Var,
        f: impl Fn(F) -> F,
        // dy/dx as a function of (x, y)
        dfdx: impl Fn(F, F) -> F + 'static,
    ) -> Result<Var> {
        let da = self.node_data(a);
        let out: Vec<F> = da.iter().map(|&x| f(x)).collect();
        let ga = self.node_grad(a);
        let cx = Rc::clone(&da);
        let cy = Rc::new(out.clone());
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            let s = gb_buf.slot(a.0);
            for i in 0..g.len() {
                s[i] = s[i] + g[i] * dfdx(cx[i], cy[i]);
            }
        });
        self.push(op, out, self.shape(a), ga, Some(back))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary("ln", a, |x| x.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let half = F::from_f64(0.5);
        self.unary("sqrt", a, |x| x.sqrt(), move |_, y| half / y)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| F::one() / (F::one() + (-x).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    /// Clamp into `[lo, hi]`; pass-through gradient inside the interval,
    /// zero outside (subgradient convention).
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Result<Var> {
        self.unary(
            "clamp",
            a,
            |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    /// Numerically stable log σ(x).
    pub fn log_sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(
            "log_sigmoid",
            a,
            |x| {
                if x >= F::zero() {
                    -(F::one() + (-x).exp()).ln()
                } else {
                    x - (F::one() + x.exp()).ln()
                }
            },
            // d/dx log σ(x) = σ(−x)
            |x, _| F::one() / (F::one() + x.exp()),
        )
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&self, a: Var) -> Result<Var> {
        let da = self.node_data(a);
        let total: F = da.iter().copied().sum();
        let ga = self.node_grad(a);
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            let s = gb_buf.slot(a.0);
            for si in s.iter_mut() {
                *si = *si + g[0];
            }
        });
        self.push("sum", vec![total], vec![1], ga, Some(back))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.numel(a);
        let s = self.sum(a)?;
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    // ── Matrix ops ───────────────────────────────────────────────────

    /// Standard matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(HigrError::Dim(format!("matmul: {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.node_data(a), self.node_data(b));
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + av * db[p * n + j];
                }
            }
        }
        let (ga, gb) = (self.node_grad(a), self.node_grad(b));
        let (ca, cb) = (Rc::clone(&da), Rc::clone(&db));
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            if ga {
                let s = gb_buf.slot(a.0);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * cb[p * n + j];
                        }
                        s[i * k + p] = s[i * k + p] + acc;
                    }
                }
            }
            if gb {
                let s = gb_buf.slot(b.0);
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = F::zero();
                        for i in 0..m {
                            acc = acc + ca[i * k + p] * g[i * n + j];
                        }
                        s[p * n + j] = s[p * n + j] + acc;
                    }
                }
            }
        });
        self.push("matmul", out, vec![m, n], ga || gb, Some(back))
    }

    /// Row gather from an embedding table: `out[r] = table[indices[r]]`.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(HigrError::Dim(format!("gather_rows: table {st:?}")));
        }
        let (rows, d) = (st[0], st[1]);
        for &i in indices {
            if i >= rows {
                return Err(HigrError::Index(format!(
                    "gather_rows: index {i} out of {rows}"
                )));
            }
        }
        let dt = self.node_data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&dt[i * d..(i + 1) * d]);
        }
        let gt = self.node_grad(table);
        let idx: Vec<usize> = indices.to_vec();
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            let s = gb_buf.slot(table.0);
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    s[i * d + j] = s[i * d + j] + g[r * d + j];
                }
            }
        });
        self.push("gather_rows", out, vec![indices.len(), d], gt, Some(back))
    }

    /// Stack vectors (each of length d) into an `[n×d]` matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(HigrError::Contract("stack_rows: empty input".into()));
        }
        let d = self.numel(rows[0]);
        let mut out = Vec::with_capacity(rows.len() * d);
        let mut any_grad = false;
        for &r in rows {
            if self.numel(r) != d {
                return Err(HigrError::Dim("stack_rows: ragged rows".into()));
            }
            any_grad |= self.node_grad(r);
            out.extend_from_slice(&self.node_data(r));
        }
        let ids: Vec<(usize, bool)> = rows.iter().map(|&r| (r.0, self.node_grad(r))).collect();
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            for (r, &(id, rg)) in ids.iter().enumerate() {
                if rg {
                    let s = gb_buf.slot(id);
                    for j in 0..d {
                        s[j] = s[j] + g[r * d + j];
                    }
                }
            }
        });
        self.push("stack_rows", out, vec![rows.len(), d], any_grad, Some(back))
    }

    /// Row `i` of an `[n×d]` matrix as a `[d]` vector.
    pub fn row(&self, x: Var, i: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(HigrError::Dim(format!("row: shape {sx:?}")));
        }
        let (n, d) = (sx[0], sx[1]);
        if i >= n {
            return Err(HigrError::Index(format!("row: {i} out of {n}")));
        }
        let dx = self.node_data(x);
        let out = dx[i * d..(i + 1) * d].to_vec();
        let gx = self.node_grad(x);
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            let s = gb_buf.slot(x.0);
            for j in 0..d {
                s[i * d + j] = s[i * d + j] + g[j];
            }
        });
        self.push("row", out, vec![d], gx, Some(back))
    }

    // ── Fused neural ops ─────────────────────────────────────────────

    /// RMS normalization over the last dimension, scaled by `gain`.
    /// `y = x / sqrt(mean(x²) + ε) · gain`, ε = 1e-6.
    pub fn rms_norm(&self, x: Var, gain: Var) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx
            .last()
            .ok_or_else(|| HigrError::Dim("rms_norm: scalar input".into()))?;
        if d == 0 {
            return Err(HigrError::Dim("rms_norm: zero-length last dimension".into()));
        }
        if self.numel(gain) != d {
            return Err(HigrError::Dim(format!(
                "rms_norm: last dim {d} vs gain len {}",
                self.numel(gain)
            )));
        }
        let rows = self.numel(x) / d;
        let (dx, dg) = (self.node_data(x), self.node_data(gain));
        let eps = F::from_f64(RMS_EPS);
        let dn = F::from_f64(d as f64);
        let mut out = vec![F::zero(); rows * d];
        let mut inv_rms = vec![F::zero(); rows];
        for r in 0..rows {
            let xr = &dx[r * d..(r + 1) * d];
            let ms: F = xr.iter().map(|&v| v * v).sum::<F>() / dn;
            let ir = F::one() / (ms + eps).sqrt();
            inv_rms[r] = ir;
            for j in 0..d {
                out[r * d + j] = xr[j] * ir * dg[j];
            }
        }
        let (gx, gg) = (self.node_grad(x), self.node_grad(gain));
        let (cx, cg) = (Rc::clone(&dx), Rc::clone(&dg));
        let inv = Rc::new(inv_rms);
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            if gx {
                let s = gb_buf.slot(x.0);
                for r in 0..rows {
                    let ir = inv[r];
                    let xr = &cx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    // Σ_l g_l·gain_l·x_l
                    let mut acc = F::zero();
                    for l in 0..d {
                        acc = acc + gr[l] * cg[l] * xr[l];
                    }
                    let ir3 = ir * ir * ir;
                    for j in 0..d {
                        s[r * d + j] =
                            s[r * d + j] + gr[j] * cg[j] * ir - xr[j] * ir3 / dn * acc;
                    }
                }
            }
            if gg {
                let s = gb_buf.slot(gain.0);
                for r in 0..rows {
                    let ir = inv[r];
                    for j in 0..d {
                        s[j] = s[j] + g[r * d + j] * cx[r * d + j] * ir;
                    }
                }
            }
        });
        self.push("rms_norm", out, sx, gx || gg, Some(back))
    }

    /// Mean negative log softmax probability of `targets` over rows of
    /// `logits[n×V]`.
    pub fn softmax_ce(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(HigrError::Dim(format!(
                "softmax_ce: logits {sl:?} vs {} targets",
                targets.len()
            )));
        }
        let (n, vocab) = (sl[0], sl[1]);
        for &t in targets {
            if t >= vocab {
                return Err(HigrError::Index(format!(
                    "softmax_ce: target {t} out of vocab {vocab}"
                )));
            }
        }
        let dl = self.node_data(logits);
        let mut probs = vec![F::zero(); n * vocab];
        let mut loss = F::zero();
        for r in 0..n {
            let lr = &dl[r * vocab..(r + 1) * vocab];
            let m = lr.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..vocab {
                let e = (lr[j] - m).exp();
                probs[r * vocab + j] = e;
                z = z + e;
            }
            for j in 0..vocab {
                probs[r * vocab + j] = probs[r * vocab + j] / z;
            }
            loss = loss - (probs[r * vocab + targets[r]]).ln();
        }
        let nf = F::from_f64(n as f64);
        loss = loss / nf;
        let gl = self.node_grad(logits);
        let cp = Rc::new(probs);
        let tg: Vec<usize> = targets.to_vec();
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            let s = gb_buf.slot(logits.0);
            for r in 0..tg.len() {
                for j in 0..vocab {
                    let ind = if j == tg[r] { F::one() } else { F::zero() };
                    s[r * vocab + j] =
                        s[r * vocab + j] + g[0] * (cp[r * vocab + j] - ind) / nf;
                }
            }
        });
        self.push("softmax_ce", vec![loss], vec![1], gl, Some(back))
    }

    /// Per-row log softmax probability of each target: `out[r] = log p(t_r)`,
    /// shape `[n]`. Stable via max subtraction.
    pub fn target_log_probs(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(HigrError::Dim(format!(
                "target_log_probs: logits {sl:?} vs {} targets",
                targets.len()
            )));
        }
        let (n, vocab) = (sl[0], sl[1]);
        for &t in targets {
            if t >= vocab {
                return Err(HigrError::Index(format!(
                    "target_log_probs: target {t} out of vocab {vocab}"
                )));
            }
        }
        let dl = self.node_data(logits);
        let mut probs = vec![F::zero(); n * vocab];
        let mut out = vec![F::zero(); n];
        for r in 0..n {
            let lr = &dl[r * vocab..(r + 1) * vocab];
            let m = lr.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..vocab {
                let e = (lr[j] - m).exp();
                probs[r * vocab + j] = e;
                z = z + e;
            }
            for j in 0..vocab {
                probs[r * vocab + j] = probs[r * vocab + j] / z;
            }
            out[r] = (lr[targets[r]] - m) - z.ln();
        }
        let gl = self.node_grad(logits);
        let cp = Rc::new(probs);
        let tg: Vec<usize> = targets.to_vec();
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            let s = gb_buf.slot(logits.0);
            for r in 0..tg.len() {
                for j in 0..vocab {
                    let ind = if j == tg[r] { F::one() } else { F::zero() };
                    s[r * vocab + j] =
                        s[r * vocab + j] + g[r] * (ind - cp[r * vocab + j]);
                }
            }
        });
        self.push("target_log_probs", out, vec![n], gl, Some(back))
    }

    /// Multi-head scaled dot-product attention.
    /// `causal` masks future keys and requires `L_q == L_k`.
    pub fn attention(&self, q: Var, k: Var, v: Var, causal: bool, n_heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(HigrError::Dim(format!(
                "attention: q {sq:?}, k {sk:?}, v {sv:?}"
            )));
        }
        let (lq, lk, d) = (sq[0], sk[0], sq[1]);
        if d % n_heads != 0 {
            return Err(HigrError::Dim(format!(
                "attention: dim {d} not divisible by {n_heads} heads"
            )));
        }
        if causal && lq != lk {
            return Err(HigrError::Contract(format!(
                "attention: causal mask needs L_q == L_k, got {lq} vs {lk}"
            )));
        }
        let dh = d / n_heads;
        let inv_s = F::one() / F::from_f64((dh as f64).sqrt());
        let (dq, dk, dv) = (self.node_data(q), self.node_data(k), self.node_data(v));
        let mut out = vec![F::zero(); lq * d];
        // softmax weights saved for backward: [heads][lq*lk]
        let mut weights = vec![F::zero(); n_heads * lq * lk];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..lq {
                let limit = if causal { i + 1 } else { lk };
                // scores
                let mut m = F::neg_infinity();
                let mut srow = vec![F::zero(); limit];
                for (j, sj) in srow.iter_mut().enumerate() {
                    let mut acc = F::zero();
                    for t in 0..dh {
                        acc = acc + dq[i * d + off + t] * dk[j * d + off + t];
                    }
                    *sj = acc * inv_s;
                    m = m.max(*sj);
                }
                let mut z = F::zero();
                for sj in srow.iter_mut() {
                    *sj = (*sj - m).exp();
                    z = z + *sj;
                }
                let wbase = h * lq * lk + i * lk;
                for (j, &sj) in srow.iter().enumerate() {
                    let p = sj / z;
                    weights[wbase + j] = p;
                    for t in 0..dh {
                        out[i * d + off + t] = out[i * d + off + t] + p * dv[j * d + off + t];
                    }
                }
            }
        }
        let (gq, gk, gv) = (self.node_grad(q), self.node_grad(k), self.node_grad(v));
        let (cq, ck, cv) = (Rc::clone(&dq), Rc::clone(&dk), Rc::clone(&dv));
        let cw = Rc::new(weights);
        let back: BackFn<F> = Box::new(move |g, gb_buf| {
            // dS = P ∘ (dP − rowsum(dP∘P)); dP = dO·vᵀ per head
            let mut dq_acc = vec![F::zero(); lq * d];
            let mut dk_acc = vec![F::zero(); lk * d];
            let mut dv_acc = vec![F::zero(); lk * d];
            for h in 0..n_heads {
                let off = h * dh;
                for i in 0..lq {
                    let wbase = h * lq * lk + i * lk;
                    // dP row and rowsum(dP∘P)
                    let mut dp = vec![F::zero(); lk];
                    let mut dot = F::zero();
                    for j in 0..lk {
                        let p = cw[wbase + j];
                        if p == F::zero() {
                            continue;
                        }
                        let mut acc = F::zero();
                        for t in 0..dh {
                            acc = acc + g[i * d + off + t] * cv[j * d + off + t];
                        }
                        dp[j] = acc;
                        dot = dot + acc * p;
                    }
                    for j in 0..lk {
                        let p = cw[wbase + j];
                        if p == F::zero() {
                            continue;
                        }
                        // dV
                        for t in 0..dh {
                            dv_acc[j * d + off + t] =
                                dv_acc[j * d + off + t] + p * g[i * d + off + t];
                        }
                        let ds = p * (dp[j] - dot) * inv_s;
                        for t in 0..dh {
                            dq_acc[i * d + off + t] =
                                dq_acc[i * d + off + t] + ds * ck[j * d + off + t];
                            dk_acc[j * d + off + t] =
                                dk_acc[j * d + off + t] + ds * cq[i * d + off + t];
                        }
                    }
                }
            }
            if gq {
                let s = gb_buf.slot(q.0);
                for (si, &gi) in s.iter_mut().zip(&dq_acc) {
                    *si = *si + gi;
                }
            }
            if gk {
                let s = gb_buf.slot(k.0);
                for (si, &gi) in s.iter_mut().zip(&dk_acc) {
                    *si = *si + gi;
                }
            }
            if gv {
                let s = gb_buf.slot(v.0);
                for (si, &gi) in s.iter_mut().zip(&dv_acc) {
                    *si = *si + gi;
                }
            }
        });
        self.push("attention", out, vec![lq, d], gq || gk || gv, Some(back))
    }

    // ── Composite helpers ────────────────────────────────────────────

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Σ x² as a scalar.
    pub fn sq_norm(&self, a: Var) -> Result<Var> {
        self.dot(a, a)
    }

    /// Σ (a−b)² as a scalar.
    pub fn sq_diff_sum(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.sq_norm(d)
    }

    /// Cosine similarity of two vectors as a scalar. The denominator is
    /// floored by a tiny constant so zero vectors yield 0 instead of NaN.
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let num = self.dot(a, b)?;
        let na = self.sqrt(self.sq_norm(a)?)?;
        let nb = self.sqrt(self.sq_norm(b)?)?;
        let den = self.mul(na, nb)?;
        let eps = self.constant(vec![F::from_f32(1e-12)], vec![1])?;
        self.div(num, self.add(den, eps)?)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Each recorded op's backward runs
    /// exactly once, in reverse order of recording.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.numel(root) != 1 {
            return Err(HigrError::Contract(
                "backward: root must be scalar-valued".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.data.len()).collect();
        let mut buf = GradBuf::new(sizes);
        buf.slot(root.0)[0] = F::one();
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(back) = &node.back {
                if let Some(g) = buf.grads[id].clone() {
                    back(&g, &mut buf);
                }
            }
        }
        Ok(Gradients { grads: buf.grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity() {
        let t = t64();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let out = t.matmul(i2, i2).unwrap();
        assert_eq!(&*t.value(out), &vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand() {
        let t = t64();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![0.0, 1.0], vec![2, 1]).unwrap();
        let out = t.matmul(a, b).unwrap();
        assert_eq!(&*t.value(out), &vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let t = t64();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let t = t64();
        let x = t.leaf(vec![1.0, -2.0, 3.0], vec![3], true).unwrap();
        let s = t.sum(x).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rms_norm_constant_vector() {
        let t = t64();
        let c = 3.7;
        let x = t.constant(vec![c; 8], vec![8]).unwrap();
        let gain = t.constant(vec![1.0; 8], vec![8]).unwrap();
        let y = t.rms_norm(x, gain).unwrap();
        for &v in t.value(y).iter() {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn rms_norm_zero_gain() {
        let t = t64();
        let x = t.constant(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let gain = t.constant(vec![0.0; 3], vec![3]).unwrap();
        let y = t.rms_norm(x, gain).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_zero_length_errors() {
        let t = t64();
        let x = t.constant(vec![], vec![0, 0]).unwrap();
        let gain = t.constant(vec![], vec![0]).unwrap();
        assert!(t.rms_norm(x, gain).is_err());
    }

    #[test]
    fn softmax_ce_uniform() {
        let t = t64();
        let v = 256;
        let logits = t.constant(vec![0.0; v], vec![1, v]).unwrap();
        let loss = t.softmax_ce(logits, &[17]).unwrap();
        assert!((t.scalar_value(loss) - (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_saturated() {
        let t = t64();
        let mut l = vec![0.0; 8];
        l[3] = 1e4;
        let logits = t.constant(l, vec![1, 8]).unwrap();
        let loss = t.softmax_ce(logits, &[3]).unwrap();
        assert!(t.scalar_value(loss).abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_out_of_range_target() {
        let t = t64();
        let logits = t.constant(vec![0.0; 4], vec![1, 4]).unwrap();
        assert!(matches!(
            t.softmax_ce(logits, &[4]),
            Err(HigrError::Index(_))
        ));
    }

    #[test]
    fn attention_single_kv_returns_v() {
        let t = t64();
        let q = t.constant(vec![5.0, -3.0], vec![1, 2]).unwrap();
        let k = t.constant(vec![0.1, 0.2], vec![1, 2]).unwrap();
        let v = t.constant(vec![7.0, -1.0], vec![1, 2]).unwrap();
        let out = t.attention(q, k, v, false, 1).unwrap();
        assert_eq!(&*t.value(out), &vec![7.0, -1.0]);
    }

    #[test]
    fn attention_causal_first_position() {
        let t = t64();
        let q = t
            .constant(vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], vec![3, 2])
            .unwrap();
        let k = t
            .constant(vec![0.3, 0.1, -0.2, 0.9, 0.4, 0.4], vec![3, 2])
            .unwrap();
        let v = t
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2])
            .unwrap();
        let out = t.attention(q, k, v, true, 1).unwrap();
        let o = t.value(out);
        // position 0 attends only to key 0
        assert!((o[0] - 1.0).abs() < 1e-12 && (o[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_causal_requires_square() {
        let t = t64();
        let q = t.constant(vec![0.0; 2], vec![1, 2]).unwrap();
        let k = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let v = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(matches!(
            t.attention(q, k, v, true, 1),
            Err(HigrError::Contract(_))
        ));
    }

    #[test]
    fn nan_surfaced_at_op_boundary() {
        let t = t64();
        let a = t.constant(vec![1.0], vec![1]).unwrap();
        let b = t.constant(vec![0.0], vec![1]).unwrap();
        assert!(matches!(
            t.div(a, b),
            Err(HigrError::NonFinite { .. })
        ));
    }

    #[test]
    fn clamp_values_and_gradient() {
        let t = t64();
        let x = t.leaf(vec![-2.0, 0.5, 3.0], vec![3], true).unwrap();
        let y = t.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(&*t.value(y), &vec![0.0, 0.5, 1.0]);
        let s = t.sum(y).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn target_log_probs_consistent_with_softmax_ce() {
        let t = t64();
        let logits_vals = vec![0.3, -1.2, 0.7, 2.0, 0.0, -0.5];
        let targets = [2usize, 0];
        let a = t.constant(logits_vals.clone(), vec![2, 3]).unwrap();
        let lps = t.target_log_probs(a, &targets).unwrap();
        let ce = t.softmax_ce(a, &targets).unwrap();
        let mean_neg: f64 =
            -t.value(lps).iter().sum::<f64>() / targets.len() as f64;
        assert!((t.scalar_value(ce) - mean_neg).abs() < 1e-12);
    }

    #[test]
    fn target_log_probs_gradient_matches_fd() {
        use crate::tensor::grad_check;
        let targets = [1usize, 2];
        let rep = grad_check(
            |t, vs| {
                let lps = t.target_log_probs(vs[0], &targets)?;
                // weighted sum so each row's gradient is distinct
                let w = t.constant(vec![1.0, -0.7], vec![2])?;
                t.dot(lps, w)
            },
            &[(vec![0.2, -0.4, 1.1, 0.8, -1.0, 0.3], vec![2, 3])],
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let t = t64();
        let x = t.leaf(vec![2.0], vec![1], true).unwrap();
        let d = t.detach(x).unwrap();
        let y = t.mul(x, d).unwrap(); // y = x · sg(x); dy/dx = sg(x) = 2
        let grads = t.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }
}
