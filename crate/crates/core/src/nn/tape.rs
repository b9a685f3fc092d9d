//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` walks it once in reverse. Ops are batched:
//! matrices are `[batch, features]` and losses reduce to scalars.

use crate::error::{Error, Result};
use crate::nn::params::{Gradients, ParamKey};
use crate::nn::tensor::{softmax_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Softmax(Var),
    AddConst(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    GatedSum {
        inputs: Vec<Option<Var>>,
        weights: Var,
        mask: Vec<bool>,
    },
    MassRenorm {
        gates: Var,
        full: Vec<bool>,
        kept: Vec<bool>,
    },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    MeanRows(Var),
    CvSquared(Var),
    KlDiv { target: Tensor, pred: Var, eps: f64 },
    SmoothLoad { logits: Var, thresholds: Tensor, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Divergence {
                stage: "forward".into(),
                detail: format!("non-finite value produced by {op:?}"),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter; gradients are reported under `key`.
    pub fn param(&mut self, key: ParamKey, value: &Tensor) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param(key),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x·wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (out_dim, in_dim) = (wv.rows(), wv.cols());
        if xv.cols() != in_dim || wv.shape().len() != 2 {
            return Err(Error::shape("affine input", &[in_dim], &[xv.cols()]));
        }
        if bv.len() != out_dim {
            return Err(Error::shape("affine bias", &[out_dim], &[bv.len()]));
        }
        let batch = xv.rows();
        let mut out = vec![0.0; batch * out_dim];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        for r in 0..batch {
            let xr = &xd[r * in_dim..(r + 1) * in_dim];
            let orow = &mut out[r * out_dim..(r + 1) * out_dim];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wr = &wd[o * in_dim..(o + 1) * in_dim];
                let mut acc = bd[o];
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                *slot = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(vec![batch, out_dim], out)?,
            Op::Affine { x, w, b },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mut t = Tensor::zeros(v.shape());
        for r in 0..v.rows() {
            softmax_into(v.row(r), t.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// `x + c` for a constant `c` (used for routing noise).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.add_scaled(c, 1.0)?;
        let rg = self.rg(x);
        self.push(t, Op::AddConst(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.add_scaled(self.value(b), 1.0)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &v in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("sum of scalars", &[1], t.shape()));
            }
            total += t.item();
        }
        let rg = terms.iter().any(|&v| self.rg(v));
        self.push(Tensor::scalar(total), Op::Sum(terms.to_vec()), rg)
    }

    /// `out[b] = Σ_i mask[b,i]·w[b,i]·input_i[b]`.
    ///
    /// `inputs[i] = None` marks a module that is active for no row of the batch.
    pub fn gated_sum(&mut self, inputs: &[Option<Var>], weights: Var, mask: Vec<bool>) -> Result<Var> {
        let n = inputs.len();
        let wv = self.value(weights);
        let batch = wv.rows();
        if wv.cols() != n || mask.len() != batch * n {
            return Err(Error::shape("gated_sum weights", &[batch, n], wv.shape()));
        }
        let dim = inputs
            .iter()
            .flatten()
            .map(|&v| self.value(v).cols())
            .next()
            .ok_or_else(|| Error::Routing("no module is active for this batch".into()))?;
        let mut out = vec![0.0; batch * dim];
        for (i, inp) in inputs.iter().enumerate() {
            let Some(inp) = inp else {
                if (0..batch).any(|r| mask[r * n + i]) {
                    return Err(Error::Routing(format!("module {i} active but not evaluated")));
                }
                continue;
            };
            let iv = self.value(*inp);
            if iv.rows() != batch || iv.cols() != dim {
                return Err(Error::shape("gated_sum input", &[batch, dim], iv.shape()));
            }
            for r in 0..batch {
                if !mask[r * n + i] {
                    continue;
                }
                let g = wv.data()[r * n + i];
                let orow = &mut out[r * dim..(r + 1) * dim];
                for (o, x) in orow.iter_mut().zip(iv.row(r)) {
                    *o += g * x;
                }
            }
        }
        let rg = self.rg(weights) || inputs.iter().flatten().any(|&v| self.rg(v));
        self.push(
            Tensor::new(vec![batch, dim], out)?,
            Op::GatedSum {
                inputs: inputs.to_vec(),
                weights,
                mask,
            },
            rg,
        )
    }

    /// Rescales the gates of the `kept` modules so their total activated mass
    /// equals the mass the `full` activation set would have had:
    /// `w_i = kept_i · g_i · (Σ_full g) / (Σ_kept g)`.
    ///
    /// When `kept == full` the ratio is exactly 1 and the gates pass through
    /// bit-for-bit.
    pub fn mass_renorm(&mut self, gates: Var, full: Vec<bool>, kept: Vec<bool>) -> Result<Var> {
        let gv = self.value(gates);
        let (batch, n) = (gv.rows(), gv.cols());
        if full.len() != batch * n || kept.len() != batch * n {
            return Err(Error::shape("mass_renorm masks", &[batch * n], &[full.len()]));
        }
        let mut out = vec![0.0; batch * n];
        for r in 0..batch {
            let g = gv.row(r);
            let (a, s) = renorm_sums(g, &full[r * n..(r + 1) * n], &kept[r * n..(r + 1) * n]);
            if s <= 0.0 {
                return Err(Error::Routing("retained modules carry zero gate mass".into()));
            }
            let ratio = a / s;
            for i in 0..n {
                if kept[r * n + i] {
                    out[r * n + i] = g[i] * ratio;
                }
            }
        }
        let rg = self.rg(gates);
        self.push(
            Tensor::new(vec![batch, n], out)?,
            Op::MassRenorm { gates, full, kept },
            rg,
        )
    }

    /// Mean cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (batch, classes) = (lv.rows(), lv.cols());
        if labels.len() != batch {
            return Err(Error::shape("cross_entropy labels", &[batch], &[labels.len()]));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Index {
                    what: "class label",
                    index: y,
                    bound: classes,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / batch as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Column means of a `[B, N]` matrix, as an `[N]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (batch, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for r in 0..batch {
            for (o, a) in out.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        for o in &mut out {
            *o /= batch as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::MeanRows(x), rg)
    }

    /// Squared coefficient of variation (population variance over mean²).
    pub fn cv_squared(&mut self, v: Var) -> Result<Var> {
        let value = cv_squared(self.value(v).data());
        let rg = self.rg(v);
        self.push(Tensor::scalar(value), Op::CvSquared(v), rg)
    }

    /// Batch mean of `Σ_i p_i ln((p_i + ε)/(q_i + ε))` with `p = target`, `q = pred`.
    pub fn kl_div(&mut self, target: Tensor, pred: Var, eps: f64) -> Result<Var> {
        let qv = self.value(pred);
        if target.shape() != qv.shape() {
            return Err(Error::shape("kl target", qv.shape(), target.shape()));
        }
        let batch = qv.rows();
        let total: f64 = target
            .data()
            .iter()
            .zip(qv.data())
            .map(|(&p, &q)| if p > 0.0 { p * ((p + eps) / (q + eps)).ln() } else { 0.0 })
            .sum();
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(total / batch as f64),
            Op::KlDiv { target, pred, eps },
            rg,
        )
    }

    /// Smooth routed-sample load per column: `mean_b Φ((z_bi − t_bi)/s)`.
    ///
    /// `t_bi` is the top-k entry threshold of row `b` excluding column `i`;
    /// thresholds are treated as constants.
    pub fn smooth_load(&mut self, logits: Var, thresholds: Tensor, scale: f64) -> Result<Var> {
        let zv = self.value(logits);
        if thresholds.shape() != zv.shape() {
            return Err(Error::shape("smooth load thresholds", zv.shape(), thresholds.shape()));
        }
        if !(scale > 0.0) {
            return Err(Error::Config(format!("smooth load scale must be positive, got {scale}")));
        }
        let (batch, n) = (zv.rows(), zv.cols());
        let mut out = vec![0.0; n];
        for r in 0..batch {
            for ((o, z), t) in out.iter_mut().zip(zv.row(r)).zip(thresholds.row(r)) {
                *o += normal_cdf((z - t) / scale);
            }
        }
        for o in &mut out {
            *o /= batch as f64;
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::vector(out),
            Op::SmoothLoad {
                logits,
                thresholds,
                scale,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every
    /// parameter the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward loss", &[1], lv.shape()));
        }
        if !self.rg(loss) {
            return Err(Error::EmptyGradient);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => match out.get_mut(key) {
                    Some(acc) => acc.add_scaled(&dy, 1.0)?,
                    None => {
                        out.insert(key.clone(), dy);
                    }
                },
                Op::Affine { x, w, b } => self.back_affine(&mut grads, &dy, *x, *w, *b),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = dy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Softmax(x) => {
                    let s = &node.value;
                    let mut dx = Tensor::zeros(s.shape());
                    for r in 0..s.rows() {
                        let (sr, gr) = (s.row(r), dy.row(r));
                        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, a), g) in dx.row_mut(r).iter_mut().zip(sr).zip(gr) {
                            *d = a * (g - dot);
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::AddConst(x) => self.accumulate(&mut grads, *x, dy),
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, dy.clone());
                    self.accumulate(&mut grads, *b, dy);
                }
                Op::Scale(a, c) => {
                    let data = dy.data().iter().map(|g| g * c).collect();
                    self.accumulate(&mut grads, *a, Tensor::new(dy.shape().to_vec(), data)?);
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        self.accumulate(&mut grads, t, dy.clone());
                    }
                }
                Op::GatedSum {
                    inputs,
                    weights,
                    mask,
                } => self.back_gated_sum(&mut grads, &dy, inputs, *weights, mask)?,
                Op::MassRenorm { gates, full, kept } => {
                    let gv = self.value(*gates);
                    let (batch, n) = (gv.rows(), gv.cols());
                    let mut dg = Tensor::zeros(gv.shape());
                    for r in 0..batch {
                        let g = gv.row(r);
                        let (fm, km) = (&full[r * n..(r + 1) * n], &kept[r * n..(r + 1) * n]);
                        let (a, s) = renorm_sums(g, fm, km);
                        let ratio = a / s;
                        let dw = dy.row(r);
                        let weighted: f64 = (0..n).filter(|&i| km[i]).map(|i| g[i] * dw[i]).sum();
                        let drow = dg.row_mut(r);
                        for j in 0..n {
                            let mut d = 0.0;
                            if km[j] {
                                d += ratio * dw[j] - a / (s * s) * weighted;
                            }
                            if fm[j] {
                                d += weighted / s;
                            }
                            drow[j] = d;
                        }
                    }
                    self.accumulate(&mut grads, *gates, dg);
                }
                Op::CrossEntropy { logits, labels } => {
                    let lv = self.value(*logits);
                    let batch = lv.rows();
                    let scale = dy.item() / batch as f64;
                    let mut dz = Tensor::zeros(lv.shape());
                    for (r, &y) in labels.iter().enumerate() {
                        let drow = dz.row_mut(r);
                        softmax_into(lv.row(r), drow);
                        drow[y] -= 1.0;
                        for d in drow.iter_mut() {
                            *d *= scale;
                        }
                    }
                    self.accumulate(&mut grads, *logits, dz);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let batch = xv.rows();
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..batch {
                        for (d, g) in dx.row_mut(r).iter_mut().zip(dy.data()) {
                            *d = g / batch as f64;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::CvSquared(v) => {
                    let vv = self.value(*v);
                    let x = vv.data();
                    let n = x.len() as f64;
                    let mean = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
                    let g = dy.item();
                    let data = x
                        .iter()
                        .map(|a| g * (2.0 * (a - mean) / (n * mean * mean) - 2.0 * var / (n * mean.powi(3))))
                        .collect();
                    self.accumulate(&mut grads, *v, Tensor::new(vv.shape().to_vec(), data)?);
                }
                Op::KlDiv { target, pred, eps } => {
                    let qv = self.value(*pred);
                    let scale = dy.item() / qv.rows() as f64;
                    let data = target
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&p, &q)| -scale * p / (q + eps))
                        .collect();
                    self.accumulate(&mut grads, *pred, Tensor::new(qv.shape().to_vec(), data)?);
                }
                Op::SmoothLoad {
                    logits,
                    thresholds,
                    scale,
                } => {
                    let zv = self.value(*logits);
                    let batch = zv.rows();
                    let mut dz = Tensor::zeros(zv.shape());
                    for r in 0..batch {
                        let (zr, tr) = (zv.row(r), thresholds.row(r));
                        for (i, d) in dz.row_mut(r).iter_mut().enumerate() {
                            let u = (zr[i] - tr[i]) / scale;
                            *d = dy.data()[i] * normal_pdf(u) / (scale * batch as f64);
                        }
                    }
                    self.accumulate(&mut grads, *logits, dz);
                }
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyGradient);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn back_affine(&self, grads: &mut [Option<Tensor>], dy: &Tensor, x: Var, w: Var, b: Var) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (out_dim, in_dim) = (wv.rows(), wv.cols());
        let batch = xv.rows();
        if self.rg(x) {
            let mut dx = Tensor::zeros(xv.shape());
            for r in 0..batch {
                let gr = dy.row(r);
                let drow = dx.row_mut(r);
                for (o, &g) in gr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (d, wv) in drow.iter_mut().zip(&wv.data()[o * in_dim..(o + 1) * in_dim]) {
                        *d += g * wv;
                    }
                }
            }
            self.accumulate(grads, x, dx);
        }
        if self.rg(w) {
            let mut dw = Tensor::zeros(wv.shape());
            let dwd = dw.data_mut();
            for r in 0..batch {
                let xr = xv.row(r);
                for (o, &g) in dy.row(r).iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (d, a) in dwd[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xr) {
                        *d += g * a;
                    }
                }
            }
            self.accumulate(grads, w, dw);
        }
        if self.rg(b) {
            let mut db = vec![0.0; out_dim];
            for r in 0..batch {
                for (d, g) in db.iter_mut().zip(dy.row(r)) {
                    *d += g;
                }
            }
            let shape = self.value(b).shape().to_vec();
            self.accumulate(grads, b, Tensor::new(shape, db).expect("bias shape"));
        }
    }

    fn back_gated_sum(
        &self,
        grads: &mut [Option<Tensor>],
        dy: &Tensor,
        inputs: &[Option<Var>],
        weights: Var,
        mask: &[bool],
    ) -> Result<()> {
        let wv = self.value(weights);
        let (batch, n) = (wv.rows(), wv.cols());
        let mut dw = Tensor::zeros(wv.shape());
        for (i, inp) in inputs.iter().enumerate() {
            let Some(inp) = inp else { continue };
            let iv = self.value(*inp);
            let mut dx = Tensor::zeros(iv.shape());
            for r in 0..batch {
                if !mask[r * n + i] {
                    continue;
                }
                let g = wv.data()[r * n + i];
                let gr = dy.row(r);
                dw.data_mut()[r * n + i] = gr.iter().zip(iv.row(r)).map(|(a, b)| a * b).sum();
                for (d, a) in dx.row_mut(r).iter_mut().zip(gr) {
                    *d = g * a;
                }
            }
            self.accumulate(grads, *inp, dx);
        }
        self.accumulate(grads, weights, dw);
        Ok(())
    }
}

fn renorm_sums(g: &[f64], full: &[bool], kept: &[bool]) -> (f64, f64) {
    let mut a = 0.0;
    let mut s = 0.0;
    for i in 0..g.len() {
        if full[i] {
            a += g[i];
        }
        if kept[i] {
            s += g[i];
        }
    }
    (a, s)
}

/// Standard normal CDF.
pub fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Population variance of `x` divided by its squared mean.
pub fn cv_squared(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    var / (mean * mean)
}
