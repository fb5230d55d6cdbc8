//! Reverse-mode differentiation over a creation-ordered tape.
//!
//! Every op appends a node holding its forward value and the parents it
//! read. [`Tape::backward`] walks the nodes in reverse creation order, so
//! the tape itself is the topological order. Gradients only flow into nodes
//! whose `requires_grad` flag is set; constants and frozen parameters are
//! skipped entirely.

use crate::error::{Error, Result};
use crate::rng::counter_uniform;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// GELU tanh-approximation constants: `sqrt(2/pi)` and the cubic coefficient.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_FLOOR: f64 = 1e-12;

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Tokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Bce {
        logits: Var,
        labels: Vec<T>,
    },
    Mean(Var),
    Sum(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Keys the counter-based dropout stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Softmax probabilities recorded by an attention node, laid out
    /// `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}: inner extents differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} does not match {:?}",
                self.value(row).shape(),
                self.value(a).shape()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x = *x + b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::SoftmaxRows(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Shape(format!(
                "layer_norm: affine params must have {n} entries"
            )));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = T::lit(r);
            for j in 0..n {
                let h = (row[j].as_f64() - mean) * r;
                xhat[i * n + j] = T::lit(h);
                out[i * n + j] = T::lit(h * g[j].as_f64() + b[j].as_f64());
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "l2_normalize_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        let mut norms = vec![T::zero(); m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let norm = row
                .iter()
                .map(|v| v.as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
                .max(L2_NORM_FLOOR);
            norms[i] = T::lit(norm);
            for j in 0..n {
                out[i * n + j] = T::lit(row[j].as_f64() / norm);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::L2Normalize { x, norms },
            rg,
        ))
    }

    /// Inverted dropout with a mask drawn from the counter stream keyed by
    /// `key`. A rate of zero returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, key: DropoutKey) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n as u64)
            .map(|i| {
                if counter_uniform(key.seed, key.layer, key.step, i) < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "select_rows")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Shape(format!("select_rows: row {r} of {m}")));
            }
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[rows.len(), n], out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Builds transformer token rows: for each of `batch` images, a class
    /// token followed by its patch embeddings, all offset by positional rows.
    /// `patches: [batch·P, D]`, `cls: [D]`, `pos: [P+1, D]` → `[batch·(P+1), D]`.
    pub fn tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (bp, d) = self.dims2(patches, "tokens")?;
        let (s, d2) = self.dims2(pos, "tokens pos")?;
        if batch == 0 || bp % batch != 0 || bp / batch + 1 != s || d2 != d {
            return Err(Error::Shape(format!(
                "tokens: patches {:?}, pos {:?}, batch {batch}",
                self.value(patches).shape(),
                self.value(pos).shape()
            )));
        }
        if self.value(cls).len() != d {
            return Err(Error::Shape(format!(
                "tokens: class token {:?} vs width {d}",
                self.value(cls).shape()
            )));
        }
        let p = s - 1;
        let (pv, cv, posv) = (
            self.value(patches).data(),
            self.value(cls).data(),
            self.value(pos).data(),
        );
        let mut out = vec![T::zero(); batch * s * d];
        for b in 0..batch {
            for t in 0..s {
                let dst = &mut out[(b * s + t) * d..(b * s + t + 1) * d];
                let src = if t == 0 {
                    cv
                } else {
                    &pv[(b * p + t - 1) * d..(b * p + t) * d]
                };
                let prow = &posv[t * d..(t + 1) * d];
                for j in 0..d {
                    dst[j] = src[j] + prow[j];
                }
            }
        }
        let rg = self.rg(patches) || self.rg(cls) || self.rg(pos);
        Ok(self.push(
            Tensor::new(&[batch * s, d], out)?,
            Op::Tokens {
                patches,
                cls,
                pos,
                batch,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences of
    /// length `seq`. Inputs are `[batch·seq, D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: {rows}x{d} rows vs batch {batch} seq {seq} heads {heads}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        let mut logits = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = &kv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                        *l = T::lit(dot * scale);
                    }
                    softmax_in_place(&mut logits);
                    let pbase = ((b * heads + h) * seq + i) * seq;
                    probs[pbase..pbase + seq].copy_from_slice(&logits);
                    for c in 0..dh {
                        let mut acc = 0f64;
                        for (j, p) in logits.iter().enumerate() {
                            acc += p.as_f64() * vv[(b * seq + j) * d + off + c].as_f64();
                        }
                        out[(b * seq + i) * d + off + c] = T::lit(acc);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(&[rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits, in the log-sum-exp form
    /// `max(z,0) - z·y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() {
            return Err(Error::Shape(format!(
                "bce_with_logits: {} logits vs {} labels",
                z.len(),
                labels.len()
            )));
        }
        if z.is_empty() {
            return Err(Error::Domain("bce_with_logits on empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Domain(format!("label {bad} is not in {{0, 1}}")));
        }
        let n = labels.len() as f64;
        let loss: f64 = z
            .data()
            .iter()
            .zip(labels)
            .map(|(zv, &y)| {
                let zv = zv.as_f64();
                zv.max(0.0) - zv * y + (-zv.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / n;
        let labels = labels.iter().map(|&y| T::lit(y)).collect();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(T::lit(loss)), Op::Bce { logits, labels }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum_f64() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::lit(m)), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(a), rg)
    }

    /// Reverse pass from a scalar root. Fan-out contributions add.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut emit = |v: Var, d: Vec<T>| {
                if self.rg(v) {
                    accumulate(&mut grads[v.0], d);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = node.value.dims2().1;
                    if self.rg(*a) {
                        emit(*a, gemm_nt(&g, self.value(*b).data(), m, n, k));
                    }
                    if self.rg(*b) {
                        emit(*b, gemm_tn(self.value(*a).data(), &g, m, k, n));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = node.value.dims2();
                    let gt = Tensor::new(&[m, n], g).and_then(|t| t.transpose())?;
                    emit(*a, gt.into_data());
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::Sub(a, b) => {
                    emit(*b, g.iter().map(|&x| -x).collect());
                    emit(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    emit(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                    emit(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
                Op::AddRow(a, row) => {
                    let n = self.value(*row).len();
                    if self.rg(*row) {
                        let mut acc = vec![0f64; n];
                        for chunk in g.chunks(n) {
                            for (s, &x) in acc.iter_mut().zip(chunk) {
                                *s += x.as_f64();
                            }
                        }
                        emit(*row, acc.into_iter().map(T::lit).collect());
                    }
                    emit(*a, g);
                }
                Op::Scale(a, c) => emit(*a, g.iter().map(|&x| x * *c).collect()),
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    emit(*a, g.iter().zip(x).map(|(&d, &x)| d * gelu_grad(x)).collect());
                }
                Op::SoftmaxRows(a) => {
                    let n = node.value.dims2().1;
                    let y = node.value.data();
                    let mut out = vec![T::zero(); g.len()];
                    for ((orow, grow), yrow) in out.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for j in 0..n {
                            orow[j] = T::lit(yrow[j].as_f64() * (grow[j].as_f64() - dot));
                        }
                    }
                    emit(*a, out);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let n = node.value.dims2().1;
                    let gam = self.value(*gamma).data();
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut dg = vec![0f64; n];
                        let mut db = vec![0f64; n];
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += grow[j].as_f64() * hrow[j].as_f64();
                                db[j] += grow[j].as_f64();
                            }
                        }
                        emit(*gamma, dg.into_iter().map(T::lit).collect());
                        emit(*beta, db.into_iter().map(T::lit).collect());
                    }
                    if self.rg(*x) {
                        let mut dx = vec![T::zero(); g.len()];
                        for (r, ((drow, grow), hrow)) in
                            dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                        {
                            let dh: Vec<f64> = (0..n).map(|j| grow[j].as_f64() * gam[j].as_f64()).collect();
                            let m1 = dh.iter().sum::<f64>() / n as f64;
                            let m2 = dh.iter().zip(hrow).map(|(a, h)| a * h.as_f64()).sum::<f64>() / n as f64;
                            let rs = rstd[r].as_f64();
                            for j in 0..n {
                                drow[j] = T::lit(rs * (dh[j] - m1 - hrow[j].as_f64() * m2));
                            }
                        }
                        emit(*x, dx);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let n = node.value.dims2().1;
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((drow, grow), yrow)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate() {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        let nr = norms[r].as_f64();
                        for j in 0..n {
                            drow[j] = T::lit((grow[j].as_f64() - yrow[j].as_f64() * dot) / nr);
                        }
                    }
                    emit(*x, dx);
                }
                Op::Dropout { x, mask } => {
                    emit(*x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
                }
                Op::SelectRows { x, rows } => {
                    let n = node.value.dims2().1;
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            dx[r * n + j] = dx[r * n + j] + g[k * n + j];
                        }
                    }
                    emit(*x, dx);
                }
                Op::Tokens {
                    patches,
                    cls,
                    pos,
                    batch,
                } => {
                    let (s, d) = self.value(*pos).dims2();
                    let p = s - 1;
                    let mut dp = vec![T::zero(); batch * p * d];
                    let mut dc = vec![0f64; d];
                    let mut dpos = vec![0f64; s * d];
                    for b in 0..*batch {
                        for t in 0..s {
                            let grow = &g[(b * s + t) * d..(b * s + t + 1) * d];
                            for j in 0..d {
                                dpos[t * d + j] += grow[j].as_f64();
                            }
                            if t == 0 {
                                for j in 0..d {
                                    dc[j] += grow[j].as_f64();
                                }
                            } else {
                                dp[(b * p + t - 1) * d..(b * p + t) * d].copy_from_slice(grow);
                            }
                        }
                    }
                    emit(*patches, dp);
                    emit(*cls, dc.into_iter().map(T::lit).collect());
                    emit(*pos, dpos.into_iter().map(T::lit).collect());
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let d = node.value.dims2().1;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut dq = vec![0f64; qv.len()];
                    let mut dk = vec![0f64; kv.len()];
                    let mut dv = vec![0f64; vv.len()];
                    let mut dp = vec![0f64; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let off = h * dh;
                            let row = |t: usize, c: usize| (b * seq + t) * d + off + c;
                            for i in 0..seq {
                                let pbase = ((b * heads + h) * seq + i) * seq;
                                let p = &probs[pbase..pbase + seq];
                                // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                                for j in 0..seq {
                                    let mut acc = 0f64;
                                    for c in 0..dh {
                                        let go = g[row(i, c)].as_f64();
                                        acc += go * vv[row(j, c)].as_f64();
                                        dv[row(j, c)] += p[j].as_f64() * go;
                                    }
                                    dp[j] = acc;
                                }
                                let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b.as_f64()).sum();
                                for j in 0..seq {
                                    let ds = p[j].as_f64() * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for c in 0..dh {
                                        dq[row(i, c)] += ds * kv[row(j, c)].as_f64();
                                        dk[row(j, c)] += ds * qv[row(i, c)].as_f64();
                                    }
                                }
                            }
                        }
                    }
                    emit(*q, dq.into_iter().map(T::lit).collect());
                    emit(*k, dk.into_iter().map(T::lit).collect());
                    emit(*v, dv.into_iter().map(T::lit).collect());
                }
                Op::Bce { logits, labels } => {
                    let z = self.value(*logits).data();
                    let n = labels.len() as f64;
                    let g0 = g[0].as_f64();
                    emit(
                        *logits,
                        z.iter()
                            .zip(labels)
                            .map(|(zv, y)| T::lit(g0 * (sigmoid(zv.as_f64()) - y.as_f64()) / n))
                            .collect(),
                    );
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    emit(*a, vec![T::lit(g[0].as_f64() / n as f64); n]);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    emit(*a, vec![g[0]; n]);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, d: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a = *a + b;
            }
        }
        None => *slot = Some(d),
    }
}

/// Gradients from one reverse pass. Nodes the pass never reached read as
/// zeros of the node's shape.
pub struct Grads<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves a gradient out; `None` if it was never reached.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        let shape = &self.shapes[v.0];
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(shape, g).expect("gradient shape"))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_scalar<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    T::lit(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    T::lit(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let mut total = 0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|v| {
            let e = (v.as_f64() - max).exp();
            total += e;
            e
        })
        .collect();
    for (r, e) in row.iter_mut().zip(exps) {
        *r = T::lit(e / total);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn fan_out_adds_branch_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.scale(x, -5.0);
        let s = tape.add(a, b).unwrap();
        let root = tape.sum(s);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_nodes_have_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let root = tape.sum(x);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax_rows(a).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let b = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let s = tape.softmax_rows(b).unwrap();
        assert!((tape.value(s).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(s).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_match_exp_normalize_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn(&[3, 5], 2.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x.clone());
        let s = tape.softmax_rows(v).unwrap();
        for i in 0..3 {
            let row: Vec<f64> = x.row(i).iter().map(|&v| (v as f64).exp()).collect();
            let z: f64 = row.iter().sum();
            let got = tape.value(s).row(i);
            assert!((got.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            for (g, e) in got.iter().zip(&row) {
                assert!((*g as f64 - e / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let l = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let z = tape.constant(Tensor::scalar(20.0));
        let l = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-8);
        let z = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.bce_with_logits(z, &[0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn bce_matches_naive_formula() {
        let logits = [-1.5, 0.3, 2.0, -0.2];
        let labels = [0.0, 1.0, 1.0, 1.0];
        let naive: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| {
                let s = 1.0 / (1.0 + (-z as f64).exp());
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 4.0;
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::new(&[4], logits.map(|v| v as f32).to_vec()).unwrap());
        let l = tape.bce_with_logits(z, &labels).unwrap();
        assert!((tape.value(l).data()[0] as f64 - naive).abs() < 1e-6);
    }

    #[test]
    fn matmul_softmax_bce_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![
            Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng),
            Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng),
        ];
        let report = check_gradients(&inputs, GradCheck::default(), |tape, v| {
            let m = tape.matmul(v[0], v[1])?;
            let s = tape.softmax_rows(m)?;
            let col = tape.select_rows(s, &[0, 2])?;
            tape.bce_with_logits(col, &[1.0, 0.0, 0.0, 1.0])
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dropout_is_keyed_and_inverted() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let key = DropoutKey { seed: 1, layer: 2, step: 3 };
        let a = tape.dropout(x, 0.1, key).unwrap();
        let b = tape.dropout(x, 0.1, key).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let zeros = tape.value(a).data().iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&zeros), "{zeros}");
        for &v in tape.value(a).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12);
        }
        let c = tape.dropout(x, 0.1, DropoutKey { step: 4, ..key }).unwrap();
        assert_ne!(tape.value(a), tape.value(c));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::randn(&[2 * 5, 8], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[2 * 5, 8], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[2 * 5, 8], 1.0, &mut rng));
        let o = tape.attention(q, k, v, 2, 5, 2).unwrap();
        let probs = tape.attention_probs(o).unwrap();
        for row in probs.chunks(5) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
