use std::sync::Arc;

use rand::Rng;

use super::kernels::{bmm, gemm, gemm_nt, gemm_tn};
use super::{SparseMatrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean mask over the last dimension, shared by consecutive rows.
///
/// `valid` holds `groups x width` flags; a tensor with `R` rows of width
/// `width` uses group `r / (R / groups)` for row `r`, so one key mask per
/// attention batch serves every head and query.
#[derive(Debug, Clone)]
pub struct KeyMask {
    valid: Arc<Vec<bool>>,
    width: usize,
}

impl KeyMask {
    pub fn new(valid: Vec<bool>, width: usize) -> Result<Self> {
        if width == 0 || !valid.len().is_multiple_of(width) {
            return Err(Error::Shape {
                op: "key_mask",
                lhs: vec![valid.len()],
                rhs: vec![width],
            });
        }
        Ok(KeyMask {
            valid: Arc::new(valid),
            width,
        })
    }

    pub fn groups(&self) -> usize {
        self.valid.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn group(&self, g: usize) -> &[bool] {
        &self.valid[g * self.width..(g + 1) * self.width]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    Relu(Var),
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SegmentReduce {
        x: Var,
        seg: Arc<Vec<usize>>,
        scale: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Arc<Vec<Option<usize>>>,
    },
    ScatterRows {
        x: Var,
        idx: Arc<Vec<Option<usize>>>,
    },
    SplitHeads {
        x: Var,
        b: usize,
        l: usize,
        h: usize,
    },
    MergeHeads {
        x: Var,
        b: usize,
        l: usize,
        h: usize,
    },
    SpMM {
        a: Arc<SparseMatrix>,
        x: Var,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Arc<Vec<usize>>,
        rows: Arc<Vec<usize>>,
    },
    Bce {
        logits: Var,
        targets: Arc<Vec<f64>>,
        rows: Arc<Vec<usize>>,
    },
    Mse {
        pred: Var,
        targets: Arc<Vec<f64>>,
        rows: Arc<Vec<usize>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn check_rows(op: &'static str, rows: &[usize], n: usize) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter(format!("{op}: empty row mask")));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::InvalidParameter(format!(
            "{op}: row {r} out of range for {n} rows"
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `a[.., p, q] @ b[q, r]`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (self.value(a).rows(), sb[0], sb[1]);
        let out = gemm(self.val(a), self.val(b), m, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a[B, M, K] @ b[B, K, N]`, or `@ b[B, N, K]^T` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let out = bmm(self.val(a), self.val(b), batch, m, k, n, trans_b);
        Ok(self.push(
            Tensor {
                shape: vec![batch, m, n],
                data: out,
            },
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.shape(bias) != [c] {
            return Err(shape_err("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.val(bias);
        let data = self
            .val(a)
            .chunks(c)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, bias), &[a, bias]))
    }

    /// `x @ w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.val(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Scale(a, c), &[a])
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidParameter("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows = self.value(first).rows();
        let mut widths = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_last", self.shape(first), s));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let op = Op::Concat {
            parts: parts.iter().copied().zip(widths).collect(),
            rows,
        };
        Ok(self.push(Tensor { shape, data }, op, parts))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.val(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.val(a).iter().map(|&x| gelu(x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Gelu(a), &[a])
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("dropout rate {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.val(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, mask }, &[x]))
    }

    /// Softmax over the last dimension restricted to unmasked entries;
    /// masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &KeyMask) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        if c != mask.width() || rows % mask.groups().max(1) != 0 || mask.groups() == 0 {
            return Err(shape_err("masked_softmax", t.shape(), &[mask.groups(), mask.width()]));
        }
        let rep = rows / mask.groups();
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let valid = mask.group(r / rep);
            let xs = &t.data()[r * c..(r + 1) * c];
            let mx = xs
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::InvalidParameter(format!(
                    "masked_softmax: row {r} has no unmasked entry"
                )));
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if valid[j] {
                    o[j] = (xs[j] - mx).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor { shape, data: out }, Op::MaskedSoftmax(x), &[x]))
    }

    /// Per-row normalization to zero mean and unit variance, then
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", t.shape(), self.shape(gain)));
        }
        let (g, b) = (self.val(gain), self.val(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let xs = &t.data()[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (xs[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Sums (or averages) rows of `x[n, d]` into `k` segments; empty
    /// segments give zero rows.
    pub fn segment_reduce(&mut self, x: Var, seg: Arc<Vec<usize>>, k: usize, mean: bool) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        if seg.len() != n {
            return Err(shape_err("segment_reduce", t.shape(), &[seg.len()]));
        }
        if let Some(&s) = seg.iter().find(|&&s| s >= k) {
            return Err(Error::InvalidParameter(format!("segment id {s} >= {k}")));
        }
        let mut count = vec![0usize; k];
        for &s in seg.iter() {
            count[s] += 1;
        }
        let scale: Vec<f64> = count
            .iter()
            .map(|&c| if mean && c > 0 { 1.0 / c as f64 } else { 1.0 })
            .collect();
        let mut out = vec![0.0; k * d];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..d {
                out[s * d + j] += t.data()[i * d + j] * scale[s];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![k, d],
                data: out,
            },
            Op::SegmentReduce { x, seg, scale },
            &[x],
        ))
    }

    /// Row `i` of the result is row `idx[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; idx.len() * d];
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                if s >= n {
                    return Err(Error::InvalidParameter(format!("gather index {s} >= {n}")));
                }
                out[i * d..(i + 1) * d].copy_from_slice(t.row(s));
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), d],
                data: out,
            },
            Op::GatherRows { x, idx },
            &[x],
        ))
    }

    /// Adds row `i` of `x` into row `idx[i]` of an `n`-row zero tensor;
    /// `None` rows are dropped.
    pub fn scatter_rows(&mut self, x: Var, idx: Arc<Vec<Option<usize>>>, n: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if t.rows() != idx.len() {
            return Err(shape_err("scatter_rows", t.shape(), &[idx.len()]));
        }
        let mut out = vec![0.0; n * d];
        for (i, dst) in idx.iter().enumerate() {
            if let Some(r) = *dst {
                if r >= n {
                    return Err(Error::InvalidParameter(format!("scatter index {r} >= {n}")));
                }
                for j in 0..d {
                    out[r * d + j] += t.data()[i * d + j];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, d],
                data: out,
            },
            Op::ScatterRows { x, idx },
            &[x],
        ))
    }

    /// `[b * l, h * dh] -> [b * h, l, dh]`.
    pub fn split_heads(&mut self, x: Var, b: usize, l: usize, h: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != b * l || h == 0 || !t.cols().is_multiple_of(h) {
            return Err(shape_err("split_heads", t.shape(), &[b, l, h]));
        }
        let dh = t.cols() / h;
        let mut out = vec![0.0; t.len()];
        for bi in 0..b {
            for li in 0..l {
                let src = &t.data()[(bi * l + li) * h * dh..(bi * l + li + 1) * h * dh];
                for hi in 0..h {
                    let dst = ((bi * h + hi) * l + li) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[hi * dh..(hi + 1) * dh]);
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![b * h, l, dh],
                data: out,
            },
            Op::SplitHeads { x, b, l, h },
            &[x],
        ))
    }

    /// `[b * h, l, dh] -> [b * l, h * dh]`.
    pub fn merge_heads(&mut self, x: Var, b: usize, l: usize, h: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != b * h || s[1] != l {
            return Err(shape_err("merge_heads", &s, &[b, l, h]));
        }
        let dh = s[2];
        let t = self.val(x);
        let mut out = vec![0.0; t.len()];
        for bi in 0..b {
            for li in 0..l {
                for hi in 0..h {
                    let src = ((bi * h + hi) * l + li) * dh;
                    let dst = (bi * l + li) * h * dh + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&t[src..src + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![b * l, h * dh],
                data: out,
            },
            Op::MergeHeads { x, b, l, h },
            &[x],
        ))
    }

    /// Sparse-dense product `a[n, m] @ x[m, d]`.
    pub fn spmm(&mut self, a: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != a.cols || t.shape().len() != 2 {
            return Err(shape_err("spmm", &[a.rows, a.cols], t.shape()));
        }
        let d = t.cols();
        let mut out = vec![0.0; a.rows * d];
        for r in 0..a.rows {
            let o = &mut out[r * d..(r + 1) * d];
            for (c, v) in a.row(r) {
                for (oj, xj) in o.iter_mut().zip(t.row(c)) {
                    *oj += v * xj;
                }
            }
        }
        let rows = a.rows;
        Ok(self.push(
            Tensor {
                shape: vec![rows, d],
                data: out,
            },
            Op::SpMM { a, x },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.val(x).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean cross-entropy of `logits[n, K]` against `labels` over `rows`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<usize>>,
        rows: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = (t.rows(), t.cols());
        if labels.len() != n {
            return Err(shape_err("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        check_rows("softmax_cross_entropy", &rows, n)?;
        let mut probs = Vec::with_capacity(rows.len() * k);
        let mut loss = 0.0;
        for &r in rows.iter() {
            let xs = t.row(r);
            let y = labels[r];
            if y >= k {
                return Err(Error::InvalidParameter(format!("label {y} >= {k} classes")));
            }
            let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = xs.iter().map(|x| (x - mx).exp()).sum();
            loss += z.ln() + mx - xs[y];
            probs.extend(xs.iter().map(|x| (x - mx).exp() / z));
        }
        let m = rows.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss / m),
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                rows,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of single-logit rows against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Vec<f64>>, rows: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(shape_err("bce_with_logits", t.shape(), &[targets.len()]));
        }
        check_rows("bce_with_logits", &rows, t.len())?;
        let loss: f64 = rows
            .iter()
            .map(|&r| {
                let x = t.data()[r];
                x.max(0.0) - x * targets[r] + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let m = rows.len() as f64;
        Ok(self.push(Tensor::scalar(loss / m), Op::Bce { logits, targets, rows }, &[logits]))
    }

    /// Mean squared error over `rows` of a single-output prediction.
    pub fn mse(&mut self, pred: Var, targets: Arc<Vec<f64>>, rows: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != targets.len() {
            return Err(shape_err("mse", t.shape(), &[targets.len()]));
        }
        check_rows("mse", &rows, t.len())?;
        let loss: f64 = rows.iter().map(|&r| (t.data()[r] - targets[r]).powi(2)).sum();
        let m = rows.len() as f64;
        Ok(self.push(Tensor::scalar(loss / m), Op::Mse { pred, targets, rows }, &[pred]))
    }

    /// Gradient of the last `backward` call with respect to `v`; zeros when
    /// `v` requires gradients but was not reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let data = grads[v.0].clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor {
            shape: node.value.shape().to_vec(),
            data,
        })
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Propagates `d loss` back through the tape in reverse execution order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Autodiff("backward called twice without reset_grads".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &|s| {
                    let da = gemm_nt(g, val(b), m, n, k);
                    s.iter_mut().zip(da).for_each(|(x, y)| *x += y);
                });
                acc(b, &|s| {
                    let db = gemm_tn(val(a), g, k, m, n);
                    s.iter_mut().zip(db).for_each(|(x, y)| *x += y);
                });
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                acc(a, &|s| {
                    // dA = G B^T, or G B when b was transposed
                    let da = bmm(g, val(b), batch, m, n, k, !trans_b);
                    s.iter_mut().zip(da).for_each(|(x, y)| *x += y);
                });
                acc(b, &|s| {
                    let ga = val(a);
                    for t in 0..batch {
                        let at = &ga[t * m * k..(t + 1) * m * k];
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        // dB = A^T G, or G^T A for a transposed b
                        let db = if trans_b {
                            gemm_tn(gt, at, n, m, k)
                        } else {
                            gemm_tn(at, gt, k, m, n)
                        };
                        let st = &mut s[t * k * n..(t + 1) * k * n];
                        st.iter_mut().zip(db).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::AddRow(a, bias) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(bias, &|s| {
                    let c = s.len();
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Mul(a, b) => {
                acc(a, &|s| {
                    for ((x, gy), bv) in s.iter_mut().zip(g).zip(val(b)) {
                        *x += gy * bv;
                    }
                });
                acc(b, &|s| {
                    for ((x, gy), av) in s.iter_mut().zip(g).zip(val(a)) {
                        *x += gy * av;
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    acc(p, &|s| {
                        for r in 0..*rows {
                            let src = &g[r * total + off..r * total + off + w];
                            s[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    off += w;
                }
            }
            &Op::Relu(a) => acc(a, &|s| {
                for ((x, gy), av) in s.iter_mut().zip(g).zip(val(a)) {
                    if *av > 0.0 {
                        *x += gy;
                    }
                }
            }),
            &Op::Gelu(a) => acc(a, &|s| {
                for ((x, gy), &av) in s.iter_mut().zip(g).zip(val(a)) {
                    *x += gy * gelu(av).1;
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &|s| {
                for ((x, gy), m) in s.iter_mut().zip(g).zip(mask) {
                    *x += gy * m;
                }
            }),
            &Op::MaskedSoftmax(a) => {
                let c = nodes[i].value.cols();
                acc(a, &|s| {
                    for ((sr, gr), pr) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            sr[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let gv = val(*gain);
                acc(*x, &|s| {
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dhh: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = rstd[r] / d as f64;
                        for j in 0..d {
                            s[r * d + j] += k * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dhh);
                        }
                    }
                });
                acc(*gain, &|s| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &|s| {
                    for gr in g.chunks(d) {
                        s.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SegmentReduce { x, seg, scale } => {
                let d = nodes[i].value.cols();
                acc(*x, &|s| {
                    for (r, &sg) in seg.iter().enumerate() {
                        for j in 0..d {
                            s[r * d + j] += g[sg * d + j] * scale[sg];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = nodes[i].value.cols();
                acc(*x, &|s| {
                    for (r, src) in idx.iter().enumerate() {
                        if let Some(src) = *src {
                            for j in 0..d {
                                s[src * d + j] += g[r * d + j];
                            }
                        }
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let d = nodes[i].value.cols();
                acc(*x, &|s| {
                    for (r, dst) in idx.iter().enumerate() {
                        if let Some(dst) = *dst {
                            for j in 0..d {
                                s[r * d + j] += g[dst * d + j];
                            }
                        }
                    }
                });
            }
            &Op::SplitHeads { x, b, l, h } => {
                let dh = nodes[i].value.cols();
                acc(x, &|s| {
                    for bi in 0..b {
                        for li in 0..l {
                            for hi in 0..h {
                                let src = ((bi * h + hi) * l + li) * dh;
                                let dst = (bi * l + li) * h * dh + hi * dh;
                                for j in 0..dh {
                                    s[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            &Op::MergeHeads { x, b, l, h } => {
                let dh = nodes[i].value.cols() / h;
                acc(x, &|s| {
                    for bi in 0..b {
                        for li in 0..l {
                            for hi in 0..h {
                                let dst = ((bi * h + hi) * l + li) * dh;
                                let src = (bi * l + li) * h * dh + hi * dh;
                                for j in 0..dh {
                                    s[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::SpMM { a, x } => {
                let d = nodes[i].value.cols();
                acc(*x, &|s| {
                    for r in 0..a.rows {
                        for (c, v) in a.row(r) {
                            for j in 0..d {
                                s[c * d + j] += v * g[r * d + j];
                            }
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            &Op::Sum(x) => acc(x, &|s| s.iter_mut().for_each(|a| *a += g[0])),
            &Op::Mean(x) => acc(x, &|s| {
                let n = s.len().max(1) as f64;
                s.iter_mut().for_each(|a| *a += g[0] / n)
            }),
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                rows,
            } => {
                let k = nodes[logits.0].value.cols();
                let m = rows.len() as f64;
                acc(*logits, &|s| {
                    for (t, &r) in rows.iter().enumerate() {
                        for j in 0..k {
                            let y = if labels[r] == j { 1.0 } else { 0.0 };
                            s[r * k + j] += g[0] * (probs[t * k + j] - y) / m;
                        }
                    }
                });
            }
            Op::Bce { logits, targets, rows } => {
                let m = rows.len() as f64;
                let x = val(*logits);
                acc(*logits, &|s| {
                    for &r in rows.iter() {
                        let sig = 1.0 / (1.0 + (-x[r]).exp());
                        s[r] += g[0] * (sig - targets[r]) / m;
                    }
                });
            }
            Op::Mse { pred, targets, rows } => {
                let m = rows.len() as f64;
                let x = val(*pred);
                acc(*pred, &|s| {
                    for &r in rows.iter() {
                        s[r] += g[0] * 2.0 * (x[r] - targets[r]) / m;
                    }
                });
            }
        }
    }
}
