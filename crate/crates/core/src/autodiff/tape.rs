//! Wengert tape: every operation appends a node holding its forward value and
//! enough bookkeeping to replay the chain rule in reverse.
//!
//! Nodes are immutable once pushed. A [`Var`] is a cheap handle into the tape;
//! gradients live in a separate [`Gradients`] buffer owned by one backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a differentiable value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b`'s shape is a suffix of `a`'s; `b` is broadcast over the leading axes.
    AddSuffix(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Softplus(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        b_shared: bool,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    PairwiseDistance {
        a: Var,
        b: Var,
        squared: bool,
    },
    ScaleRows(Var, Var),
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    RowEntropy(Var),
    MeanRows(Var),
    CosineRows(Var, Var),
    StraightThrough(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one reverse pass.
pub struct Tape {
    nodes: Vec<Node>,
    min_radius: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C (+)= A' * B'` where each operand is a strided view.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // upholds by construction of the views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            min_radius: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance from a singular point seen on this tape: non-squared
    /// pairwise distances, row norms entering `cosine_rows` and row standard
    /// deviations entering `layer_norm`. Each has curvature ~1/r there, so
    /// finite-difference checks are meaningless close to zero.
    pub fn min_radius(&self) -> f64 {
        self.min_radius
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Copy of `v` with the gradient path cut (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_vec(va.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::from_vec(
            va.shape().to_vec(),
            va.data().iter().map(|x| f(*x)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                "add_suffix",
                format!("{:?} is not a suffix of {:?}", sb, sa),
            ));
        }
        let vb = self.value(b).data();
        let inner = vb.len().max(1);
        let data = self
            .value(a)
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(vb).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::from_vec(sa.to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddSuffix(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.map(a, softplus);
        let rg = self.rg(a);
        self.push(t, Op::Softplus(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// `a @ w` with `a: [.., k]` treated as a stack of rows and `w: [k, n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sw = self.shape(w).to_vec();
        if sa.is_empty() || sw.len() != 2 || *sa.last().unwrap() != sw[0] {
            return Err(Error::shape("matmul", format!("{:?} @ {:?}", sa, sw)));
        }
        let k = sw[0];
        let n = sw[1];
        let m = sa.iter().product::<usize>() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(w).data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::MatMul {
                a,
                b: w,
                batch: 1,
                m,
                k,
                n,
                ta: false,
                tb: false,
                b_shared: true,
            },
            rg,
        ))
    }

    /// Batched matrix product of `[B, m, k]` and `[B, k, n]`; `ta`/`tb` read
    /// the corresponding operand as stored transposed (`[B, k, m]`, `[B, n, k]`).
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape(
                "bmm",
                format!(
                    "inner dims differ: {:?} (ta={}) x {:?} (tb={})",
                    sa, ta, sb, tb
                ),
            ));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let sva = if ta { (1, m) } else { (k, 1) };
        let svb = if tb { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                sva,
                &vb[i * k * n..(i + 1) * k * n],
                svb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(vec![batch, m, n], out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
                b_shared: false,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if !v.is_finite() {
            return Err(Error::numeric("softmax_rows", "non-finite logits"));
        }
        let k = v.last_dim();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.rows() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut s = 0.0;
            for &x in row {
                let e = (x - mx).exp();
                s += e;
                out.push(e);
            }
            for e in &mut out[start..start + k] {
                *e /= s;
            }
        }
        let t = Tensor::from_vec(v.shape().to_vec(), out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::SoftmaxRows(a), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "width {} vs gamma {:?} beta {:?}",
                    w,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let vx = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = vx.numel() / w;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        let mut min_std = f64::INFINITY;
        for row in vx.rows() {
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            min_std = min_std.min(var.sqrt());
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..w {
                out.push((row[j] - mu) * rs * g[j] + bt[j]);
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let t = Tensor::from_vec(vx.shape().to_vec(), out);
        if self.rg(x) {
            self.min_radius = self.min_radius.min(min_std);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// `out[m, k] = ||a[m] - b[k]||` (or its square). `a: [M, D]`, `b: [K, D]`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(
                "pairwise_distance",
                format!("{:?} vs {:?}", sa, sb),
            ));
        }
        let (m, d, k) = (sa[0], sa[1], sb[0]);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity(m * k);
        let mut min_d = self.min_radius;
        for i in 0..m {
            let ra = &va[i * d..(i + 1) * d];
            for j in 0..k {
                let rb = &vb[j * d..(j + 1) * d];
                let s: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
                if squared {
                    out.push(s);
                } else {
                    let dist = s.sqrt();
                    min_d = min_d.min(dist);
                    out.push(dist);
                }
            }
        }
        self.min_radius = min_d;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(vec![m, k], out),
            Op::PairwiseDistance { a, b, squared },
            rg,
        ))
    }

    /// Multiplies every row of `a` (last axis) by the matching entry of `s`,
    /// whose shape is `a`'s shape without the last axis.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let sa = self.shape(a);
        let ss = self.shape(s);
        if sa.is_empty() || sa[..sa.len() - 1] != *ss {
            return Err(Error::shape("scale_rows", format!("{:?} by {:?}", sa, ss)));
        }
        let vs = self.value(s).data();
        let va = self.value(a);
        let data = va
            .rows()
            .zip(vs)
            .flat_map(|(row, w)| row.iter().map(move |x| x * w))
            .collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleRows(a, s), rg))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(a).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {:?}", index.len(), shape),
            ));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {} out of range {}", bad, n),
            ));
        }
        let va = self.value(a).data();
        let data = index.iter().map(|&i| va[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(shape, data), Op::Gather { a, index }, rg))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!(
                    "[{}, {}) on axis {} of {:?}",
                    start,
                    start + len,
                    axis,
                    shape
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, index, out_shape)
    }

    /// Repeats `a` along a new leading axis.
    pub fn tile(&mut self, a: Var, reps: usize) -> Result<Var> {
        let n = self.value(a).numel();
        let mut shape = vec![reps];
        shape.extend_from_slice(self.shape(a));
        let index = (0..reps).flat_map(|_| 0..n).collect();
        self.gather(a, index, shape)
    }

    /// Selects rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", s)));
        }
        let d = s[1];
        let k = s[0];
        if let Some(bad) = rows.iter().find(|&&r| r >= k) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {} out of range {}", bad, k),
            ));
        }
        let index = rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
        self.gather(table, index, vec![rows.len(), d])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} of {:?}", axis, first),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {}", s, first, axis),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Natural-log entropy of each row along the last axis, with `0 ln 0 = 0`.
    pub fn row_entropy(&mut self, q: Var) -> Var {
        let v = self.value(q);
        let data = v
            .rows()
            .map(|row| {
                -row.iter()
                    .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                    .sum::<f64>()
            })
            .collect();
        let shape = v.shape()[..v.ndim().saturating_sub(1)].to_vec();
        let rg = self.rg(q);
        self.push(Tensor::from_vec(shape, data), Op::RowEntropy(q), rg)
    }

    /// Mean over every row (all leading axes), leaving a vector of the last axis.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let k = v.last_dim();
        let rows = v.numel() / k.max(1);
        let mut acc = vec![0.0; k];
        for row in v.rows() {
            for (s, x) in acc.iter_mut().zip(row) {
                *s += x;
            }
        }
        for s in &mut acc {
            *s /= rows as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(vec![k], acc), Op::MeanRows(a), rg)
    }

    /// Row-wise cosine similarity with a `1e-8` floor on each norm.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let (ga, gb) = (self.rg(a), self.rg(b));
        let mut min_norm = f64::INFINITY;
        let data = va
            .rows()
            .zip(vb.rows())
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
                if ga {
                    min_norm = min_norm.min(nx);
                }
                if gb {
                    min_norm = min_norm.min(ny);
                }
                dot / (nx.max(COS_EPS) * ny.max(COS_EPS))
            })
            .collect();
        let shape = va.shape()[..va.ndim() - 1].to_vec();
        self.min_radius = self.min_radius.min(min_norm);
        let rg = ga || gb;
        Ok(self.push(Tensor::from_vec(shape, data), Op::CosineRows(a, b), rg))
    }

    /// Forward value `value`; backward copies the incoming gradient to `src` unchanged.
    pub fn straight_through(&mut self, src: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.shape(src) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", value.shape(), self.shape(src)),
            ));
        }
        let rg = self.rg(src);
        Ok(self.push(value, Op::StraightThrough(src), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddSuffix(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    let inner = gb.len().max(1);
                    for chunk in g.chunks(inner) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                acc(*a, &mut |ga| {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * out[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sigmoid(va[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_parts(va[i]).1;
                    }
                });
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
                b_shared,
            } => {
                let va = self.value(a).data();
                let vb = self.value(b).data();
                let sva = if ta { (1, m) } else { (k, 1) };
                let svb = if tb { (1, k) } else { (n, 1) };
                let b_stride = if b_shared { 0 } else { k * n };
                acc(a, &mut |ga| {
                    for i in 0..batch {
                        // dA' = dC * B'^T
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &vb[i * b_stride..i * b_stride + k * n],
                            (svb.1, svb.0),
                            1.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            sva,
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..batch {
                        // dB' = A'^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            (sva.1, sva.0),
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            1.0,
                            &mut gb[i * b_stride..i * b_stride + k * n],
                            svb,
                        );
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let kk = y.last_dim();
                acc(*a, &mut |ga| {
                    for ((yr, gr), gar) in
                        y.data().chunks(kk).zip(g.chunks(kk)).zip(ga.chunks_mut(kk))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..kk {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let vx = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let w = gm.len();
                let xhat = |r: usize, j: usize| (vx[r * w + j] - mean[r]) * rstd[r];
                acc(*x, &mut |gx| {
                    for r in 0..mean.len() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..w {
                            let d = g[r * w + j] * gm[j];
                            s1 += d;
                            s2 += d * xhat(r, j);
                        }
                        s1 /= w as f64;
                        s2 /= w as f64;
                        for j in 0..w {
                            let d = g[r * w + j] * gm[j];
                            gx[r * w + j] += rstd[r] * (d - s1 - xhat(r, j) * s2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for r in 0..mean.len() {
                        for j in 0..w {
                            gg[j] += g[r * w + j] * xhat(r, j);
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for chunk in g.chunks(w) {
                        gb.iter_mut().zip(chunk).for_each(|(p, q)| *p += q);
                    }
                });
            }
            &Op::PairwiseDistance { a, b, squared } => {
                let va = self.value(a).data();
                let vb = self.value(b).data();
                let d = self.value(a).last_dim();
                let m = va.len() / d.max(1);
                let kk = vb.len() / d.max(1);
                let out = node.value.data();
                // coefficient multiplying (a - b)
                let coef = |i: usize, j: usize| {
                    let go = g[i * kk + j];
                    if squared {
                        2.0 * go
                    } else if out[i * kk + j] > 0.0 {
                        go / out[i * kk + j]
                    } else {
                        0.0
                    }
                };
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..kk {
                            let c = coef(i, j);
                            if c == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                ga[i * d + t] += c * (va[i * d + t] - vb[j * d + t]);
                            }
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        for j in 0..kk {
                            let c = coef(i, j);
                            if c == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                gb[j * d + t] -= c * (va[i * d + t] - vb[j * d + t]);
                            }
                        }
                    }
                });
            }
            Op::ScaleRows(a, s) => {
                let va = self.value(*a);
                let vs = self.value(*s).data();
                let kk = va.last_dim();
                acc(*a, &mut |ga| {
                    for (r, w) in vs.iter().enumerate() {
                        for j in 0..kk {
                            ga[r * kk + j] += g[r * kk + j] * w;
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for (r, row) in va.rows().enumerate() {
                        gs[r] += row
                            .iter()
                            .zip(&g[r * kk..(r + 1) * kk])
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                });
            }
            Op::Gather { a, index } => {
                acc(*a, &mut |ga| {
                    for (gi, &src) in g.iter().zip(index) {
                        ga[src] += gi;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::RowEntropy(q) => {
                let vq = self.value(*q);
                let kk = vq.last_dim();
                acc(*q, &mut |gq| {
                    for (r, row) in vq.rows().enumerate() {
                        for j in 0..kk {
                            let p = row[j];
                            if p > 0.0 {
                                gq[r * kk + j] -= g[r] * (p.ln() + 1.0);
                            }
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let kk = g.len();
                acc(*a, &mut |ga| {
                    let rows = ga.len() / kk.max(1);
                    for chunk in ga.chunks_mut(kk) {
                        for j in 0..kk {
                            chunk[j] += g[j] / rows as f64;
                        }
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let w = va.last_dim();
                let cos = node.value.data();
                let norms = |t: &Tensor| -> Vec<(f64, bool)> {
                    t.rows()
                        .map(|r| {
                            let n = r.iter().map(|p| p * p).sum::<f64>().sqrt();
                            if n > COS_EPS {
                                (n, true)
                            } else {
                                (COS_EPS, false)
                            }
                        })
                        .collect()
                };
                let na = norms(va);
                let nb = norms(vb);
                let mut side =
                    |x: Var, xs: &Tensor, ys: &Tensor, nx: &[(f64, bool)], ny: &[(f64, bool)]| {
                        acc(x, &mut |gx| {
                            for r in 0..cos.len() {
                                let (nxr, live) = nx[r];
                                let nyr = ny[r].0;
                                for j in 0..w {
                                    let xv = xs.data()[r * w + j];
                                    let yv = ys.data()[r * w + j];
                                    let mut d = yv / (nxr * nyr);
                                    if live {
                                        d -= cos[r] * xv / (nxr * nxr);
                                    }
                                    gx[r * w + j] += g[r] * d;
                                }
                            }
                        });
                    };
                side(*a, va, vb, &na, &nb);
                side(*b, vb, va, &nb, &na);
            }
        }
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw gradient of `v`, `None` when `v` is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros when unreachable.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}
