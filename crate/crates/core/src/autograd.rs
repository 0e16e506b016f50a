//! A small reverse-mode tape over [`Matrix`] values.
//!
//! A [`Graph`] records one forward pass. Nodes that do not depend on a
//! tracked parameter carry no backward information, so a graph built only
//! from constants (the teacher path) records no gradient state at all.

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    NormRows { x: Var, xhat: Matrix, inv_std: Vec<f64> },
    NormCols { x: Var, xhat: Matrix, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ReplaceRows { x: Var, e: Var, rows: Vec<usize> },
    GatherBlocks { x: Var, index: Vec<Option<usize>>, blocks: usize },
    GroupMeanRows { x: Var, group: usize },
    MaskedSqErr { x: Var, diff: Matrix, rows: Vec<usize> },
    MaskedCe { logits: Var, probs: Matrix, labels: Vec<usize>, rows: Vec<usize> },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by parameter slot; `None` when the slot was never used.
pub type ParamGrads = Vec<Option<Matrix>>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Normalises each row of `x` to zero mean, unit population variance.
pub fn normalize_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

/// Normalises each column of `x` over the row axis.
pub fn normalize_cols(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let n = x.rows() as f64;
    let means: Vec<f64> = x.col_sums().into_iter().map(|s| s / n).collect();
    let mut vars = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for ((v, m), acc) in x.row(r).iter().zip(&means).zip(vars.iter_mut()) {
            *acc += (v - m) * (v - m);
        }
    }
    let inv: Vec<f64> = vars.iter().map(|v| 1.0 / (v / n + eps).sqrt()).collect();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let src = x.row(r);
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (src[c] - means[c]) * inv[c];
        }
    }
    (out, inv)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        softmax_row(x.row(r), out.row_mut(r));
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that will receive a gradient on `backward`.
    pub fn tracked_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.needs_grad).count()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates its gradient into parameter slot `slot`.
    pub fn param(&mut self, slot: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(slot), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `x + 1·bias` with `bias` a `1 × cols` row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "add_row expects a row vector");
        let mut v = self.value(x).clone();
        let bias_row = b.row(0).to_vec();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(&bias_row) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(v, Op::AddRow(x, bias), ng)
    }

    /// Column-wise scaling by a `1 × cols` row.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Var {
        let g = self.value(gain).row(0).to_vec();
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            for (o, g) in v.row_mut(r).iter_mut().zip(&g) {
                *o *= g;
            }
        }
        let ng = self.needs(x) || self.needs(gain);
        self.push(v, Op::MulRow(x, gain), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (xhat, inv_std) = normalize_rows(self.value(x), eps);
        let ng = self.needs(x);
        let op = if ng { Op::NormRows { x, xhat: xhat.clone(), inv_std } } else { Op::Leaf };
        self.push(xhat, op, ng)
    }

    pub fn norm_cols(&mut self, x: Var, eps: f64) -> Var {
        let (xhat, inv_std) = normalize_cols(self.value(x), eps);
        let ng = self.needs(x);
        let op = if ng { Op::NormCols { x, xhat: xhat.clone(), inv_std } } else { Op::Leaf };
        self.push(xhat, op, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(v, Op::SoftmaxRows(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let ng = self.needs(x);
        self.push(v, Op::Transpose(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        let ng = self.needs(x);
        self.push(v, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_cols(&mats);
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rows listed in `rows` are replaced by the `1 × cols` row `e`.
    pub fn replace_rows(&mut self, x: Var, e: Var, rows: &[usize]) -> Var {
        let mut v = self.value(x).clone();
        let er = self.value(e).row(0).to_vec();
        for &r in rows {
            v.row_mut(r).copy_from_slice(&er);
        }
        let ng = self.needs(x) || self.needs(e);
        self.push(v, Op::ReplaceRows { x, e, rows: rows.to_vec() }, ng)
    }

    /// Builds a `(index.len() / blocks) × (blocks · cols)` matrix whose block
    /// `k` of output row `r` is row `index[r·blocks + k]` of `x` (zeros for `None`).
    pub fn gather_blocks(&mut self, x: Var, index: Vec<Option<usize>>, blocks: usize) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let out_rows = index.len() / blocks;
        let mut v = Matrix::zeros(out_rows, blocks * c);
        for r in 0..out_rows {
            let row = v.row_mut(r);
            for k in 0..blocks {
                if let Some(s) = index[r * blocks + k] {
                    row[k * c..(k + 1) * c].copy_from_slice(src.row(s));
                }
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::GatherBlocks { x, index, blocks }, ng)
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.rows() % group, 0, "group_mean_rows: rows not divisible");
        let out_rows = src.rows() / group;
        let mut v = Matrix::zeros(out_rows, src.cols());
        let inv = 1.0 / group as f64;
        for r in 0..out_rows {
            for g in 0..group {
                let s = src.row(r * group + g).to_vec();
                for (o, s) in v.row_mut(r).iter_mut().zip(s) {
                    *o += s * inv;
                }
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::GroupMeanRows { x, group }, ng)
    }

    /// `Σ_{t ∈ rows} ‖x_t − y_t‖²` as a `1 × 1` node; `y` is a constant.
    pub fn masked_sq_err(&mut self, x: Var, y: &Matrix, rows: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), y.shape(), "masked_sq_err shape");
        let mut diff = Matrix::zeros(xv.rows(), xv.cols());
        let mut total = 0.0;
        for &r in rows {
            for ((d, a), b) in diff.row_mut(r).iter_mut().zip(xv.row(r)).zip(y.row(r)) {
                *d = a - b;
                total += *d * *d;
            }
        }
        let ng = self.needs(x);
        self.push(Matrix::scalar(total), Op::MaskedSqErr { x, diff, rows: rows.to_vec() }, ng)
    }

    /// `Σ_{t ∈ rows} −log softmax(logits_t)[labels_t]` as a `1 × 1` node.
    pub fn masked_ce(&mut self, logits: Var, labels: &[usize], rows: &[usize]) -> Var {
        let lv = self.value(logits);
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for &r in rows {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let ng = self.needs(logits);
        let op = Op::MaskedCe { logits, probs, labels: labels.to_vec(), rows: rows.to_vec() };
        self.push(Matrix::scalar(total), op, ng)
    }

    /// Reverse pass from the scalar node `loss`; returns gradients for
    /// parameter slots `0..num_slots`.
    pub fn backward(&self, loss: Var, num_slots: usize) -> ParamGrads {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: ParamGrads = (0..num_slots).map(|_| None).collect();
        if !self.needs(loss) {
            return out;
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => match &mut out[*slot] {
                    Some(existing) => existing.add_assign(&g),
                    s @ None => *s = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let cs = g.col_sums();
                        acc(&mut grads, *bias, Matrix::from_vec(1, cs.len(), cs));
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::MulRow(x, gain) => {
                    let gv = self.value(*gain).row(0).to_vec();
                    if self.needs(*gain) {
                        let xv = self.value(*x);
                        let mut dg = vec![0.0; gv.len()];
                        for r in 0..g.rows() {
                            for ((d, a), b) in dg.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                                *d += a * b;
                            }
                        }
                        acc(&mut grads, *gain, Matrix::from_vec(1, dg.len(), dg));
                    }
                    if self.needs(*x) {
                        let mut dx = g;
                        for r in 0..dx.rows() {
                            for (d, s) in dx.row_mut(r).iter_mut().zip(&gv) {
                                *d *= s;
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Scale(x, s) => {
                    let mut dx = g;
                    dx.scale_assign(*s);
                    acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= gelu_grad(*v);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::NormRows { x, xhat, inv_std } => {
                    let n = xhat.cols() as f64;
                    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let s1: f64 = gr.iter().sum();
                        let s2: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = k * (n * gr[c] - s1 - hr[c] * s2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::NormCols { x, xhat, inv_std } => {
                    let n = xhat.rows() as f64;
                    let cols = xhat.cols();
                    let mut s1 = vec![0.0; cols];
                    let mut s2 = vec![0.0; cols];
                    for r in 0..xhat.rows() {
                        for c in 0..cols {
                            s1[c] += g[(r, c)];
                            s2[c] += g[(r, c)] * xhat[(r, c)];
                        }
                    }
                    let mut dx = Matrix::zeros(xhat.rows(), cols);
                    for r in 0..xhat.rows() {
                        for c in 0..cols {
                            dx[(r, c)] = inv_std[c] / n * (n * g[(r, c)] - s1[c] - xhat[(r, c)] * s2[c]);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.transpose()),
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.needs(*p) {
                            acc(&mut grads, *p, g.slice_cols(off, w));
                        }
                        off += w;
                    }
                }
                Op::ReplaceRows { x, e, rows } => {
                    if self.needs(*e) {
                        let mut de = vec![0.0; g.cols()];
                        for &r in rows {
                            for (d, v) in de.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, *e, Matrix::from_vec(1, de.len(), de));
                    }
                    if self.needs(*x) {
                        let mut dx = g;
                        for &r in rows {
                            dx.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::GatherBlocks { x, index, blocks } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = Matrix::zeros(xv.rows(), c);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        for k in 0..*blocks {
                            if let Some(s) = index[r * blocks + k] {
                                for (d, v) in dx.row_mut(s).iter_mut().zip(&gr[k * c..(k + 1) * c]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GroupMeanRows { x, group } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let inv = 1.0 / *group as f64;
                    for r in 0..xv.rows() {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *d = v * inv;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MaskedSqErr { x, diff, rows } => {
                    let s = 2.0 * g.item();
                    let mut dx = Matrix::zeros(diff.rows(), diff.cols());
                    for &r in rows {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(diff.row(r)) {
                            *d = s * v;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MaskedCe { logits, probs, labels, rows } => {
                    let s = g.item();
                    let mut dx = Matrix::zeros(probs.rows(), probs.cols());
                    for &r in rows {
                        for (d, p) in dx.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *d = s * p;
                        }
                        dx[(r, labels[r])] -= s;
                    }
                    acc(&mut grads, *logits, dx);
                }
            }
        }
        out
    }
}
