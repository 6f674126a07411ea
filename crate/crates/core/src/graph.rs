//! A small tape-based reverse-mode autodiff over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1×1`. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and the
//! backward pass is a single reverse sweep.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1×k` row vector to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    /// Multi-head scaled dot-product attention applied independently to
    /// consecutive row blocks; `probs` holds one `block×block` matrix per
    /// (block, head), block-major.
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        scale: f64,
        probs: Vec<Mat>,
    },
    SumSquares(Var),
    /// `Σ −w ln w` with `0 ln 0 = 0`.
    Entropy(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is computed for it or for anything
    /// that depends only on constants.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×k row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 - x);
        let ng = self.ng(a);
        self.push(value, Op::OneMinus(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.value(a).view());
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start, end), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|v| v * v).sum::<f64>();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), s), Op::SumSquares(a), ng)
    }

    pub fn entropy(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&w| neg_w_ln_w(w)).sum::<f64>();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), s), Op::Entropy(a), ng)
    }

    /// Self-attention within each run of `block` rows, split into `heads`
    /// equal column groups: per block and head, `softmax(scale·Q Kᵀ) V`.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        scale: f64,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, cols) = qv.dim();
        assert!(
            kv.dim() == (rows, cols) && vv.dim() == (rows, cols),
            "q, k, v shapes differ"
        );
        assert!(
            heads > 0 && cols % heads == 0,
            "columns not divisible by heads"
        );
        assert!(
            block > 0 && rows % block == 0,
            "rows not divisible by block"
        );
        let hd = cols / heads;
        let mut out = Mat::zeros((rows, cols));
        let mut probs = Vec::with_capacity(rows / block * heads);
        for b in 0..rows / block {
            for h in 0..heads {
                let idx = s![b * block..(b + 1) * block, h * hd..(h + 1) * hd];
                let (qh, kh, vh) = (
                    qv.slice(idx).to_owned(),
                    kv.slice(idx).to_owned(),
                    vv.slice(idx),
                );
                let (qs, ks) = (qh.as_slice().expect("owned"), kh.as_slice().expect("owned"));
                let mut p = Mat::zeros((block, block));
                let ps = p.as_slice_mut().expect("owned");
                for i in 0..block {
                    let qi = &qs[i * hd..(i + 1) * hd];
                    let row = &mut ps[i * block..(i + 1) * block];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &ks[j * hd..(j + 1) * hd];
                        let d = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        *r = d;
                        max = max.max(d);
                    }
                    let mut sum = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - max).exp();
                        sum += *e;
                    }
                    let inv = 1.0 / sum;
                    row.iter_mut().for_each(|e| *e *= inv);
                }
                out.slice_mut(idx).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                block,
                scale,
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ  =>  da = g b,  db = gᵀ a
                if self.ng(*a) {
                    accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g * *s),
            Op::OneMinus(a) => accumulate(grads, *a, -g),
            Op::Gelu(a) => {
                let mut d = self.value(*a).clone();
                Zip::from(&mut d).and(g).for_each(|x, &gi| {
                    let x0 = *x;
                    let t = (GELU_K * (x0 + GELU_C * x0 * x0 * x0)).tanh();
                    let dt = GELU_K * (1.0 + 3.0 * GELU_C * x0 * x0);
                    *x = gi * (0.5 * (1.0 + t) + 0.5 * x0 * (1.0 - t * t) * dt);
                });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = out.clone();
                Zip::from(&mut d)
                    .and(g)
                    .for_each(|y, &gi| *y = gi * *y * (1.0 - *y));
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Mat::zeros(out.dim());
                for ((mut drow, yrow), grow) in
                    d.rows_mut().into_iter().zip(out.rows()).zip(g.rows())
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, gi)| y * gi).sum();
                    for ((dv, &y), &gi) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *dv = y * (gi - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*gain) {
                    accumulate(
                        grads,
                        *gain,
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.ng(*bias) {
                    accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gain);
                    let cols = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / cols;
                        let mean_dh_xh =
                            dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for c in 0..row.len() {
                            row[c] = inv_std[r] * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start, end) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![*start..*end, ..]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                block,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, cols) = qv.dim();
                let hd = cols / heads;
                let mut dq = Mat::zeros((rows, cols));
                let mut dk = Mat::zeros((rows, cols));
                let mut dv = Mat::zeros((rows, cols));
                for b in 0..rows / block {
                    for h in 0..*heads {
                        let idx = s![b * block..(b + 1) * block, h * hd..(h + 1) * hd];
                        let p = &probs[b * heads + h];
                        let go = g.slice(idx);
                        dv.slice_mut(idx).assign(&p.t().dot(&go));
                        // softmax backward: dS = P ∘ (dP − rowsum(dP ∘ P))
                        let dp = go.dot(&vv.slice(idx).t());
                        let mut ds = p * &dp;
                        let sums = ds.sum_axis(Axis(1));
                        Zip::from(ds.rows_mut()).and(p.rows()).and(&sums).for_each(
                            |mut row, prow, &sum| {
                                row.zip_mut_with(&prow, |d, &pv| *d -= pv * sum);
                            },
                        );
                        ds *= *scale;
                        dq.slice_mut(idx).assign(&ds.dot(&kv.slice(idx)));
                        dk.slice_mut(idx).assign(&ds.t().dot(&qv.slice(idx)));
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.ng(var) {
                        accumulate(grads, var, d);
                    }
                }
            }
            Op::SumSquares(a) => {
                let gs = g[[0, 0]];
                accumulate(grads, *a, self.value(*a) * (2.0 * gs));
            }
            Op::Entropy(a) => {
                let gs = g[[0, 0]];
                let d = self
                    .value(*a)
                    .mapv(|w| if w > 0.0 { -gs * (w.ln() + 1.0) } else { 0.0 });
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
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

pub(crate) fn neg_w_ln_w(w: f64) -> f64 {
    if w > 0.0 {
        -w * w.ln()
    } else {
        0.0
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &ArrayView2<f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
