//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D row-major matrix (tokens × channels).
//! Operations record their inputs and whatever intermediate state the
//! backward pass needs; [`Tape::backward`] then walks the nodes in reverse
//! creation order. Nodes that do not depend on any gradient-requiring leaf
//! are skipped entirely during the backward sweep.

use ndarray::{s, Array1, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
/// Probability clamp used by the pixel cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Array1<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    NormalizeRows(Var, Array1<f64>),
    Reshape(Var),
    Sum(Var),
    BceWithLogits { z: Var, target: Mat },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss (or does not require gradients).
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1 × d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// Per-row layer normalization with a `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            Zip::from(xhat.row_mut(i))
                .and(row)
                .for_each(|h, &v| *h = (v - mean) * is);
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            v,
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

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Column means, `n × d → 1 × d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let norms: Array1<f64> = av
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
            .collect();
        let v = av / &norms.view().insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::NormalizeRows(a, norms), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape: element count mismatch");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Sum of all entries as a `1 × 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `target`, with the
    /// probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce_with_logits(&mut self, z: Var, target: Mat) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.dim(), target.dim(), "bce_with_logits: shape mismatch");
        let n = zv.len() as f64;
        let total: f64 = zv
            .iter()
            .zip(target.iter())
            .map(|(&z, &t)| {
                let p = sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let ng = self.ng(z);
        self.push(
            Mat::from_elem((1, 1), total / n),
            Op::BceWithLogits { z, target },
            ng,
        )
    }

    /// Reverse sweep from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let acc = |v: Var, g: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, gy.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t().dot(&gy), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(*a, gy.dot(self.value(*b)), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, gy.t().dot(self.value(*a)), &mut grads);
                    }
                }
                Op::Transpose(a) => acc(*a, gy.t().to_owned(), &mut grads),
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(*b, gy.clone(), &mut grads);
                    }
                    acc(*a, gy, &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(*row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, gy, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, &gy * self.value(*b), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, &gy * self.value(*a), &mut grads);
                    }
                }
                Op::Scale(a, c) => acc(*a, gy * *c, &mut grads),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&gy - &dot), &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = node.value.mapv(f64::exp);
                    let total = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, &gy - &(sm * &total), &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*bias) {
                        acc(*bias, gy.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    if self.ng(*gain) {
                        acc(
                            *gain,
                            (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                            &mut grads,
                        );
                    }
                    if self.ng(*x) {
                        let d = xhat.ncols() as f64;
                        let dxhat = &gy * self.value(*gain);
                        let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let mut dx = dxhat * d - &sum_d - &(xhat * &sum_dx);
                        let scale = inv_std.mapv(|s| s / d).insert_axis(Axis(1));
                        dx *= &scale;
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    acc(*a, gy * &d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.shape(p).0;
                        if self.ng(p) {
                            acc(p, gy.slice(s![start..start + n, ..]).to_owned(), &mut grads);
                        }
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut g = Mat::zeros(self.shape(*a));
                    let n = gy.nrows();
                    g.slice_mut(s![*start..*start + n, ..]).assign(&gy);
                    acc(*a, g, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.shape(p).1;
                        if self.ng(p) {
                            acc(p, gy.slice(s![.., start..start + n]).to_owned(), &mut grads);
                        }
                        start += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut g = Mat::zeros(self.shape(*a));
                    let n = gy.ncols();
                    g.slice_mut(s![.., *start..*start + n]).assign(&gy);
                    acc(*a, g, &mut grads);
                }
                Op::MeanRows(a) => {
                    let (n, d) = self.shape(*a);
                    let g = gy
                        .broadcast((n, d))
                        .expect("mean_rows grad broadcast")
                        .mapv(|v| v / n as f64);
                    acc(*a, g, &mut grads);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let dot = (&gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g = (&gy - &(y * &dot)) / &norms.view().insert_axis(Axis(1));
                    acc(*a, g, &mut grads);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let g = Mat::from_shape_vec(shape, gy.iter().copied().collect())
                        .expect("reshape grad");
                    acc(*a, g, &mut grads);
                }
                Op::Sum(a) => {
                    let g = Mat::from_elem(self.shape(*a), gy[[0, 0]]);
                    acc(*a, g, &mut grads);
                }
                Op::BceWithLogits { z, target } => {
                    let zv = self.value(*z);
                    let n = zv.len() as f64;
                    let scale = gy[[0, 0]] / n;
                    let mut g = Mat::zeros(zv.dim());
                    Zip::from(&mut g)
                        .and(zv)
                        .and(target)
                        .for_each(|g, &z, &t| {
                            let p = sigmoid(z);
                            if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                                *g = (p - t) * scale;
                            }
                        });
                    acc(*z, g, &mut grads);
                }
            }
        }
        Grads { grads }
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

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Mat) -> Mat {
    let mut v = a.clone();
    for mut row in v.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    v
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}
