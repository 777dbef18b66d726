//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D array. Operations append a node holding
//! the forward value and enough information to push gradients back to its
//! inputs. Parameters enter the tape once per forward pass through
//! [`Tape::param`]; constants (including detached values) enter through
//! [`Tape::constant`] and never receive gradient.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use super::params::{ParamId, Params};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous row groups `[offsets[k], offsets[k + 1])`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for len in lengths {
            let last = *offsets.last().unwrap();
            offsets.push(last + len);
        }
        Segments { offsets }
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        Self::from_lengths(std::iter::repeat_n(len, count))
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Mish(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    SegmentSoftmax(Var, Rc<Segments>),
    SegmentSum(Var, Rc<Segments>),
    SegmentMean(Var, Rc<Segments>),
    IndexedDot {
        a: Var,
        a_rows: Rc<Vec<usize>>,
        b: Var,
        b_rows: Rc<Vec<usize>>,
    },
    WeightedSum(Var, Rc<Vec<f64>>),
    MeanAll(Var),
    SumAll(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of a scalar with respect to every node of the tape.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, Var)>,
}

fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn mish_grad(x: f64) -> f64 {
    let sp = softplus(x);
    let t = sp.tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

/// `ln(1 + e^x)` evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies the current value of `v` as a gradient-free constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Places parameter `id` on the tape; repeated calls reuse the node.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param);
        self.param_nodes.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `x · w + bias` with the 1×C bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let mut value = self.value(x).dot(self.value(w));
        value += self.value(bias);
        self.push(value, Op::Affine(x, w, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `x + row` with the 1×C `row` broadcast over rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    /// `x ⊙ row` with the 1×C `row` broadcast over rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) * self.value(row);
        self.push(value, Op::MulRow(x, row))
    }

    /// `x ⊙ col` with the R×1 `col` broadcast over columns of `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let value = self.value(x) * self.value(col);
        self.push(value, Op::MulCol(x, col))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        self.push(value, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(mish);
        self.push(value, Op::Mish(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.push(value, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        self.push(value, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        self.push(value, Op::Abs(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        self.push(value, Op::Softplus(x))
    }

    /// Row-wise standardization followed by the learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let cols = input.ncols() as f64;
        let mut xhat = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Output row `k` is input row `rows[k]`.
    pub fn gather(&mut self, x: Var, rows: Rc<Vec<usize>>) -> Var {
        let value = self.value(x).select(Axis(0), &rows);
        self.push(value, Op::Gather(x, rows))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Softmax of an R×1 score column within each segment. Rows whose `mask`
    /// entry is false receive exactly zero weight.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        segments: Rc<Segments>,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Var {
        let s = self.value(scores);
        debug_assert_eq!(s.ncols(), 1);
        let valid = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
        let mut out = Mat::zeros((s.nrows(), 1));
        for range in segments.iter() {
            let max = range
                .clone()
                .filter(|&r| valid(r))
                .map(|r| s[[r, 0]])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for r in range.clone().filter(|&r| valid(r)) {
                let e = (s[[r, 0]] - max).exp();
                out[[r, 0]] = e;
                total += e;
            }
            for r in range.filter(|&r| valid(r)) {
                out[[r, 0]] /= total;
            }
        }
        self.push(out, Op::SegmentSoftmax(scores, segments))
    }

    pub fn segment_sum(&mut self, x: Var, segments: Rc<Segments>) -> Var {
        let value = segment_reduce(self.value(x), &segments, false);
        self.push(value, Op::SegmentSum(x, segments))
    }

    pub fn segment_mean(&mut self, x: Var, segments: Rc<Segments>) -> Var {
        let value = segment_reduce(self.value(x), &segments, true);
        self.push(value, Op::SegmentMean(x, segments))
    }

    /// `out[k] = a[a_rows[k]] · b[b_rows[k]]`, an R×1 column.
    pub fn indexed_dot(
        &mut self,
        a: Var,
        a_rows: Rc<Vec<usize>>,
        b: Var,
        b_rows: Rc<Vec<usize>>,
    ) -> Var {
        assert_eq!(a_rows.len(), b_rows.len());
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Mat::zeros((a_rows.len(), 1));
        for (k, (&i, &j)) in a_rows.iter().zip(b_rows.iter()).enumerate() {
            out[[k, 0]] = av.row(i).dot(&bv.row(j));
        }
        self.push(
            out,
            Op::IndexedDot {
                a,
                a_rows,
                b,
                b_rows,
            },
        )
    }

    /// `Σ_k weights[k] · x_k` over the elements of `x` in row-major order.
    pub fn weighted_sum(&mut self, x: Var, weights: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len());
        let total: f64 = xv.iter().zip(weights.iter()).map(|(a, w)| a * w).sum();
        self.push(Mat::from_elem((1, 1), total), Op::WeightedSum(x, weights))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = v.sum() / v.len() as f64;
        self.push(Mat::from_elem((1, 1), mean), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Mat::from_elem((1, 1), total), Op::SumAll(x))
    }

    /// Back-propagates from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine(x, w, bias) => {
                    accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *w, self.value(*x).t().dot(&g));
                    accumulate(&mut grads, *x, g.dot(&self.value(*w).t()));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::MulRow(x, row) => {
                    let grow = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, grow);
                    accumulate(&mut grads, *x, &g * self.value(*row));
                }
                Op::MulCol(x, col) => {
                    let gcol = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *col, gcol);
                    accumulate(&mut grads, *x, &g * self.value(*col));
                }
                Op::Scale(x, f) => accumulate(&mut grads, *x, &g * *f),
                Op::AddScalar(x) => accumulate(&mut grads, *x, g.clone()),
                Op::Mish(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| *gv *= mish_grad(xv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| *gv = if xv > 0.0 { *gv } else { 0.0 });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => accumulate(&mut grads, *x, &g * &node.value),
                Op::Ln(x) => accumulate(&mut grads, *x, &g / self.value(*x)),
                Op::Square(x) => accumulate(&mut grads, *x, &g * self.value(*x) * 2.0),
                Op::Abs(x) => {
                    let sign = self.value(*x).mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, &g * &sign);
                }
                Op::Softplus(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| *gv *= sigmoid(xv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(
                        &mut grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let gxhat = &g * gamma_v;
                    let n = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gh = gxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_g = gh.sum() / n;
                        let mean_gx = gh.dot(&xh) / n;
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = is * (gh[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather(x, rows) => {
                    let shape = self.value(*x).dim();
                    let mut gx = Mat::zeros(shape);
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        let slice = g.slice(ndarray::s![.., start..start + width]).to_owned();
                        accumulate(&mut grads, p, slice);
                        start += width;
                    }
                }
                Op::SegmentSoftmax(scores, segments) => {
                    let y = &node.value;
                    let mut gs = Mat::zeros(y.dim());
                    for range in segments.iter() {
                        let dot: f64 = range.clone().map(|r| g[[r, 0]] * y[[r, 0]]).sum();
                        for r in range {
                            gs[[r, 0]] = y[[r, 0]] * (g[[r, 0]] - dot);
                        }
                    }
                    accumulate(&mut grads, *scores, gs);
                }
                Op::SegmentSum(x, segments) | Op::SegmentMean(x, segments) => {
                    let mean = matches!(node.op, Op::SegmentMean(..));
                    let shape = self.value(*x).dim();
                    let mut gx = Mat::zeros(shape);
                    for (k, range) in segments.iter().enumerate() {
                        let scale = if mean && !range.is_empty() {
                            1.0 / range.len() as f64
                        } else {
                            1.0
                        };
                        let src = g.row(k).mapv(|v| v * scale);
                        for r in range {
                            gx.row_mut(r).assign(&src);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::IndexedDot {
                    a,
                    a_rows,
                    b,
                    b_rows,
                } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = Mat::zeros(av.dim());
                    let mut gb = Mat::zeros(bv.dim());
                    for (k, (&i, &j)) in a_rows.iter().zip(b_rows.iter()).enumerate() {
                        let gk = g[[k, 0]];
                        if gk == 0.0 {
                            continue;
                        }
                        ga.row_mut(i).scaled_add(gk, &bv.row(j));
                        gb.row_mut(j).scaled_add(gk, &av.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::WeightedSum(x, weights) => {
                    let shape = self.value(*x).dim();
                    let g0 = g[[0, 0]];
                    let gx = Mat::from_shape_fn(shape, |(r, c)| g0 * weights[r * shape.1 + c]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanAll(x) => {
                    let shape = self.value(*x).dim();
                    let n = (shape.0 * shape.1) as f64;
                    accumulate(&mut grads, *x, Mat::from_elem(shape, g[[0, 0]] / n));
                }
                Op::SumAll(x) => {
                    let shape = self.value(*x).dim();
                    accumulate(&mut grads, *x, Mat::from_elem(shape, g[[0, 0]]));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Collects parameter gradients, zero for parameters absent from the tape
    /// or unreachable from the loss.
    pub fn param_grads(&self, params: &Params, grads: &Gradients) -> Vec<Mat> {
        let mut out: Vec<Mat> = params.iter().map(|(_, _, v)| Mat::zeros(v.dim())).collect();
        for &(id, var) in &self.param_nodes {
            if let Some(g) = grads.get(var) {
                out[id.index()] += g;
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn segment_reduce(x: &Mat, segments: &Segments, mean: bool) -> Mat {
    let mut out = Mat::zeros((segments.len(), x.ncols()));
    for (k, range) in segments.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let n = range.len() as f64;
        let block = x.slice(ndarray::s![range, ..]);
        let mut row = out.row_mut(k);
        row.assign(&block.sum_axis(Axis(0)));
        if mean {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}
