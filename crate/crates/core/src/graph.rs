//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is an `Array2<T>`. Image feature maps are stored one image per
//! row in height-width-channel order, so a `B × (H·W·C)` node reshapes into a
//! `(B·H·W) × C` region grid without copying.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
/// Smallest row norm used as a divisor by [`Graph::normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Contiguous row groups of a flat matrix; row groups are pooled independently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    /// Every segment must be non-empty.
    pub fn from_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Result<Self> {
        let mut offsets = vec![0];
        for len in lengths {
            if len == 0 {
                return Err(Error::NoAttendablePositions);
            }
            offsets.push(offsets.last().unwrap() + len);
        }
        if offsets.len() == 1 {
            return Err(Error::NoAttendablePositions);
        }
        Ok(Segments { offsets })
    }

    pub fn uniform(count: usize, len: usize) -> Result<Self> {
        Self::from_lengths(std::iter::repeat_n(len, count))
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Segment index of every row.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for i in 0..self.len() {
            out.extend(std::iter::repeat_n(i, self.range(i).len()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_h: usize,
        in_w: usize,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        ConvGeom {
            in_h,
            in_w,
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(
        in_h: usize,
        in_w: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        PoolGeom {
            in_h,
            in_w,
            channels,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var, T),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<Option<usize>>),
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    RowMax(Var, Vec<usize>),
    NormalizeRows(Var, Vec<(T, bool)>),
    CenterRows(Var),
    SegmentSoftmax(Var, Segments),
    SegmentSum(Var, Segments),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Array2<T>,
    },
    MaxPool2d(Var, Vec<usize>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A forward-only graph: nothing is retained for backward.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let grad = self.record && inputs.iter().any(|v| self.nodes[v.0].grad);
        let op = if grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (for probing inputs in tests).
    pub fn variable(&mut self, value: Array2<T>) -> Var {
        let grad = self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Bring a stored parameter into the graph; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let grad = self.record && p.trainable;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Gradients of the parameters touched by this graph, ordered by id.
    pub fn param_grads<'a>(&self, grads: &'a Gradients<T>) -> Vec<(ParamId, &'a Array2<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| grads.get(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- binary ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    /// `a + row`, broadcasting a `1 × m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(
            self.shape(row),
            (1, self.shape(a).1),
            "add_row: shape mismatch"
        );
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(
            self.shape(row),
            (1, self.shape(a).1),
            "mul_row: shape mismatch"
        );
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    /// `a + col`, broadcasting an `n × 1` column over every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(
            self.shape(col),
            (self.shape(a).0, 1),
            "add_col: shape mismatch"
        );
        let value = self.value(a) + self.value(col);
        self.push(value, Op::AddCol(a, col), &[a, col])
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(
            self.shape(col),
            (self.shape(a).0, 1),
            "mul_col: shape mismatch"
        );
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col), &[a, col])
    }

    // ---- unary ----

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.exp());
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        self.push(value, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.sqrt());
        self.push(value, Op::Sqrt(a), &[a])
    }

    /// `max(softplus(a), floor)`; the gradient is zero where the floor binds.
    pub fn softplus(&mut self, a: Var, floor: T) -> Var {
        let value = self.value(a).mapv(|x| softplus(x).max(floor));
        self.push(value, Op::Softplus(a, floor), &[a])
    }

    // ---- structural ----

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let mut value = Array2::zeros((idx.len(), cols));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                value.row_mut(r).assign(&src.row(*i));
            }
        }
        self.push(value, Op::Gather(a, idx), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        self.gather(a, idx.iter().map(|i| Some(*i)).collect())
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: size mismatch");
        let value = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape");
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum across columns: `n × m → n × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(a), &[a])
    }

    /// Sum down rows: `n × m → 1 × m`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumCols(a), &[a])
    }

    /// Per-row maximum: `n × m → n × 1`. Ties resolve to the lowest column.
    pub fn row_max(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut argmax = Vec::with_capacity(src.nrows());
        let mut value = Array2::zeros((src.nrows(), 1));
        for (r, row) in src.outer_iter().enumerate() {
            let mut best = 0;
            for (c, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = c;
                }
            }
            argmax.push(best);
            value[[r, 0]] = row[best];
        }
        self.push(value, Op::RowMax(a, argmax), &[a])
    }

    /// Scale every row to unit Euclidean norm. Rows with norm below
    /// [`NORM_FLOOR`] are divided by the floor instead.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let floor = T::of(NORM_FLOOR);
        let norms: Vec<(T, bool)> = src
            .outer_iter()
            .map(|r| {
                let n = r.iter().map(|x| *x * *x).sum::<T>().sqrt();
                if n < floor {
                    (floor, true)
                } else {
                    (n, false)
                }
            })
            .collect();
        let mut value = src.clone();
        for (mut row, (n, _)) in value.outer_iter_mut().zip(&norms) {
            row.mapv_inplace(|x| x / *n);
        }
        self.push(value, Op::NormalizeRows(a, norms), &[a])
    }

    /// Subtract each row's mean.
    pub fn center_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = T::of(src.ncols() as f64);
        let mut value = src.clone();
        for mut row in value.outer_iter_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|x| x - mean);
        }
        self.push(value, Op::CenterRows(a), &[a])
    }

    /// Softmax of an `N × 1` score column within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: &Segments) -> Var {
        let src = self.value(a);
        assert_eq!(
            src.dim(),
            (seg.total(), 1),
            "segment_softmax: shape mismatch"
        );
        let mut value = Array2::zeros((seg.total(), 1));
        for i in 0..seg.len() {
            let r = seg.range(i);
            let max = src
                .slice(s![r.clone(), 0])
                .iter()
                .fold(T::neg_infinity(), |m, x| m.max(*x));
            let mut total = T::zero();
            for j in r.clone() {
                let e = (src[[j, 0]] - max).exp();
                value[[j, 0]] = e;
                total += e;
            }
            for j in r {
                value[[j, 0]] = value[[j, 0]] / total;
            }
        }
        self.push(value, Op::SegmentSoftmax(a, seg.clone()), &[a])
    }

    /// Sum rows within each segment: `N × m → S × m`.
    pub fn segment_sum(&mut self, a: Var, seg: &Segments) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), seg.total(), "segment_sum: shape mismatch");
        let mut value = Array2::zeros((seg.len(), src.ncols()));
        for i in 0..seg.len() {
            let sum = src.slice(s![seg.range(i), ..]).sum_axis(Axis(0));
            value.row_mut(i).assign(&sum);
        }
        self.push(value, Op::SegmentSum(a, seg.clone()), &[a])
    }

    // ---- convolution ----

    /// 2-D convolution over `B × (H·W·C)` rows with a `(k·k·C) × C_out` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let input = self.value(x);
        assert_eq!(input.ncols(), geom.in_len(), "conv2d: input width");
        assert_eq!(
            self.shape(w),
            (geom.patch_len(), geom.out_c),
            "conv2d: kernel shape"
        );
        let batch = input.nrows();
        let cols = im2col(input, &geom);
        let mut out = cols.dot(self.value(w));
        if let Some(b) = b {
            assert_eq!(self.shape(b), (1, geom.out_c), "conv2d: bias shape");
            out += self.value(b);
        }
        let value = out
            .into_shape_with_order((batch, geom.out_len()))
            .expect("conv2d reshape");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// Max pooling; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, geom: PoolGeom) -> Var {
        let input = self.value(x);
        let batch = input.nrows();
        let c = geom.channels;
        assert_eq!(
            input.ncols(),
            geom.in_h * geom.in_w * c,
            "max_pool2d: input width"
        );
        let out_len = geom.out_h * geom.out_w * c;
        let mut value = Array2::zeros((batch, out_len));
        let mut argmax = vec![0usize; batch * out_len];
        for b in 0..batch {
            let row = input.row(b);
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ky in 0..geom.kernel {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= geom.in_h as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix < 0 || ix >= geom.in_w as isize {
                                    continue;
                                }
                                let idx = (iy as usize * geom.in_w + ix as usize) * c + ch;
                                if best_idx == usize::MAX || row[idx] > best {
                                    best = row[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (oy * geom.out_w + ox) * c + ch;
                        value[[b, o]] = best;
                        argmax[b * out_len + o] = b * input.ncols() + best_idx;
                    }
                }
            }
        }
        self.push(value, Op::MaxPool2d(x, argmax), &[x])
    }

    // ---- backward ----

    /// Differentiate `loss` (seeded with ones) with respect to every recording node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].grad {
            grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.dim()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Array2<T>>], v: Var, f: impl FnOnce(&mut Array2<T>)) {
        if !self.nodes[v.0].grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array2::zeros(self.nodes[v.0].value.dim()));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    self.acc(grads, *a, g.dot(&val(b).t()));
                }
                if needs(b) {
                    self.acc(grads, *b, val(a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    self.acc(grads, *a, g * val(b));
                }
                if needs(b) {
                    self.acc(grads, *b, g * val(a));
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    self.acc(grads, *a, g / val(b));
                }
                if needs(b) {
                    let mut d = g * y;
                    Zip::from(&mut d).and(val(b)).for_each(|d, b| *d = -*d / *b);
                    self.acc(grads, *b, d);
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if needs(r) {
                    self.acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if needs(a) {
                    self.acc(grads, *a, g * val(r));
                }
                if needs(r) {
                    self.acc(
                        grads,
                        *r,
                        (g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
            }
            Op::AddCol(a, c) => {
                self.acc(grads, *a, g.clone());
                if needs(c) {
                    self.acc(grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulCol(a, c) => {
                if needs(a) {
                    self.acc(grads, *a, g * val(c));
                }
                if needs(c) {
                    self.acc(
                        grads,
                        *c,
                        (g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1)),
                    );
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(y)
                    .for_each(|d, y| *d *= T::one() - *y * *y);
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(y)
                    .for_each(|d, y| *d *= *y * (T::one() - *y));
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, y| {
                    if *y <= T::zero() {
                        *d = T::zero()
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * y),
            Op::Log(a) => self.acc(grads, *a, g / val(a)),
            Op::Square(a) => {
                let mut d = g * val(a);
                d *= T::of(2.0);
                self.acc(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(y)
                    .for_each(|d, y| *d = *d / (*y + *y));
                self.acc(grads, *a, d);
            }
            Op::Softplus(a, floor) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, x| {
                    if softplus(*x) > *floor {
                        *d *= sigmoid(*x)
                    } else {
                        *d = T::zero()
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let w = g.ncols();
                let start = *start;
                self.acc_with(grads, *a, |ga| {
                    let mut sl = ga.slice_mut(s![.., start..start + w]);
                    sl += g;
                });
            }
            Op::SliceRows(a, start) => {
                let h = g.nrows();
                let start = *start;
                self.acc_with(grads, *a, |ga| {
                    let mut sl = ga.slice_mut(s![start..start + h, ..]);
                    sl += g;
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(p).ncols();
                    if needs(p) {
                        self.acc(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = val(p).nrows();
                    if needs(p) {
                        self.acc(grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::Gather(a, idx) => {
                self.acc_with(grads, *a, |ga| {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = i {
                            let mut dst = ga.row_mut(*i);
                            dst += &g.row(r);
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let dim = val(a).dim();
                let d = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(dim)
                    .expect("reshape backward");
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::SumAll(a) => {
                let dim = val(a).dim();
                self.acc(grads, *a, Array2::from_elem(dim, g[[0, 0]]));
            }
            Op::SumRows(a) => {
                let dim = val(a).dim();
                let d = g.broadcast(dim).expect("sum_rows broadcast").to_owned();
                self.acc(grads, *a, d);
            }
            Op::SumCols(a) => {
                let dim = val(a).dim();
                let d = g.broadcast(dim).expect("sum_cols broadcast").to_owned();
                self.acc(grads, *a, d);
            }
            Op::RowMax(a, argmax) => {
                self.acc_with(grads, *a, |ga| {
                    for (r, c) in argmax.iter().enumerate() {
                        ga[[r, *c]] += g[[r, 0]];
                    }
                });
            }
            Op::NormalizeRows(a, norms) => {
                let mut d = g.clone();
                for ((mut drow, yrow), (n, floored)) in
                    d.outer_iter_mut().zip(y.outer_iter()).zip(norms)
                {
                    if *floored {
                        drow.mapv_inplace(|g| g / *n);
                        continue;
                    }
                    let dot: T = drow.iter().zip(yrow.iter()).map(|(g, y)| *g * *y).sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|g, y| *g = (*g - *y * dot) / *n);
                }
                self.acc(grads, *a, d);
            }
            Op::CenterRows(a) => {
                let n = T::of(g.ncols() as f64);
                let mut d = g.clone();
                for mut row in d.outer_iter_mut() {
                    let mean = row.sum() / n;
                    row.mapv_inplace(|x| x - mean);
                }
                self.acc(grads, *a, d);
            }
            Op::SegmentSoftmax(a, seg) => {
                let mut d = Array2::zeros(y.dim());
                for i in 0..seg.len() {
                    let r = seg.range(i);
                    let dot: T = r.clone().map(|j| y[[j, 0]] * g[[j, 0]]).sum();
                    for j in r {
                        d[[j, 0]] = y[[j, 0]] * (g[[j, 0]] - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SegmentSum(a, seg) => {
                let mut d = Array2::zeros(val(a).dim());
                for i in 0..seg.len() {
                    for j in seg.range(i) {
                        d.row_mut(j).assign(&g.row(i));
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let rows = cols.nrows();
                let gy = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((rows, geom.out_c))
                    .expect("conv2d backward reshape");
                if needs(w) {
                    self.acc(grads, *w, cols.t().dot(&gy));
                }
                if let Some(b) = b {
                    if needs(b) {
                        self.acc(grads, *b, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                if needs(x) {
                    let dcols = gy.dot(&val(w).t());
                    let batch = val(x).nrows();
                    self.acc(grads, *x, col2im(&dcols, batch, geom));
                }
            }
            Op::MaxPool2d(a, argmax) => {
                self.acc_with(grads, *a, |ga| {
                    let flat = ga.as_slice_mut().expect("standard layout");
                    for (o, src) in g.iter().zip(argmax) {
                        flat[*src] += *o;
                    }
                });
            }
        }
    }
}

fn im2col<T: Scalar>(input: &Array2<T>, geom: &ConvGeom) -> Array2<T> {
    let batch = input.nrows();
    let c = geom.in_c;
    let positions = geom.out_h * geom.out_w;
    let mut cols = Array2::zeros((batch * positions, geom.patch_len()));
    for b in 0..batch {
        let row = input.row(b);
        let row = row.as_slice().expect("contiguous input row");
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let r = b * positions + oy * geom.out_w + ox;
                let mut dst = cols.row_mut(r);
                let dst = dst.as_slice_mut().expect("contiguous col row");
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * geom.in_w + ix as usize) * c;
                        let off = (ky * geom.kernel + kx) * c;
                        dst[off..off + c].copy_from_slice(&row[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &Array2<T>, batch: usize, geom: &ConvGeom) -> Array2<T> {
    let c = geom.in_c;
    let positions = geom.out_h * geom.out_w;
    let mut out = Array2::zeros((batch, geom.in_len()));
    for b in 0..batch {
        let mut row = out.row_mut(b);
        let row = row.as_slice_mut().expect("contiguous");
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let r = b * positions + oy * geom.out_w + ox;
                let src = dcols.row(r);
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * geom.in_w + ix as usize) * c;
                        let off = (ky * geom.kernel + kx) * c;
                        for ch in 0..c {
                            row[dst + ch] += src[off + ch];
                        }
                    }
                }
            }
        }
    }
    out
}
