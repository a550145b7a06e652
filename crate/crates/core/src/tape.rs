//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of a
//! scalar output with respect to every leaf. Everything is row-major
//! two-dimensional; higher-rank data (spectrograms, attention heads) is laid
//! out by the caller and moved around with [`Tape::gather`] or the slicing ops.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

/// Dense row-major matrix used for every tape value.
pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary maps with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Square,
    Recip,
    /// SmoothL1 of the residual with transition point 1.
    SmoothL1,
    /// `1 - exp(-x)`, accurate for small `x`.
    OneMinusExpNeg,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::SmoothL1 => smooth_l1_scalar(x),
            Unary::OneMinusExpNeg => -(-x).exp_m1(),
        }
    }

    /// Derivative given the input `x` and the already computed output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Gelu => gelu_derivative(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    x
                } else {
                    x.signum()
                }
            }
            Unary::OneMinusExpNeg => (-x).exp(),
        }
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Upper bound on |gelu'(x)| for the tanh approximation.
pub const GELU_LIPSCHITZ: f64 = 1.13;

pub fn smooth_l1_scalar(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        0.5 * r * r
    } else {
        a - 0.5
    }
}

/// Precomputed real FFT spectrum used by [`Tape::band_filter`].
#[derive(Debug, Clone)]
pub struct BandSpectrum {
    /// Signal length before the transform.
    pub len: usize,
    /// Per-channel one-sided spectrum: `re[c][f]`, `im[c][f]`.
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Broadcast(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Map(Var, Unary),
    Gather(Var, Arc<Vec<Option<usize>>>),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, Arc<Vec<f64>>),
    L2NormalizeRows(Var, Arc<Vec<f64>>),
    BandFilter(Var, Var, Arc<BandSpectrum>),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Arc<Mat>,
    op: Op,
}

/// Recording context for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Mat>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> Arc<Mat> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_shared(&self, value: Arc<Mat>) -> Var {
        self.push_arc(value, Op::Leaf)
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Detach)
    }

    pub fn constant_shared(&self, value: Arc<Mat>) -> Var {
        self.push_arc(value, Op::Detach)
    }

    /// Copy of `a` through which no gradient flows.
    pub fn detach(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push_arc(v, Op::Detach)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&*self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) + &*self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) - &*self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) * &*self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) / &*self.value(b);
        self.push(out, Op::Div(a, b))
    }

    /// `a + row` where `row` is 1×n, broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = &*self.value(a) + &*self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// `a * row` where `row` is 1×n, broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let out = &*self.value(a) * &*self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    /// `a * col` where `col` is m×1, broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let out = &*self.value(a) * &*self.value(col);
        self.push(out, Op::MulCol(a, col))
    }

    /// Expand a 1×1 node to `shape`.
    pub fn broadcast(&self, a: Var, shape: (usize, usize)) -> Var {
        let v = self.value(a)[[0, 0]];
        self.push(Mat::from_elem(shape, v), Op::Broadcast(a))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = &*self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let out = &*self.value(a) + k;
        self.push(out, Op::AddScalar(a))
    }

    pub fn map(&self, a: Var, f: Unary) -> Var {
        let out = self.value(a).mapv(|x| f.apply(x));
        self.push(out, Op::Map(a, f))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.map(a, Unary::Sigmoid)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.map(a, Unary::Gelu)
    }

    /// `out.flat[i] = a.flat[idx[i]]`, or zero for `None`.
    pub fn gather(&self, a: Var, idx: Arc<Vec<Option<usize>>>, shape: (usize, usize)) -> Var {
        assert_eq!(idx.len(), shape.0 * shape.1, "gather index count");
        let src = self.value(a);
        let flat = src.as_slice().expect("tape values are contiguous");
        let data: Vec<f64> = idx
            .iter()
            .map(|i| i.map_or(0.0, |i| flat[i]))
            .collect();
        let out = Mat::from_shape_vec(shape, data).expect("gather shape");
        self.push(out, Op::Gather(a, idx))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&self, a: Var, shape: (usize, usize)) -> Var {
        let src = self.value(a);
        let out = Mat::from_shape_vec(shape, src.iter().copied().collect()).expect("reshape size");
        self.push(out, Op::Reshape(a))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<Arc<Mat>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        self.push(out.as_standard_layout().to_owned(), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<Arc<Mat>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        self.push(out.as_standard_layout().to_owned(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let out = self
            .value(a)
            .slice(s![.., start..end])
            .as_standard_layout()
            .to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let v = self.value(a);
        let out = Mat::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::MeanAll(a))
    }

    /// Row sums as an m×1 column.
    pub fn sum_rows(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumRows(a))
    }

    /// Column sums as a 1×n row.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumCols(a))
    }

    pub fn mean_cols(&self, a: Var) -> Var {
        let rows = self.shape(a).0 as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / rows)
    }

    /// Row-wise softmax. Entries where `mask` is false get probability zero.
    pub fn softmax_rows(&self, a: Var, mask: Option<&Array2<bool>>) -> Var {
        let v = self.value(a);
        let mut out = Mat::zeros(v.dim());
        for (i, row) in v.rows().into_iter().enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| allowed(*j))
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                continue;
            }
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - max).exp();
                    out[[i, j]] = e;
                    total += e;
                }
            }
            out.row_mut(i).mapv_inplace(|e| e / total);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row zero-mean unit-variance normalization (no affine part).
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let n = v.ncols() as f64;
        let mut out = Mat::zeros(v.dim());
        let mut inv_std = Vec::with_capacity(v.nrows());
        for (i, row) in v.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &x) in row.iter().enumerate() {
                out[[i, j]] = (x - mean) * is;
            }
        }
        self.push(out, Op::NormalizeRows(a, Arc::new(inv_std)))
    }

    /// Divide each row by `sqrt(‖row‖² + eps²)`; zero rows stay zero.
    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let mut out = v.as_ref().clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in out.rows_mut() {
            let n = (row.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            norms.push(n);
            row.mapv_inplace(|x| x / n);
        }
        self.push(out, Op::L2NormalizeRows(a, Arc::new(norms)))
    }

    /// Apply a real spectral mask: `irfft(mask ⊙ spectrum)` per channel.
    ///
    /// `spectrum` holds the real FFT of the signal whose gradient flows
    /// through `signal`; `mask` is a 1×(N/2+1) row. The result is N×C.
    pub fn band_filter(&self, signal: Var, spectrum: Arc<BandSpectrum>, mask: Var) -> Var {
        let m = self.value(mask);
        let mrow = m.row(0);
        let channels = spectrum.re.len();
        let n = spectrum.len;
        let mut out = Mat::zeros((n, channels));
        for c in 0..channels {
            let re: Vec<f64> = spectrum.re[c].iter().zip(mrow.iter()).map(|(a, b)| a * b).collect();
            let im: Vec<f64> = spectrum.im[c].iter().zip(mrow.iter()).map(|(a, b)| a * b).collect();
            let y = crate::spectral::fft::irfft(&re, &im, n);
            for (t, v) in y.into_iter().enumerate() {
                out[[t, c]] = v;
            }
        }
        self.push(out, Op::BandFilter(signal, mask, spectrum))
    }

    /// Gradients of the 1×1 node `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            // Leaf gradients are kept; everything else is consumed.
            if matches!(node.op, Op::Leaf | Op::Detach) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = &node.value;
            let value_of = |v: Var| &nodes[v.0].value;
            let acc = |v: Var, d: Mat, grads: &mut Vec<Option<Mat>>| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&value_of(*b).t()), &mut grads);
                    acc(*b, value_of(*a).t().dot(&g), &mut grads);
                }
                Op::MatMulNt(a, b) => {
                    acc(*a, g.dot(&**value_of(*b)), &mut grads);
                    acc(*b, g.t().dot(&**value_of(*a)), &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, -g, &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * &**value_of(*b), &mut grads);
                    acc(*b, &g * &**value_of(*a), &mut grads);
                }
                Op::Div(a, b) => {
                    let bv = value_of(*b);
                    acc(*a, &g / &**bv, &mut grads);
                    let db = -(&g * &**val) / &**bv;
                    acc(*b, db, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, g, &mut grads);
                    acc(*row, dr, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let rv = value_of(*row);
                    let dr = (&g * &**value_of(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, &g * &**rv, &mut grads);
                    acc(*row, dr, &mut grads);
                }
                Op::MulCol(a, col) => {
                    let cv = value_of(*col);
                    let dc = (&g * &**value_of(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, &g * &**cv, &mut grads);
                    acc(*col, dc, &mut grads);
                }
                Op::Broadcast(a) => acc(*a, Mat::from_elem((1, 1), g.sum()), &mut grads),
                Op::Scale(a, k) => acc(*a, g * *k, &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::Map(a, f) => {
                    let x = value_of(*a);
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(&**x)
                        .and(&**val)
                        .for_each(|d, &x, &y| *d *= f.derivative(x, y));
                    acc(*a, d, &mut grads);
                }
                Op::Gather(a, idx) => {
                    let shape = value_of(*a).dim();
                    let mut d = Mat::zeros(shape);
                    {
                        let flat = d.as_slice_mut().expect("contiguous");
                        for (gv, i) in g.iter().zip(idx.iter()) {
                            if let Some(i) = i {
                                flat[*i] += gv;
                            }
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Reshape(a) => {
                    let shape = value_of(*a).dim();
                    let d = Mat::from_shape_vec(shape, g.iter().copied().collect()).expect("reshape");
                    acc(*a, d, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.t().as_standard_layout().to_owned(), &mut grads),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = value_of(*p).nrows();
                        acc(*p, g.slice(s![start..start + r, ..]).to_owned(), &mut grads);
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = value_of(*p).ncols();
                        let d = g.slice(s![.., start..start + c]).as_standard_layout().to_owned();
                        acc(*p, d, &mut grads);
                        start += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(value_of(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(value_of(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::SumAll(a) => {
                    let shape = value_of(*a).dim();
                    acc(*a, Mat::from_elem(shape, g[[0, 0]]), &mut grads);
                }
                Op::MeanAll(a) => {
                    let shape = value_of(*a).dim();
                    let n = (shape.0 * shape.1) as f64;
                    acc(*a, Mat::from_elem(shape, g[[0, 0]] / n), &mut grads);
                }
                Op::SumRows(a) => {
                    let shape = value_of(*a).dim();
                    let d = Mat::from_shape_fn(shape, |(i, _)| g[[i, 0]]);
                    acc(*a, d, &mut grads);
                }
                Op::SumCols(a) => {
                    let shape = value_of(*a).dim();
                    let d = Mat::from_shape_fn(shape, |(_, j)| g[[0, j]]);
                    acc(*a, d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = Mat::zeros(val.dim());
                    for i in 0..val.nrows() {
                        let y = val.row(i);
                        let gy = g.row(i);
                        let dot: f64 = y.iter().zip(gy.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..val.ncols() {
                            d[[i, j]] = y[j] * (gy[j] - dot);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::NormalizeRows(a, inv_std) => {
                    let n = val.ncols() as f64;
                    let mut d = Mat::zeros(val.dim());
                    for i in 0..val.nrows() {
                        let y = val.row(i);
                        let gy = g.row(i);
                        let mean_g = gy.sum() / n;
                        let mean_gy: f64 = y.iter().zip(gy.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..val.ncols() {
                            d[[i, j]] = inv_std[i] * (gy[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let mut d = Mat::zeros(val.dim());
                    for i in 0..val.nrows() {
                        let y = val.row(i);
                        let gy = g.row(i);
                        let dot: f64 = y.iter().zip(gy.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..val.ncols() {
                            d[[i, j]] = (gy[j] - y[j] * dot) / norms[i];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::BandFilter(signal, mask, spectrum) => {
                    let mask = *mask;
                    let mrow = value_of(mask).row(0).to_owned();
                    let n = spectrum.len;
                    let bins = mrow.len();
                    let mut dsig = Mat::zeros((n, spectrum.re.len()));
                    let mut dmask = Mat::zeros((1, bins));
                    for c in 0..spectrum.re.len() {
                        let gcol: Vec<f64> = g.column(c).to_vec();
                        let (gre, gim) = crate::spectral::fft::rfft(&gcol);
                        // The masked circular filter is self-adjoint.
                        let re: Vec<f64> = gre.iter().zip(mrow.iter()).map(|(a, b)| a * b).collect();
                        let im: Vec<f64> = gim.iter().zip(mrow.iter()).map(|(a, b)| a * b).collect();
                        let back = crate::spectral::fft::irfft(&re, &im, n);
                        for (t, v) in back.into_iter().enumerate() {
                            dsig[[t, c]] = v;
                        }
                        for f in 0..bins {
                            let w = crate::spectral::fft::rfft_bin_weight(f, n);
                            dmask[[0, f]] += w / n as f64
                                * (spectrum.re[c][f] * gre[f] + spectrum.im[c][f] * gim[f]);
                        }
                    }
                    acc(*signal, dsig, &mut grads);
                    acc(mask, dmask, &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Compare reverse-mode gradients with central differences.
    fn check(inputs: Vec<Mat>, f: impl Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Mat::zeros(input.dim()));
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut moved = inputs.clone();
                    moved[i].as_slice_mut().unwrap()[idx] += delta;
                    let t = Tape::new();
                    let vs: Vec<Var> = moved.into_iter().map(|m| t.leaf(m)).collect();
                    let o = f(&t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {i} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn arithmetic_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random((3, 4), &mut rng);
        let b = random((4, 2), &mut rng);
        let c = random((3, 4), &mut rng);
        check(vec![a.clone(), b.clone()], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.sum_all(t.map(m, Unary::Square))
        });
        check(vec![a.clone(), c.clone()], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            let d = t.div(t.sub(v[0], v[1]), t.add_scalar(t.map(v[1], Unary::Square), 1.0));
            t.add(t.mean_all(t.mul(m, m)), t.sum_all(t.scale(d, 0.3)))
        });
        let row = random((1, 4), &mut rng);
        let col = random((3, 1), &mut rng);
        check(vec![a.clone(), row, col], |t, v| {
            let x = t.add_row(v[0], v[1]);
            let y = t.mul_row(x, v[1]);
            let z = t.mul_col(y, v[2]);
            let w = t.broadcast(t.slice_cols(v[1], 1, 2), (3, 4));
            t.sum_all(t.mul(t.gelu(z), w))
        });
    }

    #[test]
    fn unary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random((2, 5), &mut rng);
        for op in [Unary::Sigmoid, Unary::Gelu, Unary::Exp, Unary::Abs, Unary::Square, Unary::SmoothL1, Unary::OneMinusExpNeg] {
            check(vec![a.clone()], |t, v| t.sum_all(t.map(v[0], op)));
        }
        let pos = a.mapv(|x| x.abs() + 0.5);
        for op in [Unary::Ln, Unary::Sqrt, Unary::Recip] {
            check(vec![pos.clone()], |t, v| t.sum_all(t.map(v[0], op)));
        }
    }

    #[test]
    fn layout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random((4, 3), &mut rng);
        let b = random((2, 3), &mut rng);
        let weights = random((6, 6), &mut rng);
        check(vec![a.clone(), b.clone()], |t, v| {
            let cat = t.concat_rows(&[v[0], v[1]]);
            let tr = t.transpose(cat);
            let rs = t.reshape(tr, (6, 3));
            let cc = t.concat_cols(&[rs, rs]);
            let w = t.constant(weights.clone());
            let idx: Vec<Option<usize>> = (0..8).map(|i| if i % 3 == 0 { None } else { Some(i * 2) }).collect();
            let g = t.gather(cc, Arc::new(idx), (2, 4));
            let s = t.slice_rows(t.mul(cc, w), 1, 4);
            t.add(t.sum_all(t.map(s, Unary::Square)), t.sum_all(t.map(g, Unary::Exp)))
        });
        check(vec![a.clone()], |t, v| {
            let r = t.sum_rows(v[0]);
            let c = t.mean_cols(v[0]);
            t.add(t.sum_all(t.map(r, Unary::Square)), t.sum_all(t.map(c, Unary::Exp)))
        });
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random((3, 5), &mut rng);
        let w = random((3, 5), &mut rng);
        let mask = Array2::from_shape_fn((3, 5), |(i, j)| (i + j) % 3 != 0);
        check(vec![a.clone()], |t, v| {
            let s = t.softmax_rows(v[0], Some(&mask));
            t.sum_all(t.mul(s, t.constant(w.clone())))
        });
        check(vec![a.clone()], |t, v| {
            let s = t.normalize_rows(v[0], 1e-5);
            t.sum_all(t.mul(s, t.constant(w.clone())))
        });
        check(vec![a.clone()], |t, v| {
            let s = t.l2_normalize_rows(v[0], 1e-8);
            t.sum_all(t.mul(s, t.constant(w.clone())))
        });
    }

    #[test]
    fn band_filter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16;
        let x = random((n, 2), &mut rng);
        let mask = random((1, n / 2 + 1), &mut rng);
        let w = random((n, 2), &mut rng);
        check(vec![x.clone(), mask], |t, v| {
            let xv = t.value(v[0]);
            let mut re = Vec::new();
            let mut im = Vec::new();
            for c in 0..2 {
                let (r, i) = crate::spectral::fft::rfft(&xv.column(c).to_vec());
                re.push(r);
                im.push(i);
            }
            let spec = Arc::new(BandSpectrum { len: n, re, im });
            let y = t.band_filter(v[0], spec, v[1]);
            t.sum_all(t.mul(y, t.constant(w.clone())))
        });
    }

    #[test]
    fn masked_softmax_gives_exact_zeros() {
        let tape = Tape::new();
        let a = tape.leaf(Mat::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64));
        let mask = Array2::from_shape_vec((2, 3), vec![true, false, true, false, true, true]).unwrap();
        let s = tape.value(tape.softmax_rows(a, Some(&mask)));
        assert_eq!(s[[0, 1]], 0.0);
        assert_eq!(s[[1, 0]], 0.0);
        assert!((s.row(0).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Mat::from_elem((1, 1), 2.0));
        let d = tape.detach(a);
        let loss = tape.mul(d, a);
        let g = tape.backward(loss);
        assert_eq!(g.get(a).unwrap()[[0, 0]], 2.0);
    }
}
