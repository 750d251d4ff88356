//! Operation kinds recorded on a [`Tape`], with their forward kernels and
//! reverse-mode adjoints.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::gemm::{gemm_acc, transpose};
use super::{accumulate_grad, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// A fixed real linear map `y = A x` applied row-wise, used for the
/// noise-filter construction. Stores `A` (rows x cols) and its transpose.
#[derive(Debug)]
pub struct FixedMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    data: Vec<T>,
    data_t: Vec<T>,
}

impl<T: Real> FixedMatrix<T> {
    /// `data` is row-major `[rows x cols]`.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "fixed matrix data of {} values does not fill [{rows}, {cols}]",
                data.len()
            )));
        }
        let data_t = transpose(rows, cols, &data);
        Ok(FixedMatrix {
            rows,
            cols,
            data,
            data_t,
        })
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Recorded operation; variants carry their parents and attributes.
pub enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, c: T },
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, dilation: usize },
    Conv2d { x: Var, w: Var, stride: (usize, usize) },
    LeakyRelu { x: Var, slope: T },
    Sigmoid(Var),
    ExpSigmoid(Var),
    SoftmaxRows(Var),
    Log(Var),
    Log1p(Var),
    ClampMin { x: Var, min: T },
    PowConst { x: Var, e: T },
    Mean(Var),
    Sum(Var),
    Slice { x: Var, axis: usize, start: usize, end: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Transpose(Var),
    Broadcast { x: Var, shape: Vec<usize> },
    Reshape { x: Var, shape: Vec<usize> },
    FftLinear { x: Var, matrix: Arc<FixedMatrix<T>> },
    L1Distance(Var, Var),
    UpsampleHann { x: Var, factor: usize },
    NoiseOla { h: Var, noise: Arc<Tensor<T>>, out_len: usize },
    PostConv { x: Var, kernel: Var },
    StftMag { x: Var, fft_size: usize, hop: usize },
    WeightNorm { v: Var, g: Var },
    LayerNormRows { x: Var, eps: T },
}

impl<T: Real> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::ExpSigmoid(..) => "exp_sigmoid",
            Op::SoftmaxRows(..) => "softmax",
            Op::Log(..) => "log",
            Op::Log1p(..) => "log1p",
            Op::ClampMin { .. } => "clamp_min",
            Op::PowConst { .. } => "pow",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Transpose(..) => "transpose",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::FftLinear { .. } => "fft_linear",
            Op::L1Distance(..) => "l1_distance",
            Op::UpsampleHann { .. } => "upsample_hann",
            Op::NoiseOla { .. } => "noise_ola",
            Op::PostConv { .. } => "post_conv",
            Op::StftMag { .. } => "stft_mag",
            Op::WeightNorm { .. } => "weight_norm",
            Op::LayerNormRows { .. } => "layer_norm",
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::L1Distance(a, b) => vec![*a, *b],
            Op::Conv1d { x, w, .. } | Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::PostConv { x, kernel } => vec![*x, *kernel],
            Op::WeightNorm { v, g } => vec![*v, *g],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Scale { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::ClampMin { x, .. }
            | Op::PowConst { x, .. }
            | Op::Slice { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Reshape { x, .. }
            | Op::FftLinear { x, .. }
            | Op::UpsampleHann { x, .. }
            | Op::StftMag { x, .. }
            | Op::LayerNormRows { x, .. } => vec![*x],
            Op::NoiseOla { h, .. } => vec![*h],
            Op::Sigmoid(x)
            | Op::ExpSigmoid(x)
            | Op::SoftmaxRows(x)
            | Op::Log(x)
            | Op::Log1p(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Transpose(x) => vec![*x],
        }
    }
}

// ---- graph construction API ----

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale {
            x,
            c: T::of_f64(c),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// Same-padded 1-D convolution: `x` is `[C_in, T]`, `w` is
    /// `[C_out, C_in, K]` with odd `K`; output `[C_out, T]`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        self.push(Op::Conv1d { x, w, dilation })
    }

    /// Strided 2-D convolution with half-kernel padding: `x` is
    /// `[C_in, H, W]`, `w` is `[C_out, C_in, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize)) -> Result<Var> {
        self.push(Op::Conv2d { x, w, stride })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.push(Op::LeakyRelu {
            x,
            slope: T::of_f64(slope),
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn exp_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::ExpSigmoid(x))
    }

    /// Softmax along axis 1 of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log(x))
    }

    pub fn log1p(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log1p(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        self.push(Op::ClampMin {
            x,
            min: T::of_f64(min),
        })
    }

    pub fn pow_const(&mut self, x: Var, e: f64) -> Result<Var> {
        self.push(Op::PowConst {
            x,
            e: T::of_f64(e),
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.push(Op::Slice {
            x,
            axis,
            start,
            end,
        })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat {
            xs: xs.to_vec(),
            axis,
        })
    }

    pub fn transpose_2d(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Broadcast {
            x,
            shape: shape.to_vec(),
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// Applies the fixed map row-wise: `x` is `[F, cols]`, output
    /// `[F, rows]`; the gradient is the transpose map.
    pub fn fft_linear(&mut self, x: Var, matrix: Arc<FixedMatrix<T>>) -> Result<Var> {
        self.push(Op::FftLinear { x, matrix })
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::L1Distance(a, b))
    }

    /// Zero-stuffing Hann upsampler applied per column of `[F, C]`,
    /// yielding `[F*factor, C]`. Matches `dsp::upsample_control`.
    pub fn upsample_hann(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.push(Op::UpsampleHann { x, factor })
    }

    /// Convolves each row of `h` `[F, L]` with the matching constant noise
    /// frame `[F, u]` and overlap-adds at hop `u`, truncated to `out_len`.
    pub fn noise_ola(&mut self, h: Var, noise: Arc<Tensor<T>>, out_len: usize) -> Result<Var> {
        self.push(Op::NoiseOla { h, noise, out_len })
    }

    /// Same-length centered convolution of audio `[N]` with an odd-length
    /// kernel; differentiable in both arguments. Computed via FFT.
    pub fn post_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.push(Op::PostConv { x, kernel })
    }

    /// Hann-windowed magnitude STFT of audio `[N]`, output
    /// `[frames, fft_size/2 + 1]`.
    pub fn stft_mag(&mut self, x: Var, fft_size: usize, hop: usize) -> Result<Var> {
        self.push(Op::StftMag { x, fft_size, hop })
    }

    /// Weight-normalized tensor: row i of the output is
    /// `g[i] * v[i] / ||v[i]||`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        self.push(Op::WeightNorm { v, g })
    }

    /// Per-row normalization of a rank-2 tensor to zero mean, unit variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNormRows {
            x,
            eps: T::of_f64(eps),
        })
    }
}

// ---- shared kernels ----

fn binary_out_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if an == 1 {
        return Ok(b.to_vec());
    }
    if bn == 1 {
        return Ok(a.to_vec());
    }
    Err(Error::shape(format!("{op}: shapes {a:?} vs {b:?}")))
}

fn elementwise<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = binary_out_shape(a.shape(), b.shape(), op)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    if a.numel() == n && b.numel() == n {
        for (x, y) in a.data().iter().zip(b.data()) {
            data.push(f(*x, *y));
        }
    } else if a.numel() == 1 {
        let x = a.data()[0];
        for y in b.data() {
            data.push(f(x, *y));
        }
    } else {
        let y = b.data()[0];
        for x in a.data() {
            data.push(f(*x, y));
        }
    }
    Tensor::new(shape, data)
}

/// Reduces a full-size gradient back to a possibly-scalar operand shape.
fn reduce_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if n == grad.numel() {
        let mut g = grad.clone();
        g.shape = shape.to_vec();
        return g;
    }
    debug_assert_eq!(n, 1);
    let total = grad.data().iter().map(|x| x.as_f64()).sum::<f64>();
    let mut out = Tensor::zeros(shape.to_vec());
    out.data_mut()[0] = T::of_f64(total);
    out
}

fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn exp_sigmoid_scalar<T: Real>(x: T) -> T {
    let p = T::of_f64(std::f64::consts::LN_10);
    let s = sigmoid_stable(x);
    T::of_f64(2.0) * s.powf(p) + T::of_f64(1e-7)
}

/// Full linear convolution via FFT, generic over precision.
fn fft_convolve_t<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut fa = vec![Complex::new(T::zero(), T::zero()); n];
    for (dst, &src) in fa.iter_mut().zip(a) {
        dst.re = src;
    }
    let mut fb = vec![Complex::new(T::zero(), T::zero()); n];
    for (dst, &src) in fb.iter_mut().zip(b) {
        dst.re = src;
    }
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = *x * *y;
    }
    ifft.process(&mut fa);
    let scale = T::one() / T::of_f64(n as f64);
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Centered same-length convolution with an odd kernel.
fn same_pad_conv<T: Real>(x: &[T], kernel: &[T]) -> Vec<T> {
    let c = kernel.len() / 2;
    let full = fft_convolve_t(x, kernel);
    full[c..c + x.len()].to_vec()
}

fn hann_t<T: Real>(length: usize) -> Vec<T> {
    crate::dsp::hann_window(length)
        .expect("length >= 1")
        .into_iter()
        .map(T::of_f64)
        .collect()
}

/// Upsampling window (size 2u+1) and padded-source helper shared by the
/// forward and adjoint passes. Source index i covers frame i-1; indices 0
/// and F+1 are the reflect pads.
fn upsample_source_frame(i: usize, frames: usize) -> usize {
    if i == 0 {
        if frames > 1 {
            1
        } else {
            0
        }
    } else if i == frames + 1 {
        if frames > 1 {
            frames - 2
        } else {
            0
        }
    } else {
        i - 1
    }
}

struct Conv2dGeometry {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

fn conv2d_geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Conv2dGeometry> {
    if x.shape().len() != 3 || w.shape().len() != 4 {
        return Err(Error::shape(format!(
            "conv2d: x {:?} (want [C_in, H, W]), w {:?} (want [C_out, C_in, KH, KW])",
            x.shape(),
            w.shape()
        )));
    }
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, wc_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d: input channels {c_in} vs weight channels {wc_in}"
        )));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid("conv2d: zero stride"));
    }
    let pad = (kh / 2, kw / 2);
    let h_span = h + 2 * pad.0;
    let w_span = wd + 2 * pad.1;
    if h_span < kh || w_span < kw {
        return Err(Error::shape(format!(
            "conv2d: input {:?} smaller than kernel {:?}",
            x.shape(),
            w.shape()
        )));
    }
    Ok(Conv2dGeometry {
        c_in,
        c_out,
        kh,
        kw,
        h,
        w: wd,
        h_out: (h_span - kh) / stride.0 + 1,
        w_out: (w_span - kw) / stride.1 + 1,
        stride,
        pad,
    })
}

const CONV2D_POS_BLOCK: usize = 4096;

/// Patch rows for positions [p0, p1): X_col is `[C_in*KH*KW, p1-p0]`.
fn im2col_block<T: Real>(x: &Tensor<T>, g: &Conv2dGeometry, p0: usize, p1: usize) -> Vec<T> {
    let ck = g.c_in * g.kh * g.kw;
    let pb = p1 - p0;
    let mut col = vec![T::zero(); ck * pb];
    let xs = x.data();
    for ci in 0..g.c_in {
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let row = (ci * g.kh + kh) * g.kw + kw;
                let dst = &mut col[row * pb..(row + 1) * pb];
                for (j, slot) in dst.iter_mut().enumerate() {
                    let p = p0 + j;
                    let oh = p / g.w_out;
                    let ow = p % g.w_out;
                    let ih = (oh * g.stride.0 + kh) as isize - g.pad.0 as isize;
                    let iw = (ow * g.stride.1 + kw) as isize - g.pad.1 as isize;
                    if ih >= 0 && (ih as usize) < g.h && iw >= 0 && (iw as usize) < g.w {
                        *slot = xs[(ci * g.h + ih as usize) * g.w + iw as usize];
                    }
                }
            }
        }
    }
    col
}

// ---- forward ----

pub(super) fn forward<T: Real>(tape: &Tape<T>, op: &Op<T>) -> Result<Tensor<T>> {
    let val = |v: Var| tape.value(v);
    match op {
        Op::Leaf => unreachable!("leaves are pushed directly"),
        Op::Add(a, b) => elementwise(val(*a), val(*b), "add", |x, y| x + y),
        Op::Sub(a, b) => elementwise(val(*a), val(*b), "sub", |x, y| x - y),
        Op::Mul(a, b) => elementwise(val(*a), val(*b), "mul", |x, y| x * y),
        Op::Scale { x, c } => {
            let x = val(*x);
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * *c).collect())
        }
        Op::MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::shape(format!(
                    "matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = Tensor::zeros(vec![m, n]);
            gemm_acc(m, k, n, a.data(), b.data(), out.data_mut());
            Ok(out)
        }
        Op::Conv1d { x, w, dilation } => {
            let (x, w) = (val(*x), val(*w));
            conv1d_forward(x, w, *dilation)
        }
        Op::Conv2d { x, w, stride } => {
            let (x, w) = (val(*x), val(*w));
            let g = conv2d_geometry(x, w, *stride)?;
            let ck = g.c_in * g.kh * g.kw;
            let p_total = g.h_out * g.w_out;
            let mut out = Tensor::zeros(vec![g.c_out, g.h_out, g.w_out]);
            let mut p0 = 0;
            while p0 < p_total {
                let p1 = (p0 + CONV2D_POS_BLOCK).min(p_total);
                let pb = p1 - p0;
                let col = im2col_block(x, &g, p0, p1);
                let mut scratch = vec![T::zero(); g.c_out * pb];
                gemm_acc(g.c_out, ck, pb, w.data(), &col, &mut scratch);
                for o in 0..g.c_out {
                    out.data_mut()[o * p_total + p0..o * p_total + p1]
                        .copy_from_slice(&scratch[o * pb..(o + 1) * pb]);
                }
                p0 = p1;
            }
            Ok(out)
        }
        Op::LeakyRelu { x, slope } => {
            let x = val(*x);
            Tensor::new(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * *slope })
                    .collect(),
            )
        }
        Op::Sigmoid(x) => {
            let x = val(*x);
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| sigmoid_stable(v)).collect(),
            )
        }
        Op::ExpSigmoid(x) => {
            let x = val(*x);
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| exp_sigmoid_scalar(v)).collect(),
            )
        }
        Op::SoftmaxRows(x) => {
            let x = val(*x);
            if x.shape().len() != 2 {
                return Err(Error::shape(format!(
                    "softmax: rank-2 input required, got {:?}",
                    x.shape()
                )));
            }
            let (r, c) = (x.rows(), x.cols());
            let mut data = vec![T::zero(); r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(row[0], T::max);
                let out = &mut data[i * c..(i + 1) * c];
                let mut denom = T::zero();
                for (o, &v) in out.iter_mut().zip(row) {
                    let e = (v - m).exp();
                    *o = e;
                    denom = denom + e;
                }
                for o in out.iter_mut() {
                    *o = *o / denom;
                }
            }
            Tensor::new(vec![r, c], data)
        }
        Op::Log(x) => {
            let x = val(*x);
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect())
        }
        Op::Log1p(x) => {
            let x = val(*x);
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| v.ln_1p()).collect(),
            )
        }
        Op::ClampMin { x, min } => {
            let x = val(*x);
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.max(*min)).collect(),
            )
        }
        Op::PowConst { x, e } => {
            let x = val(*x);
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| v.powf(*e)).collect(),
            )
        }
        Op::Mean(x) => {
            let x = val(*x);
            let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
            Ok(Tensor::scalar(T::of_f64(total / x.numel() as f64)))
        }
        Op::Sum(x) => {
            let x = val(*x);
            let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
            Ok(Tensor::scalar(T::of_f64(total)))
        }
        Op::Slice {
            x,
            axis,
            start,
            end,
        } => {
            let x = val(*x);
            slice_forward(x, *axis, *start, *end)
        }
        Op::Concat { xs, axis } => concat_forward(tape, xs, *axis),
        Op::Transpose(x) => {
            let x = val(*x);
            if x.shape().len() != 2 {
                return Err(Error::shape(format!(
                    "transpose: rank-2 input required, got {:?}",
                    x.shape()
                )));
            }
            Tensor::new(
                vec![x.cols(), x.rows()],
                transpose(x.rows(), x.cols(), x.data()),
            )
        }
        Op::Broadcast { x, shape } => broadcast_forward(val(*x), shape),
        Op::Reshape { x, shape } => {
            let x = val(*x);
            let n: usize = shape.iter().product();
            if n != x.numel() {
                return Err(Error::shape(format!(
                    "reshape: {:?} -> {:?}",
                    x.shape(),
                    shape
                )));
            }
            Tensor::new(shape.clone(), x.data().to_vec())
        }
        Op::FftLinear { x, matrix } => {
            let x = val(*x);
            if x.shape().len() != 2 || x.cols() != matrix.cols {
                return Err(Error::shape(format!(
                    "fft_linear: input {:?} vs map [{} x {}]",
                    x.shape(),
                    matrix.rows,
                    matrix.cols
                )));
            }
            let f = x.rows();
            let mut out = Tensor::zeros(vec![f, matrix.rows]);
            // y = x . A^T
            gemm_acc(
                f,
                matrix.cols,
                matrix.rows,
                x.data(),
                &matrix.data_t,
                out.data_mut(),
            );
            Ok(out)
        }
        Op::L1Distance(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "l1_distance: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let total: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (*x - *y).abs().as_f64())
                .sum();
            Ok(Tensor::scalar(T::of_f64(total / a.numel() as f64)))
        }
        Op::UpsampleHann { x, factor } => {
            let x = val(*x);
            if x.shape().len() != 2 {
                return Err(Error::shape(format!(
                    "upsample_hann: rank-2 [frames, channels] required, got {:?}",
                    x.shape()
                )));
            }
            let (frames, chans) = (x.rows(), x.cols());
            if frames == 0 {
                return Err(Error::invalid("upsample_hann: empty track"));
            }
            let u = *factor;
            let window = hann_t::<T>(2 * u + 1);
            let out_len = frames * u;
            let mut out = Tensor::zeros(vec![out_len, chans]);
            let iu = u as isize;
            for i in 0..frames + 2 {
                let src = upsample_source_frame(i, frames);
                let x_row = &x.data()[src * chans..(src + 1) * chans];
                let center = (i as isize - 1) * iu;
                for (w_idx, &wv) in window.iter().enumerate() {
                    let n = center + w_idx as isize - iu;
                    if n >= 0 && (n as usize) < out_len {
                        let o_row = &mut out.data_mut()[n as usize * chans..(n as usize + 1) * chans];
                        for (o, &xv) in o_row.iter_mut().zip(x_row) {
                            *o = *o + wv * xv;
                        }
                    }
                }
            }
            Ok(out)
        }
        Op::NoiseOla { h, noise, out_len } => {
            let h = val(*h);
            if h.shape().len() != 2 || noise.shape().len() != 2 || h.rows() != noise.rows() {
                return Err(Error::shape(format!(
                    "noise_ola: filters {:?} vs noise {:?}",
                    h.shape(),
                    noise.shape()
                )));
            }
            let (frames, l) = (h.rows(), h.cols());
            let u = noise.cols();
            let mut out = Tensor::zeros(vec![*out_len]);
            let od = out.data_mut();
            for f in 0..frames {
                let h_row = &h.data()[f * l..(f + 1) * l];
                let n_row = &noise.data()[f * u..(f + 1) * u];
                let base = f * u;
                for (j, &hv) in h_row.iter().enumerate() {
                    let start = base + j;
                    if start >= *out_len {
                        break;
                    }
                    let span = (*out_len - start).min(u);
                    let dst = &mut od[start..start + span];
                    for (o, &nv) in dst.iter_mut().zip(&n_row[..span]) {
                        *o = *o + hv * nv;
                    }
                }
            }
            Ok(out)
        }
        Op::PostConv { x, kernel } => {
            let (x, k) = (val(*x), val(*kernel));
            if x.shape().len() != 1 || k.shape().len() != 1 {
                return Err(Error::shape(format!(
                    "post_conv: rank-1 inputs required, got {:?} and {:?}",
                    x.shape(),
                    k.shape()
                )));
            }
            if k.numel() % 2 == 0 {
                return Err(Error::invalid(format!(
                    "post_conv: kernel length {} must be odd",
                    k.numel()
                )));
            }
            Ok(Tensor::from_vec(same_pad_conv(x.data(), k.data())))
        }
        Op::StftMag { x, fft_size, hop } => {
            let x = val(*x);
            stft_mag_forward(x, *fft_size, *hop).map(|(t, _)| t)
        }
        Op::WeightNorm { v, g } => {
            let (v, g) = (val(*v), val(*g));
            let rows = v.shape()[0];
            if g.shape() != [rows] {
                return Err(Error::shape(format!(
                    "weight_norm: direction {:?} vs gain {:?}",
                    v.shape(),
                    g.shape()
                )));
            }
            let q = v.numel() / rows;
            let mut data = vec![T::zero(); v.numel()];
            for i in 0..rows {
                let row = &v.data()[i * q..(i + 1) * q];
                let norm = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
                if norm < 1e-30 {
                    return Err(Error::Numeric(format!(
                        "weight_norm: zero-norm direction row {i}"
                    )));
                }
                let s = g.data()[i] * T::of_f64(1.0 / norm);
                for (o, &x) in data[i * q..(i + 1) * q].iter_mut().zip(row) {
                    *o = x * s;
                }
            }
            Tensor::new(v.shape().to_vec(), data)
        }
        Op::LayerNormRows { x, eps } => {
            let x = val(*x);
            if x.shape().len() != 2 {
                return Err(Error::shape(format!(
                    "layer_norm: rank-2 input required, got {:?}",
                    x.shape()
                )));
            }
            let (r, c) = (x.rows(), x.cols());
            let mut data = vec![T::zero(); r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
                let var = row
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64;
                let inv = T::of_f64(1.0 / (var + eps.as_f64()).sqrt());
                let mu = T::of_f64(mean);
                for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = (v - mu) * inv;
                }
            }
            Tensor::new(vec![r, c], data)
        }
    }
}

fn conv1d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
    let (c_in, t, c_out, k) = conv1d_check(x, w, dilation)?;
    let col = im2col_1d(x, k, dilation);
    let mut out = Tensor::zeros(vec![c_out, t]);
    gemm_acc(c_out, c_in * k, t, w.data(), &col, out.data_mut());
    Ok(out)
}

fn conv1d_check<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize)> {
    if x.shape().len() != 2 || w.shape().len() != 3 {
        return Err(Error::shape(format!(
            "conv1d: x {:?} (want [C_in, T]), w {:?} (want [C_out, C_in, K])",
            x.shape(),
            w.shape()
        )));
    }
    let (c_in, t) = (x.shape()[0], x.shape()[1]);
    let (c_out, wc_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv1d: input channels {c_in} vs weight channels {wc_in}"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv1d: kernel length {k} must be odd for same padding"
        )));
    }
    if dilation == 0 {
        return Err(Error::invalid("conv1d: zero dilation"));
    }
    Ok((c_in, t, c_out, k))
}

/// `[C_in*K, T]` patch matrix for same-padded dilated conv1d.
fn im2col_1d<T: Real>(x: &Tensor<T>, k: usize, dilation: usize) -> Vec<T> {
    let (c_in, t) = (x.shape()[0], x.shape()[1]);
    let center = (k / 2) as isize;
    let mut col = vec![T::zero(); c_in * k * t];
    for ci in 0..c_in {
        let x_row = &x.data()[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let off = (kk as isize - center) * dilation as isize;
            let dst = &mut col[(ci * k + kk) * t..(ci * k + kk + 1) * t];
            let lo = (-off).max(0) as usize;
            let hi = ((t as isize - off).max(0) as usize).min(t);
            if lo >= hi {
                continue;
            }
            for (slot, &v) in dst[lo..hi]
                .iter_mut()
                .zip(&x_row[(lo as isize + off) as usize..(hi as isize + off) as usize])
            {
                *slot = v;
            }
        }
    }
    col
}

fn slice_forward<T: Real>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || axis > 1 {
        return Err(Error::shape(format!(
            "slice: rank-2 input and axis 0/1 required, got {:?} axis {axis}",
            x.shape()
        )));
    }
    let (r, c) = (x.rows(), x.cols());
    let limit = if axis == 0 { r } else { c };
    if start >= end || end > limit {
        return Err(Error::invalid(format!(
            "slice: [{start}, {end}) out of range for axis {axis} of {:?}",
            x.shape()
        )));
    }
    if axis == 0 {
        Tensor::new(
            vec![end - start, c],
            x.data()[start * c..end * c].to_vec(),
        )
    } else {
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        Tensor::new(vec![r, w], data)
    }
}

fn concat_forward<T: Real>(tape: &Tape<T>, xs: &[Var], axis: usize) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::invalid("concat: no inputs"));
    }
    let first = tape.value(xs[0]);
    if first.shape().len() != 2 || axis > 1 {
        return Err(Error::shape(format!(
            "concat: rank-2 inputs and axis 0/1 required, got {:?} axis {axis}",
            first.shape()
        )));
    }
    if axis == 0 {
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = tape.value(v);
            if t.shape().len() != 2 || t.cols() != c {
                return Err(Error::shape(format!(
                    "concat axis 0: {:?} vs expected [*, {c}]",
                    t.shape()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![rows, c], data)
    } else {
        let r = first.rows();
        let widths: Vec<usize> = xs.iter().map(|&v| tape.value(v).cols()).collect();
        for &v in xs {
            let t = tape.value(v);
            if t.shape().len() != 2 || t.rows() != r {
                return Err(Error::shape(format!(
                    "concat axis 1: {:?} vs expected [{r}, *]",
                    t.shape()
                )));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&v, &w) in xs.iter().zip(&widths) {
                let t = tape.value(v);
                data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        Tensor::new(vec![r, total], data)
    }
}

fn broadcast_forward<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if x.numel() == 1 {
        return Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![x.data()[0]; n],
        });
    }
    // [c] -> [r, c]: replicate rows.
    if x.shape().len() == 1 && shape.len() == 2 && x.numel() == shape[1] {
        let mut data = Vec::with_capacity(n);
        for _ in 0..shape[0] {
            data.extend_from_slice(x.data());
        }
        return Tensor::new(shape.to_vec(), data);
    }
    // [r, 1] -> [r, c]: replicate columns.
    if x.shape().len() == 2 && x.cols() == 1 && shape.len() == 2 && x.rows() == shape[0] {
        let mut data = Vec::with_capacity(n);
        for i in 0..shape[0] {
            let v = x.data()[i];
            data.extend(std::iter::repeat(v).take(shape[1]));
        }
        return Tensor::new(shape.to_vec(), data);
    }
    Err(Error::shape(format!(
        "broadcast: {:?} -> {:?} not supported (scalar, [c]->[r,c], [r,1]->[r,c])",
        x.shape(),
        shape
    )))
}

/// Forward STFT magnitudes plus per-frame complex spectra (for backward).
fn stft_mag_forward<T: Real>(
    x: &Tensor<T>,
    fft_size: usize,
    hop: usize,
) -> Result<(Tensor<T>, Vec<Complex<T>>)> {
    if x.shape().len() != 1 {
        return Err(Error::shape(format!(
            "stft_mag: rank-1 audio required, got {:?}",
            x.shape()
        )));
    }
    if !fft_size.is_power_of_two() || fft_size < 2 || hop == 0 {
        return Err(Error::invalid(format!(
            "stft_mag: bad fft_size {fft_size} / hop {hop}"
        )));
    }
    let n = x.numel();
    if n < fft_size {
        return Err(Error::invalid(format!(
            "stft_mag: audio of {n} samples shorter than fft size {fft_size}"
        )));
    }
    let frames = (n - fft_size) / hop + 1;
    let bins = fft_size / 2 + 1;
    let window = hann_t::<T>(fft_size);
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut mags = vec![T::zero(); frames * bins];
    let mut spectra = vec![Complex::new(T::zero(), T::zero()); frames * fft_size];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); fft_size];
    for f in 0..frames {
        let start = f * hop;
        for (j, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(x.data()[start + j] * window[j], T::zero());
        }
        fft.process(&mut buf);
        spectra[f * fft_size..(f + 1) * fft_size].copy_from_slice(&buf);
        for k in 0..bins {
            mags[f * bins + k] = buf[k].norm();
        }
    }
    Ok((Tensor::new(vec![frames, bins], mags)?, spectra))
}

// ---- backward ----

pub(super) fn backward<T: Real>(
    tape: &Tape<T>,
    idx: usize,
    grad_out: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let node_value = tape.value(Var(idx));
    let needs = |v: Var| tape.requires_grad(v);
    let send = |v: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
        accumulate_grad(&mut grads[v.0], g);
    };
    let op = &tape.nodes[idx].op;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                send(*a, reduce_to_shape(grad_out, tape.value(*a).shape()), grads);
            }
            if needs(*b) {
                send(*b, reduce_to_shape(grad_out, tape.value(*b).shape()), grads);
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                send(*a, reduce_to_shape(grad_out, tape.value(*a).shape()), grads);
            }
            if needs(*b) {
                let mut neg = grad_out.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                send(*b, reduce_to_shape(&neg, tape.value(*b).shape()), grads);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            if needs(*a) {
                let ga = elementwise(grad_out, bv, "mul-grad", |g, y| g * y)?;
                send(*a, reduce_to_shape(&ga, av.shape()), grads);
            }
            if needs(*b) {
                let gb = elementwise(grad_out, av, "mul-grad", |g, x| g * x)?;
                send(*b, reduce_to_shape(&gb, bv.shape()), grads);
            }
        }
        Op::Scale { x, c } => {
            if needs(*x) {
                let mut g = grad_out.clone();
                for v in g.data_mut() {
                    *v = *v * *c;
                }
                send(*x, g, grads);
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if needs(*a) {
                let b_t = transpose(k, n, bv.data());
                let mut ga = Tensor::zeros(vec![m, k]);
                gemm_acc(m, n, k, grad_out.data(), &b_t, ga.data_mut());
                send(*a, ga, grads);
            }
            if needs(*b) {
                let a_t = transpose(m, k, av.data());
                let mut gb = Tensor::zeros(vec![k, n]);
                gemm_acc(k, m, n, &a_t, grad_out.data(), gb.data_mut());
                send(*b, gb, grads);
            }
        }
        Op::Conv1d { x, w, dilation } => {
            let (xv, wv) = (tape.value(*x), tape.value(*w));
            let (c_in, t) = (xv.shape()[0], xv.shape()[1]);
            let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
            let ck = c_in * k;
            if needs(*w) {
                let col = im2col_1d(xv, k, *dilation);
                let col_t = transpose(ck, t, &col);
                let mut gw = Tensor::zeros(wv.shape().to_vec());
                gemm_acc(c_out, t, ck, grad_out.data(), &col_t, gw.data_mut());
                send(*w, gw, grads);
            }
            if needs(*x) {
                let w_t = transpose(c_out, ck, wv.data());
                let mut gcol = vec![T::zero(); ck * t];
                gemm_acc(ck, c_out, t, &w_t, grad_out.data(), &mut gcol);
                // col2im: scatter-add shifted rows back onto the input.
                let mut gx = Tensor::zeros(vec![c_in, t]);
                let center = (k / 2) as isize;
                for ci in 0..c_in {
                    for kk in 0..k {
                        let off = (kk as isize - center) * *dilation as isize;
                        let src = &gcol[(ci * k + kk) * t..(ci * k + kk + 1) * t];
                        let lo = (-off).max(0) as usize;
                        let hi = ((t as isize - off).max(0) as usize).min(t);
                        if lo >= hi {
                            continue;
                        }
                        let dst = &mut gx.data_mut()[ci * t..(ci + 1) * t];
                        for (s, &v) in src[lo..hi].iter().enumerate() {
                            let at = ((lo + s) as isize + off) as usize;
                            dst[at] = dst[at] + v;
                        }
                    }
                }
                send(*x, gx, grads);
            }
        }
        Op::Conv2d { x, w, stride } => {
            let (xv, wv) = (tape.value(*x), tape.value(*w));
            let g = conv2d_geometry(xv, wv, *stride)?;
            let ck = g.c_in * g.kh * g.kw;
            let p_total = g.h_out * g.w_out;
            let mut gw = if needs(*w) {
                Some(Tensor::zeros(wv.shape().to_vec()))
            } else {
                None
            };
            let mut gx = if needs(*x) {
                Some(Tensor::zeros(xv.shape().to_vec()))
            } else {
                None
            };
            let w_t = if gx.is_some() {
                Some(transpose(g.c_out, ck, wv.data()))
            } else {
                None
            };
            let mut p0 = 0;
            while p0 < p_total {
                let p1 = (p0 + CONV2D_POS_BLOCK).min(p_total);
                let pb = p1 - p0;
                // Strided copy of the gradient block [C_out, pb].
                let mut gy_block = vec![T::zero(); g.c_out * pb];
                for o in 0..g.c_out {
                    gy_block[o * pb..(o + 1) * pb]
                        .copy_from_slice(&grad_out.data()[o * p_total + p0..o * p_total + p1]);
                }
                if let Some(gw) = gw.as_mut() {
                    let col = im2col_block(xv, &g, p0, p1);
                    let col_t = transpose(ck, pb, &col);
                    gemm_acc(g.c_out, pb, ck, &gy_block, &col_t, gw.data_mut());
                }
                if let Some(gx) = gx.as_mut() {
                    let mut gcol = vec![T::zero(); ck * pb];
                    gemm_acc(ck, g.c_out, pb, w_t.as_ref().unwrap(), &gy_block, &mut gcol);
                    let gxd = gx.data_mut();
                    for ci in 0..g.c_in {
                        for kh in 0..g.kh {
                            for kw in 0..g.kw {
                                let row = (ci * g.kh + kh) * g.kw + kw;
                                let src = &gcol[row * pb..(row + 1) * pb];
                                for (j, &v) in src.iter().enumerate() {
                                    let p = p0 + j;
                                    let oh = p / g.w_out;
                                    let ow = p % g.w_out;
                                    let ih =
                                        (oh * g.stride.0 + kh) as isize - g.pad.0 as isize;
                                    let iw =
                                        (ow * g.stride.1 + kw) as isize - g.pad.1 as isize;
                                    if ih >= 0
                                        && (ih as usize) < g.h
                                        && iw >= 0
                                        && (iw as usize) < g.w
                                    {
                                        let at = (ci * g.h + ih as usize) * g.w + iw as usize;
                                        gxd[at] = gxd[at] + v;
                                    }
                                }
                            }
                        }
                    }
                }
                p0 = p1;
            }
            if let Some(gw) = gw {
                send(*w, gw, grads);
            }
            if let Some(gx) = gx {
                send(*x, gx, grads);
            }
        }
        Op::LeakyRelu { x, slope } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let mut g = grad_out.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *gv = *gv * *slope;
                    }
                }
                send(*x, g, grads);
            }
        }
        Op::Sigmoid(x) => {
            if needs(*x) {
                let yv = node_value;
                let mut g = grad_out.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(yv.data()) {
                    *gv = *gv * y * (T::one() - y);
                }
                send(*x, g, grads);
            }
        }
        Op::ExpSigmoid(x) => {
            if needs(*x) {
                let xv = tape.value(*x);
                let p = T::of_f64(std::f64::consts::LN_10);
                let two = T::of_f64(2.0);
                let mut g = grad_out.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    let s = sigmoid_stable(v);
                    *gv = *gv * two * p * s.powf(p) * (T::one() - s);
                }
                send(*x, g, grads);
            }
        }
        Op::SoftmaxRows(x) => {
            if needs(*x) {
                let y = node_value;
                let (r, c) = (y.rows(), y.cols());
                let mut g = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &grad_out.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr
                        .iter()
                        .zip(gr)
                        .map(|(&yv, &gv)| yv.as_f64() * gv.as_f64())
                        .sum();
                    let dot = T::of_f64(dot);
                    for (o, (&yv, &gv)) in
                        g.data_mut()[i * c..(i + 1) * c].iter_mut().zip(yr.iter().zip(gr))
                    {
                        *o = yv * (gv - dot);
                    }
                }
                send(*x, g, grads);
            }
        }
        Op::Log(x) => {
            if needs(*x) {
                let xv = tape.value(*x);
                let mut g = grad_out.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    *gv = *gv / v;
                }
                send(*x, g, grads);
            }
        }
        Op::Log1p(x) => {
            if needs(*x) {
                let xv = tape.value(*x);
                let mut g = grad_out.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    *gv = *gv / (T::one() + v);
                }
                send(*x, g, grads);
            }
        }
        Op::ClampMin { x, min } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let mut g = grad_out.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    if v <= *min {
                        *gv = T::zero();
                    }
                }
                send(*x, g, grads);
            }
        }
        Op::PowConst { x, e } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let em1 = *e - T::one();
                let mut g = grad_out.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    *gv = *gv * *e * v.powf(em1);
                }
                send(*x, g, grads);
            }
        }
        Op::Mean(x) => {
            if needs(*x) {
                let xv = tape.value(*x);
                let s = grad_out.item() / T::of_f64(xv.numel() as f64);
                let mut g = Tensor::zeros(xv.shape().to_vec());
                for v in g.data_mut() {
                    *v = s;
                }
                send(*x, g, grads);
            }
        }
        Op::Sum(x) => {
            if needs(*x) {
                let xv = tape.value(*x);
                let s = grad_out.item();
                let mut g = Tensor::zeros(xv.shape().to_vec());
                for v in g.data_mut() {
                    *v = s;
                }
                send(*x, g, grads);
            }
        }
        Op::Slice {
            x,
            axis,
            start,
            end,
        } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut g = Tensor::zeros(vec![r, c]);
                if *axis == 0 {
                    g.data_mut()[start * c..end * c].copy_from_slice(grad_out.data());
                } else {
                    let w = end - start;
                    for i in 0..r {
                        g.data_mut()[i * c + start..i * c + end]
                            .copy_from_slice(&grad_out.data()[i * w..(i + 1) * w]);
                    }
                }
                send(*x, g, grads);
            }
        }
        Op::Concat { xs, axis } => {
            if *axis == 0 {
                let mut row0 = 0;
                let c = tape.value(xs[0]).cols();
                for &v in xs {
                    let rows = tape.value(v).rows();
                    if needs(v) {
                        let g = Tensor::new(
                            vec![rows, c],
                            grad_out.data()[row0 * c..(row0 + rows) * c].to_vec(),
                        )?;
                        send(v, g, grads);
                    }
                    row0 += rows;
                }
            } else {
                let r = tape.value(xs[0]).rows();
                let total = node_value.cols();
                let mut col0 = 0;
                for &v in xs {
                    let w = tape.value(v).cols();
                    if needs(v) {
                        let mut g = Tensor::zeros(vec![r, w]);
                        for i in 0..r {
                            g.data_mut()[i * w..(i + 1) * w].copy_from_slice(
                                &grad_out.data()[i * total + col0..i * total + col0 + w],
                            );
                        }
                        send(v, g, grads);
                    }
                    col0 += w;
                }
            }
        }
        Op::Transpose(x) => {
            if needs(*x) {
                let (r, c) = (node_value.rows(), node_value.cols());
                let g = Tensor::new(vec![c, r], transpose(r, c, grad_out.data()))?;
                send(*x, g, grads);
            }
        }
        Op::Broadcast { x, .. } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let g = broadcast_backward(grad_out, xv.shape());
                send(*x, g, grads);
            }
        }
        Op::Reshape { x, .. } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let g = Tensor::new(xv.shape().to_vec(), grad_out.data().to_vec())?;
                send(*x, g, grads);
            }
        }
        Op::FftLinear { x, matrix } => {
            if needs(*x) {
                let f = node_value.rows();
                let mut gx = Tensor::zeros(vec![f, matrix.cols]);
                // dX = dY . A
                gemm_acc(
                    f,
                    matrix.rows,
                    matrix.cols,
                    grad_out.data(),
                    &matrix.data,
                    gx.data_mut(),
                );
                send(*x, gx, grads);
            }
        }
        Op::L1Distance(a, b) => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            let s = grad_out.item() / T::of_f64(av.numel() as f64);
            let sign = |x: T, y: T| {
                if x > y {
                    s
                } else if x < y {
                    -s
                } else {
                    T::zero()
                }
            };
            if needs(*a) {
                let mut g = Tensor::zeros(av.shape().to_vec());
                for (o, (&x, &y)) in g.data_mut().iter_mut().zip(av.data().iter().zip(bv.data())) {
                    *o = sign(x, y);
                }
                send(*a, g, grads);
            }
            if needs(*b) {
                let mut g = Tensor::zeros(bv.shape().to_vec());
                for (o, (&x, &y)) in g.data_mut().iter_mut().zip(av.data().iter().zip(bv.data())) {
                    *o = -sign(x, y);
                }
                send(*b, g, grads);
            }
        }
        Op::UpsampleHann { x, factor } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let (frames, chans) = (xv.rows(), xv.cols());
                let u = *factor;
                let window = hann_t::<T>(2 * u + 1);
                let out_len = frames * u;
                let mut g = Tensor::zeros(vec![frames, chans]);
                let iu = u as isize;
                for i in 0..frames + 2 {
                    let src = upsample_source_frame(i, frames);
                    let center = (i as isize - 1) * iu;
                    for (w_idx, &wv) in window.iter().enumerate() {
                        let n = center + w_idx as isize - iu;
                        if n >= 0 && (n as usize) < out_len {
                            let go_row =
                                &grad_out.data()[n as usize * chans..(n as usize + 1) * chans];
                            let g_row = &mut g.data_mut()[src * chans..(src + 1) * chans];
                            for (gv, &ov) in g_row.iter_mut().zip(go_row) {
                                *gv = *gv + wv * ov;
                            }
                        }
                    }
                }
                send(*x, g, grads);
            }
        }
        Op::NoiseOla { h, noise, out_len } => {
            if needs(*h) {
                let hv = tape.value(*h);
                let (frames, l) = (hv.rows(), hv.cols());
                let u = noise.cols();
                let mut g = Tensor::zeros(vec![frames, l]);
                for f in 0..frames {
                    let n_row = &noise.data()[f * u..(f + 1) * u];
                    let base = f * u;
                    for j in 0..l {
                        let start = base + j;
                        if start >= *out_len {
                            break;
                        }
                        let span = (*out_len - start).min(u);
                        let mut acc = T::zero();
                        for (t, &nv) in n_row[..span].iter().enumerate() {
                            acc = acc + grad_out.data()[start + t] * nv;
                        }
                        g.data_mut()[f * l + j] = acc;
                    }
                }
                send(*h, g, grads);
            }
        }
        Op::PostConv { x, kernel } => {
            let (xv, kv) = (tape.value(*x), tape.value(*kernel));
            let n = xv.numel();
            let klen = kv.numel();
            let c = klen / 2;
            if needs(*x) {
                let rev: Vec<T> = kv.data().iter().rev().cloned().collect();
                let g = same_pad_conv(grad_out.data(), &rev);
                send(*x, Tensor::from_vec(g), grads);
            }
            if needs(*kernel) {
                let rev_x: Vec<T> = xv.data().iter().rev().cloned().collect();
                let full = fft_convolve_t(&rev_x, grad_out.data());
                let mut gk = Tensor::zeros(vec![klen]);
                for j in 0..klen {
                    let at = n as isize - 1 - j as isize + c as isize;
                    if at >= 0 && (at as usize) < full.len() {
                        gk.data_mut()[j] = full[at as usize];
                    }
                }
                send(*kernel, gk, grads);
            }
        }
        Op::StftMag { x, fft_size, hop } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let (mags, spectra) = stft_mag_forward(xv, *fft_size, *hop)?;
                let frames = mags.rows();
                let bins = mags.cols();
                let window = hann_t::<T>(*fft_size);
                let mut planner = FftPlanner::<T>::new();
                let ifft = planner.plan_fft_inverse(*fft_size);
                let mut g = Tensor::zeros(vec![xv.numel()]);
                let mut buf = vec![Complex::new(T::zero(), T::zero()); *fft_size];
                for f in 0..frames {
                    for slot in buf.iter_mut() {
                        *slot = Complex::new(T::zero(), T::zero());
                    }
                    let spec = &spectra[f * *fft_size..(f + 1) * *fft_size];
                    for k in 0..bins {
                        let s = mags.data()[f * bins + k];
                        if s > T::zero() {
                            let gk = grad_out.data()[f * bins + k] / s;
                            buf[k] = Complex::new(spec[k].re * gk, spec[k].im * gk);
                        }
                    }
                    ifft.process(&mut buf);
                    let start = f * *hop;
                    let gd = g.data_mut();
                    for j in 0..*fft_size {
                        gd[start + j] = gd[start + j] + buf[j].re * window[j];
                    }
                }
                send(*x, g, grads);
            }
        }
        Op::WeightNorm { v, g } => {
            let (vv, gv) = (tape.value(*v), tape.value(*g));
            let rows = vv.shape()[0];
            let q = vv.numel() / rows;
            let needs_v = needs(*v);
            let needs_g = needs(*g);
            let mut grad_v = if needs_v {
                Some(Tensor::zeros(vv.shape().to_vec()))
            } else {
                None
            };
            let mut grad_g = if needs_g {
                Some(Tensor::zeros(vec![rows]))
            } else {
                None
            };
            for i in 0..rows {
                let row = &vv.data()[i * q..(i + 1) * q];
                let go = &grad_out.data()[i * q..(i + 1) * q];
                let norm = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
                let inv = T::of_f64(1.0 / norm);
                // dg_i = sum_j G_ij u_ij with u = v / ||v||
                let dg: f64 = row
                    .iter()
                    .zip(go)
                    .map(|(&vj, &gj)| vj.as_f64() * gj.as_f64())
                    .sum::<f64>()
                    / norm;
                if let Some(gg) = grad_g.as_mut() {
                    gg.data_mut()[i] = T::of_f64(dg);
                }
                if let Some(gvt) = grad_v.as_mut() {
                    let s = gv.data()[i] * inv;
                    let dg_t = T::of_f64(dg);
                    for (o, (&vj, &gj)) in gvt.data_mut()[i * q..(i + 1) * q]
                        .iter_mut()
                        .zip(row.iter().zip(go))
                    {
                        *o = s * (gj - dg_t * vj * inv);
                    }
                }
            }
            if let Some(gvt) = grad_v {
                send(*v, gvt, grads);
            }
            if let Some(gg) = grad_g {
                send(*g, gg, grads);
            }
        }
        Op::LayerNormRows { x, eps } => {
            if needs(*x) {
                let xv = tape.value(*x);
                let y = node_value;
                let (r, c) = (xv.rows(), xv.cols());
                let mut g = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let xr = &xv.data()[i * c..(i + 1) * c];
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &grad_out.data()[i * c..(i + 1) * c];
                    let mean = xr.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
                    let var = xr
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / c as f64;
                    let inv = T::of_f64(1.0 / (var + eps.as_f64()).sqrt());
                    let mean_g =
                        T::of_f64(gr.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64);
                    let mean_gy = T::of_f64(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| gv.as_f64() * yv.as_f64())
                            .sum::<f64>()
                            / c as f64,
                    );
                    for (o, (&gv, &yv)) in g.data_mut()[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(gr.iter().zip(yr))
                    {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                send(*x, g, grads);
            }
        }
    }
    Ok(())
}

fn broadcast_backward<T: Real>(grad: &Tensor<T>, src_shape: &[usize]) -> Tensor<T> {
    let src_n: usize = src_shape.iter().product();
    if src_n == 1 {
        let total: f64 = grad.data().iter().map(|v| v.as_f64()).sum();
        let mut out = Tensor::zeros(src_shape.to_vec());
        out.data_mut()[0] = T::of_f64(total);
        return out;
    }
    let (r, c) = (grad.rows(), grad.cols());
    if src_shape.len() == 1 {
        // [c] -> [r, c]: sum over rows.
        let mut out = Tensor::zeros(src_shape.to_vec());
        for i in 0..r {
            for (o, &gv) in out.data_mut().iter_mut().zip(&grad.data()[i * c..(i + 1) * c]) {
                *o = *o + gv;
            }
        }
        out
    } else {
        // [r, 1] -> [r, c]: sum over columns.
        let mut out = Tensor::zeros(src_shape.to_vec());
        for i in 0..r {
            let s: f64 = grad.data()[i * c..(i + 1) * c]
                .iter()
                .map(|v| v.as_f64())
                .sum();
            out.data_mut()[i] = T::of_f64(s);
        }
        out
    }
}
