//! Dense row-major `f64` tensors and the forward/backward kernels of the
//! layer vocabulary used by the network (conv, relu, 2x2 max-pool, linear,
//! sigmoid).
//!
//! Convolutions follow the cross-correlation convention: the kernel is not
//! flipped, so `out[co, y, x] = b[co] + sum k[co, ci, i, j] * in[ci, y*s+i-p, x*s+j-p]`
//! with zero padding outside the input.

use std::fmt;

use crate::error::{bail, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Shape, "zero extent in shape {shape:?}");
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Shape, "shape {shape:?} needs {n} elements, got {}", data.len());
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => bail!(Shape, "item() on tensor of shape {:?}", self.shape),
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            bail!(
                Shape,
                "gradient of length {} for tensor of length {}",
                grad.len(),
                self.data.len()
            );
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            bail!(Shape, "cannot reshape {:?} into {shape:?}", self.shape);
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise comparison of shape and data (`-0.0 != 0.0`, NaN equals itself).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            s => bail!(Shape, "{what} expects a [C,H,W] tensor, got {s:?}"),
        }
    }
}

/// Non-convolutional primitives of the layer vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Relu,
    MaxPool2,
    Linear,
    Sigmoid,
}

/// Applies a primitive. `Linear` takes `(weight [out,in], bias [out])`;
/// the other kinds take no parameters.
pub fn primitive_forward(kind: Primitive, input: &Tensor, params: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    match (kind, params) {
        (Primitive::Relu, None) => Ok(relu(input)),
        (Primitive::Sigmoid, None) => Ok(sigmoid(input)),
        (Primitive::MaxPool2, None) => maxpool2(input).map(|(t, _)| t),
        (Primitive::Linear, Some((w, b))) => linear(input, w, b),
        (Primitive::Linear, None) => bail!(Config, "linear needs weight and bias"),
        (k, Some(_)) => bail!(Config, "{k:?} takes no parameters"),
    }
}

/// Propagates NaN so corrupt inputs surface as numeric errors downstream.
pub fn relu(input: &Tensor) -> Tensor {
    map(input, |v| if v < 0.0 { 0.0 } else { v })
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    map(input, sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(input: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| f(v)).collect(),
        grad: None,
    }
}

/// 2x2 stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input index that won (first maximum in row-major
/// window order). A NaN in a window wins so it is not silently dropped.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        bail!(Shape, "maxpool2 needs even spatial extents, got {h}x{w}");
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let x = &input.data;
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let r0 = base + 2 * oy * w + 2 * ox;
                let mut best = r0;
                for idx in [r0 + 1, r0 + w, r0 + w + 1] {
                    if x[idx] > x[best] || (x[idx].is_nan() && !x[best].is_nan()) {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

/// `W x + b` on the flattened input. `weight` is `[out, in]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = linear_dims(input, weight, bias)?;
    let x = &input.data;
    let out = (0..n_out)
        .map(|o| bias.data[o] + dot(&weight.data[o * n_in..(o + 1) * n_in], x))
        .collect();
    Tensor::new(vec![n_out], out)
}

fn linear_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (n_out, n_in) = match weight.shape.as_slice() {
        [o, i] => (*o, *i),
        s => bail!(Shape, "linear weight must be [out,in], got {s:?}"),
    };
    if input.len() != n_in {
        bail!(
            Shape,
            "linear expects {n_in} inputs, got {} (shape {:?})",
            input.len(),
            input.shape
        );
    }
    if bias.shape != [n_out] {
        bail!(Shape, "linear bias must be [{n_out}], got {:?}", bias.shape);
    }
    Ok((n_out, n_in))
}

pub(crate) fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_in = input.len();
    let mut gx = vec![0.0; n_in];
    let mut gw = vec![0.0; weight.len()];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weight.data[o * n_in..(o + 1) * n_in];
        axpy(g, row, &mut gx);
        axpy(g, &input.data, &mut gw[o * n_in..(o + 1) * n_in]);
    }
    (gx, gw, grad_out.to_vec())
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3("conv2d")?;
        let (c_out, kc, kh, kw) = match kernels.shape.as_slice() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => bail!(Shape, "conv2d kernels must be [C_out,C_in,kH,kW], got {s:?}"),
        };
        if kc != c_in {
            bail!(Shape, "conv2d kernels expect {kc} input channels, input has {c_in}");
        }
        if bias.shape != [c_out] {
            bail!(Shape, "conv2d bias must be [{c_out}], got {:?}", bias.shape);
        }
        if stride == 0 {
            bail!(Config, "conv2d stride must be positive");
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            bail!(
                Shape,
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            );
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Output range `[lo, hi)` along one axis whose input coordinate
    /// `o*stride + k - pad` stays inside `[0, extent)`.
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if extent + self.pad > k {
            (extent + self.pad - k).div_ceil(s).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernels, bias, stride, pad)?;
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        out_c.fill(bias.data[co]);
        for ci in 0..g.c_in {
            let in_c = &input.data[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let k = kernels.data[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if k == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid(kx, g.w, g.ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_in = &in_c[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_c[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.pad;
                            axpy(k, &row_in[ix0..ix0 + (x1 - x0)], &mut row_out[x0..x1]);
                        } else {
                            for ox in x0..x1 {
                                row_out[ox] += k * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Gradients of `conv2d` with respect to input, kernels and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let g = ConvGeom::new(input, kernels, bias, stride, pad)?;
    let plane = g.oh * g.ow;
    let mut gx = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let go = &grad_out[co * plane..(co + 1) * plane];
        gb[co] = go.iter().sum();
        for ci in 0..g.c_in {
            let in_c = &input.data[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let gx_c = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let kidx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let k = kernels.data[kidx];
                    let (x0, x1) = g.valid(kx, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let go_row = &go[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.pad;
                            let n = x1 - x0;
                            let in_row = &in_c[iy * g.w + ix0..iy * g.w + ix0 + n];
                            acc += dot(&go_row[x0..x1], in_row);
                            axpy(k, &go_row[x0..x1], &mut gx_c[iy * g.w + ix0..iy * g.w + ix0 + n]);
                        } else {
                            for (ox, &go_v) in go_row.iter().enumerate().take(x1).skip(x0) {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += go_v * in_c[iy * g.w + ix];
                                gx_c[iy * g.w + ix] += k * go_v;
                            }
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    Ok((gx, gk, gb))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
