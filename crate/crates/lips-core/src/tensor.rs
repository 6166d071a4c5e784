//! Dense f32 tensors and the numeric kernels used by every pipeline stage.
//!
//! Kernels come in two flavours: a plain entry point and a `_counted`
//! variant that accumulates multiply-accumulate operations into a caller
//! supplied counter. Counts follow the dense formulas (zero padding is not
//! discounted), so an instrumented forward pass can be compared 1:1 against
//! the analytic cost model.
//!
//! Spatial conventions: feature maps are `C x H x W`, row major. Sampling
//! points are `(x, y)` pairs normalized to `[0, 1]` with pixel centers at
//! `(i + 0.5) / extent` (align-corners-false); reads outside the map see a
//! zero border.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::TAU;

use crate::error::{Error, Result};
use crate::mathx;

/// Dense row-major f32 tensor with 1 to 4 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {numel} elements but {} were provided",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![0.0; numel] })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Total parameter count when this tensor stores weights.
    pub fn param_count(&self) -> u64 {
        self.data.len() as u64
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape(format!(
            "tensors must have 1 to 4 dimensions, got {}",
            shape.len()
        )));
    }
    let mut numel = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(Error::InvalidShape(format!("zero extent in shape {shape:?}")));
        }
        numel = numel.checked_mul(d).ok_or_else(|| {
            Error::InvalidShape(format!("shape {shape:?} overflows the element count"))
        })?;
    }
    Ok(numel)
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::InvalidShape(format!("{what}: {detail}"))
}

/// Output extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidConfig(String::from("convolution stride must be >= 1")));
    }
    if kernel == 0 {
        return Err(Error::InvalidConfig(String::from("kernel size must be >= 1")));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidShape(format!(
            "kernel {kernel} does not fit input extent {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Weights of a 2-D convolution: `C_out x C_in x k x k` kernel plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(shape_err(
                "conv weight",
                format!("expected C_out x C_in x k x k, got {s:?}"),
            ));
        }
        if bias.len() != s[0] {
            return Err(shape_err(
                "conv bias",
                format!("expected {} entries, got {}", s[0], bias.len()),
            ));
        }
        Ok(Conv2dParams { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> u64 {
        self.weight.param_count() + self.bias.len() as u64
    }
}

/// 2-D convolution over a `C_in x H x W` map with zero padding.
pub fn conv2d(input: &Tensor, params: &Conv2dParams, stride: usize, padding: usize) -> Result<Tensor> {
    let mut macs = 0u64;
    conv2d_counted(input, params, stride, padding, &mut macs)
}

pub fn conv2d_counted(
    input: &Tensor,
    params: &Conv2dParams,
    stride: usize,
    padding: usize,
    macs: &mut u64,
) -> Result<Tensor> {
    let ishape = input.shape();
    if ishape.len() != 3 {
        return Err(shape_err("conv input", format!("expected C x H x W, got {ishape:?}")));
    }
    let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
    let co = params.out_channels();
    let k = params.kernel();
    if params.in_channels() != ci {
        return Err(shape_err(
            "conv channels",
            format!("weight expects {} input channels, map has {ci}", params.in_channels()),
        ));
    }
    let h_out = conv_out_dim(h, k, stride, padding)?;
    let w_out = conv_out_dim(w, k, stride, padding)?;

    let x = input.data();
    let wgt = params.weight.data();
    let mut out = vec![0.0f32; co * h_out * w_out];
    for oc in 0..co {
        let w_oc = &wgt[oc * ci * k * k..(oc + 1) * ci * k * k];
        for oy in 0..h_out {
            let iy0 = (oy * stride) as isize - padding as isize;
            for ox in 0..w_out {
                let ix0 = (ox * stride) as isize - padding as isize;
                let mut acc = params.bias[oc];
                for ic in 0..ci {
                    let plane = &x[ic * h * w..(ic + 1) * h * w];
                    let w_ic = &w_oc[ic * k * k..(ic + 1) * k * k];
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let w_row = &w_ic[ky * k..(ky + 1) * k];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += row[ix as usize] * wv;
                        }
                    }
                }
                out[(oc * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    *macs += (co * h_out * w_out * ci * k * k) as u64;
    Tensor::new(&[co, h_out, w_out], out)
}

/// Weights of an affine map: `C_out x C_in` matrix plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 {
            return Err(shape_err("linear weight", format!("expected C_out x C_in, got {s:?}")));
        }
        if bias.len() != s[0] {
            return Err(shape_err(
                "linear bias",
                format!("expected {} entries, got {}", s[0], bias.len()),
            ));
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> u64 {
        self.weight.param_count() + self.bias.len() as u64
    }
}

/// Affine map of every row of an `N x C_in` tensor.
pub fn linear(input: &Tensor, params: &LinearParams) -> Result<Tensor> {
    let mut macs = 0u64;
    linear_counted(input, params, &mut macs)
}

pub fn linear_counted(input: &Tensor, params: &LinearParams, macs: &mut u64) -> Result<Tensor> {
    let ishape = input.shape();
    if ishape.len() != 2 {
        return Err(shape_err("linear input", format!("expected N x C_in, got {ishape:?}")));
    }
    let (n, ci) = (ishape[0], ishape[1]);
    if ci != params.in_features() {
        return Err(shape_err(
            "linear features",
            format!("weight expects {} input features, rows have {ci}", params.in_features()),
        ));
    }
    let co = params.out_features();
    let x = input.data();
    let w = params.weight.data();
    let mut out = vec![0.0f32; n * co];
    for row in 0..n {
        let xin = &x[row * ci..(row + 1) * ci];
        let orow = &mut out[row * co..(row + 1) * co];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wrow = &w[o * ci..(o + 1) * ci];
            let mut acc = params.bias[o];
            for (xv, wv) in xin.iter().zip(wrow.iter()) {
                acc += xv * wv;
            }
            *slot = acc;
        }
    }
    *macs += (n * ci * co) as u64;
    Tensor::new(&[n, co], out)
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_inplace(row: &mut [f32]) {
    if row.is_empty() {
        return;
    }
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = mathx::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last dimension of an `N x C` tensor.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    if ishape.len() != 2 {
        return Err(shape_err("softmax input", format!("expected N x C, got {ishape:?}")));
    }
    let mut out = input.clone();
    let c = ishape[1];
    for row in out.data_mut().chunks_mut(c) {
        softmax_inplace(row);
    }
    Ok(out)
}

/// Per-feature scale and shift of layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(c: usize) -> Self {
        LayerNormParams { gamma: vec![1.0; c], beta: vec![0.0; c] }
    }

    pub fn param_count(&self) -> u64 {
        (self.gamma.len() + self.beta.len()) as u64
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Layer normalization over the last dimension of an `N x C` tensor.
pub fn layer_norm(input: &Tensor, params: &LayerNormParams) -> Result<Tensor> {
    let ishape = input.shape();
    if ishape.len() != 2 {
        return Err(shape_err("layer_norm input", format!("expected N x C, got {ishape:?}")));
    }
    let c = ishape[1];
    if params.gamma.len() != c || params.beta.len() != c {
        return Err(shape_err(
            "layer_norm params",
            format!("expected {c} scale/shift entries, got {}/{}", params.gamma.len(), params.beta.len()),
        ));
    }
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / mathx::sqrt(var + LAYER_NORM_EPS);
        for (i, v) in row.iter_mut().enumerate() {
            *v = params.gamma[i] * ((*v - mean) * inv) + params.beta[i];
        }
    }
    Ok(out)
}

/// Elementwise sum of two equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

struct CornerWeights {
    x0: isize,
    y0: isize,
    fx: f32,
    fy: f32,
}

/// Corner index and fractional weights of a normalized sampling point
/// (align-corners-false). Exposed for samplers over non-planar layouts.
#[inline]
pub(crate) fn corner_parts(point: (f32, f32), h: usize, w: usize) -> (isize, isize, f32, f32) {
    let cw = corner_setup(point, h, w);
    (cw.x0, cw.y0, cw.fx, cw.fy)
}

#[inline]
fn corner_setup(point: (f32, f32), h: usize, w: usize) -> CornerWeights {
    let u = point.0 * w as f32 - 0.5;
    let v = point.1 * h as f32 - 0.5;
    let x0 = mathx::floor(u) as isize;
    let y0 = mathx::floor(v) as isize;
    CornerWeights { x0, y0, fx: u - x0 as f32, fy: v - y0 as f32 }
}

#[inline]
fn plane_at(plane: &[f32], w: usize, h: usize, y: isize, x: isize) -> f32 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Border reads clamp to the edge pixel, as resize kernels do; only the
/// point samplers treat out-of-bounds reads as zeros.
#[inline]
fn plane_at_clamped(plane: &[f32], w: usize, h: usize, y: isize, x: isize) -> f32 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    plane[y * w + x]
}

/// Bilinear samples of a `C x H x W` map at normalized `(x, y)` points.
/// Returns a `P x C` tensor; reads outside the map see zeros.
pub fn bilinear_sample(feat: &Tensor, points: &[(f32, f32)]) -> Result<Tensor> {
    let mut macs = 0u64;
    bilinear_sample_counted(feat, points, &mut macs)
}

pub fn bilinear_sample_counted(
    feat: &Tensor,
    points: &[(f32, f32)],
    macs: &mut u64,
) -> Result<Tensor> {
    let fshape = feat.shape();
    if fshape.len() != 3 {
        return Err(shape_err("sample input", format!("expected C x H x W, got {fshape:?}")));
    }
    if points.is_empty() {
        return Err(Error::InvalidInput(String::from("bilinear_sample needs at least one point")));
    }
    let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
    let x = feat.data();
    let mut out = vec![0.0f32; points.len() * c];
    for (p, &pt) in points.iter().enumerate() {
        let cw = corner_setup(pt, h, w);
        let (x0, y0, fx, fy) = (cw.x0, cw.y0, cw.fx, cw.fy);
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            let a = plane_at(plane, w, h, y0, x0);
            let b = plane_at(plane, w, h, y0, x0 + 1);
            let cc = plane_at(plane, w, h, y0 + 1, x0);
            let d = plane_at(plane, w, h, y0 + 1, x0 + 1);
            let top = a + fx * (b - a);
            let bot = cc + fx * (d - cc);
            out[p * c + ch] = top + fy * (bot - top);
        }
    }
    *macs += 4 * (points.len() * c) as u64;
    Tensor::new(&[points.len(), c], out)
}

/// Analytic gradient of `sum(upstream * bilinear_sample(feat, points))` with
/// respect to each normalized point, returned as `(d/dx, d/dy)` pairs.
pub fn bilinear_sample_grad(
    feat: &Tensor,
    points: &[(f32, f32)],
    upstream: &Tensor,
) -> Result<Vec<(f32, f32)>> {
    let fshape = feat.shape();
    if fshape.len() != 3 {
        return Err(shape_err("sample input", format!("expected C x H x W, got {fshape:?}")));
    }
    let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
    if upstream.shape() != [points.len(), c] {
        return Err(shape_err(
            "sample upstream",
            format!("expected {:?}, got {:?}", [points.len(), c], upstream.shape()),
        ));
    }
    let x = feat.data();
    let up = upstream.data();
    let mut grads = Vec::with_capacity(points.len());
    for (p, &pt) in points.iter().enumerate() {
        let cw = corner_setup(pt, h, w);
        let (x0, y0, fx, fy) = (cw.x0, cw.y0, cw.fx, cw.fy);
        let mut gx = 0.0f32;
        let mut gy = 0.0f32;
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            let a = plane_at(plane, w, h, y0, x0);
            let b = plane_at(plane, w, h, y0, x0 + 1);
            let cc = plane_at(plane, w, h, y0 + 1, x0);
            let d = plane_at(plane, w, h, y0 + 1, x0 + 1);
            let u = up[p * c + ch];
            // d/dfx and d/dfy of the interpolated value.
            gx += u * ((1.0 - fy) * (b - a) + fy * (d - cc));
            gy += u * ((1.0 - fx) * (cc - a) + fx * (d - b));
        }
        // fx = x * w - 0.5 - x0, so d fx / d x = w (and likewise for y).
        grads.push((gx * w as f32, gy * h as f32));
    }
    Ok(grads)
}

/// Bilinear resize of a `C x H x W` map. Resizing to the input size returns
/// the input unchanged.
pub fn bilinear_resize(feat: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let mut macs = 0u64;
    bilinear_resize_counted(feat, out_h, out_w, &mut macs)
}

pub fn bilinear_resize_counted(
    feat: &Tensor,
    out_h: usize,
    out_w: usize,
    macs: &mut u64,
) -> Result<Tensor> {
    let fshape = feat.shape();
    if fshape.len() != 3 {
        return Err(shape_err("resize input", format!("expected C x H x W, got {fshape:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(String::from("resize target must be non-empty")));
    }
    let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
    if (out_h, out_w) == (h, w) {
        return Ok(feat.clone());
    }
    let x = feat.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for oy in 0..out_h {
        let py = (oy as f32 + 0.5) / out_h as f32;
        for ox in 0..out_w {
            let px = (ox as f32 + 0.5) / out_w as f32;
            let cw = corner_setup((px, py), h, w);
            let (x0, y0, fx, fy) = (cw.x0, cw.y0, cw.fx, cw.fy);
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                let a = plane_at_clamped(plane, w, h, y0, x0);
                let b = plane_at_clamped(plane, w, h, y0, x0 + 1);
                let cc = plane_at_clamped(plane, w, h, y0 + 1, x0);
                let d = plane_at_clamped(plane, w, h, y0 + 1, x0 + 1);
                let top = a + fx * (b - a);
                let bot = cc + fx * (d - cc);
                out[(ch * out_h + oy) * out_w + ox] = top + fy * (bot - top);
            }
        }
    }
    *macs += 4 * (c * out_h * out_w) as u64;
    Tensor::new(&[c, out_h, out_w], out)
}

/// Fixed sine/cosine positional encodings for an `h x w` grid, flattened row
/// major into an `(h*w) x c` tensor. The first `c/2` channels encode the row
/// coordinate and the rest the column coordinate; positions are normalized to
/// `(0, 2*pi]` per axis. `c` must be a positive multiple of 4.
pub fn sine_positional_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "positional encoding needs channels divisible by 4, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(String::from("positional encoding grid must be non-empty")));
    }
    let pairs = c / 4;
    let half = c / 2;
    let mut divisors = Vec::with_capacity(pairs);
    for i in 0..pairs {
        divisors.push(mathx::powf(10000.0, (2 * i) as f32 / half as f32));
    }
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        let ay = (y + 1) as f32 / h as f32 * TAU;
        for x in 0..w {
            let ax = (x + 1) as f32 / w as f32 * TAU;
            let row = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
            for (i, &div) in divisors.iter().enumerate() {
                row[2 * i] = mathx::sin(ay / div);
                row[2 * i + 1] = mathx::cos(ay / div);
                row[half + 2 * i] = mathx::sin(ax / div);
                row[half + 2 * i + 1] = mathx::cos(ax / div);
            }
        }
    }
    Tensor::new(&[h * w, c], out)
}
