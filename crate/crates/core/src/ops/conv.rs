//! 3D convolution and 1×1×1 channel mixing.
//!
//! The kernels accumulate shifted input rows into output rows, so the inner
//! loop runs over contiguous memory. Every output element is owned by exactly
//! one parallel task and summed in a fixed order, which keeps results
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{split5, Tensor};

/// A cubic 3D convolution kernel with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl ConvKernel {
    /// `weights` has shape `[out, in, k, k, k]`; `bias`, when given, `[out]`.
    pub fn new(weights: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 5 {
            return Err(Error::dim("conv_kernel", "rank", 5, s.len()));
        }
        if s[2] != s[3] || s[3] != s[4] {
            return Err(Error::dim("conv_kernel", "spatial", "cubic kernel", format!("{:?}", &s[2..])));
        }
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::dim("conv_kernel", "bias", s[0], format!("{:?}", b.shape())));
            }
        }
        Ok(ConvKernel {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// Stride-1 kernel padded so that spatial extents are preserved.
    pub fn same(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let k = weights.shape().get(2).copied().unwrap_or(0);
        if k % 2 == 0 {
            return Err(Error::Config(format!("shape-preserving convolution needs odd kernel size, got {k}")));
        }
        Self::new(weights, bias, 1, (k - 1) / 2)
    }

    /// Kernel whose centre tap maps channel `c` to itself and all else is zero.
    pub fn dirac(channels: usize, k: usize) -> Result<Self> {
        let mut w = vec![0.0; channels * channels * k * k * k];
        let c = k / 2;
        for ch in 0..channels {
            w[(((ch * channels + ch) * k + c) * k + c) * k + c] = 1.0;
        }
        Self::same(Tensor::new(&[channels, channels, k, k, k], w)?, None)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn is_shape_preserving(&self) -> bool {
        self.stride == 1 && 2 * self.padding + 1 == self.size()
    }
}

/// Geometry of a convolution call, validated once.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, cin, inp) = split5("conv3d", input)?;
        if weights.len() != 5 {
            return Err(Error::dim("conv3d", "kernel rank", 5, weights.len()));
        }
        if weights[1] != cin {
            return Err(Error::dim("conv3d", "channel (axis 1)", weights[1], cin));
        }
        let k = weights[2];
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = inp[a] + 2 * pad;
            if padded < k {
                return Err(Error::dim(
                    "conv3d",
                    ["depth (axis 2)", "height (axis 3)", "width (axis 4)"][a],
                    format!(">= {k} after padding"),
                    padded,
                ));
            }
            out[a] = (padded - k) / stride + 1;
        }
        Ok(ConvGeom {
            batch,
            cin,
            cout: weights[0],
            k,
            stride,
            pad,
            inp,
            out,
        })
    }

    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.out[0], self.out[1], self.out[2]]
    }

    /// Output indices `o` along axis `a` with `0 <= o*stride + tap - pad < in`.
    fn valid(&self, a: usize, tap: usize) -> (usize, usize) {
        let (s, p, n_in, n_out) = (self.stride, self.pad, self.inp[a], self.out[a]);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        let top = n_in + p;
        if top <= tap {
            return (0, 0);
        }
        let hi = ((top - 1 - tap) / s + 1).min(n_out);
        (lo.min(hi), hi)
    }

    fn kernel_offset(&self, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((co * self.cin + ci) * self.k + kz) * self.k + ky) * self.k + kx
    }
}

pub(crate) fn conv3d_forward(g: &ConvGeom, input: &[f64], weights: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut out = vec![0.0; g.batch * g.cout * op];
    out.par_chunks_mut(op).enumerate().for_each(|(bc, plane)| {
        let (b, co) = (bc / g.cout, bc % g.cout);
        if let Some(bias) = bias {
            plane.fill(bias[co]);
        }
        for ci in 0..g.cin {
            let src = &input[(b * g.cin + ci) * ip..][..ip];
            for kz in 0..g.k {
                let (z0, z1) = g.valid(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(2, kx);
                        if x0 >= x1 {
                            continue;
                        }
                        let w = weights[g.kernel_offset(co, ci, kz, ky, kx)];
                        if w == 0.0 {
                            continue;
                        }
                        for z in z0..z1 {
                            let iz = z * g.stride + kz - g.pad;
                            for y in y0..y1 {
                                let iy = y * g.stride + ky - g.pad;
                                let row = &mut plane[(z * oh + y) * ow..][x0..x1];
                                let base = (iz * ih + iy) * iw;
                                if g.stride == 1 {
                                    let ix0 = x0 + kx - g.pad;
                                    let src_row = &src[base + ix0..base + ix0 + row.len()];
                                    for (o, &v) in row.iter_mut().zip(src_row) {
                                        *o += w * v;
                                    }
                                } else {
                                    for (j, o) in row.iter_mut().enumerate() {
                                        let ix = (x0 + j) * g.stride + kx - g.pad;
                                        *o += w * src[base + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv3d_grad_input(g: &ConvGeom, grad_out: &[f64], weights: &[f64]) -> Vec<f64> {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut gin = vec![0.0; g.batch * g.cin * ip];
    gin.par_chunks_mut(ip).enumerate().for_each(|(bc, plane)| {
        let (b, ci) = (bc / g.cin, bc % g.cin);
        for co in 0..g.cout {
            let gsrc = &grad_out[(b * g.cout + co) * op..][..op];
            for kz in 0..g.k {
                let (z0, z1) = g.valid(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(2, kx);
                        if x0 >= x1 {
                            continue;
                        }
                        let w = weights[g.kernel_offset(co, ci, kz, ky, kx)];
                        if w == 0.0 {
                            continue;
                        }
                        for z in z0..z1 {
                            let iz = z * g.stride + kz - g.pad;
                            for y in y0..y1 {
                                let iy = y * g.stride + ky - g.pad;
                                let grow = &gsrc[(z * oh + y) * ow..][x0..x1];
                                let base = (iz * ih + iy) * iw;
                                if g.stride == 1 {
                                    let ix0 = x0 + kx - g.pad;
                                    let dst = &mut plane[base + ix0..base + ix0 + grow.len()];
                                    for (d, &v) in dst.iter_mut().zip(grow) {
                                        *d += w * v;
                                    }
                                } else {
                                    for (j, &v) in grow.iter().enumerate() {
                                        let ix = (x0 + j) * g.stride + kx - g.pad;
                                        plane[base + ix] += w * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradient with respect to the kernel weights, and the bias gradient.
pub(crate) fn conv3d_grad_weights(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let per_out = g.cin * g.k * g.k * g.k;
    let mut gw = vec![0.0; g.cout * per_out];
    gw.par_chunks_mut(per_out).enumerate().for_each(|(co, wslab)| {
        for b in 0..g.batch {
            let gsrc = &grad_out[(b * g.cout + co) * op..][..op];
            for ci in 0..g.cin {
                let src = &input[(b * g.cin + ci) * ip..][..ip];
                for kz in 0..g.k {
                    let (z0, z1) = g.valid(0, kz);
                    for ky in 0..g.k {
                        let (y0, y1) = g.valid(1, ky);
                        for kx in 0..g.k {
                            let (x0, x1) = g.valid(2, kx);
                            if x0 >= x1 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for z in z0..z1 {
                                let iz = z * g.stride + kz - g.pad;
                                for y in y0..y1 {
                                    let iy = y * g.stride + ky - g.pad;
                                    let grow = &gsrc[(z * oh + y) * ow..][x0..x1];
                                    let base = (iz * ih + iy) * iw;
                                    if g.stride == 1 {
                                        let ix0 = x0 + kx - g.pad;
                                        let src_row = &src[base + ix0..base + ix0 + grow.len()];
                                        acc += grow.iter().zip(src_row).map(|(a, b)| a * b).sum::<f64>();
                                    } else {
                                        for (j, &v) in grow.iter().enumerate() {
                                            let ix = (x0 + j) * g.stride + kx - g.pad;
                                            acc += v * src[base + ix];
                                        }
                                    }
                                }
                            }
                            wslab[((ci * g.k + kz) * g.k + ky) * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
    });
    let mut gb = vec![0.0; g.cout];
    for (co, slot) in gb.iter_mut().enumerate() {
        for b in 0..g.batch {
            *slot += grad_out[(b * g.cout + co) * op..][..op].iter().sum::<f64>();
        }
    }
    (gw, gb)
}

/// 3D convolution of a `[B, Cin, D, H, W]` volume with zero padding.
pub fn conv3d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.weights.shape(), kernel.stride, kernel.padding)?;
    let out = conv3d_forward(&g, input.data(), kernel.weights.data(), kernel.bias.as_ref().map(|b| b.data()));
    Tensor::new(&g.out_shape(), out)
}

/// Channel-mixing geometry for `[B, C, ...]` inputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MixGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub plane: usize,
}

impl MixGeom {
    pub fn new(input: &[usize], weights: &[usize]) -> Result<Self> {
        if input.len() < 2 {
            return Err(Error::dim("conv1x1", "rank", ">= 2", input.len()));
        }
        if weights.len() != 2 {
            return Err(Error::dim("conv1x1", "weight rank", 2, weights.len()));
        }
        if weights[1] != input[1] {
            return Err(Error::dim("conv1x1", "channel (axis 1)", weights[1], input[1]));
        }
        Ok(MixGeom {
            batch: input[0],
            cin: input[1],
            cout: weights[0],
            plane: input[2..].iter().product(),
        })
    }

    pub fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        let mut s = input.to_vec();
        s[1] = self.cout;
        s
    }
}

pub(crate) fn mix_forward(g: &MixGeom, input: &[f64], weights: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.cout * g.plane];
    out.par_chunks_mut(g.plane).enumerate().for_each(|(bc, plane)| {
        let (b, co) = (bc / g.cout, bc % g.cout);
        if let Some(bias) = bias {
            plane.fill(bias[co]);
        }
        for ci in 0..g.cin {
            let w = weights[co * g.cin + ci];
            let src = &input[(b * g.cin + ci) * g.plane..][..g.plane];
            for (o, &v) in plane.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    });
    out
}

pub(crate) fn mix_grad_input(g: &MixGeom, grad_out: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; g.batch * g.cin * g.plane];
    gin.par_chunks_mut(g.plane).enumerate().for_each(|(bc, plane)| {
        let (b, ci) = (bc / g.cin, bc % g.cin);
        for co in 0..g.cout {
            let w = weights[co * g.cin + ci];
            let src = &grad_out[(b * g.cout + co) * g.plane..][..g.plane];
            for (o, &v) in plane.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    });
    gin
}

pub(crate) fn mix_grad_weights(g: &MixGeom, grad_out: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; g.cout * g.cin];
    let mut gb = vec![0.0; g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go = &grad_out[(b * g.cout + co) * g.plane..][..g.plane];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..g.cin {
                let src = &input[(b * g.cin + ci) * g.plane..][..g.plane];
                gw[co * g.cin + ci] += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    (gw, gb)
}

/// Per-position matrix product over the channel axis of a `[B, Cin, ...]` tensor.
pub fn conv1x1(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let g = MixGeom::new(input.shape(), weights.shape())?;
    Tensor::new(&g.out_shape(input.shape()), mix_forward(&g, input.data(), weights.data(), None))
}
