//! Trilinear sampling and resizing on `[C, D, H, W]` grids.
//!
//! Coordinates are `(d, h, w)` in voxel units. Points outside the grid are
//! clamped to the valid cube; the clamped component then carries no
//! gradient.

use crate::error::{Error, Result};
use crate::tensor::{split4, split5, Tensor};

/// Interpolation stencil of one point: the lower corner and per-axis
/// fractional weights of the upper corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub base: [usize; 3],
    pub frac: [f64; 3],
    /// `false` along an axis where the coordinate was clamped or the
    /// extent is one; the derivative along that axis is zero.
    pub live: [bool; 3],
    pub extent: [usize; 3],
}

impl Stencil {
    pub fn new(point: [f64; 3], extent: [usize; 3]) -> Self {
        let mut base = [0; 3];
        let mut frac = [0.0; 3];
        let mut live = [false; 3];
        for a in 0..3 {
            let top = (extent[a] - 1) as f64;
            let c = point[a];
            if extent[a] == 1 {
                continue;
            }
            live[a] = (0.0..=top).contains(&c);
            let c = c.clamp(0.0, top);
            let i = (c.floor() as usize).min(extent[a] - 2);
            base[a] = i;
            frac[a] = c - i as f64;
        }
        Stencil {
            base,
            frac,
            live,
            extent,
        }
    }

    /// The eight `(flat offset, weight)` pairs; weights sum to one.
    pub fn corners(&self) -> [(usize, f64); 8] {
        let [_, h, w] = self.extent;
        let mut out = [(0, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut idx = [0; 3];
            let mut wt = 1.0;
            for a in 0..3 {
                let up = (c >> (2 - a)) & 1 == 1;
                let hi = (self.base[a] + 1).min(self.extent[a] - 1);
                idx[a] = if up { hi } else { self.base[a] };
                wt *= if up { self.frac[a] } else { 1.0 - self.frac[a] };
            }
            *slot = ((idx[0] * h + idx[1]) * w + idx[2], wt);
        }
        out
    }

    /// Corner weights differentiated along `axis`.
    pub fn corner_slopes(&self, axis: usize) -> [f64; 8] {
        let mut out = [0.0; 8];
        if !self.live[axis] {
            return out;
        }
        for (c, slot) in out.iter_mut().enumerate() {
            let mut wt = 1.0;
            for a in 0..3 {
                let up = (c >> (2 - a)) & 1 == 1;
                wt *= match (a == axis, up) {
                    (true, true) => 1.0,
                    (true, false) => -1.0,
                    (false, true) => self.frac[a],
                    (false, false) => 1.0 - self.frac[a],
                };
            }
            *slot = wt;
        }
        out
    }
}

fn check_points(points: &[[f64; 3]]) -> Result<()> {
    if let Some((i, p)) = points
        .iter()
        .enumerate()
        .find(|(_, p)| p.iter().any(|c| !c.is_finite()))
    {
        return Err(Error::Input(format!("sample point {i} has non-finite coordinate {p:?}")));
    }
    Ok(())
}

pub(crate) fn sample_forward(volume: &[f64], channels: usize, extent: [usize; 3], points: &[[f64; 3]]) -> Vec<f64> {
    let plane: usize = extent.iter().product();
    let mut out = vec![0.0; points.len() * channels];
    for (p, point) in points.iter().enumerate() {
        let corners = Stencil::new(*point, extent).corners();
        for c in 0..channels {
            let v = &volume[c * plane..][..plane];
            out[p * channels + c] = corners.iter().map(|&(o, w)| w * v[o]).sum();
        }
    }
    out
}

/// Gradients of a sample with respect to the volume and the coordinates.
pub(crate) fn sample_backward(
    volume: &[f64],
    channels: usize,
    extent: [usize; 3],
    points: &[[f64; 3]],
    grad_out: &[f64],
    want_volume: bool,
    want_points: bool,
) -> (Vec<f64>, Vec<f64>) {
    let plane: usize = extent.iter().product();
    let mut gvol = if want_volume { vec![0.0; volume.len()] } else { Vec::new() };
    let mut gpts = if want_points { vec![0.0; points.len() * 3] } else { Vec::new() };
    for (p, point) in points.iter().enumerate() {
        let st = Stencil::new(*point, extent);
        let corners = st.corners();
        let go = &grad_out[p * channels..][..channels];
        if want_volume {
            for (c, &g) in go.iter().enumerate() {
                for &(o, w) in &corners {
                    gvol[c * plane + o] += g * w;
                }
            }
        }
        if want_points {
            for a in 0..3 {
                let slopes = st.corner_slopes(a);
                let mut acc = 0.0;
                for (c, &g) in go.iter().enumerate() {
                    let v = &volume[c * plane..][..plane];
                    acc += g * corners.iter().zip(&slopes).map(|(&(o, _), s)| s * v[o]).sum::<f64>();
                }
                gpts[p * 3 + a] = acc;
            }
        }
    }
    (gvol, gpts)
}

/// Samples a `[C, D, H, W]` volume at each point, returning `[P, C]`.
///
/// An empty point list yields an empty result.
pub fn trilinear_sample(volume: &Tensor, points: &[[f64; 3]]) -> Result<Vec<Vec<f64>>> {
    let (channels, extent) = split4("trilinear_sample", volume.shape())?;
    check_points(points)?;
    let flat = sample_forward(volume.data(), channels, extent, points);
    Ok(flat.chunks(channels).map(<[f64]>::to_vec).collect())
}

/// Like [`trilinear_sample`] but packed into a `[P, C]` tensor; requires
/// at least one point.
pub fn trilinear_sample_tensor(volume: &Tensor, points: &[[f64; 3]]) -> Result<Tensor> {
    let (channels, extent) = split4("trilinear_sample", volume.shape())?;
    if points.is_empty() {
        return Err(Error::Contract("trilinear_sample_tensor needs at least one point".into()));
    }
    check_points(points)?;
    Ok(Tensor::from_parts(
        vec![points.len(), channels],
        sample_forward(volume.data(), channels, extent, points),
    ))
}

pub(crate) fn check_coords(coords: &[f64]) -> Result<Vec<[f64; 3]>> {
    let pts: Vec<[f64; 3]> = coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    check_points(&pts)?;
    Ok(pts)
}

/// Source coordinate of output index `o` when resizing `n_in -> n_out`
/// (voxel-centre alignment).
fn resize_source(o: usize, n_in: usize, n_out: usize) -> f64 {
    (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Resize plan: for each output voxel the eight input corners.
pub(crate) struct ResizePlan {
    pub inp: [usize; 3],
    pub out: [usize; 3],
    corners: Vec<[(usize, f64); 8]>,
}

impl ResizePlan {
    pub fn new(inp: [usize; 3], out: [usize; 3]) -> Self {
        let mut corners = Vec::with_capacity(out.iter().product());
        for z in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    let p = [
                        resize_source(z, inp[0], out[0]),
                        resize_source(y, inp[1], out[1]),
                        resize_source(x, inp[2], out[2]),
                    ];
                    corners.push(Stencil::new(p, inp).corners());
                }
            }
        }
        ResizePlan { inp, out, corners }
    }

    fn planes(&self) -> (usize, usize) {
        (self.inp.iter().product(), self.out.iter().product())
    }

    pub fn forward(&self, input: &[f64], planes: usize) -> Vec<f64> {
        let (ip, op) = self.planes();
        let mut out = vec![0.0; planes * op];
        for p in 0..planes {
            let src = &input[p * ip..][..ip];
            let dst = &mut out[p * op..][..op];
            for (d, cs) in dst.iter_mut().zip(&self.corners) {
                *d = cs.iter().map(|&(o, w)| w * src[o]).sum();
            }
        }
        out
    }

    pub fn backward(&self, grad_out: &[f64], planes: usize) -> Vec<f64> {
        let (ip, op) = self.planes();
        let mut gin = vec![0.0; planes * ip];
        for p in 0..planes {
            let go = &grad_out[p * op..][..op];
            let dst = &mut gin[p * ip..][..ip];
            for (&g, cs) in go.iter().zip(&self.corners) {
                for &(o, w) in cs {
                    dst[o] += g * w;
                }
            }
        }
        gin
    }
}

/// Trilinear resize of a `[B, C, D, H, W]` tensor to new spatial extents.
pub fn resize(input: &Tensor, out: [usize; 3]) -> Result<Tensor> {
    let (b, c, inp) = split5("resize", input.shape())?;
    if out.contains(&0) {
        return Err(Error::dim("resize", "target", ">= 1", format!("{out:?}")));
    }
    let plan = ResizePlan::new(inp, out);
    Ok(Tensor::from_parts(
        vec![b, c, out[0], out[1], out[2]],
        plan.forward(input.data(), b * c),
    ))
}
