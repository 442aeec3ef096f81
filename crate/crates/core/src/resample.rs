//! Bicubic resizing and bilinear flow warping as sparse linear maps over
//! `C×H×W` planes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{SparseMap, Tensor};

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample `(input index, weight)` lists for resizing one axis of
/// length `len_in` to `len_out` with pixel-centre alignment and edge
/// clamping. When shrinking with `antialias`, the kernel is stretched by the
/// scale factor and renormalised.
pub fn axis_weights(len_in: usize, len_out: usize, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    let ratio = len_in as f64 / len_out as f64;
    let stretch = if antialias && ratio > 1.0 { ratio } else { 1.0 };
    let support = 2.0 * stretch;
    let clamp = |j: i64| j.clamp(0, len_in as i64 - 1) as usize;
    (0..len_out)
        .map(|o| {
            let centre = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (centre - support).ceil() as i64;
            let hi = (centre + support).floor() as i64;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| (clamp(j), cubic_weight((j as f64 - centre) / stretch)))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            if stretch > 1.0 {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                taps.iter_mut().for_each(|t| t.1 /= total);
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of `channels` planes from `h×w` to `out_h×out_w`.
pub fn resize_map(channels: usize, h: usize, w: usize, out_h: usize, out_w: usize, antialias: bool) -> Result<SparseMap> {
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("cannot resize {}×{} to {}×{}", h, w, out_h, out_w)));
    }
    let rows = axis_weights(h, out_h, antialias);
    let cols = axis_weights(w, out_w, antialias);
    SparseMap::from_rows(channels * h * w, channels * out_h * out_w, |r, e| {
        let c = r / (out_h * out_w);
        let y = (r / out_w) % out_h;
        let x = r % out_w;
        for &(iy, wy) in &rows[y] {
            for &(ix, wx) in &cols[x] {
                e.push(((c * h + iy) * w + ix, wy * wx));
            }
        }
    })
}

/// Bicubic upsampling of `T×C×H×W` frames by an integer factor.
pub fn bicubic_upsample(frames: &Tensor, scale: usize) -> Result<Tensor> {
    let [t, c, h, w] = frame_dims(frames.shape())?;
    if scale == 0 {
        return Err(Error::invalid("upsampling scale must be at least 1"));
    }
    resize_frames(frames, t, c, h, w, h * scale, w * scale, false)
}

/// Bicubic resize of `T×C×H×W` frames to `out_h×out_w`.
pub fn bicubic_resize(frames: &Tensor, out_h: usize, out_w: usize, antialias: bool) -> Result<Tensor> {
    let [t, c, h, w] = frame_dims(frames.shape())?;
    resize_frames(frames, t, c, h, w, out_h, out_w, antialias)
}

#[allow(clippy::too_many_arguments)]
fn resize_frames(frames: &Tensor, t: usize, c: usize, h: usize, w: usize, out_h: usize, out_w: usize, aa: bool) -> Result<Tensor> {
    let map = resize_map(t * c, h, w, out_h, out_w, aa)?;
    Tensor::new(vec![t, c, out_h, out_w], map.apply(frames.data())?)
}

pub(crate) fn frame_dims(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [t, c, h, w] => Ok([t, c, h, w]),
        _ => Err(Error::shape("frames", format!("expected T×C×H×W, got {:?}", shape))),
    }
}

/// Bilinear sampling of `channels` planes at `(x - dx, y - dy)` with
/// coordinates clamped to the border. `flow` is `2×H×W` holding `(dx, dy)`.
pub fn warp_map(channels: usize, flow: &Tensor) -> Result<SparseMap> {
    let (h, w) = match *flow.shape() {
        [2, h, w] => (h, w),
        ref s => return Err(Error::shape("warp", format!("flow must be 2×H×W, got {:?}", s))),
    };
    if !flow.is_finite() {
        return Err(Error::NonFinite { op: "warp" });
    }
    let f = flow.data();
    let plane = h * w;
    SparseMap::from_rows(channels * plane, channels * plane, |r, e| {
        let c = r / plane;
        let p = r % plane;
        let (y, x) = (p / w, p % w);
        let sx = (x as f64 - f[p]).clamp(0.0, (w - 1) as f64);
        let sy = (y as f64 - f[plane + p]).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let base = c * plane;
        e.push((base + y0 * w + x0, (1.0 - fx) * (1.0 - fy)));
        e.push((base + y0 * w + x1, fx * (1.0 - fy)));
        e.push((base + y1 * w + x0, (1.0 - fx) * fy));
        e.push((base + y1 * w + x1, fx * fy));
    })
}

/// Warps a `1×C×H×W` state by `flow` (`2×H×W`). Differentiable in the state.
pub fn warp<'t>(state: Var<'t>, flow: &Tensor) -> Result<Var<'t>> {
    let shape = state.shape();
    let [_, c, h, w] = frame_dims(&shape)?;
    if flow.shape() != [2, h, w] {
        return Err(Error::shape(
            "warp",
            format!("flow {:?} for state {:?}", flow.shape(), shape),
        ));
    }
    let map = Arc::new(warp_map(shape[0] * c, flow)?);
    state.linear_map(&map, &shape)
}

/// One of the eight rotations and reflections of `T×C×H×W` frames:
/// `index % 4` quarter turns counter-clockwise, after a left-right mirror
/// when `index >= 4`. Odd quarter turns swap height and width.
pub fn dihedral(frames: &Tensor, index: usize) -> Result<Tensor> {
    let [t, c, h, w] = frame_dims(frames.shape())?;
    if index >= 8 {
        return Err(Error::invalid(format!("dihedral index {} outside 0..8", index)));
    }
    let (mirror, turns) = (index >= 4, index % 4);
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let src = frames.data();
    Ok(Tensor::from_fn(&[t, c, oh, ow], |i| {
        let (x, y, plane) = (i % ow, (i / ow) % oh, i / (ow * oh));
        let (sy, sx) = match turns {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        };
        let sx = if mirror { w - 1 - sx } else { sx };
        src[plane * h * w + sy * w + sx]
    }))
}
