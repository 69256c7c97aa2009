//! The single bicubic resampler used for degradation, LR-consistency checks
//! and bicubic baselines.
//!
//! Keys cubic kernel with `a = -0.5`. When downscaling, the kernel is
//! stretched by the scale factor (antialiasing); borders use symmetric
//! reflection. Weights are normalized to sum to one per output sample.

use candle_core::Tensor;
use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::image::Image;

pub const CUBIC_A: f64 = -0.5;

/// The cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let ax = x.abs();
    if ax <= 1.0 {
        (a + 2.0) * ax.powi(3) - (a + 3.0) * ax.powi(2) + 1.0
    } else if ax < 2.0 {
        a * ax.powi(3) - 5.0 * a * ax.powi(2) + 8.0 * a * ax - 4.0 * a
    } else {
        0.0
    }
}

fn reflect(idx: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut i = idx.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Per-output-sample `(input index, weight)` lists for resizing `inp → out`.
pub fn contributions(inp: usize, out: usize, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    let scale = out as f64 / inp as f64;
    let stretch = if antialias && scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    (0..out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = stretch * cubic_kernel(stretch * (j as f64 - center));
                if w == 0.0 {
                    continue;
                }
                let idx = reflect(j, inp);
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

fn resize_axis(img: &Array3<f64>, axis: usize, out: usize, antialias: bool) -> Array3<f64> {
    let inp = img.len_of(Axis(axis));
    let weights = contributions(inp, out, antialias);
    let mut shape = img.raw_dim();
    shape[axis] = out;
    let mut res = Array3::zeros(shape);
    for (o, taps) in weights.iter().enumerate() {
        let mut dst = res.index_axis_mut(Axis(axis), o);
        for &(i, w) in taps {
            dst.scaled_add(w, &img.index_axis(Axis(axis), i));
        }
    }
    res
}

/// Bicubic resize to `out_h × out_w`.
pub fn resize_bicubic(img: &Image, out_h: usize, out_w: usize, antialias: bool) -> Result<Image> {
    let (_, h, w) = img.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::domain("bicubic resize needs nonzero dimensions"));
    }
    let x = img.mapv(f64::from);
    let x = resize_axis(&x, 2, out_w, antialias);
    let x = resize_axis(&x, 1, out_h, antialias);
    Ok(x.mapv(|v| v as f32))
}

/// Antialiased bicubic downscale by an integer factor; dims must divide.
pub fn downscale_bicubic(img: &Image, scale: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::domain(format!(
            "image {h}x{w} is not divisible by scale {scale}"
        )));
    }
    resize_bicubic(img, h / scale, w / scale, true)
}

/// Bicubic upscale by an integer factor.
pub fn upscale_bicubic(img: &Image, scale: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    if scale == 0 {
        return Err(Error::domain("scale must be positive"));
    }
    resize_bicubic(img, h * scale, w * scale, false)
}

/// Dense `out × inp` resampling matrix with the same weights as [`resize_bicubic`].
pub fn bicubic_matrix(out: usize, inp: usize, antialias: bool) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    for (o, taps) in contributions(inp, out, antialias).into_iter().enumerate() {
        for (i, wt) in taps {
            m[o * inp + i] += wt;
        }
    }
    m
}

/// Bicubic upscale of an `N×C×h×w` tensor by an integer factor.
pub fn upscale_bicubic_tensor(x: &Tensor, scale: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if scale == 0 {
        return Err(Error::domain("scale must be positive"));
    }
    let dev = x.device();
    let (oh, ow) = (h * scale, w * scale);
    let rows = Tensor::from_vec(bicubic_matrix(oh, h, false), (oh, h), dev)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(bicubic_matrix(ow, w, false), (ow, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let y = x.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&y)?)
}
