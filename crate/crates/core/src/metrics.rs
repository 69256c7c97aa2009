//! Full-reference metrics, LR consistency, min-max normalized perceptual
//! tables and perception-distortion sweeps.
//!
//! PSNR is computed on RGB and capped at [`PSNR_CAP`]. SSIM is computed on
//! BT.601 luma with an 11-tap Gaussian window (σ = 1.5), K1 = 0.01,
//! K2 = 0.03, dynamic range 1, over valid windows only.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{image_to_tensor, luminance, Image};
use crate::losses::perceptual_level_loss;
use crate::objective::{constant_map, NUM_LEVELS};
use crate::oos::{lpips, DistanceContext, OosGridSpec};
use crate::predictor::NamedPair;
use crate::resize::downscale_bicubic;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::domain(format!(
            "shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(1 / MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(i, j)| {
        (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>()
    });
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>()
    })
}

/// Mean SSIM on luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (_, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (x, y) = (luminance(a), luminance(b));
    let k = gaussian_window();
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k);
    let syy = filter_valid(&(&y * &y), &k);
    let sxy = filter_valid(&(&x * &y), &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    ndarray::Zip::from(&mx)
        .and(&my)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .for_each(|&mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    Ok(total / mx.len() as f64)
}

/// PSNR between `lr` and the bicubic downscale of `sr`.
pub fn lr_psnr(sr: &Image, lr: &Image, scale: usize) -> Result<f64> {
    let (_, h, w) = lr.dim();
    if sr.dim() != (3, h * scale, w * scale) {
        return Err(Error::domain(format!(
            "SR {:?} is not scale {scale} of LR {:?}",
            sr.dim(),
            lr.dim()
        )));
    }
    psnr(&downscale_bicubic(sr, scale)?, lr)
}

/// Min-max normalized per-level perceptual losses, one row per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTable {
    pub models: Vec<String>,
    pub raw: Vec<[f64; NUM_LEVELS]>,
    pub normalized: Vec<[f64; NUM_LEVELS]>,
    /// Columns whose values were all equal; reported as zeros.
    pub degenerate: [bool; NUM_LEVELS],
}

/// Scales each column to `[0, 1]`.
pub fn min_max_columns(
    models: Vec<String>,
    raw: Vec<[f64; NUM_LEVELS]>,
) -> Result<NormalizedTable> {
    if raw.len() < 2 || models.len() != raw.len() {
        return Err(Error::domain("normalization needs at least two models"));
    }
    let mut normalized = vec![[0.0; NUM_LEVELS]; raw.len()];
    let mut degenerate = [false; NUM_LEVELS];
    for l in 0..NUM_LEVELS {
        let lo = raw.iter().map(|r| r[l]).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|r| r[l]).fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            degenerate[l] = true;
            continue;
        }
        for (i, r) in raw.iter().enumerate() {
            normalized[i][l] = (r[l] - lo) / (hi - lo);
        }
    }
    Ok(NormalizedTable {
        models,
        raw,
        normalized,
        degenerate,
    })
}

/// One model's outputs: for each dataset, `(sr, hr)` pairs.
pub struct ModelOutputs<'a> {
    pub name: String,
    pub datasets: Vec<Vec<(&'a Image, &'a Image)>>,
}

/// Per level: mean `L_per_l` within each dataset, averaged over datasets,
/// then min-max scaled across models.
pub fn normalized_loss_table(
    models: &[ModelOutputs<'_>],
    backbone: &Backbone,
) -> Result<NormalizedTable> {
    let mut raw = Vec::with_capacity(models.len());
    for m in models {
        if m.datasets.is_empty() || m.datasets.iter().any(Vec::is_empty) {
            return Err(Error::domain(format!(
                "model {} has an empty dataset",
                m.name
            )));
        }
        let mut row = [0.0; NUM_LEVELS];
        for ds in &m.datasets {
            for &(sr, hr) in ds {
                let st = image_to_tensor(sr, backbone.dtype(), backbone.device())?;
                let ht = image_to_tensor(hr, backbone.dtype(), backbone.device())?;
                for (l, r) in row.iter_mut().enumerate() {
                    *r += crate::nn::scalar(&perceptual_level_loss(&st, &ht, l, backbone)?)?
                        / (ds.len() * m.datasets.len()) as f64;
                }
            }
        }
        raw.push(row);
    }
    min_max_columns(models.iter().map(|m| m.name.clone()).collect(), raw)
}

/// Metrics of one SR output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub map: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub lr_psnr: f64,
}

/// Scores `sr` (clamped to `[0, 1]`) against the pair.
pub fn evaluate_one(
    pair: &NamedPair,
    sr: &Image,
    map: &str,
    scale: usize,
    ctx: DistanceContext<'_>,
) -> Result<EvalRecord> {
    let sr = sr.mapv(|v| v.clamp(0.0, 1.0));
    Ok(EvalRecord {
        image_id: pair.id.clone(),
        map: map.to_string(),
        psnr: psnr(&sr, &pair.hr)?,
        ssim: ssim(&sr, &pair.hr)?,
        lpips: lpips(&pair.hr, &sr, ctx.backbone, ctx.weights)?,
        lr_psnr: lr_psnr(&sr, &pair.lr, scale)?,
    })
}

/// Record means, summed in input order.
pub fn summarize(records: &[EvalRecord]) -> EvalRecord {
    let n = records.len().max(1) as f64;
    let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    EvalRecord {
        image_id: "mean".into(),
        map: records.first().map(|r| r.map.clone()).unwrap_or_default(),
        psnr: mean(|r| r.psnr),
        ssim: mean(|r| r.ssim),
        lpips: mean(|r| r.lpips),
        lr_psnr: mean(|r| r.lr_psnr),
    }
}

/// CSV with one row per image and a trailing `mean` row.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("image,map,psnr,ssim,lpips,lr_psnr\n");
    for r in records.iter().chain(std::iter::once(&summarize(records))) {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.8},{:.6}",
            r.image_id, r.map, r.psnr, r.ssim, r.lpips, r.lr_psnr
        );
    }
    s
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    write_atomic(path, records_to_csv(records).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdRow {
    pub t: f64,
    pub psnr: f64,
    pub lpips: f64,
}

/// Mean PSNR and LPIPS per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdCurve {
    pub grid: OosGridSpec,
    pub rows: Vec<PdRow>,
}

impl PdCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,psnr,lpips\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.8}", r.t, r.psnr, r.lpips);
        }
        s
    }
}

/// Constant-map sweep of `generator` over `grid`.
pub fn pd_curve(
    generator: &Generator,
    data: &[NamedPair],
    grid: &OosGridSpec,
    ctx: DistanceContext<'_>,
) -> Result<PdCurve> {
    if data.is_empty() {
        return Err(Error::domain("PD curve needs at least one image"));
    }
    let rows = grid
        .t_samples()
        .iter()
        .map(|&t| {
            let recs: Vec<EvalRecord> = data
                .par_iter()
                .map(|p| {
                    let (_, h, w) = p.lr.dim();
                    let sr = generator.super_resolve(&p.lr, &constant_map(t, h, w)?)?;
                    let sr = sr.mapv(|v| v.clamp(0.0, 1.0));
                    Ok(EvalRecord {
                        image_id: p.id.clone(),
                        map: format!("const:{t}"),
                        psnr: psnr(&sr, &p.hr)?,
                        ssim: 0.0,
                        lpips: lpips(&p.hr, &sr, ctx.backbone, ctx.weights)?,
                        lr_psnr: 0.0,
                    })
                })
                .collect::<Result<_>>()?;
            let m = summarize(&recs);
            Ok(PdRow {
                t,
                psnr: m.psnr,
                lpips: m.lpips,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PdCurve {
        grid: grid.clone(),
        rows,
    })
}
