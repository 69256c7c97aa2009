//! Per-pixel perceptual distance maps, optimal objective selection over a
//! `t` grid, per-pixel ensembling of candidate outputs, and the map file
//! format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Tensor;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{bytes_digest, write_atomic};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{decode_map_png16, encode_map_png16, image_to_tensor, tensor_to_maps, Image};
use crate::nn::resize_bilinear;
use crate::objective::{constant_map, ObjectiveMap, NUM_LEVELS};

/// Squared-norm floor inside the channel normalization; keeps the gradient
/// finite where a tap is all zero.
const NORM_EPS_SQ: f64 = 1e-20;

/// Per-tap, per-channel weights of the distance map.
#[derive(Debug, Clone, PartialEq)]
pub struct LpipsWeights {
    pub per_tap: Vec<Vec<f64>>,
}

impl LpipsWeights {
    /// `1/C` for every channel, i.e. a channel mean.
    pub fn uniform(backbone: &Backbone) -> Self {
        Self {
            per_tap: backbone
                .tap_channels()
                .iter()
                .map(|&c| vec![1.0 / c as f64; c])
                .collect(),
        }
    }

    fn check(&self, backbone: &Backbone) -> Result<()> {
        let ch = backbone.tap_channels();
        if self.per_tap.len() != NUM_LEVELS
            || self
                .per_tap
                .iter()
                .zip(ch.iter())
                .any(|(w, c)| w.len() != *c)
        {
            return Err(Error::config(
                "LPIPS weights do not match the backbone taps",
            ));
        }
        if self
            .per_tap
            .iter()
            .flatten()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::config(
                "LPIPS weights must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + NORM_EPS_SQ)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Distance maps for two `N×3×H×W` batches, shape `N×1×H×W`.
///
/// Differentiable in both arguments.
pub fn distance_map_tensor(
    a: &Tensor,
    b: &Tensor,
    backbone: &Backbone,
    weights: &LpipsWeights,
) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::domain(format!(
            "distance map: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    weights.check(backbone)?;
    let (_, _, h, w) = a.dims4()?;
    let ta = backbone.extract_taps(a)?;
    let tb = backbone.extract_taps(b)?;
    let mut acc: Option<Tensor> = None;
    for l in 0..NUM_LEVELS {
        let c = weights.per_tap[l].len();
        let wl = Tensor::from_vec(weights.per_tap[l].clone(), (1, c, 1, 1), a.device())?
            .to_dtype(a.dtype())?;
        let diff = unit_normalize(ta.tap(l))?.sub(&unit_normalize(tb.tap(l))?)?;
        let field = diff.sqr()?.broadcast_mul(&wl)?.sum_keepdim(1)?;
        let up = resize_bilinear(&field, h, w)?;
        acc = Some(match acc {
            None => up,
            Some(s) => (s + up)?,
        });
    }
    Ok((acc.expect("five taps") / NUM_LEVELS as f64)?)
}

/// An HR-sized field of non-negative local perceptual distances.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualDistanceMap(pub Array2<f32>);

impl PerceptualDistanceMap {
    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }

    /// Scalar distance: the spatial mean of the map.
    pub fn mean(&self) -> f64 {
        self.0.iter().map(|v| *v as f64).sum::<f64>() / self.0.len() as f64
    }
}

pub fn perceptual_distance_map(
    y: &Image,
    sr: &Image,
    backbone: &Backbone,
    weights: &LpipsWeights,
) -> Result<PerceptualDistanceMap> {
    if y.dim() != sr.dim() {
        return Err(Error::domain(format!(
            "distance map: shape mismatch {:?} vs {:?}",
            y.dim(),
            sr.dim()
        )));
    }
    let dt = backbone.dtype();
    let dev = backbone.device();
    let m = distance_map_tensor(
        &image_to_tensor(y, dt, dev)?,
        &image_to_tensor(sr, dt, dev)?,
        backbone,
        weights,
    )?;
    let mut map = tensor_to_maps(&m)?.remove(0);
    // rounding can leave tiny negatives after interpolation of zero fields
    map.mapv_inplace(|v| v.max(0.0));
    Ok(PerceptualDistanceMap(map))
}

/// Scalar perceptual distance between two images.
pub fn lpips(y: &Image, sr: &Image, backbone: &Backbone, weights: &LpipsWeights) -> Result<f64> {
    Ok(perceptual_distance_map(y, sr, backbone, weights)?.mean())
}

/// Ascending, unique `t` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct OosGridSpec {
    t_samples: Vec<f64>,
}

impl OosGridSpec {
    pub fn new(t_samples: Vec<f64>) -> Result<Self> {
        if t_samples.is_empty() {
            return Err(Error::config("grid must contain at least one t"));
        }
        if let Some(t) = t_samples.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::config(format!("grid value {t} outside [0, 1]")));
        }
        if t_samples.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config("grid values must be strictly ascending"));
        }
        Ok(Self { t_samples })
    }

    /// `start:end:step`, endpoints included.
    pub fn range(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || end < start {
            return Err(Error::config(format!(
                "bad grid range {start}:{end}:{step}"
            )));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        // rounding to 1e-9 keeps 0.05·k exactly equal to the decimal literal
        let ts = (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect();
        Self::new(ts)
    }

    pub fn t_samples(&self) -> &[f64] {
        &self.t_samples
    }

    pub fn len(&self) -> usize {
        self.t_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_samples.is_empty()
    }
}

impl Default for OosGridSpec {
    fn default() -> Self {
        Self::range(0.0, 1.0, 0.05).expect("valid default grid")
    }
}

impl FromStr for OosGridSpec {
    type Err = Error;

    /// Accepts `start:end:step` or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad grid number `{v}` in `{s}`")))
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [a, b, c] => Self::range(num(a)?, num(b)?, num(c)?),
            [list] => Self::new(list.split(',').map(num).collect::<Result<_>>()?),
            _ => Err(Error::config(format!(
                "grid `{s}` is neither start:end:step nor a list"
            ))),
        }
    }
}

impl fmt::Display for OosGridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let strs: Vec<String> = self.t_samples.iter().map(|t| t.to_string()).collect();
        write!(f, "{}", strs.join(","))
    }
}

impl TryFrom<String> for OosGridSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OosGridSpec> for String {
    fn from(g: OosGridSpec) -> String {
        g.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Hr,
    Lr,
}

/// Per-pixel selected `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMap {
    pub values: Array2<f32>,
    pub resolution: Resolution,
}

/// Output of [`grid_search_oos`].
#[derive(Debug, Clone)]
pub struct OosResult {
    pub selection: SelectionMap,
    /// Scalar distance of each constant-`t` output, in grid order.
    pub distances: Vec<f64>,
}

/// Streaming lexicographic `(value, key)` minimum; earlier keys win ties
/// because later candidates replace only on a strict decrease.
struct MinTracker {
    best: Array2<f32>,
    arg: Array2<usize>,
}

impl MinTracker {
    fn new(h: usize, w: usize) -> Self {
        Self {
            best: Array2::from_elem((h, w), f32::INFINITY),
            arg: Array2::zeros((h, w)),
        }
    }

    fn push(&mut self, key: usize, field: &Array2<f32>) {
        ndarray::Zip::from(&mut self.best)
            .and(&mut self.arg)
            .and(field)
            .for_each(|b, a, &v| {
                if v < *b {
                    *b = v;
                    *a = key;
                }
            });
    }
}

/// Everything needed to evaluate distance maps.
#[derive(Clone, Copy)]
pub struct DistanceContext<'a> {
    pub backbone: &'a Backbone,
    pub weights: &'a LpipsWeights,
}

/// Exhaustive per-pixel search over `grid`.
///
/// Candidates are evaluated `chunk` at a time (in parallel within a chunk);
/// each candidate is computed on its own so chunking never changes results.
pub fn grid_search_oos(
    generator: &Generator,
    x: &Image,
    y: &Image,
    grid: &OosGridSpec,
    ctx: DistanceContext<'_>,
    chunk: usize,
) -> Result<OosResult> {
    let s = generator.config.scale;
    let (_, h, w) = x.dim();
    if y.dim() != (3, h * s, w * s) {
        return Err(Error::domain(format!(
            "HR {:?} is not scale {s} of LR {:?}",
            y.dim(),
            x.dim()
        )));
    }
    let ts = grid.t_samples();
    let mut tracker = MinTracker::new(h * s, w * s);
    let mut distances = Vec::with_capacity(ts.len());
    for (c, group) in ts.chunks(chunk.max(1)).enumerate() {
        let fields: Vec<PerceptualDistanceMap> = group
            .par_iter()
            .map(|&t| {
                let sr = generator.super_resolve(x, &constant_map(t, h, w)?)?;
                perceptual_distance_map(y, &sr, ctx.backbone, ctx.weights)
            })
            .collect::<Result<_>>()?;
        for (i, f) in fields.iter().enumerate() {
            distances.push(f.mean());
            tracker.push(c * chunk.max(1) + i, f.values());
        }
    }
    let values = tracker.arg.mapv(|i| ts[i] as f32);
    Ok(OosResult {
        selection: SelectionMap {
            values,
            resolution: Resolution::Hr,
        },
        distances,
    })
}

/// Average-pools an HR selection map to an LR objective map.
pub fn downscale_selection(sel: &SelectionMap, scale: usize) -> Result<ObjectiveMap> {
    let (h, w) = sel.values.dim();
    if sel.resolution == Resolution::Lr {
        return ObjectiveMap::new(sel.values.mapv(|v| v.clamp(0.0, 1.0)));
    }
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::domain(format!(
            "selection map {h}x{w} is not divisible by scale {scale}"
        )));
    }
    let area = (scale * scale) as f64;
    let pooled = Array2::from_shape_fn((h / scale, w / scale), |(i, j)| {
        let cell = sel.values.slice(ndarray::s![
            i * scale..(i + 1) * scale,
            j * scale..(j + 1) * scale
        ]);
        let mean = cell.iter().map(|v| *v as f64).sum::<f64>() / area;
        mean.clamp(0.0, 1.0) as f32
    });
    ObjectiveMap::new(pooled)
}

/// Output of [`ensemble_oos`].
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub mixed: Image,
    /// Index of the chosen candidate at each pixel.
    pub selection: Array2<usize>,
    /// Pointwise minimum of the candidates' distance fields.
    pub min_field: Array2<f32>,
    pub fields: Vec<PerceptualDistanceMap>,
}

/// Builds an image by copying, at each pixel, the candidate closest to `y`.
pub fn ensemble_oos(
    candidates: &[Image],
    y: &Image,
    ctx: DistanceContext<'_>,
) -> Result<EnsembleResult> {
    if candidates.len() < 2 {
        return Err(Error::domain("ensemble needs at least two candidates"));
    }
    if let Some(c) = candidates.iter().find(|c| c.dim() != y.dim()) {
        return Err(Error::domain(format!(
            "candidate {:?} does not match reference {:?}",
            c.dim(),
            y.dim()
        )));
    }
    let fields: Vec<PerceptualDistanceMap> = candidates
        .par_iter()
        .map(|c| perceptual_distance_map(y, c, ctx.backbone, ctx.weights))
        .collect::<Result<_>>()?;
    let (_, h, w) = y.dim();
    let mut tracker = MinTracker::new(h, w);
    for (i, f) in fields.iter().enumerate() {
        tracker.push(i, f.values());
    }
    let mixed = Array3::from_shape_fn(y.dim(), |(c, i, j)| {
        candidates[tracker.arg[[i, j]]][[c, i, j]]
    });
    Ok(EnsembleResult {
        mixed,
        selection: tracker.arg,
        min_field: tracker.best,
        fields,
    })
}

/// SR with the LR reduction of a selection map.
pub fn sroos_infer(generator: &Generator, x: &Image, sel: &SelectionMap) -> Result<Image> {
    let map = downscale_selection(sel, generator.config.scale)?;
    generator.super_resolve(x, &map)
}

/// Metadata written next to every map file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub grid: OosGridSpec,
    pub generator_digest: String,
    pub resolution: Resolution,
    /// SHA-256 of the PNG bytes.
    pub map_digest: String,
    #[serde(default)]
    pub source: Option<String>,
}

pub fn sidecar_path(map_path: &Path) -> PathBuf {
    map_path.with_extension("json")
}

/// Writes `map` as a 16-bit PNG plus sidecar; returns the PNG digest.
pub fn write_map(
    path: &Path,
    map: &Array2<f32>,
    grid: &OosGridSpec,
    generator_digest: &str,
    resolution: Resolution,
    source: Option<String>,
) -> Result<String> {
    let bytes = encode_map_png16(map)?;
    let digest = bytes_digest(&bytes);
    write_atomic(path, &bytes)?;
    let sidecar = MapSidecar {
        grid: grid.clone(),
        generator_digest: generator_digest.to_string(),
        resolution,
        map_digest: digest.clone(),
        source,
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    write_atomic(&sidecar_path(path), text.as_bytes())?;
    Ok(digest)
}

/// Reads a map file; its sidecar is returned when present and the PNG digest
/// is checked against it.
pub fn read_map(path: &Path) -> Result<(ObjectiveMap, Option<MapSidecar>)> {
    let values = decode_map_png16(path)?;
    let sc = sidecar_path(path);
    let sidecar = if sc.exists() {
        let text = std::fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
        let s: MapSidecar = serde_json::from_str(&text)?;
        let actual = crate::archive::file_digest(path)?;
        if actual != s.map_digest {
            return Err(Error::DigestMismatch {
                path: path.to_path_buf(),
                expected: s.map_digest,
                actual,
            });
        }
        Some(s)
    } else {
        None
    };
    Ok((ObjectiveMap::new(values)?, sidecar))
}

/// Distance maps of several images against one reference in a single pass;
/// convenience for evaluation loops.
pub fn batch_lpips(ys: &[&Image], srs: &[&Image], ctx: DistanceContext<'_>) -> Result<Vec<f64>> {
    if ys.len() != srs.len() {
        return Err(Error::domain("mismatched image list lengths"));
    }
    ys.par_iter()
        .zip(srs.par_iter())
        .map(|(y, s)| lpips(y, s, ctx.backbone, ctx.weights))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_backbone, BackboneSpec};
    use crate::generator::GeneratorConfig;
    use candle_core::{DType, Device};

    fn img(h: usize, w: usize, phase: f32) -> Image {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            0.5 + 0.45 * ((x as f32 * 0.37 + y as f32 * 0.61 + c as f32 * 1.3 + phase).sin())
        })
    }

    fn setup() -> (Backbone, LpipsWeights) {
        let bb = load_backbone(&BackboneSpec::default()).unwrap();
        let w = LpipsWeights::uniform(&bb);
        (bb, w)
    }

    #[test]
    fn distance_map_zero_symmetric_and_mean_oracle() -> Result<()> {
        let (bb, w) = setup();
        let a = img(32, 32, 0.0);
        let b = img(32, 32, 1.1);
        let z = perceptual_distance_map(&a, &a, &bb, &w)?;
        assert!(z.values().iter().all(|v| *v == 0.0));
        let ab = perceptual_distance_map(&a, &b, &bb, &w)?;
        let ba = perceptual_distance_map(&b, &a, &bb, &w)?;
        assert_eq!(ab, ba);
        assert_eq!(ab.values().dim(), (32, 32));
        assert!(ab.values().iter().all(|v| *v >= 0.0 && v.is_finite()));

        // Oracle: per-tap spatial mean of the channel-normalized squared
        // difference, averaged over taps (integer factors keep the mean).
        let bb64 = bb.with_dtype(DType::F64)?;
        let ta = bb64.extract_taps(&image_to_tensor(&a, DType::F64, &Device::Cpu)?)?;
        let tb = bb64.extract_taps(&image_to_tensor(&b, DType::F64, &Device::Cpu)?)?;
        let mut total = 0.0;
        for l in 0..NUM_LEVELS {
            let fa = ta.tap(l).squeeze(0)?.to_vec3::<f64>()?;
            let fb = tb.tap(l).squeeze(0)?.to_vec3::<f64>()?;
            let (c, h, wd) = (fa.len(), fa[0].len(), fa[0][0].len());
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..wd {
                    let na = (0..c).map(|k| fa[k][i][j].powi(2)).sum::<f64>().sqrt() + 1e-10;
                    let nb = (0..c).map(|k| fb[k][i][j].powi(2)).sum::<f64>().sqrt() + 1e-10;
                    for k in 0..c {
                        acc += (fa[k][i][j] / na - fb[k][i][j] / nb).powi(2) / c as f64;
                    }
                }
            }
            total += acc / (h * wd) as f64;
        }
        let oracle = total / NUM_LEVELS as f64;
        assert!(
            (ab.mean() - oracle).abs() < 1e-5 * oracle.max(1e-3),
            "{} vs {oracle}",
            ab.mean()
        );
        Ok(())
    }

    #[test]
    fn grid_parsing() -> Result<()> {
        let g: OosGridSpec = "0:1:0.05".parse()?;
        assert_eq!(g.len(), 21);
        assert_eq!(g.t_samples()[3], 0.15);
        assert_eq!(g.t_samples()[20], 1.0);
        assert_eq!(g, OosGridSpec::default());
        let one: OosGridSpec = "0.4".parse()?;
        assert_eq!(one.t_samples(), &[0.4]);
        assert!("0.5,0.2".parse::<OosGridSpec>().is_err());
        assert!("0:2:0.5".parse::<OosGridSpec>().is_err());
        assert!("a:b".parse::<OosGridSpec>().is_err());
        let s: OosGridSpec = serde_json::from_str(&serde_json::to_string(&g)?)?;
        assert_eq!(s, g);
        Ok(())
    }

    #[test]
    fn tracker_argmin_and_ties() {
        let mut t = MinTracker::new(1, 1);
        for (k, v) in [0.3f32, 0.1, 0.2].iter().enumerate() {
            t.push(k, &Array2::from_elem((1, 1), *v));
        }
        let grid = OosGridSpec::new(vec![0.0, 0.05, 0.10]).unwrap();
        assert_eq!(grid.t_samples()[t.arg[[0, 0]]], 0.05);
        let mut t = MinTracker::new(1, 1);
        for k in 0..3 {
            t.push(k, &Array2::from_elem((1, 1), 0.5));
        }
        assert_eq!(t.arg[[0, 0]], 0);
    }

    #[test]
    fn downscale_selection_examples() -> Result<()> {
        let sel = SelectionMap {
            values: Array2::from_elem((8, 8), 0.6),
            resolution: Resolution::Hr,
        };
        let m = downscale_selection(&sel, 4)?;
        assert!(m.values().iter().all(|v| (*v - 0.6).abs() < 1e-7));
        let sel = SelectionMap {
            values: ndarray::array![[0.0, 0.0], [1.0, 1.0]],
            resolution: Resolution::Hr,
        };
        assert_eq!(downscale_selection(&sel, 2)?.values()[[0, 0]], 0.5);
        let bad = SelectionMap {
            values: Array2::zeros((6, 8)),
            resolution: Resolution::Hr,
        };
        assert!(matches!(
            downscale_selection(&bad, 4),
            Err(Error::Domain(_))
        ));
        Ok(())
    }

    #[test]
    fn singleton_grid_and_chunk_invariance() -> Result<()> {
        let (bb, w) = setup();
        let ctx = DistanceContext {
            backbone: &bb,
            weights: &w,
        };
        let g = Generator::new(
            GeneratorConfig {
                blocks: 1,
                channels: 8,
                cond_channels: 4,
                ..Default::default()
            },
            DType::F32,
            &Device::Cpu,
        )?;
        let x = img(6, 6, 0.2);
        let y = img(24, 24, 0.3);
        let r = grid_search_oos(&g, &x, &y, &"0.4".parse()?, ctx, 4)?;
        assert!(r.selection.values.iter().all(|v| *v == 0.4));
        let grid: OosGridSpec = "0:1:0.25".parse()?;
        let a = grid_search_oos(&g, &x, &y, &grid, ctx, 1)?;
        let b = grid_search_oos(&g, &x, &y, &grid, ctx, 5)?;
        assert_eq!(a.selection, b.selection);
        assert_eq!(a.distances, b.distances);

        let sel = SelectionMap {
            values: Array2::from_elem((24, 24), 0.3),
            resolution: Resolution::Hr,
        };
        let direct = g.super_resolve(&x, &constant_map(0.3, 6, 6)?)?;
        assert_eq!(sroos_infer(&g, &x, &sel)?, direct);
        Ok(())
    }

    #[test]
    fn ensemble_examples() -> Result<()> {
        let (bb, w) = setup();
        let ctx = DistanceContext {
            backbone: &bb,
            weights: &w,
        };
        let y = img(16, 16, 0.0);
        let other = img(16, 16, 2.0);
        let r = ensemble_oos(&[other.clone(), y.clone()], &y, ctx)?;
        assert_eq!(r.mixed, y);
        let r = ensemble_oos(&[other.clone(), other.clone()], &y, ctx)?;
        assert_eq!(r.mixed, other);
        assert!(r.selection.iter().all(|i| *i == 0));
        assert!(ensemble_oos(std::slice::from_ref(&y), &y, ctx).is_err());
        Ok(())
    }

    #[test]
    fn map_file_roundtrip() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let map = Array2::from_shape_fn((4, 5), |(i, j)| ((i + j) % 3) as f32 * 0.5);
        let grid = OosGridSpec::default();
        let d1 = write_map(&p, &map, &grid, "abc", Resolution::Lr, Some("x".into()))?;
        let (m, sc) = read_map(&p)?;
        let sc = sc.unwrap();
        assert_eq!(sc.map_digest, d1);
        assert_eq!(sc.grid, grid);
        let err = (m.values() - &map)
            .mapv(f32::abs)
            .fold(0.0f32, |a, b| a.max(*b));
        assert!(err <= 0.5 / 65535.0 + 1e-7);
        let d2 = write_map(&p, &map, &grid, "abc", Resolution::Lr, Some("x".into()))?;
        assert_eq!(d1, d2);
        Ok(())
    }
}
