//! The objective-map predictor: frozen backbone taps of the LR image feed a
//! UNet-style decoder whose sigmoid output is an LR-sized map in `[0, 1]`.
//! Trained against stored selection maps with the generator held fixed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{bytes_digest, read_archive, write_archive};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{image_to_tensor, tensor_to_maps, Image};
use crate::nn::{
    leaky_relu, scalar, sigmoid, upsample_nearest, Adam, AdamConfig, Conv2d, Init, ParamStore,
};
use crate::objective::{ObjectiveMap, NUM_LEVELS};
use crate::oos::{
    distance_map_tensor, downscale_selection, grid_search_oos, write_map, DistanceContext,
    OosGridSpec, Resolution,
};

fn default_widths() -> [usize; NUM_LEVELS - 1] {
    [32, 32, 16, 16]
}

/// Decoder shape. `widths[i]` is the output width of the merge at tap
/// `3 - i` (deepest first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    #[serde(default = "default_widths")]
    pub widths: [usize; NUM_LEVELS - 1],
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            seed: default_seed(),
        }
    }
}

impl PredictorConfig {
    pub fn digest(&self) -> String {
        bytes_digest(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// The predictor network; the encoder is the shared frozen backbone.
#[derive(Debug)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub store: ParamStore,
    merges: Vec<Conv2d>,
    refine: Conv2d,
    out: Conv2d,
    tap_channels: [usize; NUM_LEVELS],
    pub step: u64,
}

impl Predictor {
    pub fn new(
        config: PredictorConfig,
        backbone: &Backbone,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if config.widths.contains(&0) {
            return Err(Error::config("decoder widths must be positive"));
        }
        let ch = backbone.tap_channels();
        let mut store = ParamStore::new(config.seed, dtype, device);
        let k = Init::Kaiming { scale: 1.0 };
        let mut merges = Vec::new();
        let mut prev = ch[NUM_LEVELS - 1];
        for (i, &w) in config.widths.iter().enumerate() {
            let skip = ch[NUM_LEVELS - 2 - i];
            merges.push(store.conv(&format!("merge{i}"), prev + skip, w, 3, 1, k)?);
            prev = w;
        }
        let refine = store.conv("refine", prev + 3, prev, 3, 1, k)?;
        let out = store.conv("out", prev, 1, 3, 1, Init::Kaiming { scale: 0.1 })?;
        Ok(Self {
            config,
            store,
            merges,
            refine,
            out,
            tap_channels: ch,
            step: 0,
        })
    }

    /// Maps for an `N×3×h×w` batch, shape `N×1×h×w`.
    pub fn forward(&self, x: &Tensor, backbone: &Backbone) -> Result<Tensor> {
        if backbone.tap_channels() != self.tap_channels {
            return Err(Error::config(
                "predictor was built for a different backbone",
            ));
        }
        let taps = backbone.extract_taps(x)?;
        let mut h = taps.tap(NUM_LEVELS - 1).clone();
        for (i, conv) in self.merges.iter().enumerate() {
            let skip = taps.tap(NUM_LEVELS - 2 - i);
            let (_, _, sh, sw) = skip.dims4()?;
            let up = upsample_nearest(&h, sh, sw)?;
            h = leaky_relu(&conv.forward(&Tensor::cat(&[&up, skip], 1)?)?, 0.2)?;
        }
        let (_, _, xh, xw) = x.dims4()?;
        let up = upsample_nearest(&h, xh, xw)?;
        let h = leaky_relu(&self.refine.forward(&Tensor::cat(&[&up, x], 1)?)?, 0.2)?;
        sigmoid(&self.out.forward(&h)?)
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    pub fn save(&self, path: &Path, extra: Vec<(String, Tensor)>) -> Result<String> {
        let mut tensors = self.store.named_tensors();
        tensors.extend(extra);
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "predictor".into());
        meta.insert(
            "predictor_config".into(),
            serde_json::to_string(&self.config)?,
        );
        meta.insert("config_digest".into(), self.config.digest());
        meta.insert("step".into(), self.step.to_string());
        write_archive(path, &tensors, meta)
    }

    pub fn load(
        path: &Path,
        backbone: &Backbone,
        dtype: DType,
        device: &Device,
    ) -> Result<(Self, String)> {
        let archive = read_archive(path, device)?;
        if archive.meta("kind")? != "predictor" {
            return Err(Error::Load {
                path: path.to_path_buf(),
                detail: "not a predictor checkpoint".into(),
            });
        }
        let config: PredictorConfig = serde_json::from_str(archive.meta("predictor_config")?)?;
        let mut p = Predictor::new(config, backbone, dtype, device)?;
        p.store.load(&archive.tensors)?;
        p.step = archive
            .meta("step")?
            .parse()
            .map_err(|_| Error::config("checkpoint step is not an integer"))?;
        Ok((p, archive.file_digest))
    }
}

/// `T̂ = C(x)` for one LR image.
pub fn predict_map(x: &Image, predictor: &Predictor, backbone: &Backbone) -> Result<ObjectiveMap> {
    let t = image_to_tensor(x, predictor.store.dtype(), predictor.store.device())?;
    let m = predictor.forward(&t, backbone)?;
    ObjectiveMap::new(tensor_to_maps(&m)?.remove(0))
}

fn default_map_w() -> f64 {
    1.0
}
fn default_rec_w() -> f64 {
    1e-2
}
fn default_per_w() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorLossWeights {
    #[serde(default = "default_map_w")]
    pub map: f64,
    #[serde(default = "default_rec_w")]
    pub rec: f64,
    #[serde(default = "default_per_w")]
    pub perceptual: f64,
}

impl Default for PredictorLossWeights {
    fn default() -> Self {
        Self {
            map: default_map_w(),
            rec: default_rec_w(),
            perceptual: default_per_w(),
        }
    }
}

impl PredictorLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.map, self.rec, self.perceptual];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(
                "predictor loss weights must be finite and non-negative",
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::config(
                "at least one predictor loss weight must be positive",
            ));
        }
        Ok(())
    }
}

/// Scalar breakdown of the predictor objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorLossReport {
    pub l_t: f64,
    pub l_rec: f64,
    pub l_r: f64,
    pub total: f64,
    pub weights: PredictorLossWeights,
}

impl PredictorLossReport {
    pub fn recombine(&self) -> f64 {
        self.weights.map * self.l_t
            + self.weights.rec * self.l_rec
            + self.weights.perceptual * self.l_r
    }
}

/// Frozen networks and fixed settings shared by every predictor step.
pub struct PredictorContext<'a> {
    pub generator: &'a Generator,
    pub backbone: &'a Backbone,
    pub distance: DistanceContext<'a>,
    pub weights: PredictorLossWeights,
}

/// A batch of `(x, y, t_star)` as tensors.
pub struct OoeBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub t_star: Tensor,
}

/// Predictor objective on a batch; the first value is differentiable w.r.t.
/// the predictor only.
pub fn predictor_loss(
    batch: &OoeBatch,
    predictor: &Predictor,
    ctx: &PredictorContext<'_>,
) -> Result<(Tensor, PredictorLossReport)> {
    if !ctx.generator.is_frozen() {
        return Err(Error::config(
            "predictor training requires a frozen generator; call Generator::freeze",
        ));
    }
    ctx.weights.validate()?;
    let (n, _, h, w) = batch.x.dims4()?;
    if batch.t_star.dims() != [n, 1, h, w] {
        return Err(Error::domain(format!(
            "t_star {:?} does not match LR batch {:?}",
            batch.t_star.dims(),
            batch.x.dims()
        )));
    }
    let t_hat = predictor.forward(&batch.x, ctx.backbone)?;
    let l_t = t_hat.sub(&batch.t_star)?.abs()?.mean_all()?;
    let sr = ctx.generator.forward(&batch.x, &t_hat)?;
    if sr.dims() != batch.y.dims() {
        return Err(Error::domain("HR batch does not match generator output"));
    }
    let l_rec = sr.sub(&batch.y)?.abs()?.mean_all()?;
    let l_r = distance_map_tensor(&batch.y, &sr, ctx.distance.backbone, ctx.distance.weights)?
        .mean_all()?;
    let wt = ctx.weights;
    let total = ((l_t.affine(wt.map, 0.0)? + l_rec.affine(wt.rec, 0.0)?)?
        + l_r.affine(wt.perceptual, 0.0)?)?;
    let mut report = PredictorLossReport {
        l_t: scalar(&l_t)?,
        l_rec: scalar(&l_rec)?,
        l_r: scalar(&l_r)?,
        total: 0.0,
        weights: wt,
    };
    report.total = report.recombine();
    Ok((total, report))
}

/// Predictor plus its optimizer.
#[derive(Debug)]
pub struct PredictorTrainer {
    pub predictor: Predictor,
    pub opt: Adam,
}

impl PredictorTrainer {
    pub fn new(predictor: Predictor, adam: AdamConfig) -> Result<Self> {
        let opt = Adam::new(&predictor.store, adam)?;
        Ok(Self { predictor, opt })
    }

    /// One update of the predictor parameters.
    pub fn step(
        &mut self,
        batch: &OoeBatch,
        ctx: &PredictorContext<'_>,
    ) -> Result<PredictorLossReport> {
        if batch.x.dim(0)? == 0 {
            return Err(Error::domain("empty batch"));
        }
        let (loss, report) = predictor_loss(batch, &self.predictor, ctx)?;
        if ![report.l_t, report.l_rec, report.l_r, report.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite {
                step: self.predictor.step,
                snapshot: serde_json::to_string(&report)?,
            });
        }
        self.opt.step(&loss.backward()?)?;
        self.predictor.step += 1;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.predictor.save(path, self.opt.state_tensors())
    }
}

/// One LR/HR pair with a stable identifier.
#[derive(Debug, Clone)]
pub struct NamedPair {
    pub id: String,
    pub lr: Image,
    pub hr: Image,
}

/// A persisted selection map.
#[derive(Debug, Clone, PartialEq)]
pub struct OosMapEntry {
    pub id: String,
    pub path: PathBuf,
    pub digest: String,
}

/// Runs the grid search for every pair and writes LR-sized maps (plus
/// sidecars) to `out_dir` as `<id>.png`.
pub fn build_oos_dataset(
    generator: &Generator,
    pairs: &[NamedPair],
    grid: &OosGridSpec,
    ctx: DistanceContext<'_>,
    out_dir: &Path,
    chunk: usize,
) -> Result<Vec<OosMapEntry>> {
    let gen_digest = generator.digest()?;
    pairs
        .par_iter()
        .map(|p| {
            let r = grid_search_oos(generator, &p.lr, &p.hr, grid, ctx, chunk)?;
            let map = downscale_selection(&r.selection, generator.config.scale)?;
            let path = out_dir.join(format!("{}.png", p.id));
            let digest = write_map(
                &path,
                map.values(),
                grid,
                &gen_digest,
                Resolution::Lr,
                Some(p.id.clone()),
            )?;
            Ok(OosMapEntry {
                id: p.id.clone(),
                path,
                digest,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_backbone, BackboneSpec};
    use crate::generator::GeneratorConfig;
    use crate::image::{batch_to_tensor, map_to_tensor};
    use crate::oos::{read_map, LpipsWeights};
    use ndarray::{Array2, Array3};

    fn img(h: usize, w: usize, phase: f32) -> Image {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            0.5 + 0.45 * ((x as f32 * 0.37 + y as f32 * 0.61 + c as f32 * 1.3 + phase).sin())
        })
    }

    fn tiny_gen() -> Generator {
        Generator::new(
            GeneratorConfig {
                blocks: 1,
                channels: 8,
                cond_channels: 4,
                ..Default::default()
            },
            DType::F32,
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn predicted_map_range_and_shape() -> Result<()> {
        let bb = load_backbone(&BackboneSpec::default())?;
        let p = Predictor::new(PredictorConfig::default(), &bb, DType::F32, &Device::Cpu)?;
        for (h, w) in [(16, 16), (16, 24), (21, 17)] {
            let x = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                ((c * 7 + y * 3 + x * 11) % 13) as f32 * 3.0 - 15.0
            });
            let m = predict_map(&x, &p, &bb)?;
            assert_eq!(m.dims(), (h, w));
            assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(matches!(
            predict_map(&img(8, 8, 0.0), &p, &bb),
            Err(Error::Domain(_))
        ));
        Ok(())
    }

    #[test]
    fn loss_terms_and_frozen_contract() -> Result<()> {
        let bb = load_backbone(&BackboneSpec::default())?;
        let lw = LpipsWeights::uniform(&bb);
        let p = Predictor::new(PredictorConfig::default(), &bb, DType::F32, &Device::Cpu)?;
        let x = img(16, 16, 0.0);
        let y = img(64, 64, 0.5);
        let xt = image_to_tensor(&x, DType::F32, &Device::Cpu)?;
        let yt = image_to_tensor(&y, DType::F32, &Device::Cpu)?;

        let live = tiny_gen();
        let ctx = PredictorContext {
            generator: &live,
            backbone: &bb,
            distance: DistanceContext {
                backbone: &bb,
                weights: &lw,
            },
            weights: PredictorLossWeights::default(),
        };
        let t_star = p.forward(&xt, &bb)?.detach();
        let batch = OoeBatch {
            x: xt.clone(),
            y: yt.clone(),
            t_star: t_star.clone(),
        };
        assert!(matches!(
            predictor_loss(&batch, &p, &ctx),
            Err(Error::Config(_))
        ));

        let g = tiny_gen().freeze();
        let ctx = PredictorContext {
            generator: &g,
            ..ctx
        };
        let (_, r) = predictor_loss(&batch, &p, &ctx)?;
        assert_eq!(r.l_t, 0.0);
        assert!((r.total - r.recombine()).abs() <= 1e-10 * r.total.abs().max(1e-30));

        let other = map_to_tensor(&Array2::from_elem((16, 16), 0.9), DType::F32, &Device::Cpu)?;
        let batch = OoeBatch {
            x: xt,
            y: yt,
            t_star: other,
        };
        let only_t = PredictorContext {
            weights: PredictorLossWeights {
                map: 1.0,
                rec: 0.0,
                perceptual: 0.0,
            },
            ..ctx
        };
        let (t, r) = predictor_loss(&batch, &p, &only_t)?;
        assert_eq!(r.total, r.l_t);
        assert!((scalar(&t)? - r.l_t).abs() < 1e-7);

        // manual recombination from independently computed components
        let (_, r) = predictor_loss(&batch, &p, &ctx)?;
        let t_hat = predict_map(&x, &p, &bb)?;
        let l_t = t_hat
            .values()
            .iter()
            .map(|v| (*v as f64 - 0.9).abs())
            .sum::<f64>()
            / 256.0;
        let sr = g.super_resolve(&x, &t_hat)?;
        let l_rec = (&sr - &y).mapv(|v| v.abs() as f64).mean().unwrap();
        let l_r = crate::oos::lpips(&y, &sr, &bb, &lw)?;
        let manual = l_t + 1e-2 * l_rec + l_r;
        assert!(
            (r.total - manual).abs() < 1e-5 * manual,
            "{} vs {manual}",
            r.total
        );
        Ok(())
    }

    #[test]
    fn training_step_touches_only_predictor() -> Result<()> {
        let bb = load_backbone(&BackboneSpec::default())?;
        let lw = LpipsWeights::uniform(&bb);
        let g = tiny_gen().freeze();
        let g_before = g.digest()?;
        let p = Predictor::new(PredictorConfig::default(), &bb, DType::F32, &Device::Cpu)?;
        let p_before = p.digest()?;
        let mut tr = PredictorTrainer::new(
            p,
            AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
        )?;
        let ctx = PredictorContext {
            generator: &g,
            backbone: &bb,
            distance: DistanceContext {
                backbone: &bb,
                weights: &lw,
            },
            weights: PredictorLossWeights::default(),
        };
        let x = batch_to_tensor(&[&img(16, 16, 0.0)], DType::F32, &Device::Cpu)?;
        let y = batch_to_tensor(&[&img(64, 64, 0.0)], DType::F32, &Device::Cpu)?;
        let t_star = map_to_tensor(&Array2::from_elem((16, 16), 0.2), DType::F32, &Device::Cpu)?;
        let batch = OoeBatch { x, y, t_star };
        let r = tr.step(&batch, &ctx)?;
        assert!(r.total.is_finite());
        assert_eq!(g.digest()?, g_before);
        assert_ne!(tr.predictor.digest()?, p_before);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        tr.save(&path)?;
        let (p2, _) = Predictor::load(&path, &bb, DType::F32, &Device::Cpu)?;
        assert_eq!(p2.digest()?, tr.predictor.digest()?);
        Ok(())
    }

    #[test]
    fn dataset_is_idempotent_and_matches_direct_search() -> Result<()> {
        let bb = load_backbone(&BackboneSpec::default())?;
        let lw = LpipsWeights::uniform(&bb);
        let ctx = DistanceContext {
            backbone: &bb,
            weights: &lw,
        };
        let g = tiny_gen().freeze();
        let pairs: Vec<NamedPair> = (0..2)
            .map(|i| NamedPair {
                id: format!("p{i}"),
                lr: img(6, 6, i as f32),
                hr: img(24, 24, i as f32 + 0.3),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let grid: OosGridSpec = "0:1:0.5".parse()?;
        let a = build_oos_dataset(&g, &pairs, &grid, ctx, dir.path(), 2)?;
        let b = build_oos_dataset(&g, &pairs, &grid, ctx, dir.path(), 3)?;
        assert_eq!(a, b);
        for (pair, e) in pairs.iter().zip(&a) {
            let (m, _) = read_map(&e.path)?;
            let direct = downscale_selection(
                &grid_search_oos(&g, &pair.lr, &pair.hr, &grid, ctx, 1)?.selection,
                4,
            )?;
            let err = (m.values() - direct.values())
                .mapv(f32::abs)
                .fold(0.0f32, |x, y| x.max(*y));
            assert!(err <= 0.5 / 65535.0 + 1e-7);
        }
        let single = build_oos_dataset(&g, &pairs, &"0.5".parse()?, ctx, dir.path(), 1)?;
        for e in single {
            let (m, _) = read_map(&e.path)?;
            assert!(m.values().iter().all(|v| (*v - 0.5).abs() < 1e-4));
        }
        Ok(())
    }
}
