//! The frozen multi-tap feature extractor behind the perceptual losses, the
//! perceptual-distance maps and the predictor encoder.
//!
//! Two families share one tap contract (five taps, shallow to deep, spatial
//! size non-increasing):
//!
//! * `surrogate` — a small five-stage conv net with fixed seeded weights,
//!   cheap enough for desk-scale runs;
//! * `pretrained` — the 19-layer VGG layout read from a weight archive whose
//!   tensors use the conventional `features.<index>.{weight,bias}` names.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive};
use crate::error::{Error, Result};
use crate::nn::{content_digest, max_pool2, Conv2d, Init, ParamStore};
use crate::objective::{LEVEL_NAMES, NUM_LEVELS};

/// Environment variable naming a directory searched for relative weight paths.
pub const CACHE_ENV: &str = "OBJTRAJ_CACHE";

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Conv layer counts per stage of the 19-layer layout.
const VGG19_STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    #[default]
    Surrogate,
    Pretrained,
}

fn default_seed() -> u64 {
    17
}

fn default_channels() -> [usize; NUM_LEVELS] {
    [16, 32, 32, 64, 64]
}

/// How to build the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    #[serde(default)]
    pub mode: BackboneMode,
    /// Seed of the surrogate's fixed random weights.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Surrogate stage widths.
    #[serde(default = "default_channels")]
    pub channels: [usize; NUM_LEVELS],
    /// Weight archive for `pretrained` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Expected content digest of the weights, checked at load time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default = "imagenet_mean")]
    pub mean: [f32; 3],
    #[serde(default = "imagenet_std")]
    pub std: [f32; 3],
}

fn imagenet_mean() -> [f32; 3] {
    IMAGENET_MEAN
}

fn imagenet_std() -> [f32; 3] {
    IMAGENET_STD
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            mode: BackboneMode::Surrogate,
            seed: default_seed(),
            channels: default_channels(),
            weights: None,
            digest: None,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl BackboneSpec {
    pub fn surrogate(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    pub fn pretrained(weights: impl Into<PathBuf>) -> Self {
        Self {
            mode: BackboneMode::Pretrained,
            weights: Some(weights.into()),
            ..Default::default()
        }
    }

    /// Resolves the weight path, falling back to the cache directory for
    /// relative paths that do not exist as given.
    pub fn resolved_weights(&self) -> Result<PathBuf> {
        let path = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::config("backbone.mode = pretrained requires backbone.weights"))?;
        if path.exists() || path.is_absolute() {
            return Ok(path.clone());
        }
        if let Some(cache) = std::env::var_os(CACHE_ENV) {
            let cached = Path::new(&cache).join(path);
            if cached.exists() {
                return Ok(cached);
            }
        }
        Ok(path.clone())
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool,
}

/// Multi-level features of a batch, shallow to deep.
#[derive(Debug, Clone)]
pub struct FeatureTaps {
    taps: Vec<Tensor>,
}

impl FeatureTaps {
    pub fn tap(&self, level: usize) -> &Tensor {
        &self.taps[level]
    }

    pub fn taps(&self) -> &[Tensor] {
        &self.taps
    }

    pub fn into_taps(self) -> Vec<Tensor> {
        self.taps
    }
}

/// A loaded, immutable feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    layers: Vec<Layer>,
    /// Index of the layer whose output is each tap.
    tap_layers: [usize; NUM_LEVELS],
    tap_channels: [usize; NUM_LEVELS],
    names: Vec<(String, usize)>,
    digest: String,
    dtype: DType,
    device: Device,
}

/// Loads (or, for the surrogate, deterministically generates) a backbone.
pub fn load_backbone(spec: &BackboneSpec) -> Result<Backbone> {
    Backbone::load(spec, DType::F32, &Device::Cpu)
}

fn layout(stages: &[(usize, usize)]) -> (Vec<(usize, usize, usize)>, [usize; NUM_LEVELS]) {
    // (layer index, cin, cout) for each conv; taps after each stage's last ReLU.
    let mut convs = Vec::new();
    let mut taps = [0; NUM_LEVELS];
    let mut idx = 0;
    let mut cin = 3;
    for (s, &(width, n)) in stages.iter().enumerate() {
        if s > 0 {
            idx += 1; // pool
        }
        for _ in 0..n {
            convs.push((idx, cin, width));
            cin = width;
            idx += 2;
        }
        taps[s] = idx - 1;
    }
    (convs, taps)
}

impl Backbone {
    pub fn load(spec: &BackboneSpec, dtype: DType, device: &Device) -> Result<Self> {
        let stages: Vec<(usize, usize)> = match spec.mode {
            BackboneMode::Surrogate => spec.channels.iter().map(|&c| (c, 2)).collect(),
            BackboneMode::Pretrained => VGG19_STAGES.to_vec(),
        };
        if stages.iter().any(|s| s.0 == 0) {
            return Err(Error::config("backbone channel counts must be positive"));
        }
        let (convs, tap_layers) = layout(&stages);
        let tensors = match spec.mode {
            BackboneMode::Surrogate => {
                let mut store = ParamStore::new(spec.seed, DType::F32, device);
                for &(idx, cin, cout) in &convs {
                    store.conv(
                        &format!("features.{idx}"),
                        cin,
                        cout,
                        3,
                        1,
                        Init::Kaiming { scale: 1.0 },
                    )?;
                }
                store.named_tensors().into_iter().collect()
            }
            BackboneMode::Pretrained => {
                let path = spec.resolved_weights()?;
                read_archive(&path, device)?.tensors
            }
        };

        let mut layers = Vec::new();
        let mut names = Vec::new();
        let last = tap_layers[NUM_LEVELS - 1];
        let mut conv_iter = convs.iter().peekable();
        for idx in 0..=last {
            match conv_iter.peek() {
                Some(&&(cidx, cin, cout)) if cidx == idx => {
                    conv_iter.next();
                    let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                        let key = format!("features.{idx}.{suffix}");
                        let t = tensors.get(&key).ok_or_else(|| Error::Load {
                            path: spec.weights.clone().unwrap_or_default(),
                            detail: format!("missing tensor {key}"),
                        })?;
                        if t.dims() != shape {
                            return Err(Error::Load {
                                path: spec.weights.clone().unwrap_or_default(),
                                detail: format!(
                                    "tensor {key} has shape {:?}, expected {shape:?}",
                                    t.dims()
                                ),
                            });
                        }
                        Ok(t.to_dtype(dtype)?.detach())
                    };
                    let weight = fetch("weight", &[cout, cin, 3, 3])?;
                    let bias = fetch("bias", &[cout])?;
                    names.push((format!("features.{idx}.weight"), layers.len()));
                    layers.push(Layer::Conv(Conv2d {
                        weight,
                        bias,
                        stride: 1,
                        padding: 1,
                    }));
                }
                _ => {
                    let is_pool = stages_pool_index(&tap_layers, idx);
                    layers.push(if is_pool { Layer::MaxPool } else { Layer::Relu });
                }
            }
        }

        let mut named: Vec<(String, Tensor)> = Vec::new();
        for layer_idx in 0..layers.len() {
            if let Layer::Conv(c) = &layers[layer_idx] {
                named.push((
                    format!("features.{layer_idx}.bias"),
                    c.bias.to_dtype(DType::F32)?,
                ));
                named.push((
                    format!("features.{layer_idx}.weight"),
                    c.weight.to_dtype(DType::F32)?,
                ));
            }
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let digest = content_digest(&named)?;
        if let Some(expected) = &spec.digest {
            if expected != &digest {
                return Err(Error::DigestMismatch {
                    path: spec.weights.clone().unwrap_or_default(),
                    expected: expected.clone(),
                    actual: digest,
                });
            }
        }
        let tap_channels = stages
            .iter()
            .map(|s| s.0)
            .collect::<Vec<_>>()
            .try_into()
            .expect("five stages");
        Ok(Self {
            spec: spec.clone(),
            layers,
            tap_layers,
            tap_channels,
            names,
            digest,
            dtype,
            device: device.clone(),
        })
    }

    /// The same weights at another precision.
    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        Self::load(&self.spec, dtype, &self.device)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Content digest of the weights.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn tap_names(&self) -> [&'static str; NUM_LEVELS] {
        LEVEL_NAMES
    }

    pub fn tap_channels(&self) -> [usize; NUM_LEVELS] {
        self.tap_channels
    }

    /// Smallest accepted input side: one pixel must survive every pool
    /// before the deepest tap.
    pub fn min_input_size(&self) -> usize {
        1 << (NUM_LEVELS - 1)
    }

    /// Spatial size of each tap for an `h × w` input.
    pub fn tap_sizes(&self, h: usize, w: usize) -> [(usize, usize); NUM_LEVELS] {
        let mut out = [(0, 0); NUM_LEVELS];
        let (mut h, mut w) = (h, w);
        for (k, o) in out.iter_mut().enumerate() {
            if k > 0 {
                h /= 2;
                w /= 2;
            }
            *o = (h, w);
        }
        out
    }

    pub fn conv_layer_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|(n, _)| n.as_str())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::domain(format!(
                "backbone expects 3 channels, got {c}"
            )));
        }
        let min = self.min_input_size();
        if h < min || w < min {
            return Err(Error::domain(format!(
                "input {h}x{w} is smaller than the backbone minimum of {min}x{min}"
            )));
        }
        Ok(())
    }

    /// `(x - mean) / std` per channel.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let mean = Tensor::from_vec(self.spec.mean.to_vec(), (1, 3, 1, 1), x.device())?
            .to_dtype(x.dtype())?;
        let std = Tensor::from_vec(self.spec.std.to_vec(), (1, 3, 1, 1), x.device())?
            .to_dtype(x.dtype())?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    fn apply(layer: &Layer, x: &Tensor) -> Result<Tensor> {
        match layer {
            Layer::Conv(c) => c.forward(x),
            Layer::Relu => Ok(x.relu()?),
            Layer::MaxPool => max_pool2(x),
        }
    }

    /// Taps of an `N×3×H×W` batch with values in `[0, 1]`.
    pub fn extract_taps(&self, x: &Tensor) -> Result<FeatureTaps> {
        self.check_input(x)?;
        let mut h = self.normalize(x)?;
        let mut taps = Vec::with_capacity(NUM_LEVELS);
        let mut next = 0;
        for (idx, layer) in self.layers.iter().enumerate() {
            h = Self::apply(layer, &h)?;
            if idx == self.tap_layers[next] {
                taps.push(h.clone());
                next += 1;
                if next == NUM_LEVELS {
                    break;
                }
            }
        }
        Ok(FeatureTaps { taps })
    }

    /// Every intermediate activation, one per layer.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut h = self.normalize(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = Self::apply(layer, &h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn tap_layer_indices(&self) -> [usize; NUM_LEVELS] {
        self.tap_layers
    }

    /// Writes the weights as an archive loadable in `pretrained` mode (for the
    /// 19-layer layout) or for inspection.
    pub fn save_weights(&self, path: &Path) -> Result<String> {
        let mut named = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv(c) = layer {
                named.push((
                    format!("features.{idx}.weight"),
                    c.weight.to_dtype(DType::F32)?,
                ));
                named.push((format!("features.{idx}.bias"), c.bias.to_dtype(DType::F32)?));
            }
        }
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("kind".to_string(), "backbone".to_string());
        write_archive(path, &named, meta)
    }
}

fn stages_pool_index(tap_layers: &[usize; NUM_LEVELS], idx: usize) -> bool {
    tap_layers[..NUM_LEVELS - 1].iter().any(|&t| t + 1 == idx)
}

/// A randomly initialised 19-layer backbone, used to produce portable weight
/// files when pretrained weights are unavailable.
pub fn random_vgg19_weights(seed: u64, path: &Path) -> Result<String> {
    let (convs, _) = layout(&VGG19_STAGES);
    let mut store = ParamStore::new(seed, DType::F32, &Device::Cpu);
    for &(idx, cin, cout) in &convs {
        store.conv(
            &format!("features.{idx}"),
            cin,
            cout,
            3,
            1,
            Init::Kaiming { scale: 1.0 },
        )?;
    }
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("kind".to_string(), "backbone".to_string());
    write_archive(path, &store.named_tensors(), meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, h: usize, w: usize, seed: f64) -> Tensor {
        let len = n * 3 * h * w;
        let v: Vec<f32> = (0..len)
            .map(|i| ((i as f64 * 0.7548776662 + seed) % 1.0) as f32)
            .collect();
        Tensor::from_vec(v, (n, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn vgg19_layout_taps() {
        let (convs, taps) = layout(&VGG19_STAGES);
        assert_eq!(convs.len(), 16);
        assert_eq!(taps, [3, 8, 17, 26, 35]);
        assert_eq!(convs[2], (5, 64, 128));
    }

    #[test]
    fn surrogate_tap_shapes() -> Result<()> {
        let b = load_backbone(&BackboneSpec::default())?;
        let taps = b.extract_taps(&input(1, 64, 64, 0.1))?;
        let shapes: Vec<Vec<usize>> = taps.taps().iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 16, 64, 64],
                vec![1, 32, 32, 32],
                vec![1, 32, 16, 16],
                vec![1, 64, 8, 8],
                vec![1, 64, 4, 4]
            ]
        );
        Ok(())
    }

    #[test]
    fn deterministic_and_seed_stable() -> Result<()> {
        let a = load_backbone(&BackboneSpec::surrogate(17))?;
        let b = load_backbone(&BackboneSpec::surrogate(17))?;
        assert_eq!(a.digest(), b.digest());
        let c = load_backbone(&BackboneSpec::surrogate(18))?;
        assert_ne!(a.digest(), c.digest());

        let x = input(2, 32, 32, 0.3);
        let ta = a.extract_taps(&x)?;
        let tb = a.extract_taps(&x)?;
        for (p, q) in ta.taps().iter().zip(tb.taps()) {
            assert_eq!(p.sub(q)?.abs()?.max_all()?.to_scalar::<f32>()?, 0.0);
        }
        Ok(())
    }

    #[test]
    fn undersized_input_names_minimum() {
        let b = load_backbone(&BackboneSpec::default()).unwrap();
        let err = b.extract_taps(&input(1, 8, 32, 0.0)).unwrap_err();
        assert!(err.to_string().contains("16x16"), "{err}");
    }

    #[test]
    fn taps_match_layerwise_activations() -> Result<()> {
        let b = load_backbone(&BackboneSpec::default())?;
        let x = input(1, 40, 24, 0.5);
        let taps = b.extract_taps(&x)?;
        let all = b.forward_all(&x)?;
        for (k, idx) in b.tap_layer_indices().iter().enumerate() {
            let d = taps
                .tap(k)
                .sub(&all[*idx])?
                .abs()?
                .max_all()?
                .to_scalar::<f32>()?;
            assert!(d <= 1e-6);
        }
        Ok(())
    }

    #[test]
    fn odd_sizes_keep_monotone_reduction() -> Result<()> {
        let b = load_backbone(&BackboneSpec::default())?;
        let taps = b.extract_taps(&input(1, 23, 17, 0.2))?;
        let mut prev = (usize::MAX, usize::MAX);
        for (k, t) in taps.taps().iter().enumerate() {
            let (_, _, h, w) = t.dims4()?;
            assert!(h <= prev.0 && w <= prev.1);
            assert_eq!((h, w), b.tap_sizes(23, 17)[k]);
            prev = (h, w);
        }
        Ok(())
    }
}
