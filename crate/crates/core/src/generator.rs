//! The objective-conditioned generator: a residual SR branch whose features
//! are modulated by SFT layers driven by a condition branch over the
//! objective map, followed by a nearest-neighbour upsampler.
//!
//! The generator is trained with spatially constant maps only (one random `t`
//! per batch element); spatially varying maps appear only at inference.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{bytes_digest, read_archive, write_archive};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::image::{image_to_tensor, map_to_tensor, tensor_to_images, Image};
use crate::losses::{
    adversarial_losses, combined_loss_per_sample, mean_report, Discriminator, DiscriminatorConfig,
    LossInputs, LossReport,
};
use crate::nn::{leaky_relu, upsample_nearest, Adam, AdamConfig, Conv2d, Init, ParamStore};
use crate::objective::{ObjectiveMap, ObjectiveTrajectory, ObjectiveWeights};
use crate::resize::upscale_bicubic_tensor;

fn default_scale() -> usize {
    4
}
fn default_blocks() -> usize {
    8
}
fn default_channels() -> usize {
    64
}
fn default_cond() -> usize {
    32
}
fn default_sft() -> usize {
    2
}
fn default_up() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_cond")]
    pub cond_channels: usize,
    /// SFT layers per basic block; each precedes one conv stage.
    #[serde(default = "default_sft")]
    pub sft_per_block: usize,
    /// Width of the convs after upsampling, which dominate the cost.
    #[serde(default = "default_up")]
    pub upsampler_channels: usize,
    /// Add a bicubic upscale of the input to the output (global residual).
    #[serde(default)]
    pub image_skip: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            scale: default_scale(),
            blocks: default_blocks(),
            channels: default_channels(),
            cond_channels: default_cond(),
            sft_per_block: default_sft(),
            upsampler_channels: default_up(),
            image_skip: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::config(format!(
                "scale must be 2 or 4, got {}",
                self.scale
            )));
        }
        if self.blocks == 0 {
            return Err(Error::config("generator needs at least one block"));
        }
        if self.channels < 8 || self.cond_channels < 1 || self.upsampler_channels < 1 {
            return Err(Error::config("generator needs at least 8 feature channels"));
        }
        if self.sft_per_block == 0 {
            return Err(Error::config("sft_per_block must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        bytes_digest(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Scale and shift fields for one SFT layer.
#[derive(Debug, Clone)]
pub struct SftModulation {
    pub gamma: Tensor,
    pub delta: Tensor,
}

/// `1×1` conv heads mapping shared conditions to an [`SftModulation`].
///
/// The final convs start at zero, so a fresh head is the identity.
#[derive(Debug, Clone)]
pub struct SftHead {
    pub gamma_hidden: Conv2d,
    pub gamma_out: Conv2d,
    pub delta_hidden: Conv2d,
    pub delta_out: Conv2d,
}

impl SftHead {
    fn new(store: &mut ParamStore, name: &str, cond: usize, channels: usize) -> Result<Self> {
        let k = Init::Kaiming { scale: 1.0 };
        Ok(Self {
            gamma_hidden: store.conv(&format!("{name}.gamma0"), cond, cond, 1, 1, k)?,
            gamma_out: store.conv(&format!("{name}.gamma1"), cond, channels, 1, 1, Init::Zeros)?,
            delta_hidden: store.conv(&format!("{name}.delta0"), cond, cond, 1, 1, k)?,
            delta_out: store.conv(&format!("{name}.delta1"), cond, channels, 1, 1, Init::Zeros)?,
        })
    }

    pub fn modulation(&self, conditions: &Tensor) -> Result<SftModulation> {
        let gamma = self
            .gamma_out
            .forward(&leaky_relu(&self.gamma_hidden.forward(conditions)?, 0.1)?)?;
        let delta = self
            .delta_out
            .forward(&leaky_relu(&self.delta_hidden.forward(conditions)?, 0.1)?)?;
        Ok(SftModulation { gamma, delta })
    }

    fn detached(&self) -> Self {
        Self {
            gamma_hidden: self.gamma_hidden.detached(),
            gamma_out: self.gamma_out.detached(),
            delta_hidden: self.delta_hidden.detached(),
            delta_out: self.delta_out.detached(),
        }
    }
}

/// `features ⊙ (1 + γ) + δ`.
pub fn apply_modulation(features: &Tensor, m: &SftModulation) -> Result<Tensor> {
    if features.dims() != m.gamma.dims() || features.dims() != m.delta.dims() {
        return Err(Error::domain(format!(
            "SFT shape mismatch: features {:?}, gamma {:?}, delta {:?}",
            features.dims(),
            m.gamma.dims(),
            m.delta.dims()
        )));
    }
    Ok(features.mul(&(&m.gamma + 1.0)?)?.add(&m.delta)?)
}

/// Modulates `features` with the affine fields produced by `head`.
pub fn sft_modulate(features: &Tensor, conditions: &Tensor, head: &SftHead) -> Result<Tensor> {
    let (fh, fw) = (features.dim(2)?, features.dim(3)?);
    let (ch, cw) = (conditions.dim(2)?, conditions.dim(3)?);
    if (fh, fw) != (ch, cw) {
        return Err(Error::domain(format!(
            "SFT grid mismatch: features {fh}x{fw}, conditions {ch}x{cw}"
        )));
    }
    apply_modulation(features, &head.modulation(conditions)?)
}

#[derive(Debug, Clone)]
struct Block {
    sft: Vec<SftHead>,
    convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
struct Layers {
    cond: Vec<Conv2d>,
    first: Conv2d,
    blocks: Vec<Block>,
    body_end: Conv2d,
    up: Vec<Conv2d>,
    hr: Conv2d,
    last: Conv2d,
}

impl Layers {
    fn detached(&self) -> Self {
        Self {
            cond: self.cond.iter().map(Conv2d::detached).collect(),
            first: self.first.detached(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    sft: b.sft.iter().map(SftHead::detached).collect(),
                    convs: b.convs.iter().map(Conv2d::detached).collect(),
                })
                .collect(),
            body_end: self.body_end.detached(),
            up: self.up.iter().map(Conv2d::detached).collect(),
            hr: self.hr.detached(),
            last: self.last.detached(),
        }
    }
}

/// Generator parameters plus bookkeeping.
#[derive(Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    layers: Layers,
    /// Optimizer steps applied so far.
    pub step: u64,
    frozen: bool,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, dtype, device);
        let (c, cc) = (config.channels, config.cond_channels);
        let k = Init::Kaiming { scale: 1.0 };
        let k_res = Init::Kaiming { scale: 0.1 };
        let cond = vec![
            store.conv("cond.0", 1, cc, 3, 1, k)?,
            store.conv("cond.1", cc, cc, 3, 1, k)?,
            store.conv("cond.2", cc, cc, 1, 1, k)?,
        ];
        let first = store.conv("first", 3, c, 3, 1, k)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut sft = Vec::new();
            let mut convs = Vec::new();
            for s in 0..config.sft_per_block {
                sft.push(SftHead::new(
                    &mut store,
                    &format!("block{b}.sft{s}"),
                    cc,
                    c,
                )?);
                convs.push(store.conv(&format!("block{b}.conv{s}"), c, c, 3, 1, k_res)?);
            }
            blocks.push(Block { sft, convs });
        }
        let body_end = store.conv("body_end", c, c, 3, 1, k)?;
        let u = config.upsampler_channels;
        let up = (0..config.scale.trailing_zeros())
            .map(|i| store.conv(&format!("up{i}"), if i == 0 { c } else { u }, u, 3, 1, k))
            .collect::<Result<_>>()?;
        let hr = store.conv("hr", u, u, 3, 1, k)?;
        let last = store.conv("last", u, 3, 3, 1, k)?;
        Ok(Self {
            config,
            store,
            layers: Layers {
                cond,
                first,
                blocks,
                body_end,
                up,
                hr,
                last,
            },
            step: 0,
            frozen: false,
        })
    }

    /// Returns the generator with its parameters excluded from autograd.
    pub fn freeze(mut self) -> Self {
        self.layers = self.layers.detached();
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Digest over parameter contents.
    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    /// Shared conditions for an `N×1×h×w` objective map, kept at map resolution.
    pub fn condition_branch(&self, map: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = map.dims4()?;
        if c != 1 {
            return Err(Error::domain(format!(
                "objective map must have 1 channel, got {c}"
            )));
        }
        let l = &self.layers.cond;
        let h = leaky_relu(&l[0].forward(map)?, 0.1)?;
        let h = leaky_relu(&l[1].forward(&h)?, 0.1)?;
        l[2].forward(&h)
    }

    /// SR for an `N×3×h×w` batch and an `N×1×h×w` map batch.
    pub fn forward(&self, x: &Tensor, map: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mn, _, mh, mw) = map.dims4()?;
        if c != 3 || mn != n || (mh, mw) != (h, w) {
            return Err(Error::domain(format!(
                "map {:?} does not match LR input {:?}",
                map.dims(),
                x.dims()
            )));
        }
        let cond = self.condition_branch(map)?;
        let l = &self.layers;
        let fea = l.first.forward(x)?;
        let mut trunk = fea.clone();
        for block in &l.blocks {
            let mut h = trunk.clone();
            for (i, (sft, conv)) in block.sft.iter().zip(&block.convs).enumerate() {
                if i > 0 {
                    h = leaky_relu(&h, 0.2)?;
                }
                h = conv.forward(&sft_modulate(&h, &cond, sft)?)?;
            }
            trunk = (trunk + h)?;
        }
        let mut y = (fea + l.body_end.forward(&trunk)?)?;
        for conv in &l.up {
            let (_, _, yh, yw) = y.dims4()?;
            y = leaky_relu(&conv.forward(&upsample_nearest(&y, yh * 2, yw * 2)?)?, 0.2)?;
        }
        let y = leaky_relu(&l.hr.forward(&y)?, 0.2)?;
        let out = l.last.forward(&y)?;
        if self.config.image_skip {
            Ok((out + upscale_bicubic_tensor(x, self.config.scale)?)?)
        } else {
            Ok(out)
        }
    }

    /// `G(x | map)` for a single image, unclamped.
    pub fn super_resolve(&self, x: &Image, map: &ObjectiveMap) -> Result<Image> {
        let (_, h, w) = x.dim();
        if map.dims() != (h, w) {
            return Err(Error::domain(format!(
                "map {:?} does not match LR input {h}x{w}",
                map.dims()
            )));
        }
        let dt = self.store.dtype();
        let dev = self.store.device();
        let xt = image_to_tensor(x, dt, dev)?;
        let mt = map_to_tensor(map.values(), dt, dev)?;
        let out = self.forward(&xt, &mt)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }

    pub fn sft_heads(&self) -> impl Iterator<Item = &SftHead> {
        self.layers.blocks.iter().flat_map(|b| b.sft.iter())
    }

    fn metadata(&self, kind: &str) -> Result<BTreeMap<String, String>> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), kind.into());
        meta.insert(
            "generator_config".into(),
            serde_json::to_string(&self.config)?,
        );
        meta.insert("config_digest".into(), self.config.digest());
        meta.insert("step".into(), self.step.to_string());
        Ok(meta)
    }

    /// Writes parameters only; returns the file digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        write_archive(
            path,
            &self.store.named_tensors(),
            self.metadata("generator")?,
        )
    }

    /// Loads a generator from a checkpoint (plain or training archive).
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, String)> {
        let archive = read_archive(path, device)?;
        let kind = archive.meta("kind")?;
        if kind != "generator" && kind != "generator_training" {
            return Err(Error::Load {
                path: path.to_path_buf(),
                detail: format!("expected a generator checkpoint, found `{kind}`"),
            });
        }
        let config: GeneratorConfig = serde_json::from_str(archive.meta("generator_config")?)?;
        let mut g = Generator::new(config, dtype, device)?;
        let params: BTreeMap<String, Tensor> = archive
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("gen.").or(Some(k.as_str())).map(|k| (k, v)))
            .filter(|(k, _)| g.store.vars().contains_key(*k))
            .map(|(k, v)| Ok((k.to_string(), v.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        g.store.load(&params)?;
        g.step = archive
            .meta("step")?
            .parse()
            .map_err(|_| Error::config("checkpoint step is not an integer"))?;
        Ok((g, archive.file_digest))
    }
}

/// How `t` is drawn for each batch element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TSampler {
    Uniform,
    Fixed(f64),
}

/// Result of one generator/discriminator update.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    /// One report per batch element, each with its own `t`.
    pub per_sample: Vec<LossReport>,
    /// Componentwise batch mean.
    pub mean: LossReport,
}

/// Generator, discriminator, their optimizers and the `t` stream.
#[derive(Debug)]
pub struct GeneratorTrainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub trajectory: ObjectiveTrajectory,
    pub sampler: TSampler,
    rng: ChaCha8Rng,
}

impl GeneratorTrainer {
    pub fn new(
        generator: Generator,
        disc_config: DiscriminatorConfig,
        adam: AdamConfig,
        trajectory: ObjectiveTrajectory,
        seed: u64,
    ) -> Result<Self> {
        if generator.is_frozen() {
            return Err(Error::config("cannot train a frozen generator"));
        }
        let dtype = generator.store.dtype();
        let device = generator.store.device().clone();
        let discriminator =
            Discriminator::new(disc_config, seed.wrapping_add(0x5eed), dtype, &device)?;
        let opt_g = Adam::new(&generator.store, adam)?;
        let opt_d = Adam::new(&discriminator.store, adam)?;
        Ok(Self {
            generator,
            discriminator,
            opt_g,
            opt_d,
            trajectory,
            sampler: TSampler::Uniform,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draws from the stream even under `Fixed`, so the stream position
    /// depends only on the step count and resume can replay it.
    fn sample_ts(&mut self, n: usize) -> Vec<f64> {
        let drawn: Vec<f64> = (0..n).map(|_| self.rng.random::<f64>()).collect();
        match self.sampler {
            TSampler::Uniform => drawn,
            TSampler::Fixed(t) => vec![t; n],
        }
    }

    /// One generator update followed by one discriminator update.
    ///
    /// `lr` is `N×3×h×w`, `hr` is `N×3×(s·h)×(s·w)`.
    pub fn step(&mut self, lr: &Tensor, hr: &Tensor, backbone: &Backbone) -> Result<StepReport> {
        let (n, _, h, w) = lr.dims4()?;
        if n == 0 {
            return Err(Error::domain("empty batch"));
        }
        let s = self.generator.config.scale;
        if hr.dims() != [n, 3, h * s, w * s] {
            return Err(Error::domain(format!(
                "HR batch {:?} is not scale {s} of LR batch {:?}",
                hr.dims(),
                lr.dims()
            )));
        }
        let ts = self.sample_ts(n);
        let weights: Vec<ObjectiveWeights> = ts
            .iter()
            .map(|&t| self.trajectory.eval(t))
            .collect::<Result<_>>()?;
        let dt = lr.dtype();
        let dev = lr.device();
        let maps = Tensor::from_vec(ts.clone(), (n, 1, 1, 1), dev)?
            .to_dtype(dt)?
            .broadcast_as((n, 1, h, w))?
            .contiguous()?;

        let sr = self.generator.forward(lr, &maps)?;
        let frozen_d = self.discriminator.detached();
        let real_logits = frozen_d.discriminate(hr)?;
        let fake_logits = frozen_d.discriminate(&sr)?;
        let (_, d_before) = adversarial_losses(&real_logits, &fake_logits.detach())?;
        let inputs = LossInputs {
            sr: &sr,
            hr,
            real_logits: &real_logits,
            fake_logits: &fake_logits,
            adv_disc: crate::nn::scalar(&d_before)?,
        };
        let (loss, per_sample) = combined_loss_per_sample(&inputs, &weights, Some(&ts), backbone)?;
        let mean = mean_report(&per_sample);
        let step = self.generator.step;
        if !mean.is_finite() || per_sample.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                step,
                snapshot: serde_json::to_string(&per_sample)?,
            });
        }
        self.opt_g.step(&loss.backward()?)?;

        let sr_fixed = sr.detach();
        let real = self.discriminator.discriminate(hr)?;
        let fake = self.discriminator.discriminate(&sr_fixed)?;
        let (_, d_loss) = adversarial_losses(&real, &fake)?;
        self.opt_d.step(&d_loss.backward()?)?;

        self.generator.step += 1;
        Ok(StepReport {
            step,
            per_sample,
            mean,
        })
    }

    /// Writes generator, discriminator and both optimizer states.
    pub fn save(&self, path: &Path) -> Result<String> {
        let mut tensors = Vec::new();
        let prefix = |p: &str, v: Vec<(String, Tensor)>| {
            v.into_iter()
                .map(move |(k, t)| (format!("{p}{k}"), t))
                .collect::<Vec<_>>()
        };
        tensors.extend(prefix("gen.", self.generator.store.named_tensors()));
        tensors.extend(prefix("gen.", self.opt_g.state_tensors()));
        tensors.extend(prefix("disc.", self.discriminator.store.named_tensors()));
        tensors.extend(prefix("disc.", self.opt_d.state_tensors()));
        let mut meta = self.generator.metadata("generator_training")?;
        meta.insert(
            "discriminator_config".into(),
            serde_json::to_string(&self.discriminator.config)?,
        );
        meta.insert("adam".into(), serde_json::to_string(&self.opt_g.config)?);
        write_archive(path, &tensors, meta)
    }

    /// Restores a trainer saved by [`GeneratorTrainer::save`]; the `t`
    /// stream restarts from `seed` advanced past the recorded step count.
    pub fn resume(
        path: &Path,
        trajectory: ObjectiveTrajectory,
        seed: u64,
        batch: usize,
        device: &Device,
    ) -> Result<Self> {
        let archive = read_archive(path, device)?;
        if archive.meta("kind")? != "generator_training" {
            return Err(Error::Load {
                path: path.to_path_buf(),
                detail: "not a training checkpoint".into(),
            });
        }
        let gcfg: GeneratorConfig = serde_json::from_str(archive.meta("generator_config")?)?;
        let dcfg: DiscriminatorConfig =
            serde_json::from_str(archive.meta("discriminator_config")?)?;
        let adam: AdamConfig = serde_json::from_str(archive.meta("adam")?)?;
        let step: u64 = archive
            .meta("step")?
            .parse()
            .map_err(|_| Error::config("checkpoint step is not an integer"))?;
        let dtype = archive
            .tensors
            .values()
            .next()
            .map(Tensor::dtype)
            .unwrap_or(DType::F32);
        let gen = Generator::new(gcfg, dtype, device)?;
        let mut tr = GeneratorTrainer::new(gen, dcfg, adam, trajectory, seed)?;
        let part = |p: &str| -> BTreeMap<String, Tensor> {
            archive
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(p).map(|k| (k.to_string(), v.clone())))
                .collect()
        };
        let (g, d) = (part("gen."), part("disc."));
        tr.generator.store.load(&g)?;
        tr.opt_g.load_state(step, &g)?;
        tr.discriminator.store.load(&d)?;
        tr.opt_d.load_state(step, &d)?;
        tr.generator.step = step;
        for _ in 0..step {
            tr.sample_ts(batch);
        }
        Ok(tr)
    }
}
