//! Reconstruction, per-level perceptual and relativistic-average adversarial
//! losses, their weighted combination, and the patch discriminator.
//!
//! Every loss uses mean reduction. Batch functions also expose per-sample
//! values so that each element of a batch can carry its own weight vector.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureTaps};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, softplus, Conv2d, Init, Linear, ParamStore};
use crate::objective::{ObjectiveWeights, NUM_LEVELS};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::domain(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference of each batch element, shape `[N]`.
fn per_sample_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.dim(0)?;
    Ok(a.sub(b)?.abs()?.reshape((n, ()))?.mean(1)?)
}

/// Mean absolute pixel difference.
pub fn rec_loss(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    same_shape(sr, hr, "rec_loss")?;
    Ok(sr.sub(hr)?.abs()?.mean_all()?)
}

/// Mean absolute difference between the `level` taps of `sr` and `hr`.
pub fn perceptual_level_loss(
    sr: &Tensor,
    hr: &Tensor,
    level: usize,
    backbone: &Backbone,
) -> Result<Tensor> {
    if level >= NUM_LEVELS {
        return Err(Error::domain(format!(
            "perceptual level {level} outside 0..5"
        )));
    }
    same_shape(sr, hr, "perceptual_level_loss")?;
    let a = backbone.extract_taps(sr)?;
    let b = backbone.extract_taps(hr)?;
    Ok(a.tap(level).sub(b.tap(level))?.abs()?.mean_all()?)
}

/// Per-sample perceptual losses at every level, each of shape `[N]`.
pub fn perceptual_losses_per_sample(sr: &FeatureTaps, hr: &FeatureTaps) -> Result<Vec<Tensor>> {
    sr.taps()
        .iter()
        .zip(hr.taps())
        .map(|(a, b)| per_sample_l1(a, b))
        .collect()
}

fn flat_logits(x: &Tensor) -> Result<Tensor> {
    let n = x.elem_count();
    if n == 0 {
        return Err(Error::domain("logit set must be non-empty"));
    }
    Ok(x.reshape(n)?)
}

/// Per-sample relativistic-average generator loss, shape `[N_fake]`.
pub fn adversarial_gen_per_sample(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = flat_logits(real_logits)?;
    let fake = flat_logits(fake_logits)?;
    let real_rel = real.broadcast_sub(&fake.mean_keepdim(0)?)?;
    let fake_rel = fake.broadcast_sub(&real.mean_keepdim(0)?)?;
    if real_rel.dim(0)? != fake_rel.dim(0)? {
        return Err(Error::domain("real and fake logit sets differ in size"));
    }
    // real labelled fake, fake labelled real
    Ok(((softplus(&real_rel)? + softplus(&fake_rel.neg()?)?)? * 0.5)?)
}

/// Relativistic-average GAN losses `(generator, discriminator)`.
pub fn adversarial_losses(real_logits: &Tensor, fake_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let real = flat_logits(real_logits)?;
    let fake = flat_logits(fake_logits)?;
    if real.dim(0)? != fake.dim(0)? {
        return Err(Error::domain("real and fake logit sets differ in size"));
    }
    let real_rel = real.broadcast_sub(&fake.mean_keepdim(0)?)?;
    let fake_rel = fake.broadcast_sub(&real.mean_keepdim(0)?)?;
    let gen =
        ((softplus(&real_rel)?.mean_all()? + softplus(&fake_rel.neg()?)?.mean_all()?)? * 0.5)?;
    let disc =
        ((softplus(&real_rel.neg()?)?.mean_all()? + softplus(&fake_rel)?.mean_all()?)? * 0.5)?;
    Ok((gen, disc))
}

/// Scalar breakdown of one weighted objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub per_levels: [f64; NUM_LEVELS],
    pub adv_gen: f64,
    pub adv_disc: f64,
    pub combined: f64,
    pub weights_used: ObjectiveWeights,
    pub t_used: Option<f64>,
}

impl LossReport {
    /// `weights · (rec, adv_gen, per_levels)`.
    pub fn recombine(&self) -> f64 {
        let w = &self.weights_used;
        w.rec * self.rec
            + w.adv * self.adv_gen
            + w.per
                .iter()
                .zip(self.per_levels.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.rec.is_finite()
            && self.per_levels.iter().all(|v| v.is_finite())
            && self.adv_gen.is_finite()
            && self.adv_disc.is_finite()
            && self.combined.is_finite()
    }
}

/// Inputs to [`combined_loss_per_sample`].
pub struct LossInputs<'a> {
    pub sr: &'a Tensor,
    pub hr: &'a Tensor,
    pub real_logits: &'a Tensor,
    pub fake_logits: &'a Tensor,
    /// Discriminator loss to record; not part of the generator objective.
    pub adv_disc: f64,
}

/// Per-sample weighted objective.
///
/// Returns the batch-mean combined loss as a differentiable scalar, and one
/// report per batch element.
pub fn combined_loss_per_sample(
    inputs: &LossInputs<'_>,
    weights: &[ObjectiveWeights],
    ts: Option<&[f64]>,
    backbone: &Backbone,
) -> Result<(Tensor, Vec<LossReport>)> {
    let LossInputs {
        sr,
        hr,
        real_logits,
        fake_logits,
        adv_disc,
    } = *inputs;
    same_shape(sr, hr, "combined_loss")?;
    let n = sr.dim(0)?;
    if weights.len() != n {
        return Err(Error::domain(format!(
            "{} weight vectors for a batch of {n}",
            weights.len()
        )));
    }
    let rec = per_sample_l1(sr, hr)?;
    let taps_sr = backbone.extract_taps(sr)?;
    let taps_hr = backbone.extract_taps(&hr.detach())?;
    let per = perceptual_losses_per_sample(&taps_sr, &taps_hr)?;
    let adv = adversarial_gen_per_sample(real_logits, fake_logits)?;

    let dev = sr.device();
    let dt = sr.dtype();
    let column = |f: &dyn Fn(&ObjectiveWeights) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = weights.iter().map(f).collect();
        Ok(Tensor::from_vec(v, n, dev)?.to_dtype(dt)?)
    };
    let mut total = (rec.mul(&column(&|w| w.rec)?)? + adv.mul(&column(&|w| w.adv)?)?)?;
    for (l, p) in per.iter().enumerate() {
        total = (total + p.mul(&column(&|w| w.per[l])?)?)?;
    }
    let combined = total.mean_all()?;

    let to_vec = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
    let rec_v = to_vec(&rec)?;
    let adv_v = to_vec(&adv)?;
    let per_v: Vec<Vec<f64>> = per.iter().map(to_vec).collect::<Result<_>>()?;
    let reports = (0..n)
        .map(|i| {
            let mut per_levels = [0.0; NUM_LEVELS];
            for l in 0..NUM_LEVELS {
                per_levels[l] = per_v[l][i];
            }
            let mut r = LossReport {
                rec: rec_v[i],
                per_levels,
                adv_gen: adv_v[i],
                adv_disc,
                combined: 0.0,
                weights_used: weights[i],
                t_used: ts.map(|t| t[i]),
            };
            r.combined = r.recombine();
            r
        })
        .collect();
    Ok((combined, reports))
}

/// Weighted objective with one weight vector for the whole batch.
pub fn combined_loss(
    sr: &Tensor,
    hr: &Tensor,
    real_logits: &Tensor,
    fake_logits: &Tensor,
    weights: &ObjectiveWeights,
    backbone: &Backbone,
) -> Result<(Tensor, LossReport)> {
    let n = sr.dim(0)?;
    let (_, adv_disc) = adversarial_losses(real_logits, fake_logits)?;
    let inputs = LossInputs {
        sr,
        hr,
        real_logits,
        fake_logits,
        adv_disc: adv_disc.to_dtype(DType::F64)?.to_scalar::<f64>()?,
    };
    let (total, reports) = combined_loss_per_sample(&inputs, &vec![*weights; n], None, backbone)?;
    Ok((total, mean_report(&reports)))
}

/// Componentwise batch mean; `combined` is recomputed from the means.
///
/// When all elements share one weight vector (and `t`) the mean report obeys
/// the same recombination identity as each element.
pub fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut per_levels = [0.0; NUM_LEVELS];
    for r in reports {
        for l in 0..NUM_LEVELS {
            per_levels[l] += r.per_levels[l] / n;
        }
    }
    let mean = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let w = ObjectiveWeights::from_array(std::array::from_fn(|i| {
        mean(&|r: &LossReport| r.weights_used.to_array()[i])
    }));
    let ts: Vec<f64> = reports.iter().filter_map(|r| r.t_used).collect();
    let mut out = LossReport {
        rec: mean(&|r| r.rec),
        per_levels,
        adv_gen: mean(&|r| r.adv_gen),
        adv_disc: mean(&|r| r.adv_disc),
        combined: 0.0,
        weights_used: w,
        t_used: (ts.len() == reports.len() && !ts.is_empty()).then(|| ts.iter().sum::<f64>() / n),
    };
    out.combined = out.recombine();
    out
}

fn default_disc_base() -> usize {
    32
}
fn default_disc_stages() -> usize {
    4
}
fn default_patch() -> usize {
    64
}

/// Shape of the strided patch discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    #[serde(default = "default_disc_base")]
    pub base_channels: usize,
    #[serde(default = "default_disc_stages")]
    pub stages: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: default_disc_base(),
            stages: default_disc_stages(),
            patch_size: default_patch(),
        }
    }
}

/// A strided conv stack ending in global average pooling and a linear logit.
#[derive(Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub store: ParamStore,
    stem: Conv2d,
    stages: Vec<Conv2d>,
    head: Linear,
}

impl Discriminator {
    pub fn new(
        config: DiscriminatorConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if config.base_channels == 0 || config.stages == 0 {
            return Err(Error::config(
                "discriminator needs positive width and depth",
            ));
        }
        let mut store = ParamStore::new(seed, dtype, device);
        let kaiming = Init::Kaiming { scale: 1.0 };
        let stem = store.conv("stem", 3, config.base_channels, 3, 1, kaiming)?;
        let mut stages = Vec::new();
        let mut cin = config.base_channels;
        for s in 0..config.stages {
            let cout = config.base_channels << s.min(3);
            stages.push(store.conv(&format!("stage{s}"), cin, cout, 3, 2, kaiming)?);
            cin = cout;
        }
        let head = store.linear("head", cin, 1)?;
        Ok(Self {
            config,
            store,
            stem,
            stages,
            head,
        })
    }

    /// A view of this network whose weights do not receive gradients.
    pub fn detached(&self) -> DiscriminatorView {
        DiscriminatorView {
            patch_size: self.config.patch_size,
            stem: self.stem.detached(),
            stages: self.stages.iter().map(Conv2d::detached).collect(),
            head: self.head.detached(),
        }
    }

    fn view(&self) -> DiscriminatorView {
        DiscriminatorView {
            patch_size: self.config.patch_size,
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
        }
    }

    /// One logit per image of an `N×3×P×P` batch.
    pub fn discriminate(&self, images: &Tensor) -> Result<Tensor> {
        self.view().discriminate(images)
    }
}

/// Borrowed-weight evaluation of a [`Discriminator`].
#[derive(Debug, Clone)]
pub struct DiscriminatorView {
    patch_size: usize,
    stem: Conv2d,
    stages: Vec<Conv2d>,
    head: Linear,
}

impl DiscriminatorView {
    pub fn discriminate(&self, images: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = images.dims4()?;
        let p = self.patch_size;
        if c != 3 || h != p || w != p {
            return Err(Error::domain(format!(
                "discriminator expects N×3×{p}×{p}, got {:?}",
                images.dims()
            )));
        }
        let mut x = leaky_relu(&self.stem.forward(images)?, 0.2)?;
        for s in &self.stages {
            x = leaky_relu(&s.forward(&x)?, 0.2)?;
        }
        let pooled = x.mean((2, 3))?;
        Ok(self.head.forward(&pooled)?.reshape(n)?)
    }
}

/// Compares the autograd gradient of a scalar `loss` at `x` with central
/// finite differences over a square window of every channel.
///
/// `probe` is `(row, col, size)`; the result is the norm-wise relative error
/// `|g_fd - g_auto| / |g_fd|` over the probed entries. Run it in f64.
pub fn finite_difference_error(
    loss: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    probe: (usize, usize, usize),
    eps: f64,
) -> Result<f64> {
    let (n, c, h, w) = x.dims4()?;
    let (r0, c0, size) = probe;
    if r0 + size > h || c0 + size > w {
        return Err(Error::domain("probe window outside the input"));
    }
    let var = candle_core::Var::from_tensor(&x.to_dtype(DType::F64)?)?;
    let grads = loss(var.as_tensor())?.backward()?;
    let auto = grads
        .get(var.as_tensor())
        .ok_or_else(|| Error::domain("loss does not depend on the input"))?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(v, (n, c, h, w), x.device())?;
        Ok(loss(&t)?.to_scalar::<f64>()?)
    };
    let (mut num, mut den) = (0.0, 0.0);
    let mut buf = base.clone();
    for b in 0..n {
        for ch in 0..c {
            for r in r0..r0 + size {
                for col in c0..c0 + size {
                    let i = ((b * c + ch) * h + r) * w + col;
                    buf[i] = base[i] + eps;
                    let plus = eval(&buf)?;
                    buf[i] = base[i] - eps;
                    let minus = eval(&buf)?;
                    buf[i] = base[i];
                    let fd = (plus - minus) / (2.0 * eps);
                    num += (fd - auto[i]).powi(2);
                    den += fd * fd;
                }
            }
        }
    }
    Ok(num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::objective::set_b_anchor;

    fn rand_img(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut state = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let v: Vec<f32> = (0..n * 3 * h * w)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) as f32
            })
            .collect();
        Tensor::from_vec(v, (n, 3, h, w), &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn to64(t: &Tensor) -> Tensor {
        t.to_dtype(DType::F64).unwrap()
    }

    #[test]
    fn rec_gradient_matches_finite_differences() -> Result<()> {
        let sr = to64(&rand_img(1, 8, 8, 11));
        let hr = to64(&rand_img(1, 8, 8, 12));
        let err = finite_difference_error(|x| rec_loss(x, &hr), &sr, (0, 0, 8), 1e-6)?;
        assert!(err <= 1e-3, "rec relative error {err}");
        Ok(())
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() -> Result<()> {
        let bb =
            crate::backbone::load_backbone(&BackboneSpec::default())?.with_dtype(DType::F64)?;
        let sr = to64(&rand_img(1, 16, 16, 13));
        let hr = to64(&rand_img(1, 16, 16, 14));
        for level in 0..5 {
            let err = finite_difference_error(
                |x| perceptual_level_loss(x, &hr, level, &bb),
                &sr,
                (4, 4, 8),
                1e-6,
            )?;
            assert!(err <= 1e-3, "level {level} relative error {err}");
        }
        Ok(())
    }

    #[test]
    fn discriminator_input_gradient_matches_finite_differences() -> Result<()> {
        let cfg = DiscriminatorConfig {
            base_channels: 4,
            stages: 2,
            patch_size: 8,
        };
        let d = Discriminator::new(cfg, 3, DType::F64, &Device::Cpu)?;
        let x = to64(&rand_img(2, 8, 8, 15));
        let err =
            finite_difference_error(|x| Ok(d.discriminate(x)?.sum_all()?), &x, (2, 2, 4), 1e-6)?;
        assert!(err <= 1e-3, "discriminator relative error {err}");
        Ok(())
    }

    #[test]
    fn rec_loss_examples() -> Result<()> {
        let a = rand_img(2, 8, 8, 1);
        assert_eq!(s(&rec_loss(&a, &a)?), 0.0);
        let b = (&a + 0.5)?;
        assert!((s(&rec_loss(&a, &b)?) - 0.5).abs() < 1e-6);
        let c = rand_img(2, 8, 8, 2);
        let (va, vc) = (
            a.flatten_all()?.to_vec1::<f32>()?,
            c.flatten_all()?.to_vec1::<f32>()?,
        );
        let mut acc = 0.0f64;
        for i in 0..va.len() {
            acc += (va[i] as f64 - vc[i] as f64).abs();
        }
        assert!((s(&rec_loss(&a, &c)?) - acc / va.len() as f64).abs() < 1e-6);
        assert!(matches!(
            rec_loss(&a, &rand_img(1, 8, 8, 0)),
            Err(Error::Domain(_))
        ));
        Ok(())
    }

    #[test]
    fn perceptual_examples() -> Result<()> {
        let bb = crate::backbone::load_backbone(&BackboneSpec::default())?;
        let a = rand_img(1, 32, 32, 3);
        for l in 0..5 {
            assert_eq!(s(&perceptual_level_loss(&a, &a, l, &bb)?), 0.0);
        }
        let shifted = (&a + 0.2)?;
        assert!(s(&perceptual_level_loss(&a, &shifted, 4, &bb)?) > 0.0);
        assert!(matches!(
            perceptual_level_loss(&a, &a, 5, &bb),
            Err(Error::Domain(_))
        ));

        let b = rand_img(1, 32, 32, 4);
        let ta = bb.extract_taps(&a)?;
        let tb = bb.extract_taps(&b)?;
        for l in 0..5 {
            let oracle = s(&ta.tap(l).sub(tb.tap(l))?.abs()?.mean_all()?);
            assert!((s(&perceptual_level_loss(&a, &b, l, &bb)?) - oracle).abs() < 1e-7);
        }
        Ok(())
    }

    #[test]
    fn adversarial_examples() -> Result<()> {
        let dev = Device::Cpu;
        let r = Tensor::new(&[0.3f64, -1.2, 2.0], &dev)?;
        let (g, d) = adversarial_losses(&r, &r)?;
        assert!((s(&g) - s(&d)).abs() < 1e-15);

        let fake = Tensor::new(&[60.0f64, 61.0, 59.0], &dev)?;
        let real = Tensor::new(&[-60.0f64, -61.0, -59.0], &dev)?;
        let (g, _) = adversarial_losses(&real, &fake)?;
        assert!(s(&g) < 1e-20);

        // direct transcription
        let real = [0.1f64, -0.4, 0.9, 1.3];
        let fake = [-0.2f64, 0.5, 0.05, -1.1];
        let mr = real.iter().sum::<f64>() / 4.0;
        let mf = fake.iter().sum::<f64>() / 4.0;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let bce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let mut g_or = 0.0;
        let mut d_or = 0.0;
        for i in 0..4 {
            g_or += (bce(sig(real[i] - mf), 0.0) + bce(sig(fake[i] - mr), 1.0)) / 8.0;
            d_or += (bce(sig(real[i] - mf), 1.0) + bce(sig(fake[i] - mr), 0.0)) / 8.0;
        }
        let (g, d) = adversarial_losses(&Tensor::new(&real, &dev)?, &Tensor::new(&fake, &dev)?)?;
        assert!((s(&g) - g_or).abs() < 1e-12);
        assert!((s(&d) - d_or).abs() < 1e-12);
        assert!(adversarial_losses(&Tensor::zeros(0, DType::F64, &dev)?, &r).is_err());
        Ok(())
    }

    #[test]
    fn combined_single_term_and_zero() -> Result<()> {
        let bb = crate::backbone::load_backbone(&BackboneSpec::default())?;
        let a = rand_img(2, 16, 16, 5);
        let logits = Tensor::new(&[0.2f32, -0.1], &Device::Cpu)?;
        let (t, rep) = combined_loss(&a, &a, &logits, &logits, &set_b_anchor(0)?, &bb)?;
        assert_eq!(s(&t), 0.0);
        assert_eq!(rep.combined, 0.0);

        let b = (&a + 0.5)?;
        let w = ObjectiveWeights::new(1e-2, 0.0, [0.0; 5]);
        let (t, rep) = combined_loss(&a, &b, &logits, &logits, &w, &bb)?;
        assert!((s(&t) - 5e-3).abs() < 1e-8);
        assert!((rep.combined - 5e-3).abs() < 1e-8);
        Ok(())
    }

    #[test]
    fn discriminator_contract() -> Result<()> {
        let cfg = DiscriminatorConfig {
            base_channels: 8,
            stages: 4,
            patch_size: 32,
        };
        let d1 = Discriminator::new(cfg, 9, DType::F32, &Device::Cpu)?;
        let d2 = Discriminator::new(cfg, 9, DType::F32, &Device::Cpu)?;
        let x = rand_img(3, 32, 32, 7);
        let l1 = d1.discriminate(&x)?.to_vec1::<f32>()?;
        let l2 = d2.discriminate(&x)?.to_vec1::<f32>()?;
        assert_eq!(l1.len(), 3);
        assert_eq!(l1, l2);
        assert!(l1.iter().all(|v| v.is_finite()));
        assert!(matches!(
            d1.discriminate(&rand_img(1, 16, 16, 0)),
            Err(Error::Domain(_))
        ));
        Ok(())
    }
}
