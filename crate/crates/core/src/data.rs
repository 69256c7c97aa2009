//! Paired datasets, bicubic degradation, aligned patch sampling, and the
//! procedural toy corpus.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::file_digest;
use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, crop, load_png, save_png, Image};
use crate::objective::ObjectiveMap;
use crate::predictor::NamedPair;
use crate::resize::downscale_bicubic;

/// Center-crops `img` so both sides are multiples of `scale`.
pub fn crop_to_multiple(img: &Image, scale: usize) -> Image {
    let (_, h, w) = img.dim();
    let (nh, nw) = (h / scale * scale, w / scale * scale);
    crop(img, (h - nh) / 2, (w - nw) / 2, nh, nw)
}

/// Antialiased bicubic downscale; indivisible images are center-cropped
/// first, with a warning.
pub fn degrade_bicubic(hr: &Image, scale: usize) -> Result<Image> {
    if scale == 0 {
        return Err(Error::domain("scale must be positive"));
    }
    let (_, h, w) = hr.dim();
    if h % scale != 0 || w % scale != 0 {
        log::warn!("HR {h}x{w} is not divisible by {scale}; center-cropping");
        return downscale_bicubic(&crop_to_multiple(hr, scale), scale);
    }
    downscale_bicubic(hr, scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthesized,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub hr_path: PathBuf,
    pub lr_path: Option<PathBuf>,
    pub hr_digest: String,
    pub lr_digest: Option<String>,
}

/// HR images (and optionally externally provided LR images) on disk.
///
/// A dataset directory holds `*.png` HR images; a sibling `lr/`
/// subdirectory with identically named files marks external LR inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub scale: usize,
    pub provenance: Provenance,
    pub entries: Vec<PairEntry>,
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

impl PairedDataset {
    pub fn open(root: &Path, scale: usize) -> Result<Self> {
        let hr = pngs_in(root)?;
        if hr.is_empty() {
            return Err(Error::config(format!(
                "no PNG images in {}",
                root.display()
            )));
        }
        let lr_dir = root.join("lr");
        let external = lr_dir.is_dir();
        let entries = hr
            .into_iter()
            .map(|hr_path| {
                let id = hr_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let lr_path = external.then(|| lr_dir.join(hr_path.file_name().expect("file")));
                if let Some(p) = &lr_path {
                    if !p.is_file() {
                        return Err(Error::config(format!("missing LR image {}", p.display())));
                    }
                }
                Ok(PairEntry {
                    hr_digest: file_digest(&hr_path)?,
                    lr_digest: lr_path.as_deref().map(file_digest).transpose()?,
                    id,
                    hr_path,
                    lr_path,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            scale,
            provenance: if external {
                Provenance::External
            } else {
                Provenance::Synthesized
            },
            entries,
        })
    }

    /// Loads every pair; HR images are cropped to a scale multiple.
    pub fn load(&self) -> Result<Vec<NamedPair>> {
        self.entries
            .iter()
            .map(|e| {
                let hr = crop_to_multiple(&load_png(&e.hr_path)?, self.scale);
                let lr = match &e.lr_path {
                    Some(p) => load_png(p)?,
                    None => degrade_bicubic(&hr, self.scale)?,
                };
                let (_, h, w) = lr.dim();
                if hr.dim() != (3, h * self.scale, w * self.scale) {
                    return Err(Error::config(format!(
                        "pair {}: LR {:?} inconsistent with HR {:?} at scale {}",
                        e.id,
                        lr.dim(),
                        hr.dim(),
                        self.scale
                    )));
                }
                Ok(NamedPair {
                    id: e.id.clone(),
                    lr,
                    hr,
                })
            })
            .collect()
    }

    /// `id → digest` of every file the dataset reads.
    pub fn digests(&self) -> std::collections::BTreeMap<String, String> {
        let mut m = std::collections::BTreeMap::new();
        for e in &self.entries {
            m.insert(format!("{}/hr", e.id), e.hr_digest.clone());
            if let Some(d) = &e.lr_digest {
                m.insert(format!("{}/lr", e.id), d.clone());
            }
        }
        m
    }
}

/// Augmentations applied identically to every element of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    #[serde(default = "yes")]
    pub flips: bool,
    #[serde(default = "yes")]
    pub rot90: bool,
}

fn yes() -> bool {
    true
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            flips: true,
            rot90: true,
        }
    }
}

/// Aligned crops from one pair (and optionally its objective map).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub lr: Image,
    pub hr: Image,
    pub map: Option<Array2<f32>>,
    /// LR crop origin `(top, left)`.
    pub origin: (usize, usize),
}

fn orient3(img: &Image, hflip: bool, vflip: bool, transpose: bool) -> Image {
    let mut v = img.view();
    if hflip {
        v.invert_axis(Axis(2));
    }
    if vflip {
        v.invert_axis(Axis(1));
    }
    if transpose {
        v.swap_axes(1, 2);
    }
    v.as_standard_layout().to_owned()
}

fn orient2(m: &Array2<f32>, hflip: bool, vflip: bool, transpose: bool) -> Array2<f32> {
    let mut v = m.view();
    if hflip {
        v.invert_axis(Axis(1));
    }
    if vflip {
        v.invert_axis(Axis(0));
    }
    if transpose {
        v.swap_axes(0, 1);
    }
    v.as_standard_layout().to_owned()
}

/// Draws one aligned patch: LR origin `o`, HR origin `scale·o`. Returns
/// `None` (and logs) when the pair is smaller than the patch.
pub fn sample_patches(
    pair: &NamedPair,
    map: Option<&ObjectiveMap>,
    lr_patch: usize,
    scale: usize,
    augment: Augment,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Patch>> {
    let (_, h, w) = pair.lr.dim();
    if let Some(m) = map {
        if m.dims() != (h, w) {
            return Err(Error::domain(format!(
                "pair {}: map {:?} does not match LR {h}x{w}",
                pair.id,
                m.dims()
            )));
        }
    }
    if h < lr_patch || w < lr_patch {
        log::info!(
            "skipping {}: LR {h}x{w} smaller than patch {lr_patch}",
            pair.id
        );
        return Ok(None);
    }
    let top = rng.random_range(0..=h - lr_patch);
    let left = rng.random_range(0..=w - lr_patch);
    let hflip = augment.flips && rng.random_bool(0.5);
    let vflip = augment.flips && rng.random_bool(0.5);
    let transpose = augment.rot90 && rng.random_bool(0.5);
    let lr = crop(&pair.lr, top, left, lr_patch, lr_patch);
    let hp = lr_patch * scale;
    let hr = crop(&pair.hr, top * scale, left * scale, hp, hp);
    let map = map.map(|m| {
        m.values()
            .slice(s![top..top + lr_patch, left..left + lr_patch])
            .to_owned()
    });
    Ok(Some(Patch {
        lr: orient3(&lr, hflip, vflip, transpose),
        hr: orient3(&hr, hflip, vflip, transpose),
        map: map.map(|m| orient2(&m, hflip, vflip, transpose)),
        origin: (top, left),
    }))
}

/// A batch of patches as tensors.
pub struct PatchBatch {
    pub lr: Tensor,
    pub hr: Tensor,
    pub map: Option<Tensor>,
}

/// Patch geometry and augmentation shared by every draw of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub lr_patch: usize,
    pub scale: usize,
    pub augment: Augment,
}

/// Draws `batch` patches from uniformly chosen pairs.
pub fn sample_batch(
    pairs: &[NamedPair],
    maps: Option<&[ObjectiveMap]>,
    batch: usize,
    spec: PatchSpec,
    rng: &mut ChaCha8Rng,
    dtype: DType,
    device: &Device,
) -> Result<PatchBatch> {
    let PatchSpec {
        lr_patch,
        scale,
        augment,
    } = spec;
    if pairs.is_empty() || batch == 0 {
        return Err(Error::domain("need a non-empty dataset and batch"));
    }
    let mut patches = Vec::with_capacity(batch);
    let mut attempts = 0;
    while patches.len() < batch {
        attempts += 1;
        if attempts > 100 * batch {
            return Err(Error::config(format!(
                "no image is large enough for LR patch {lr_patch}"
            )));
        }
        let i = rng.random_range(0..pairs.len());
        let m = maps.map(|m| &m[i]);
        if let Some(p) = sample_patches(&pairs[i], m, lr_patch, scale, augment, rng)? {
            patches.push(p);
        }
    }
    let lr: Vec<&Image> = patches.iter().map(|p| &p.lr).collect();
    let hr: Vec<&Image> = patches.iter().map(|p| &p.hr).collect();
    let map = match maps {
        Some(_) => {
            let data: Vec<f32> = patches
                .iter()
                .flat_map(|p| p.map.as_ref().expect("map requested").iter().copied())
                .collect();
            Some(Tensor::from_vec(data, (batch, 1, lr_patch, lr_patch), device)?.to_dtype(dtype)?)
        }
        None => None,
    };
    Ok(PatchBatch {
        lr: batch_to_tensor(&lr, dtype, device)?,
        hr: batch_to_tensor(&hr, dtype, device)?,
        map,
    })
}

fn smoothstep_edge(d: f64, width: f64) -> f64 {
    0.5 * (1.0 + (d / width).tanh())
}

/// A deterministic, band-limited procedural image: smooth gradients, soft
/// blobs, soft edges and gentle stripes.
pub fn toy_image(seed: u64, h: usize, w: usize) -> Image {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array3::<f64>::zeros((3, h, w));
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grad: [(f64, f64); 3] =
        std::array::from_fn(|_| (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.25),
                std::array::from_fn(|_| rng.random_range(-0.25..0.25)),
            )
        })
        .collect();
    let edges: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            (
                a.cos(),
                a.sin(),
                rng.random_range(-0.3..0.3),
                std::array::from_fn(|_| rng.random_range(-0.2..0.2)),
            )
        })
        .collect();
    let stripes: (f64, f64, f64, f64) = (
        rng.random_range(3.0..7.0),
        rng.random_range(0.0..std::f64::consts::PI),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.03..0.08),
    );
    let scale = h.max(w) as f64;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / scale, y as f64 / scale);
            for c in 0..3 {
                let mut val = base[c] + grad[c].0 * (u - 0.5) + grad[c].1 * (v - 0.5);
                for (bx, by, r, amp) in &blobs {
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    val += amp[c] * (-d2 / (2.0 * r * r)).exp();
                }
                for (nx, ny, off, amp) in &edges {
                    let d = nx * (u - 0.5) + ny * (v - 0.5) - off;
                    val += amp[c] * (smoothstep_edge(d, 0.04) - 0.5);
                }
                let (f, ang, ph, amp) = stripes;
                let proj = u * ang.cos() + v * ang.sin();
                val += amp * (std::f64::consts::TAU * f * proj + ph + c as f64).sin();
                img[[c, y, x]] = val.clamp(0.02, 0.98);
            }
        }
    }
    img.mapv(|v| v as f32)
}

/// Writes `count` toy images named `toy_XX.png`; returns their paths.
pub fn write_toy_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let p = dir.join(format!("toy_{i:02}.png"));
            save_png(&p, &toy_image(seed.wrapping_add(i as u64), size, size))?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::lr_psnr;
    use crate::resize::upscale_bicubic;
    use rand::SeedableRng;

    #[test]
    fn constant_image_stays_constant() -> Result<()> {
        let hr = Array3::from_elem((3, 32, 32), 0.42f32);
        let lr = degrade_bicubic(&hr, 4)?;
        assert_eq!(lr.dim(), (3, 8, 8));
        assert!(lr.iter().all(|v| (v - 0.42).abs() < 1e-6));
        Ok(())
    }

    #[test]
    fn indivisible_is_center_cropped() -> Result<()> {
        let hr = Array3::from_shape_fn((3, 34, 37), |(_, y, x)| (y * 100 + x) as f32 / 4000.0);
        let lr = degrade_bicubic(&hr, 4)?;
        assert_eq!(lr.dim(), (3, 8, 9));
        let cropped = crop_to_multiple(&hr, 4);
        assert_eq!(cropped[[0, 0, 0]], hr[[0, 1, 0]]);
        assert_eq!(cropped.dim(), (3, 32, 36));
        Ok(())
    }

    #[test]
    fn down_up_down_is_idempotent_on_ramps() -> Result<()> {
        // Exact for images the kernel reproduces (affine ramps), away from the
        // reflected border.
        let hr = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
            0.2 + 0.004 * x as f32 + 0.003 * y as f32 + 0.05 * c as f32
        });
        let lr = degrade_bicubic(&hr, 4)?;
        let again = degrade_bicubic(&upscale_bicubic(&lr, 4)?, 4)?;
        let m = 4;
        let inner = |a: &Image| a.slice(s![.., m..16 - m, m..16 - m]).to_owned();
        let err = (&inner(&again) - &inner(&lr))
            .mapv(f32::abs)
            .fold(0.0f32, |a, b| a.max(*b));
        assert!(err <= 1e-6, "{err}");
        Ok(())
    }

    #[test]
    fn patches_are_aligned_and_reproducible() -> Result<()> {
        let hr = toy_image(3, 96, 96);
        let lr = degrade_bicubic(&hr, 4)?;
        let pair = NamedPair {
            id: "a".into(),
            lr,
            hr,
        };
        let aug = Augment {
            flips: false,
            rot90: false,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..4 {
            let a = sample_patches(&pair, None, 16, 4, aug, &mut r1)?.unwrap();
            let b = sample_patches(&pair, None, 16, 4, aug, &mut r2)?.unwrap();
            assert_eq!(a, b);
            assert_eq!(a.hr.dim(), (3, 64, 64));
            let d = degrade_bicubic(&a.hr, 4)?;
            let m = 3;
            let err = (&d.slice(s![.., m..16 - m, m..16 - m])
                - &a.lr.slice(s![.., m..16 - m, m..16 - m]))
                .mapv(f32::abs)
                .fold(0.0f32, |x, y| x.max(*y));
            assert!(err <= 1e-6, "{err}");
        }
        let small = NamedPair {
            id: "s".into(),
            lr: Array3::zeros((3, 8, 8)),
            hr: Array3::zeros((3, 32, 32)),
        };
        assert!(sample_patches(&small, None, 16, 4, aug, &mut r1)?.is_none());
        Ok(())
    }

    #[test]
    fn augmentation_applies_identically() -> Result<()> {
        let hr = toy_image(4, 64, 64);
        let lr = degrade_bicubic(&hr, 4)?;
        let map = ObjectiveMap::new(Array2::from_shape_fn((16, 16), |(y, x)| {
            (y * 16 + x) as f32 / 255.0
        }))?;
        let pair = NamedPair {
            id: "a".into(),
            lr,
            hr,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..8 {
            let p =
                sample_patches(&pair, Some(&map), 16, 4, Augment::default(), &mut rng)?.unwrap();
            let d = degrade_bicubic(&p.hr, 4)?;
            let err = (&d.slice(s![.., 3..13, 3..13]) - &p.lr.slice(s![.., 3..13, 3..13]))
                .mapv(f32::abs)
                .fold(0.0f32, |x, y| x.max(*y));
            assert!(err <= 1e-6);
            let m = p.map.unwrap();
            let mut sorted: Vec<f32> = m.iter().copied().collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(sorted[0], 0.0);
        }
        Ok(())
    }

    #[test]
    fn toy_images_are_smooth_enough_for_lr_consistency() -> Result<()> {
        for seed in 0..4 {
            let hr = toy_image(seed, 96, 96);
            let lr = degrade_bicubic(&hr, 4)?;
            let p = lr_psnr(&upscale_bicubic(&lr, 4)?, &lr, 4)?;
            assert!(p >= 45.0, "seed {seed}: {p}");
        }
        Ok(())
    }
}
