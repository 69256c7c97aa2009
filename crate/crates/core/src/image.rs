//! Planar `C×H×W` float images, PNG IO, and tensor conversion.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// A planar image, channels first, nominally in `[0, 1]`.
pub type Image = Array3<f32>;

pub fn dims(img: &Image) -> (usize, usize, usize) {
    img.dim()
}

/// `(height, width)` of a planar image.
pub fn spatial(img: &Image) -> (usize, usize) {
    let (_, h, w) = img.dim();
    (h, w)
}

pub fn image_to_tensor(img: &Image, dtype: DType, device: &Device) -> Result<Tensor> {
    let (c, h, w) = img.dim();
    let data: Vec<f32> = img.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, c, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks equally-sized images into an `N×C×H×W` tensor.
pub fn batch_to_tensor(imgs: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::domain("cannot batch zero images"))?;
    let shape = first.dim();
    if let Some(bad) = imgs.iter().find(|i| i.dim() != shape) {
        return Err(Error::domain(format!(
            "batch images differ in shape: {:?} vs {:?}",
            shape,
            bad.dim()
        )));
    }
    let data: Vec<f32> = imgs.iter().flat_map(|i| i.iter().copied()).collect();
    let (c, h, w) = shape;
    Ok(Tensor::from_vec(data, (imgs.len(), c, h, w), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    Ok((0..n)
        .map(|i| {
            Array3::from_shape_vec((c, h, w), flat[i * per..(i + 1) * per].to_vec())
                .expect("shape matches")
        })
        .collect())
}

pub fn map_to_tensor(map: &Array2<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = map.dim();
    let data: Vec<f32> = map.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, 1, h, w), device)?.to_dtype(dtype)?)
}

/// Extracts the single-channel maps of an `N×1×H×W` tensor.
pub fn tensor_to_maps(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::domain(format!("expected 1 channel, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..n)
        .map(|i| {
            Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec())
                .expect("shape matches")
        })
        .collect())
}

/// Loads an 8- or 16-bit PNG as RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rgb = match dynimg {
        DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => dynimg.to_rgb16(),
        other => {
            let rgb8 = other.to_rgb8();
            ImageBuffer::from_fn(rgb8.width(), rgb8.height(), |x, y| {
                let p = rgb8.get_pixel(x, y);
                Rgb([p[0] as u16 * 257, p[1] as u16 * 257, p[2] as u16 * 257])
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let mut img = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img[[c, y as usize, x as usize]] = p[c] as f32 / 65535.0;
        }
    }
    Ok(img)
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB image as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::domain(format!(
            "save_png expects 3 channels, got {c}"
        )));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize8(img[[0, y, x]]),
            quantize8(img[[1, y, x]]),
            quantize8(img[[2, y, x]]),
        ])
    });
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    crate::archive::write_atomic(path, &bytes)
}

/// Encodes a `[0, 1]` map as a 16-bit grayscale PNG (0 → 0.0, 65535 → 1.0).
pub fn encode_map_png16(map: &Array2<f32>) -> Result<Vec<u8>> {
    let (h, w) = map.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v as f64 * 65535.0).round() as u16])
    });
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

pub fn decode_map_png16(path: &Path) -> Result<Array2<f32>> {
    let dynimg = image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let DynamicImage::ImageLuma16(buf) = dynimg else {
        return Err(Error::Load {
            path: path.to_path_buf(),
            detail: "objective maps must be 16-bit single-channel PNG".into(),
        });
    };
    let (w, h) = buf.dimensions();
    let mut map = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in buf.enumerate_pixels() {
        map[[y as usize, x as usize]] = (p[0] as f64 / 65535.0) as f32;
    }
    Ok(map)
}

/// ITU-R BT.601 luma of an RGB image.
pub fn luminance(img: &Image) -> Array2<f64> {
    let r = img.index_axis(Axis(0), 0);
    let g = img.index_axis(Axis(0), 1);
    let b = img.index_axis(Axis(0), 2);
    let mut out = Array2::zeros(r.dim());
    ndarray::Zip::from(&mut out)
        .and(&r)
        .and(&g)
        .and(&b)
        .for_each(|o, &r, &g, &b| {
            *o = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
        });
    out
}

/// Crops `img` to the window starting at `(top, left)`.
pub fn crop(img: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    img.slice(ndarray::s![.., top..top + h, left..left + w])
        .to_owned()
}
