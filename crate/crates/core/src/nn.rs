//! Small tensor toolkit shared by the networks: seeded parameter stores,
//! differentiable resampling, activations, and an Adam optimizer whose state
//! can be checkpointed.

use std::collections::BTreeMap;

use candle_core::{
    backprop::GradStore, CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming-normal for a leaky-ReLU network, multiplied by `scale`.
    Kaiming {
        scale: f64,
    },
    Zeros,
}

/// Named trainable parameters created from a seeded stream.
///
/// Creation order fixes the random stream, so two stores built by the same
/// code with the same seed hold bit-identical values.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Creates a `cout × cin × k × k` kernel and a bias, returning a layer
    /// bound to them.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Conv2d> {
        let n = cout * cin * k * k;
        let values = match init {
            Init::Kaiming { scale } => {
                let gain = (2.0 / (1.0 + 0.2f64 * 0.2)).sqrt();
                let std = gain / ((cin * k * k) as f64).sqrt() * scale;
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
        };
        let weight = self.insert(&format!("{name}.weight"), values, &[cout, cin, k, k])?;
        let bias = self.insert(&format!("{name}.bias"), vec![0.0; cout], &[cout])?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Result<Linear> {
        let std = 1.0 / (cin as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let values = (0..cin * cout)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        let weight = self.insert(&format!("{name}.weight"), values, &[cout, cin])?;
        let bias = self.insert(&format!("{name}.bias"), vec![0.0; cout], &[cout])?;
        Ok(Linear { weight, bias })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match.
    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::config(format!(
                    "parameter {name}: shape {:?} does not match expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        content_digest(&self.named_tensors())
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// SHA-256 over names, dtypes, shapes and little-endian element bytes, in the
/// order given.
pub fn content_digest(tensors: &[(String, Tensor)]) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update(t.dtype().as_str().as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update(tensor_bytes(t)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => {
            return Err(Error::config(format!("unsupported tensor dtype {other:?}")));
        }
    })
}

/// Convolution whose backward pass is expressed as forward convolutions and
/// one batched matmul; candle's native conv backward is several times slower
/// on CPU.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    if !x.device().is_cpu() {
        return Ok(x.conv2d(w, padding, stride, 1, 1)?);
    }
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    Ok(x.apply_op2(&w, ConvOp { padding, stride })?)
}

struct ConvOp {
    padding: usize,
    stride: usize,
}

fn storage_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv operand not contiguous".into()))?;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[a..b], l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[a..b], l.shape(), &Device::Cpu),
        _ => Err(candle_core::Error::Msg(
            "conv supports f32 and f64 only".into(),
        )),
    }
}

fn flip_spatial(w: &Tensor) -> candle_core::Result<Tensor> {
    let k = w.dim(2)?;
    let idx = Tensor::from_vec((0..k as u32).rev().collect::<Vec<_>>(), k, w.device())?;
    w.index_select(&idx, 2)?.index_select(&idx, 3)
}

/// Inserts `stride - 1` zeros between samples along `dim` and trims to `len`.
fn dilate(g: &Tensor, dim: usize, stride: usize, len: usize) -> candle_core::Result<Tensor> {
    if stride == 1 {
        return g.narrow(dim, 0, len);
    }
    let mut parts = vec![g.clone()];
    parts.extend(std::iter::repeat_n(g.zeros_like()?, stride - 1));
    let stacked = Tensor::stack(&parts, dim + 1)?;
    let mut dims = g.dims().to_vec();
    dims[dim] *= stride;
    stacked.reshape(dims)?.narrow(dim, 0, len)
}

/// Takes every `stride`-th element along `dim`, starting at `start`, `count` times.
fn subsample(
    x: &Tensor,
    dim: usize,
    start: usize,
    stride: usize,
    count: usize,
) -> candle_core::Result<Tensor> {
    if stride == 1 {
        return x.narrow(dim, start, count);
    }
    let idx: Vec<u32> = (0..count).map(|i| (start + i * stride) as u32).collect();
    x.index_select(&Tensor::from_vec(idx, count, x.device())?, dim)
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d-mm-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = storage_tensor(s1, l1)?;
        let w = storage_tensor(s2, l2)?;
        let y = x
            .conv2d(&w, self.padding, self.stride, 1, 1)?
            .contiguous()?;
        let shape = y.shape().clone();
        let (storage, layout) = y.storage_and_layout();
        let (a, b) = layout.contiguous_offsets().expect("contiguous conv output");
        let out = match &*storage {
            candle_core::Storage::Cpu(CpuStorage::F32(v)) => CpuStorage::F32(v[a..b].to_vec()),
            candle_core::Storage::Cpu(CpuStorage::F64(v)) => CpuStorage::F64(v[a..b].to_vec()),
            _ => {
                return Err(candle_core::Error::Msg(
                    "unexpected conv output storage".into(),
                ))
            }
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (p, s) = (self.padding, self.stride);
        let (n, ci, h, wd) = x.dims4()?;
        let (co, _, k, _) = w.dims4()?;
        let (_, _, oh, ow) = grad.dims4()?;
        let g = grad.detach().contiguous()?;
        let x = x.detach();
        let w = w.detach();

        let full_h = h + 2 * p + 1 - k;
        let full_w = wd + 2 * p + 1 - k;
        let gd = dilate(&dilate(&g, 2, s, full_h)?, 3, s, full_w)?.contiguous()?;
        let wf = flip_spatial(&w)?.transpose(0, 1)?.contiguous()?;
        let gx_pad = gd.conv2d(&wf, k - 1, 1, 1, 1)?;
        let gx = gx_pad.narrow(2, p, h)?.narrow(3, p, wd)?;

        let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
        let mut cols = Vec::with_capacity(k * k);
        for dy in 0..k {
            let rows = subsample(&xp, 2, dy, s, oh)?;
            for dx in 0..k {
                cols.push(subsample(&rows, 3, dx, s, ow)?);
            }
        }
        let col = Tensor::stack(&cols, 2)?.reshape((n, ci * k * k, oh * ow))?;
        let gw = g
            .reshape((n, co, oh * ow))?
            .matmul(&col.transpose(1, 2)?.contiguous()?)?
            .sum(0)?
            .reshape((co, ci, k, k))?;
        Ok((Some(gx), Some(gw)))
    }
}

/// A 2-D convolution with "same" zero padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    /// The same layer reading detached (non-differentiable) weights.
    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// `log(1 + exp(x))`, computed without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

fn nearest_index(out: usize, inp: usize, device: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = (0..out).map(|o| ((o * inp) / out) as u32).collect();
    Ok(Tensor::from_vec(idx, out, device)?)
}

/// Nearest-neighbour resize of an `N×C×H×W` tensor to `out_h × out_w`.
///
/// Implemented with gathers so it is differentiable for any target size.
pub fn upsample_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows = nearest_index(out_h, h, x.device())?;
    let cols = nearest_index(out_w, w, x.device())?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Row-major `out × inp` interpolation matrix for half-pixel-centred linear
/// resampling with edge clamping.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Bilinear resize of an `N×C×H×W` tensor, differentiable via two matmuls.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    Ok(rows
        .broadcast_matmul(&x.contiguous()?)?
        .broadcast_matmul(&cols)?)
}

/// Max-pools by 2, discarding a trailing odd row/column.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2 * 2, w / 2 * 2);
    let x = if (h2, w2) != (h, w) {
        x.narrow(2, 0, h2)?.narrow(3, 0, w2)?
    } else {
        x.clone()
    };
    // Reduction-based pooling: candle's max_pool2d backward scales gradients
    // by 1/k² instead of 1/(number of tied maxima).
    let (n, c, _, _) = x.dims4()?;
    Ok(x.reshape((n, c, h2 / 2, 2, w2 / 2, 2))?.max(5)?.max(3)?)
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of named variables, with exportable moments.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    params: Vec<(String, Var, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        let params = store
            .vars()
            .iter()
            .map(|(name, var)| {
                let zeros = var.as_tensor().zeros_like()?;
                Ok((name.clone(), var.clone(), zeros.clone(), zeros))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            step: 0,
            params,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`; variables without a gradient are left
    /// untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (_, var, m, v) in self.params.iter_mut() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            *m = ((m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?).detach();
            *v = ((v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?).detach();
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (var.as_tensor().detach() - update.affine(lr, 0.0)?)?;
            var.set(&next)?;
        }
        Ok(())
    }

    /// Moments as `adam.m.<name>` / `adam.v.<name>` tensors.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for (name, _, m, v) in &self.params {
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, _, m, v) in self.params.iter_mut() {
            let get = |key: String| {
                tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("missing optimizer state {key}")))
            };
            *m = get(format!("adam.m.{name}"))?;
            *v = get(format!("adam.v.{name}"))?;
        }
        self.step = step;
        Ok(())
    }
}

/// Mean over all elements as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_gradients_match_native_backward() {
        let dev = Device::Cpu;
        for &(h, w, k, stride) in &[
            (7, 6, 3, 1),
            (8, 8, 3, 2),
            (9, 7, 3, 2),
            (5, 5, 1, 1),
            (6, 8, 1, 2),
        ] {
            let x =
                Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, h, w), &dev).unwrap()).unwrap();
            let wt =
                Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap()).unwrap();
            let probe = Tensor::randn(
                0f64,
                1.0,
                x.conv2d(&wt, k / 2, stride, 1, 1).unwrap().shape(),
                &dev,
            )
            .unwrap();
            let native = (x.conv2d(&wt, k / 2, stride, 1, 1).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap();
            let ours_out = conv2d(&x, &wt, k / 2, stride).unwrap();
            let ours = (&ours_out * &probe).unwrap().sum_all().unwrap();
            let diff = |a: &Tensor, b: &Tensor| {
                (a - b)
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap()
            };
            assert!(diff(&native, &ours) < 1e-9);
            let gn = native.backward().unwrap();
            let go = ours.backward().unwrap();
            assert!(
                diff(gn.get(&x).unwrap(), go.get(&x).unwrap()) < 1e-9,
                "dx {h}x{w} k{k} s{stride}"
            );
            assert!(
                diff(gn.get(&wt).unwrap(), go.get(&wt).unwrap()) < 1e-9,
                "dw {h}x{w} k{k} s{stride}"
            );
        }
    }

    #[test]
    fn strided_pointwise_conv_handles_odd_sizes() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 2, 6, 7), &dev).unwrap()).unwrap();
        let wt = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 2, 1, 1), &dev).unwrap()).unwrap();
        let ours = conv2d(&x, &wt, 0, 2)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let rows = Tensor::new(&[0u32, 2, 4], &dev).unwrap();
        let cols = Tensor::new(&[0u32, 2, 4, 6], &dev).unwrap();
        let sub = x
            .index_select(&rows, 2)
            .unwrap()
            .index_select(&cols, 3)
            .unwrap();
        let oracle = sub
            .conv2d(&wt, 0, 1, 1, 1)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let (go, gr) = (ours.backward().unwrap(), oracle.backward().unwrap());
        for v in [x.as_tensor(), wt.as_tensor()] {
            let d = (go.get(v).unwrap() - gr.get(v).unwrap())
                .unwrap()
                .abs()
                .unwrap();
            assert!(d.max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-9);
        }
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_preserve_mean_for_integer_factors() {
        for (out, inp) in [(8, 4), (12, 3), (64, 4), (5, 5), (7, 1)] {
            let m = bilinear_matrix(out, inp);
            for o in 0..out {
                let s: f64 = m[o * inp..(o + 1) * inp].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            if out % inp == 0 {
                let factor = (out / inp) as f64;
                for i in 0..inp {
                    let col: f64 = (0..out).map(|o| m[o * inp + i]).sum();
                    assert!((col - factor).abs() < 1e-12, "{out}x{inp} col {i}: {col}");
                }
            }
        }
    }

    #[test]
    fn nearest_upsample_matches_repeat() -> Result<()> {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 4.0, &dev)?.reshape((1, 1, 2, 2))?;
        let y = upsample_nearest(&x, 4, 4)?;
        let rows = y.squeeze(0)?.squeeze(0)?.to_vec2::<f32>()?;
        assert_eq!(rows[0], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(rows[3], vec![2.0, 2.0, 3.0, 3.0]);
        Ok(())
    }

    #[test]
    fn resize_bilinear_gradient_matches_adjoint() -> Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 1, 3, 2), &dev)?)?;
        let y = resize_bilinear(x.as_tensor(), 6, 4)?;
        let grads = y.sum_all()?.backward()?;
        let g = grads
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()?
            .to_vec1::<f64>()?;
        let mr = bilinear_matrix(6, 3);
        let mc = bilinear_matrix(4, 2);
        for i in 0..3 {
            for j in 0..2 {
                let r: f64 = (0..6).map(|o| mr[o * 3 + i]).sum();
                let c: f64 = (0..4).map(|o| mc[o * 2 + j]).sum();
                assert!((g[i * 2 + j] - r * c).abs() < 1e-12);
            }
        }
        Ok(())
    }

    #[test]
    fn seeded_stores_are_identical() -> Result<()> {
        let build = || -> Result<String> {
            let mut s = ParamStore::new(17, DType::F32, &Device::Cpu);
            s.conv("a", 3, 8, 3, 1, Init::Kaiming { scale: 1.0 })?;
            s.linear("b", 8, 1)?;
            s.digest()
        };
        assert_eq!(build()?, build()?);
        Ok(())
    }

    #[test]
    fn adam_decreases_a_quadratic() -> Result<()> {
        let mut s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let lin = s.linear("w", 4, 1)?;
        let mut opt = Adam::new(
            &s,
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
        )?;
        let x = Tensor::ones((1, 4), DType::F64, &Device::Cpu)?;
        let loss0 = scalar(&lin.forward(&x)?.affine(1.0, -3.0)?.sqr()?)?;
        for _ in 0..200 {
            let loss = lin.forward(&x)?.affine(1.0, -3.0)?.sqr()?.sum_all()?;
            opt.step(&loss.backward()?)?;
        }
        let loss1 = scalar(&lin.forward(&x)?.affine(1.0, -3.0)?.sqr()?)?;
        assert!(loss1 < loss0 * 1e-3, "{loss0} -> {loss1}");
        assert_eq!(opt.steps_taken(), 200);
        Ok(())
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() -> Result<()> {
        let x = Tensor::new(&[-1000f64, -1.0, 0.0, 1.0, 1000.0], &Device::Cpu)?;
        let sp = softplus(&x)?.to_vec1::<f64>()?;
        assert!((sp[2] - 2f64.ln()).abs() < 1e-12);
        assert!((sp[4] - 1000.0).abs() < 1e-9);
        assert!(sp[0].abs() < 1e-12);
        let sg = sigmoid(&x)?.to_vec1::<f64>()?;
        assert!((sg[3] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
        assert!(sg[0] >= 0.0 && sg[4] <= 1.0);
        Ok(())
    }
}
