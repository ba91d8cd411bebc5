//! Parameter storage and the small set of layers the models are built from.
//!
//! Parameters live in a [`ParamStore`] as named [`Var`]s and are initialized
//! from a seeded rng, so two stores built with the same seed are identical.
//! Layers hold tensor handles that share storage with those vars; updating a
//! var in place is visible to every layer that uses it.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::GroupNorm as CandleGroupNorm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::store::{Archive, ArchiveWriter};

#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Vars whose name starts with `prefix`.
    pub fn vars_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn init<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> Init<'a> {
        Init {
            store: self,
            rng,
            prefix: String::new(),
        }
    }

    /// Writes every var as a named array, under `prefix`.
    pub fn write_to(&self, out: &mut ArchiveWriter, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            write_tensor(out, &format!("{prefix}{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    /// Overwrites every var from an archive written by [`write_to`](Self::write_to).
    pub fn read_from(&self, archive: &Archive, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let t = read_tensor(archive, &format!("{prefix}{name}"), var.dtype())?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!(
                    "parameter {name}: stored shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t)?;
        }
        Ok(())
    }

    /// Copies values of every var present in both stores.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            if let Some(src) = other.vars.get(name) {
                var.set(&src.as_tensor().to_dtype(var.dtype())?)?;
            }
        }
        Ok(())
    }
}

pub fn write_tensor(out: &mut ArchiveWriter, name: &str, t: &Tensor) -> Result<()> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => out.put_f32(name, &shape, &flat.to_vec1::<f32>()?),
        DType::F64 => out.put_f64(name, &shape, &flat.to_vec1::<f64>()?),
        other => Err(Error::config(format!("cannot store dtype {other:?}"))),
    }
}

pub fn read_tensor(archive: &Archive, name: &str, dtype: DType) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let (shape, data) = archive.f32(name)?;
            Tensor::from_vec(data, shape, &Device::Cpu)?
        }
        DType::F64 => {
            let (shape, data) = archive.f64(name)?;
            Tensor::from_vec(data, shape, &Device::Cpu)?
        }
        other => return Err(Error::config(format!("cannot load dtype {other:?}"))),
    };
    Ok(t)
}

/// Scoped parameter creation.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl Init<'_> {
    pub fn sub(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match kind {
            InitKind::Zeros => vec![0.0; n],
            InitKind::Const(c) => vec![c; n],
            InitKind::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            InitKind::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *self.rng);
                    s * z
                })
                .collect(),
        };
        self.param_values(name, shape, values)
    }

    /// Parameter with explicit initial values.
    pub fn param_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if self.store.vars.contains_key(&full) {
            return Err(Error::config(format!("parameter {full} defined twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.store.vars.insert(full, var);
        Ok(handle)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = init.param("weight", &[out_dim, in_dim], InitKind::Uniform(bound))?;
        let b = init.param("bias", &[out_dim], InitKind::Uniform(bound))?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.inner.forward(x)
    }
}

/// 1-D convolution over `(batch, channels, length)` with explicit left and
/// right zero padding.
///
/// Computed as shifted slices stacked into columns and one matmul; candle's
/// conv1d backward mixes up batch entries when the batch has more than one
/// element, this form only relies on ops with sound gradients.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    pad_left: usize,
    pad_right: usize,
}

impl Conv1d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let weight = init.param("weight", &[out_ch, in_ch, kernel], InitKind::Uniform(bound))?;
        let bias = init.param("bias", &[out_ch], InitKind::Uniform(bound))?;
        Ok(Self {
            weight,
            bias,
            kernel,
            pad_left,
            pad_right,
        })
    }

    /// Odd kernel with symmetric padding that keeps the length.
    pub fn same(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        Self::new(init, in_ch, out_ch, kernel, kernel / 2, kernel / 2)
    }
}

impl Module for Conv1d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = if self.pad_left + self.pad_right > 0 {
            x.pad_with_zeros(D::Minus1, self.pad_left, self.pad_right)?
        } else {
            x.clone()
        };
        let (b, c, len) = x.dims3()?;
        let out_len = len + 1 - self.kernel;
        let out_ch = self.weight.dim(0)?;
        // rows are (batch, position), columns (channel, tap) like the weight
        let xt = x.transpose(1, 2)?.contiguous()?;
        let cols = if self.kernel == 1 {
            xt
        } else {
            let shifted = (0..self.kernel)
                .map(|k| xt.narrow(1, k, out_len))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Tensor::stack(&shifted, 3)?
        };
        let cols = cols.reshape((b * out_len, c * self.kernel))?;
        let w = self.weight.reshape((out_ch, c * self.kernel))?;
        cols.matmul(&w.t()?)?
            .broadcast_add(&self.bias)?
            .reshape((b, out_len, out_ch))?
            .transpose(1, 2)?
            .contiguous()
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: CandleGroupNorm,
}

/// Largest divisor of `channels` not above 8.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        let w = init.param("weight", &[channels], InitKind::Const(1.0))?;
        let b = init.param("bias", &[channels], InitKind::Zeros)?;
        Ok(Self {
            inner: CandleGroupNorm::new(w, b, channels, group_count(channels), 1e-5)?,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.inner.forward(x)
    }
}

/// Layer norm over the last dimension, built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.param("weight", &[dim], InitKind::Const(1.0))?,
            bias: init.param("bias", &[dim], InitKind::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

pub fn relu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// `x * tanh(softplus(x))` with an overflow-free softplus.
pub fn mish(x: &Tensor) -> candle_core::Result<Tensor> {
    let softplus = (x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    x * softplus.tanh()?
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::softmax(x, D::Minus1)
}

/// Inverted dropout with an explicit rng; identity when `rng` is `None`.
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok((x * mask)?)
        }
        _ => Ok(x.clone()),
    }
}

/// Sinusoidal features of integer steps: `(batch,) -> (batch, dim)`.
pub fn sinusoidal_embedding(steps: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let scale = (10000f64).ln() / (half.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &s in steps {
        let freqs = (0..half).map(|i| s * (-(i as f64) * scale).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        out.extend(sin);
        out.extend(cos);
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    Ok(Tensor::from_vec(out, (steps.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&mut init.sub("q"), dim, dim)?,
            k: Linear::new(&mut init.sub("k"), dim, dim)?,
            v: Linear::new(&mut init.sub("v"), dim, dim)?,
            out: Linear::new(&mut init.sub("out"), dim, dim)?,
            heads,
            head_dim: dim / heads,
        })
    }

    /// Self-attention over `(batch, tokens, dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        let split = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((b, l, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (self.head_dim as f64).sqrt())?;
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let merged = attn.transpose(1, 2)?.contiguous()?.reshape((b, l, ()))?;
        Ok(self.out.forward(&merged)?)
    }
}

/// Post-norm transformer encoder layer (self-attention then feed-forward).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, dim: usize, heads: usize, ff_dim: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut init.sub("attn"), dim, heads)?,
            norm1: LayerNorm::new(&mut init.sub("norm1"), dim)?,
            ff1: Linear::new(&mut init.sub("ff1"), dim, ff_dim)?,
            ff2: Linear::new(&mut init.sub("ff2"), ff_dim, dim)?,
            norm2: LayerNorm::new(&mut init.sub("norm2"), dim)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let a = dropout(&self.attn.forward(x)?, self.dropout, rng.as_deref_mut())?;
        let x = self.norm1.forward(&(x + a)?)?;
        let h = relu(&self.ff1.forward(&x)?)?;
        let h = dropout(&self.ff2.forward(&h)?, self.dropout, rng)?;
        Ok(self.norm2.forward(&(x + h)?)?)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor from f32 host data in the store's dtype.
pub fn tensor_from_f32(data: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
