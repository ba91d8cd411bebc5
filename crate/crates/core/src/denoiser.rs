//! The denoising network: a 1-D temporal U-Net over the `T x (C+A+O)`
//! iteration matrix whose residual blocks each attend to one interpolated
//! latent feature.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolation::{interpolation_count, LatentFeatureSet};
use crate::nn::{mish, sinusoidal_embedding, softmax_last, Conv1d, GroupNorm, Init, Linear};

/// Block widths of the iteration matrix and the plan horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDims {
    pub num_tasks: usize,
    pub num_actions: usize,
    pub obs_dim: usize,
    pub horizon: usize,
}

impl StateDims {
    pub fn width(&self) -> usize {
        self.num_tasks + self.num_actions + self.obs_dim
    }

    pub fn action_offset(&self) -> usize {
        self.num_tasks
    }

    pub fn obs_offset(&self) -> usize {
        self.num_tasks + self.num_actions
    }
}

/// Known blocks of the iteration matrix for a batch: the repeated task
/// one-hot and the observation block with `V_s` in the first row, `V_g` in
/// the last and zeros between.
#[derive(Debug, Clone)]
pub struct Conditions {
    dims: StateDims,
    task_block: Tensor,
    obs_block: Tensor,
}

impl Conditions {
    /// `start` and `goal` are `(B, O)`.
    pub fn new(dims: StateDims, tasks: &[usize], start: &Tensor, goal: &Tensor) -> Result<Self> {
        let (b, o) = start.dims2()?;
        if goal.dims2()? != (b, o) || o != dims.obs_dim || tasks.len() != b {
            return Err(Error::shape(format!(
                "conditions: {} tasks, start {:?}, goal {:?}, obs width {}",
                tasks.len(),
                start.dims(),
                goal.dims(),
                dims.obs_dim
            )));
        }
        if dims.horizon < 2 {
            return Err(Error::shape("horizon must be at least 2"));
        }
        let (t, c) = (dims.horizon, dims.num_tasks);
        let mut onehot = vec![0f64; b * c];
        for (i, &task) in tasks.iter().enumerate() {
            if task >= c {
                return Err(Error::shape(format!("task {task} outside {c} classes")));
            }
            onehot[i * c + task] = 1.0;
        }
        let dtype = start.dtype();
        let task_block = Tensor::from_vec(onehot, (b, 1, c), start.device())?
            .to_dtype(dtype)?
            .repeat((1, t, 1))?;
        let interior = Tensor::zeros((b, t - 2, o), dtype, start.device())?;
        let obs_block = Tensor::cat(&[&start.unsqueeze(1)?, &interior, &goal.unsqueeze(1)?], 1)?;
        Ok(Self {
            dims,
            task_block,
            obs_block,
        })
    }

    pub fn dims(&self) -> StateDims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.task_block.dim(0).unwrap_or(0)
    }

    fn check_actions(&self, actions: &Tensor) -> Result<()> {
        let want = (self.batch(), self.dims.horizon, self.dims.num_actions);
        if actions.dims3()? != want {
            return Err(Error::shape(format!("action block {:?}, expected {want:?}", actions.dims())));
        }
        Ok(())
    }
}

/// Assembles `(B, T, C+A+O)` from the known blocks and an action block.
pub fn build_state_matrix(cond: &Conditions, actions: &Tensor) -> Result<Tensor> {
    cond.check_actions(actions)?;
    Ok(Tensor::cat(&[&cond.task_block, actions, &cond.obs_block], 2)?)
}

/// The action block of a state matrix, `(B, T, A)`.
pub fn action_block(x: &Tensor, dims: StateDims) -> Result<Tensor> {
    if x.dims3()?.2 != dims.width() {
        return Err(Error::shape(format!("state width {}, expected {}", x.dims3()?.2, dims.width())));
    }
    Ok(x.narrow(2, dims.action_offset(), dims.num_actions)?)
}

/// Overwrites the task and observation blocks; the action block is kept.
pub fn condition_project(x: &Tensor, cond: &Conditions) -> Result<Tensor> {
    build_state_matrix(cond, &action_block(x, cond.dims)?)
}

/// How latent features reach the cross-attention sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureRouting {
    /// Block `j` attends to `F_j` only.
    #[default]
    PerBlock,
    /// Every block attends to all `M` features.
    AllFeatures,
    /// No cross-attention anywhere.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Channel width of each down level; the up path mirrors it.
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub middle_blocks: usize,
    pub kernel_size: usize,
    pub routing: FeatureRouting,
}

impl Default for UNetConfig {
    /// Desk scale: 32, 64, 128 channels.
    fn default() -> Self {
        Self::scaled(32)
    }
}

impl UNetConfig {
    /// Three levels of 256, 512, 1024 channels.
    pub fn full() -> Self {
        Self::scaled(256)
    }

    /// Three levels of `base`, `2 base`, `4 base` channels.
    pub fn scaled(base: usize) -> Self {
        Self {
            widths: vec![base, 2 * base, 4 * base],
            blocks_per_level: 2,
            middle_blocks: 2,
            kernel_size: 5,
            routing: FeatureRouting::PerBlock,
        }
    }

    pub fn time_dim(&self) -> usize {
        self.widths.get(1).or(self.widths.first()).copied().unwrap_or(8)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("U-Net needs at least one level of nonzero width"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("residual block kernel must be odd"));
        }
        interpolation_count(self).map(|_| ())
    }
}

/// Conv, group norm, Mish.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv1d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::same(&mut init.sub("conv"), in_ch, out_ch, kernel)?,
            norm: GroupNorm::new(&mut init.sub("norm"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(mish(&self.norm.forward(&self.conv.forward(x)?)?)?)
    }
}

/// Sinusoidal step features through a two-layer perceptron.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            l1: Linear::new(&mut init.sub("l1"), dim, 4 * dim)?,
            l2: Linear::new(&mut init.sub("l2"), 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, steps: &[usize], dtype: DType) -> Result<Tensor> {
        let steps: Vec<f64> = steps.iter().map(|&n| n as f64).collect();
        let e = sinusoidal_embedding(&steps, self.dim, dtype)?;
        Ok(self.l2.forward(&mish(&self.l1.forward(&e)?)?)?)
    }
}

/// Attention of hidden activations over projected latent features.
///
/// `query` is `(B, T, ch)`, `features` is `(B, K, O_lat)`. Key and value are
/// both `kv(features)`. Returns the output `(B, T, ch)` and the attention
/// weights `(B, T, K)`.
pub fn cross_attend(query: &Tensor, features: &Tensor, kv: &Linear, scale: f64) -> Result<(Tensor, Tensor)> {
    let lf = kv.forward(features)?;
    let (bq, _, ch) = query.dims3()?;
    let (bf, _, lch) = lf.dims3()?;
    if bq != bf || ch != lch {
        return Err(Error::shape(format!(
            "cross-attention query {:?} against projected features {:?}",
            query.dims(),
            lf.dims()
        )));
    }
    let scores = (query.matmul(&lf.t()?.contiguous()?)? * scale)?;
    let weights = softmax_last(&scores)?;
    Ok((weights.matmul(&lf)?, weights))
}

#[derive(Debug, Clone)]
pub struct ResidualTemporalBlock {
    block0: ConvBlock,
    block1: ConvBlock,
    time_proj: Linear,
    kv: Option<Linear>,
    scale: f64,
    residual: Option<Conv1d>,
}

impl ResidualTemporalBlock {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
        latent_dim: Option<usize>,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            block0: ConvBlock::new(&mut init.sub("block0"), in_ch, out_ch, kernel)?,
            block1: ConvBlock::new(&mut init.sub("block1"), out_ch, out_ch, kernel)?,
            time_proj: Linear::new(&mut init.sub("time"), time_dim, out_ch)?,
            kv: latent_dim
                .map(|d| Linear::new(&mut init.sub("kv"), d, out_ch))
                .transpose()?,
            scale: latent_dim.map_or(1.0, |d| 1.0 / (d as f64).sqrt()),
            residual: if in_ch != out_ch {
                Some(Conv1d::same(&mut init.sub("residual"), in_ch, out_ch, 1)?)
            } else {
                None
            },
        })
    }

    /// `x` is `(B, in, T)`, `t` is `(B, time_dim)`, `features` is
    /// `(B, K, O_lat)`; returns `(B, out, T)`.
    pub fn forward(&self, x: &Tensor, t: &Tensor, features: Option<&Tensor>) -> Result<Tensor> {
        let time = self.time_proj.forward(&mish(t)?)?.unsqueeze(2)?;
        let mut h = self.block0.forward(x)?.broadcast_add(&time)?;
        if let (Some(kv), Some(f)) = (&self.kv, features) {
            let q = h.transpose(1, 2)?.contiguous()?;
            let (a, _) = cross_attend(&q, f, kv, self.scale)?;
            h = (h + a.transpose(1, 2)?)?;
        }
        let h = self.block1.forward(&h)?;
        let skip = match &self.residual {
            Some(r) => r.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResidualTemporalBlock>,
    resample: Option<Conv1d>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: UNetConfig,
    dims: StateDims,
    m: usize,
    time: TimeEmbedding,
    down: Vec<Level>,
    middle: Vec<ResidualTemporalBlock>,
    up: Vec<Level>,
    final_block: ConvBlock,
    final_conv: Conv1d,
}

impl Denoiser {
    pub fn new(init: &mut Init, cfg: &UNetConfig, dims: StateDims, latent_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let m = interpolation_count(cfg)?;
        let lat = (cfg.routing != FeatureRouting::Disabled).then_some(latent_dim);
        let td = cfg.time_dim();
        let k = cfg.kernel_size;
        let levels = cfg.widths.len();
        let time = TimeEmbedding::new(&mut init.sub("time"), td)?;

        let mut down = Vec::with_capacity(levels);
        let mut ch = dims.width();
        for (i, &w) in cfg.widths.iter().enumerate() {
            let mut li = init.sub(format!("down{i}"));
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                blocks.push(ResidualTemporalBlock::new(&mut li.sub(b), ch, w, td, lat, k)?);
                ch = w;
            }
            // kernel 2 with one zero on the right keeps the length at T
            let resample = (i + 1 < levels)
                .then(|| Conv1d::new(&mut li.sub("resample"), ch, ch, 2, 0, 1))
                .transpose()?;
            down.push(Level { blocks, resample });
        }

        let middle = (0..cfg.middle_blocks)
            .map(|b| ResidualTemporalBlock::new(&mut init.sub(format!("middle{b}")), ch, ch, td, lat, k))
            .collect::<Result<Vec<_>>>()?;

        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let w = cfg.widths[i];
            let mut li = init.sub(format!("up{i}"));
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                let in_ch = if b == 0 { ch + w } else { ch };
                blocks.push(ResidualTemporalBlock::new(&mut li.sub(b), in_ch, w, td, lat, k)?);
                ch = w;
            }
            if cfg.blocks_per_level == 0 {
                return Err(Error::config("up levels need at least one block to merge skips"));
            }
            let resample = (i > 0)
                .then(|| Conv1d::new(&mut li.sub("resample"), ch, ch, 2, 1, 0))
                .transpose()?;
            up.push(Level { blocks, resample });
        }

        Ok(Self {
            cfg: cfg.clone(),
            dims,
            m,
            time,
            down,
            middle,
            up,
            final_block: ConvBlock::new(&mut init.sub("final_block"), ch, ch, k)?,
            final_conv: Conv1d::same(&mut init.sub("final_conv"), ch, dims.width(), 1)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn dims(&self) -> StateDims {
        self.dims
    }

    /// Number of cross-attention sites, one per residual block.
    pub fn feature_count(&self) -> usize {
        self.m
    }

    /// Predicts the clean matrix from `x` (`(B, T, C+A+O)`) at steps `steps`.
    pub fn forward(&self, x: &Tensor, steps: &[usize], features: Option<&LatentFeatureSet>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        if d != self.dims.width() || steps.len() != b {
            return Err(Error::shape(format!(
                "denoiser input {:?} with {} steps, expected width {}",
                x.dims(),
                steps.len(),
                self.dims.width()
            )));
        }
        let feats = match (self.cfg.routing, features) {
            (FeatureRouting::Disabled, _) => None,
            (_, None) => return Err(Error::shape("denoiser needs latent features")),
            (_, Some(f)) => {
                let f = &f.refined;
                if f.dim(1)? != self.m || f.dim(0)? != b {
                    return Err(Error::shape(format!(
                        "{} latent features for a U-Net with {} residual blocks",
                        f.dim(1)?,
                        self.m
                    )));
                }
                Some(f)
            }
        };
        let site = |j: usize| -> Result<Option<Tensor>> {
            Ok(match (self.cfg.routing, feats) {
                (FeatureRouting::PerBlock, Some(f)) => Some(f.narrow(1, j, 1)?),
                (FeatureRouting::AllFeatures, Some(f)) => Some(f.clone()),
                _ => None,
            })
        };

        let temb = self.time.forward(steps, x.dtype())?;
        let mut h = x.transpose(1, 2)?.contiguous()?;
        let mut j = 0;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            for block in &level.blocks {
                h = block.forward(&h, &temb, site(j)?.as_ref())?;
                j += 1;
            }
            skips.push(h.clone());
            if let Some(r) = &level.resample {
                h = r.forward(&h)?;
            }
        }
        for block in &self.middle {
            h = block.forward(&h, &temb, site(j)?.as_ref())?;
            j += 1;
        }
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 1)?;
            for block in &level.blocks {
                h = block.forward(&h, &temb, site(j)?.as_ref())?;
                j += 1;
            }
            if let Some(r) = &level.resample {
                h = r.forward(&h)?;
            }
        }
        let out = self.final_conv.forward(&self.final_block.forward(&h)?)?;
        debug_assert_eq!(out.dim(2)?, t);
        Ok(out.transpose(1, 2)?.contiguous()?)
    }
}
