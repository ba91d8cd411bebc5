//! Masked initialization, step weights, task masks and the weighted
//! proximity loss over the action block.

use candle_core::{Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_W0: f64 = 10.0;
pub const DEFAULT_RHO: f64 = 2.0;

/// `Task(c)` lookup: which action ids belong to each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScopes {
    num_actions: usize,
    scopes: Vec<Vec<usize>>,
}

impl TaskScopes {
    pub fn new(num_actions: usize, scopes: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(bad) = scopes.iter().flatten().find(|&&a| a >= num_actions) {
            return Err(Error::config(format!("action id {bad} outside vocabulary of {num_actions}")));
        }
        Ok(Self { num_actions, scopes })
    }

    pub fn num_tasks(&self) -> usize {
        self.scopes.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn scope(&self, task: usize) -> &[usize] {
        &self.scopes[task]
    }

    /// Per-action membership of `Task(task)`.
    pub fn active(&self, task: usize) -> Result<Vec<bool>> {
        let scope = self
            .scopes
            .get(task)
            .ok_or_else(|| Error::config(format!("unknown task {task}")))?;
        let mut active = vec![false; self.num_actions];
        for &a in scope {
            active[a] = true;
        }
        Ok(active)
    }
}

/// Noise for the action block: standard Gaussian on in-scope columns and
/// exactly zero elsewhere. Returns `horizon x A`, row-major.
pub fn masked_init<R: Rng>(active: &[bool], horizon: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !active.iter().any(|&a| a) {
        return Err(Error::Empty("task scope has no actions".into()));
    }
    let mut out = Vec::with_capacity(horizon * active.len());
    for _ in 0..horizon {
        for &on in active {
            out.push(if on { StandardNormal.sample(&mut *rng) } else { 0.0 });
        }
    }
    Ok(out)
}

/// Plain Gaussian action block, the unmasked counterpart of [`masked_init`].
pub fn gaussian_init<R: Rng>(num_actions: usize, horizon: usize, rng: &mut R) -> Vec<f64> {
    (0..horizon * num_actions)
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w: Vec<f64>,
    pub w0: f64,
}

/// Endpoint-heavy step weights: `w0` at both ends, falling linearly to 1 at
/// the centre.
pub fn gradient_weights(horizon: usize, w0: f64) -> Result<LossWeights> {
    if horizon <= 2 {
        return Err(Error::config(format!("degenerate horizon {horizon} for gradient weights")));
    }
    if !(w0 > 0.0) {
        return Err(Error::config("w0 must be positive"));
    }
    let denom = (horizon.div_ceil(2) - 1) as f64;
    let w = (1..=horizon)
        .map(|t| {
            let d = (t.min(horizon - t + 1) - 1) as f64;
            w0 + (1.0 - w0) * d / denom
        })
        .collect();
    Ok(LossWeights { w, w0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Unweighted squared error.
    Mse,
    /// `w0` on the first and last step, 1 elsewhere.
    BothSides,
    /// Linearly decaying weights from both ends.
    #[default]
    Gradient,
}

impl LossVariant {
    pub fn weights(self, horizon: usize, w0: f64) -> Result<LossWeights> {
        match self {
            LossVariant::Mse => Ok(LossWeights { w: vec![1.0; horizon], w0: 1.0 }),
            LossVariant::BothSides => {
                let mut w = vec![1.0; horizon];
                w[0] = w0;
                w[horizon - 1] = w0;
                Ok(LossWeights { w, w0 })
            }
            LossVariant::Gradient => gradient_weights(horizon, w0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskConvention {
    /// All-ones mask.
    Off,
    /// `rho` on actions outside `Task(c)`, 1 on the task's own actions.
    #[default]
    RelevantPenalty,
    /// `rho` on the task's own actions, 1 elsewhere.
    Literal,
}

/// Mask weights `m[t][d]`, identical across the `horizon` rows.
pub fn task_mask(active: &[bool], horizon: usize, rho: f64, convention: MaskConvention) -> Result<Vec<f64>> {
    if !(rho > 0.0) {
        return Err(Error::config("rho must be positive"));
    }
    let row: Vec<f64> = active
        .iter()
        .map(|&on| match convention {
            MaskConvention::Off => 1.0,
            MaskConvention::RelevantPenalty => {
                if on {
                    1.0
                } else {
                    rho
                }
            }
            MaskConvention::Literal => {
                if on {
                    rho
                } else {
                    1.0
                }
            }
        })
        .collect();
    Ok(row.repeat(horizon))
}

/// `sum_t sum_d w_t * m_td * (a_td - target_td)^2`.
///
/// `pred`, `target` and `mask` are `(T, A)` or `(B, T, A)`; with a batch axis
/// the per-instance sums are averaged over the batch.
pub fn proximity_loss(pred: &Tensor, target: &Tensor, weights: &LossWeights, mask: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() || pred.dims() != mask.dims() {
        return Err(Error::shape(format!(
            "proximity loss: pred {:?}, target {:?}, mask {:?}",
            pred.dims(),
            target.dims(),
            mask.dims()
        )));
    }
    let t = pred.dim(D::Minus2)?;
    if weights.w.len() != t {
        return Err(Error::shape(format!("{} step weights for horizon {t}", weights.w.len())));
    }
    let w = Tensor::from_vec(weights.w.clone(), (t, 1), &Device::Cpu)?.to_dtype(pred.dtype())?;
    let sq = (pred - target)?.sqr()?;
    let weighted = (sq * mask)?.broadcast_mul(&w)?;
    let loss = match pred.rank() {
        2 => weighted.sum_all()?,
        3 => weighted.sum_keepdim(2)?.sum_keepdim(1)?.mean_all()?,
        r => return Err(Error::shape(format!("proximity loss expects rank 2 or 3, got {r}"))),
    };
    Ok(loss)
}
