//! Adam with checkpointable moment estimates.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::error::Result;
use crate::nn::{read_tensor, write_tensor, ParamStore};
use crate::store::{Archive, ArchiveWriter};

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Result<Self> {
        let zeros = |t: &Tensor| t.zeros_like();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.vars() {
            m.insert(name.clone(), zeros(var.as_tensor())?);
            v.insert(name.clone(), zeros(var.as_tensor())?);
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients carry their own op graph; keeping it alive through
            // the moments would retain every step's activations
            let g = g.detach();
            let m = self.m.get_mut(name).expect("moments cover every parameter");
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = self.v.get_mut(name).expect("moments cover every parameter");
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&*v / c2)?.sqrt()? + self.eps)?;
            let update = ((&*m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?.detach())?;
        }
        Ok(())
    }

    pub fn write_to(&self, out: &mut ArchiveWriter, prefix: &str) -> Result<()> {
        for (name, m) in &self.m {
            write_tensor(out, &format!("{prefix}m.{name}"), m)?;
            write_tensor(out, &format!("{prefix}v.{name}"), &self.v[name])?;
        }
        Ok(())
    }

    pub fn read_from(&mut self, archive: &Archive, prefix: &str, step: u64, dtype: DType) -> Result<()> {
        for (name, m) in self.m.iter_mut() {
            *m = read_tensor(archive, &format!("{prefix}m.{name}"), dtype)?;
        }
        for (name, v) in self.v.iter_mut() {
            *v = read_tensor(archive, &format!("{prefix}v.{name}"), dtype)?;
        }
        self.step = step;
        Ok(())
    }
}

/// Euclidean norm of the gradients of vars whose name starts with `prefix`.
pub fn grad_norm(params: &ParamStore, grads: &GradStore, prefix: &str) -> Result<f64> {
    let mut total = 0.0;
    for (_, var) in params.vars_with_prefix(prefix) {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}
