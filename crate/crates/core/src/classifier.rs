//! Task classifier: a small transformer encoder over the two-token sequence
//! `(V_s, V_g)`, mean-pooled into a perceptron head.

use candle_core::{DType, Device, Module, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, relu, seeded_rng, EncoderLayer, InitKind, Linear, ParamStore};
use crate::optim::Adam;
use crate::store::{Archive, ArchiveWriter};
use crate::synthworld::PlanningInstance;

pub const CLASSIFIER_KIND: &str = "mtid-classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub obs_dim: usize,
    pub num_tasks: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub head_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(obs_dim: usize, num_tasks: usize) -> Self {
        Self {
            obs_dim,
            num_tasks,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            head_dims: vec![64],
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::new(32, 5)
    }
}

#[derive(Debug, Clone)]
pub struct TaskClassifier {
    config: ClassifierConfig,
    params: ParamStore,
    input: Linear,
    position: Tensor,
    layers: Vec<EncoderLayer>,
    head: Vec<Linear>,
    out: Linear,
}

impl TaskClassifier {
    pub fn new(config: &ClassifierConfig) -> Result<Self> {
        if config.num_tasks == 0 || config.obs_dim == 0 {
            return Err(Error::config("classifier needs at least one task and a nonzero observation width"));
        }
        let mut params = ParamStore::new(DType::F32);
        let mut rng = seeded_rng(config.seed);
        let mut init = params.init(&mut rng);
        let d = config.embed_dim;
        let input = Linear::new(&mut init.sub("input"), config.obs_dim, d)?;
        let position = init.param("position", &[2, d], InitKind::Normal(0.02))?;
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut init.sub(format!("layer{i}")), d, config.heads, config.ff_dim, config.dropout))
            .collect::<Result<Vec<_>>>()?;
        let mut head = Vec::new();
        let mut width = d;
        for (i, &h) in config.head_dims.iter().enumerate() {
            head.push(Linear::new(&mut init.sub(format!("head{i}")), width, h)?);
            width = h;
        }
        let out = Linear::new(&mut init.sub("out"), width, config.num_tasks)?;
        Ok(Self {
            config: config.clone(),
            params,
            input,
            position,
            layers,
            head,
            out,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Class logits `(B, C)` from `(B, O)` start and goal observations;
    /// dropout is active only when `rng` is given.
    pub fn logits(&self, start: &Tensor, goal: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        for v in [start, goal] {
            if v.rank() != 2 || v.dim(1)? != self.config.obs_dim {
                return Err(Error::shape(format!(
                    "classifier input {:?}, expected (B, {})",
                    v.dims(),
                    self.config.obs_dim
                )));
            }
        }
        let tokens = Tensor::stack(&[start, goal], 1)?;
        let mut h = self.input.forward(&tokens)?.broadcast_add(&self.position)?;
        for layer in &self.layers {
            h = layer.forward(&h, rng.as_deref_mut())?;
        }
        let mut h = h.mean(1)?;
        for l in &self.head {
            h = dropout(&relu(&l.forward(&h)?)?, self.config.dropout, rng.as_deref_mut())?;
        }
        Ok(self.out.forward(&h)?)
    }

    /// Predicted classes and logits, dropout off.
    pub fn classify(&self, start: &Tensor, goal: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let logits = self.logits(start, goal, None)?;
        Ok((argmax_rows(&logits)?, logits))
    }

    /// Mean cross-entropy over a batch of instances.
    pub fn loss(&self, batch: &[&PlanningInstance], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (start, goal) = observation_tensors(batch.iter().copied(), DType::F32)?;
        let logits = self.logits(&start, &goal, rng)?;
        let labels: Vec<u32> = batch.iter().map(|i| i.task_id as u32).collect();
        let labels = Tensor::new(labels, &Device::Cpu)?;
        Ok(candle_nn::loss::cross_entropy(&logits, &labels)?)
    }

    pub fn predict(&self, instances: &[PlanningInstance]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(512) {
            let (start, goal) = observation_tensors(chunk.iter(), DType::F32)?;
            out.extend(self.classify(&start, &goal)?.0);
        }
        Ok(out)
    }

    pub fn accuracy(&self, instances: &[PlanningInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::Empty("no instances to score".into()));
        }
        let pred = self.predict(instances)?;
        let hits = pred.iter().zip(instances).filter(|(p, i)| **p == i.task_id).count();
        Ok(hits as f64 / instances.len() as f64)
    }

    pub fn write_to(&self, out: &mut ArchiveWriter, prefix: &str) -> Result<()> {
        self.params.write_to(out, prefix)
    }

    pub fn read_from(config: &ClassifierConfig, archive: &Archive, prefix: &str) -> Result<Self> {
        let model = Self::new(config)?;
        model.params.read_from(archive, prefix)?;
        Ok(model)
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>, extra: serde_json::Value) -> Result<()> {
        let mut w = ArchiveWriter::create(dir, CLASSIFIER_KIND)?;
        self.write_to(&mut w, "")?;
        w.finish(serde_json::json!({ "classifier": self.config, "run": extra }))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let archive = Archive::open(&dir, CLASSIFIER_KIND)?;
        let config: ClassifierConfig = serde_json::from_value(archive.meta()["classifier"].clone())?;
        Self::read_from(&config, &archive, "")
    }
}

/// Row argmax; ties go to the lowest index.
pub fn argmax_rows(x: &Tensor) -> Result<Vec<usize>> {
    let rows = x.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

/// Stacked `(B, O)` start and goal observations.
pub fn observation_tensors<'a>(
    instances: impl Iterator<Item = &'a PlanningInstance>,
    dtype: DType,
) -> Result<(Tensor, Tensor)> {
    let mut start = Vec::new();
    let mut goal = Vec::new();
    let mut rows = 0;
    let mut width = 0;
    for inst in instances {
        width = inst.start_obs.len();
        start.extend_from_slice(&inst.start_obs);
        goal.extend_from_slice(&inst.goal_obs);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("no instances".into()));
    }
    let t = |v: Vec<f32>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (rows, width), &Device::Cpu)?.to_dtype(dtype)?) };
    Ok((t(start)?, t(goal)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_accuracy: f64,
}

/// Cross-entropy training with Adam; reports mean training loss and held-out
/// accuracy after every epoch.
pub fn train_classifier(
    train: &[PlanningInstance],
    heldout: &[PlanningInstance],
    config: &ClassifierConfig,
) -> Result<(TaskClassifier, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(Error::Empty("classifier training set is empty".into()));
    }
    if let Some(bad) = train.iter().find(|i| i.task_id >= config.num_tasks) {
        return Err(Error::config(format!("task {} outside {} classes", bad.task_id, config.num_tasks)));
    }
    let model = TaskClassifier::new(config)?;
    let mut adam = Adam::new(&model.params)?;
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&PlanningInstance> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = model.loss(&batch, Some(&mut rng))?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence { step: epoch, loss: value });
            }
            total += value * batch.len() as f64;
            adam.step(&model.params, &loss.backward()?, config.lr)?;
        }
        let heldout_accuracy = if heldout.is_empty() { f64::NAN } else { model.accuracy(heldout)? };
        log::info!("classifier epoch {epoch}: loss {:.4}, held-out acc {heldout_accuracy:.4}", total / train.len() as f64);
        curve.push(EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            heldout_accuracy,
        });
    }
    Ok((model, curve))
}
