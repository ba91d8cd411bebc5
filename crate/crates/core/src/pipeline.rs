//! Diffusion training, checkpoints and DDIM plan sampling.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax_rows, observation_tensors, ClassifierConfig, TaskClassifier};
use crate::denoiser::{action_block, build_state_matrix, condition_project, Conditions, Denoiser, StateDims, UNetConfig};
use crate::error::{Error, Result};
use crate::interpolation::{interpolation_count, InterpolationConfig, InterpolationModule, LatentFeatureSet};
use crate::metrics::{Plan, PlanGroup};
use crate::nn::{seeded_rng, ParamStore};
use crate::objective::{
    gaussian_init, masked_init, proximity_loss, task_mask, LossVariant, MaskConvention, TaskScopes, DEFAULT_RHO,
    DEFAULT_W0,
};
use crate::optim::{grad_norm, Adam};
use crate::schedule::{cosine_schedule, ddim_jump, implied_noise, NoiseSchedule, DEFAULT_OFFSET};
use crate::store::{Archive, ArchiveWriter};
use crate::synthworld::PlanningInstance;

pub const CHECKPOINT_KIND: &str = "mtid-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// The learning rate halves at each of these steps.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub schedule_offset: f64,
    pub loss: LossVariant,
    pub mask_loss: MaskConvention,
    pub w0: f64,
    pub rho: f64,
    /// Restrict training noise to the columns of the instance's task.
    pub mask_training_noise: bool,
    pub ddim_steps: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            warmup_steps: 1000,
            peak_lr: 3e-4,
            milestones: vec![3000, 4000],
            batch_size: 64,
            seed: 0,
            diffusion_steps: 50,
            schedule_offset: DEFAULT_OFFSET,
            loss: LossVariant::Gradient,
            mask_loss: MaskConvention::RelevantPenalty,
            w0: DEFAULT_W0,
            rho: DEFAULT_RHO,
            mask_training_noise: true,
            ddim_steps: 10,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup {} must be below total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !self.milestones.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::config("milestones must be sorted ascending"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak learning rate must be positive"));
        }
        if self.batch_size == 0 || self.ddim_steps == 0 {
            return Err(Error::config("batch size and DDIM steps must be positive"));
        }
        if self.diffusion_steps < 2 {
            return Err(Error::config("need at least 2 diffusion steps"));
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to the peak, then halving at each milestone passed.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let halvings = cfg.milestones.iter().filter(|&&m| step >= m).count();
    cfg.peak_lr * 0.5f64.powi(halvings as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: StateDims,
    pub interpolation: InterpolationConfig,
    pub unet: UNetConfig,
}

impl ModelConfig {
    pub fn new(dims: StateDims, base_width: usize) -> Self {
        Self {
            dims,
            interpolation: InterpolationConfig::new(dims.obs_dim),
            unet: UNetConfig::scaled(base_width),
        }
    }
}

/// Interpolation module and denoiser sharing one parameter store.
#[derive(Debug, Clone)]
pub struct PlannerModel {
    config: ModelConfig,
    params: ParamStore,
    interpolation: InterpolationModule,
    denoiser: Denoiser,
}

impl PlannerModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        if config.interpolation.obs_dim != config.dims.obs_dim {
            return Err(Error::config("interpolation and state observation widths differ"));
        }
        let m = interpolation_count(&config.unet)?;
        let mut params = ParamStore::new(dtype);
        let mut rng = seeded_rng(seed);
        let mut init = params.init(&mut rng);
        let interpolation = InterpolationModule::new(&mut init.sub("interp"), &config.interpolation, m)?;
        let denoiser = Denoiser::new(
            &mut init.sub("unet"),
            &config.unet,
            config.dims,
            config.interpolation.latent_dim,
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            interpolation,
            denoiser,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn interpolation(&self) -> &InterpolationModule {
        &self.interpolation
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn features(&self, start: &Tensor, goal: &Tensor) -> Result<LatentFeatureSet> {
        self.interpolation.forward(start, goal)
    }

    pub fn predict_clean(&self, x: &Tensor, steps: &[usize], features: &LatentFeatureSet) -> Result<Tensor> {
        self.denoiser.forward(x, steps, Some(features))
    }
}

/// Everything needed to resume training or to sample plans.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PlannerModel,
    pub optimizer: Adam,
    pub schedule: NoiseSchedule,
    pub train: TrainConfig,
    pub scopes: TaskScopes,
    pub classifier: Option<TaskClassifier>,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    scopes: TaskScopes,
    schedule_steps: usize,
    schedule_offset: f64,
    classifier: Option<ClassifierConfig>,
    step: usize,
    seed: u64,
    dtype: String,
    run: serde_json::Value,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, train: &TrainConfig, scopes: TaskScopes, dtype: DType) -> Result<Self> {
        train.validate()?;
        if scopes.num_tasks() != model.dims.num_tasks || scopes.num_actions() != model.dims.num_actions {
            return Err(Error::config(format!(
                "scopes cover {} tasks / {} actions, model has {} / {}",
                scopes.num_tasks(),
                scopes.num_actions(),
                model.dims.num_tasks,
                model.dims.num_actions
            )));
        }
        let model = PlannerModel::new(model, train.seed, dtype)?;
        let optimizer = Adam::new(model.params())?;
        Ok(Self {
            schedule: cosine_schedule(train.diffusion_steps, train.schedule_offset)?,
            model,
            optimizer,
            train: train.clone(),
            scopes,
            classifier: None,
            step: 0,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>, run: serde_json::Value) -> Result<()> {
        let mut w = ArchiveWriter::create(dir, CHECKPOINT_KIND)?;
        self.model.params().write_to(&mut w, "model.")?;
        self.optimizer.write_to(&mut w, "adam.")?;
        w.put_f64("schedule.beta", &[self.schedule.steps], &self.schedule.beta)?;
        if let Some(c) = &self.classifier {
            c.write_to(&mut w, "classifier.")?;
        }
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            train: self.train.clone(),
            scopes: self.scopes.clone(),
            schedule_steps: self.schedule.steps,
            schedule_offset: self.schedule.offset,
            classifier: self.classifier.as_ref().map(|c| c.config().clone()),
            step: self.step,
            seed: self.train.seed,
            dtype: dtype_name(self.model.dtype()).into(),
            run,
        };
        w.finish(serde_json::to_value(meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let archive = Archive::open(&dir, CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(archive.meta().clone()).map_err(|e| Error::Malformed {
            path: dir.as_ref().to_path_buf(),
            reason: e.to_string(),
        })?;
        let dtype = if meta.dtype == "f64" { DType::F64 } else { DType::F32 };
        let mut ckpt = Self::new(&meta.model, &meta.train, meta.scopes, dtype)?;
        ckpt.model.params().read_from(&archive, "model.")?;
        ckpt.optimizer.read_from(&archive, "adam.", meta.step as u64, dtype)?;
        let (_, beta) = archive.f64("schedule.beta")?;
        ckpt.schedule = NoiseSchedule::from_betas(meta.schedule_steps, meta.schedule_offset, beta)?;
        if let Some(cfg) = &meta.classifier {
            ckpt.classifier = Some(TaskClassifier::read_from(cfg, &archive, "classifier.")?);
        }
        ckpt.step = meta.step;
        Ok(ckpt)
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// The rng of training step `step`: a resumed run draws the same batches and
/// noise as an uninterrupted one.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = seeded_rng(seed ^ 0x5851_f42d_4c95_7f2d);
    rng.set_stream(step as u64);
    rng
}

/// Tensors of one training batch.
pub struct TrainBatch {
    pub conditions: Conditions,
    pub start: Tensor,
    pub goal: Tensor,
    pub clean_actions: Tensor,
    pub noisy: Tensor,
    pub steps: Vec<usize>,
    pub mask: Tensor,
}

fn one_hot_actions(batch: &[&PlanningInstance], dims: StateDims) -> Vec<f64> {
    let a = dims.num_actions;
    let mut out = vec![0.0; batch.len() * dims.horizon * a];
    for (b, inst) in batch.iter().enumerate() {
        for (t, &act) in inst.actions.iter().enumerate() {
            out[(b * dims.horizon + t) * a + act] = 1.0;
        }
    }
    out
}

/// Samples a batch, a diffusion step per instance and noise, and diffuses the
/// action block. Condition blocks stay clean.
pub fn make_batch(
    data: &[PlanningInstance],
    ckpt: &Checkpoint,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch> {
    let dims = ckpt.model.config().dims;
    let cfg = &ckpt.train;
    let dtype = ckpt.model.dtype();
    let batch: Vec<&PlanningInstance> = (0..cfg.batch_size)
        .map(|_| data.choose(rng).expect("nonempty training set"))
        .collect();
    if let Some(bad) = batch.iter().find(|i| i.horizon != dims.horizon) {
        return Err(Error::shape(format!("instance horizon {}, model horizon {}", bad.horizon, dims.horizon)));
    }
    let (t, a, b) = (dims.horizon, dims.num_actions, batch.len());
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=ckpt.schedule.steps)).collect();

    let mut noise = Vec::with_capacity(b * t * a);
    let mut mask = Vec::with_capacity(b * t * a);
    for inst in &batch {
        let active = ckpt.scopes.active(inst.task_id)?;
        if cfg.mask_training_noise {
            noise.extend(masked_init(&active, t, rng)?);
        } else {
            noise.extend(gaussian_init(a, t, rng));
        }
        mask.extend(task_mask(&active, t, cfg.rho, cfg.mask_loss)?);
    }
    let clean = one_hot_actions(&batch, dims);
    let mut noisy = Vec::with_capacity(clean.len());
    for (i, (&x0, &e)) in clean.iter().zip(&noise).enumerate() {
        let ab = ckpt.schedule.alpha_bar(steps[i / (t * a)]);
        noisy.push(ab.sqrt() * x0 + (1.0 - ab).sqrt() * e);
    }
    let tensor = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, t, a), &Device::Cpu)?.to_dtype(dtype)?) };
    let (start, goal) = observation_tensors(batch.iter().copied(), dtype)?;
    let tasks: Vec<usize> = batch.iter().map(|i| i.task_id).collect();
    let conditions = Conditions::new(dims, &tasks, &start, &goal)?;
    let noisy_actions = tensor(noisy)?;
    Ok(TrainBatch {
        noisy: build_state_matrix(&conditions, &noisy_actions)?,
        conditions,
        start,
        goal,
        clean_actions: tensor(clean)?,
        steps,
        mask: tensor(mask)?,
    })
}

/// Forward pass and loss of one batch.
pub fn batch_loss(ckpt: &Checkpoint, batch: &TrainBatch) -> Result<Tensor> {
    let model = &ckpt.model;
    let dims = model.config().dims;
    let features = model.features(&batch.start, &batch.goal)?;
    let pred = model.predict_clean(&batch.noisy, &batch.steps, &features)?;
    let weights = ckpt.train.loss.weights(dims.horizon, ckpt.train.w0)?;
    proximity_loss(&action_block(&pred, dims)?, &batch.clean_actions, &weights, &batch.mask)
}

/// Trains until `stop_at` (capped at the configured total), continuing from
/// the checkpoint's step counter. Returns the logged steps.
pub fn train_diffusion(
    data: &[PlanningInstance],
    ckpt: &mut Checkpoint,
    stop_at: usize,
    mut on_log: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(Error::Empty("diffusion training set is empty".into()));
    }
    let stop = stop_at.min(ckpt.train.total_steps);
    let mut logs = Vec::new();
    while ckpt.step < stop {
        let step = ckpt.step;
        let mut rng = step_rng(ckpt.train.seed, step);
        let batch = make_batch(data, ckpt, &mut rng)?;
        let loss = batch_loss(ckpt, &batch)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        // the rate for the update taken at step s is the schedule at s + 1,
        // so the very first update is not a no-op
        let lr = lr_schedule(step + 1, &ckpt.train);
        ckpt.optimizer.step(ckpt.model.params(), &loss.backward()?, lr)?;
        ckpt.step += 1;
        if step % ckpt.train.log_every.max(1) == 0 || ckpt.step == stop {
            let entry = StepLog { step, lr, loss: value };
            on_log(&entry);
            logs.push(entry);
        }
    }
    Ok(logs)
}

/// Gradient norms of the interpolation parameters `(tau, W, k)` after one
/// backward pass on a fresh batch.
pub fn interpolation_grad_norms(data: &[PlanningInstance], ckpt: &Checkpoint) -> Result<[f64; 3]> {
    let mut rng = step_rng(ckpt.train.seed, ckpt.step);
    let batch = make_batch(data, ckpt, &mut rng)?;
    let grads = batch_loss(ckpt, &batch)?.backward()?;
    let p = ckpt.model.params();
    Ok([
        grad_norm(p, &grads, "interp.interpolator.tau")?,
        grad_norm(p, &grads, "interp.interpolator.w")?,
        grad_norm(p, &grads, "interp.interpolator.k")?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Masked noise at initialization only.
    #[default]
    Init,
    /// Masked initialization and inactive columns zeroed after every step.
    Iteration,
    /// Plain Gaussian initialization.
    None,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(MaskMode::Init),
            "iteration" => Ok(MaskMode::Iteration),
            "none" => Ok(MaskMode::None),
            other => Err(Error::config(format!("unknown mask mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub mask_mode: MaskMode,
    pub ddim_steps: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub chunk_size: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            mask_mode: MaskMode::Init,
            ddim_steps: 10,
            num_samples: 1,
            seed: 0,
            chunk_size: 256,
        }
    }
}

/// Where the task class conditioning sampling comes from.
#[derive(Clone, Copy)]
pub enum TaskSource<'a> {
    Classifier(&'a TaskClassifier),
    Given(&'a [usize]),
}

/// Per-row argmax over the full action vocabulary, lowest id on ties.
/// `block` is `(T, A)`.
pub fn decode_actions(block: &Tensor) -> Result<Plan> {
    argmax_rows(block)
}

fn sample_rng(seed: u64, instance: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = seeded_rng(seed ^ 0x2545_f491_4f6c_dd1d);
    rng.set_stream(((instance as u64) << 20) | sample as u64);
    rng
}

/// `num_samples` plans per instance, `[instance][sample]`.
pub fn sample_plans(
    instances: &[PlanningInstance],
    ckpt: &Checkpoint,
    tasks: TaskSource,
    opts: &SampleOptions,
) -> Result<Vec<Vec<Plan>>> {
    if opts.num_samples == 0 {
        return Err(Error::config("need at least one sample per instance"));
    }
    let predicted = match tasks {
        TaskSource::Classifier(c) => c.predict(instances)?,
        TaskSource::Given(t) => {
            if t.len() != instances.len() {
                return Err(Error::shape(format!("{} task labels for {} instances", t.len(), instances.len())));
            }
            t.to_vec()
        }
    };
    let dims = ckpt.model.config().dims;
    let mut plans = vec![Vec::with_capacity(opts.num_samples); instances.len()];
    let chunk = opts.chunk_size.max(1);
    for start_idx in (0..instances.len()).step_by(chunk) {
        let end = (start_idx + chunk).min(instances.len());
        let part = &instances[start_idx..end];
        if let Some(bad) = part.iter().find(|i| i.horizon != dims.horizon) {
            return Err(Error::shape(format!("instance horizon {}, model horizon {}", bad.horizon, dims.horizon)));
        }
        let (start, goal) = observation_tensors(part.iter(), ckpt.model.dtype())?;
        let conditions = Conditions::new(dims, &predicted[start_idx..end], &start, &goal)?;
        let features = ckpt.model.features(&start, &goal)?;
        for k in 0..opts.num_samples {
            let decoded = sample_chunk(ckpt, &conditions, &features, &predicted[start_idx..end], start_idx, k, opts)?;
            for (i, plan) in decoded.into_iter().enumerate() {
                plans[start_idx + i].push(plan);
            }
        }
    }
    Ok(plans)
}

fn sample_chunk(
    ckpt: &Checkpoint,
    conditions: &Conditions,
    features: &LatentFeatureSet,
    tasks: &[usize],
    offset: usize,
    sample: usize,
    opts: &SampleOptions,
) -> Result<Vec<Plan>> {
    let dims = conditions.dims();
    let (t, a, b) = (dims.horizon, dims.num_actions, tasks.len());
    let dtype = ckpt.model.dtype();
    let mut init = Vec::with_capacity(b * t * a);
    let mut keep = Vec::with_capacity(b * t * a);
    for (i, &task) in tasks.iter().enumerate() {
        let active = ckpt.scopes.active(task)?;
        let mut rng = sample_rng(opts.seed, offset + i, sample);
        match opts.mask_mode {
            MaskMode::Init | MaskMode::Iteration => init.extend(masked_init(&active, t, &mut rng)?),
            MaskMode::None => init.extend(gaussian_init(a, t, &mut rng)),
        }
        let row: Vec<f64> = active.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect();
        keep.extend(row.repeat(t));
    }
    let tensor = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, t, a), &Device::Cpu)?.to_dtype(dtype)?) };
    let keep = tensor(keep)?;
    let mut x = build_state_matrix(conditions, &tensor(init)?)?;

    let visits = ckpt.schedule.strided_steps(opts.ddim_steps);
    for (i, &n) in visits.iter().enumerate() {
        let prev = visits.get(i + 1).copied().unwrap_or(0);
        // sampling never backpropagates; detaching drops the op graph that
        // would otherwise chain every step's activations together
        let x0 = ckpt.model.predict_clean(&x, &vec![n; b], features)?.detach();
        let eps = implied_noise(&x, &x0, n, &ckpt.schedule)?;
        let next = ddim_jump(&x, n, prev, &eps, &ckpt.schedule)?;
        x = condition_project(&next, conditions)?;
        if opts.mask_mode == MaskMode::Iteration {
            let actions = (action_block(&x, dims)? * &keep)?;
            x = build_state_matrix(conditions, &actions)?;
        }
    }
    let actions = action_block(&x, dims)?;
    (0..b).map(|i| decode_actions(&actions.get(i)?)).collect()
}

/// Groups instances that share a goal pair, identified by task, first and
/// last action; each group pools the ground-truth plans and all samples of
/// its members.
pub fn goal_groups(instances: &[PlanningInstance], samples: &[Vec<Plan>]) -> Result<Vec<PlanGroup>> {
    if instances.len() != samples.len() {
        return Err(Error::shape(format!("{} sample lists for {} instances", samples.len(), instances.len())));
    }
    let mut groups: BTreeMap<(usize, usize, usize), PlanGroup> = BTreeMap::new();
    for (inst, s) in instances.iter().zip(samples) {
        let (first, last) = match (inst.actions.first(), inst.actions.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => return Err(Error::Empty("instance without actions".into())),
        };
        let g = groups.entry((inst.task_id, first, last)).or_insert_with(|| PlanGroup {
            gt: Vec::new(),
            samples: Vec::new(),
        });
        g.gt.push(inst.actions.clone());
        g.samples.extend(s.iter().cloned());
    }
    Ok(groups.into_values().collect())
}
