//! Synthetic procedure-planning world.
//!
//! Each task owns a fixed subset of the action vocabulary and a preferred
//! cyclic ordering of it. A video trace is a walk through that ordering with
//! occasional deviations. Latent world states start near a task anchor and
//! move by a fixed per-action effect vector after every action; observations
//! are the latent states plus Gaussian noise.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Archive, ArchiveWriter};

pub const MIN_HORIZON: usize = 3;
pub const MAX_HORIZON: usize = 6;
const DATASET_KIND: &str = "mtid-dataset";

fn default_order_fidelity() -> f64 {
    0.85
}

fn default_anchor_scale() -> f64 {
    1.0
}

fn default_effect_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub num_tasks: usize,
    pub num_actions: usize,
    pub obs_dim: usize,
    pub actions_per_task: usize,
    pub plans_per_task: usize,
    pub plan_length_range: (usize, usize),
    pub obs_noise_sigma: f64,
    pub seed: u64,
    /// Fraction of each task's scope drawn from a pool shared by all tasks.
    #[serde(default)]
    pub scope_overlap: f64,
    /// Probability that the next action follows the task's preferred order.
    #[serde(default = "default_order_fidelity")]
    pub order_fidelity: f64,
    #[serde(default = "default_anchor_scale")]
    pub anchor_scale: f64,
    #[serde(default = "default_effect_scale")]
    pub effect_scale: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            num_actions: 25,
            obs_dim: 32,
            actions_per_task: 5,
            plans_per_task: 140,
            plan_length_range: (5, 9),
            obs_noise_sigma: 0.1,
            seed: 0,
            scope_overlap: 0.0,
            order_fidelity: default_order_fidelity(),
            anchor_scale: default_anchor_scale(),
            effect_scale: default_effect_scale(),
        }
    }
}

impl WorldSpec {
    fn shared_count(&self) -> usize {
        (self.scope_overlap * self.actions_per_task as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::config(m.to_string()));
        if self.num_tasks == 0 || self.num_actions == 0 || self.obs_dim == 0 {
            return cfg("num_tasks, num_actions and obs_dim must be positive");
        }
        if self.plans_per_task == 0 {
            return cfg("plans_per_task must be positive");
        }
        if self.actions_per_task < 2 || self.actions_per_task > self.num_actions {
            return cfg("actions_per_task must lie in 2..=num_actions");
        }
        let (lo, hi) = self.plan_length_range;
        if lo < MIN_HORIZON || hi < lo {
            return cfg("plan_length_range must satisfy 3 <= min <= max");
        }
        if !(self.obs_noise_sigma >= 0.0 && self.obs_noise_sigma.is_finite()) {
            return cfg("obs_noise_sigma must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.scope_overlap) || !(0.0..=1.0).contains(&self.order_fidelity) {
            return cfg("scope_overlap and order_fidelity must lie in [0, 1]");
        }
        let shared = self.shared_count();
        let unique = self.actions_per_task - shared;
        let needed = self.num_tasks * unique + shared;
        if needed > self.num_actions {
            return Err(Error::InfeasibleWorld(format!(
                "{} tasks x {} own actions + {} shared need {needed} ids, vocabulary has {}",
                self.num_tasks, unique, shared, self.num_actions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTrace {
    pub id: usize,
    pub task_id: usize,
    pub actions: Vec<usize>,
    /// `(actions.len() + 1) x obs_dim`, row-major.
    pub state_embeddings: Vec<f32>,
    pub obs_dim: usize,
}

impl VideoTrace {
    pub fn state(&self, k: usize) -> &[f32] {
        &self.state_embeddings[k * self.obs_dim..(k + 1) * self.obs_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanningInstance {
    pub trace_id: usize,
    pub window_start: usize,
    pub task_id: usize,
    pub horizon: usize,
    pub start_obs: Vec<f32>,
    pub goal_obs: Vec<f32>,
    pub actions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `Task(c)`: sorted action ids available to task `c`.
    pub scopes: Vec<Vec<usize>>,
    pub traces: Vec<VideoTrace>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_tasks;
    let shared = spec.shared_count();
    let unique = spec.actions_per_task - shared;

    let mut ids: Vec<usize> = (0..spec.num_actions).collect();
    ids.shuffle(&mut rng);
    let pool = &ids[c * unique..c * unique + shared];
    // preferred order: a random permutation of the scope
    let orders: Vec<Vec<usize>> = (0..c)
        .map(|t| {
            let mut scope: Vec<usize> = ids[t * unique..(t + 1) * unique].to_vec();
            scope.extend_from_slice(pool);
            scope.shuffle(&mut rng);
            scope
        })
        .collect();
    let scopes = orders
        .iter()
        .map(|o| {
            let mut s = o.clone();
            s.sort_unstable();
            s
        })
        .collect();

    let o = spec.obs_dim;
    let anchors: Vec<Vec<f64>> = (0..c).map(|_| gaussian_vec(&mut rng, o, spec.anchor_scale)).collect();
    let effects: Vec<Vec<f64>> = (0..spec.num_actions)
        .map(|_| gaussian_vec(&mut rng, o, spec.effect_scale))
        .collect();

    let (lo, hi) = spec.plan_length_range;
    let mut traces = Vec::with_capacity(c * spec.plans_per_task);
    for task in 0..c {
        let order = &orders[task];
        let k = order.len();
        for _ in 0..spec.plans_per_task {
            let len = rng.random_range(lo..=hi);
            let mut pos = rng.random_range(0..k);
            let mut actions = Vec::with_capacity(len);
            actions.push(order[pos]);
            for _ in 1..len {
                let next = (pos + 1) % k;
                pos = if k <= 2 || rng.random::<f64>() < spec.order_fidelity {
                    next
                } else {
                    // any other action except a repeat or the preferred successor
                    let others: Vec<usize> = (0..k).filter(|&p| p != pos && p != next).collect();
                    *others.choose(&mut rng).unwrap()
                };
                actions.push(order[pos]);
            }

            let mut state: Vec<f64> = anchors[task]
                .iter()
                .zip(gaussian_vec(&mut rng, o, 0.3 * spec.anchor_scale))
                .map(|(a, j)| a + j)
                .collect();
            let mut states = Vec::with_capacity((len + 1) * o);
            states.extend(state.iter().map(|&v| v as f32));
            for &a in &actions {
                for (s, e) in state.iter_mut().zip(&effects[a]) {
                    *s += e;
                }
                states.extend(state.iter().map(|&v| v as f32));
            }
            traces.push(VideoTrace {
                id: traces.len(),
                task_id: task,
                actions,
                state_embeddings: states,
                obs_dim: o,
            });
        }
    }
    Ok(World { spec: spec.clone(), scopes, traces })
}

/// Observation noise settings for windowing; the rng stream for each window
/// is derived from `seed`, the trace id, the horizon and the window start.
#[derive(Debug, Clone, Copy)]
pub struct ObservationNoise {
    pub sigma: f64,
    pub seed: u64,
}

fn window_rng(seed: u64, trace: usize, horizon: usize, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((trace as u64) << 24) | ((horizon as u64) << 16) | start as u64);
    rng
}

pub fn window_instances(
    trace: &VideoTrace,
    horizon: usize,
    noise: ObservationNoise,
) -> Result<Vec<PlanningInstance>> {
    if !(MIN_HORIZON..=MAX_HORIZON).contains(&horizon) {
        return Err(Error::config(format!("horizon {horizon} outside 3..=6")));
    }
    let num = trace.actions.len();
    if num < horizon {
        return Err(Error::TraceTooShort { len: num, horizon });
    }
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::config(e.to_string()))?;
    let observe = |k: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        trace
            .state(k)
            .iter()
            .map(|&v| if noise.sigma == 0.0 { v } else { (v as f64 + normal.sample(rng)) as f32 })
            .collect()
    };
    Ok((0..=num - horizon)
        .map(|t| {
            let mut rng = window_rng(noise.seed, trace.id, horizon, t);
            let start_obs = observe(t, &mut rng);
            let goal_obs = observe(t + horizon, &mut rng);
            PlanningInstance {
                trace_id: trace.id,
                window_start: t,
                task_id: trace.task_id,
                horizon,
                start_obs,
                goal_obs,
                actions: trace.actions[t..t + horizon].to_vec(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_fraction: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits trace ids per task: each task contributes `floor(fraction * n)` of
/// its traces to train and the rest to test.
pub fn split_traces(world: &World, train_fraction: f64) -> Result<Split> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config("train_fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(world.spec.seed.wrapping_add(1));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for task in 0..world.spec.num_tasks {
        let mut ids: Vec<usize> = world.traces.iter().filter(|t| t.task_id == task).map(|t| t.id).collect();
        if ids.len() < 2 {
            return Err(Error::UnsplittableTask {
                task,
                reason: format!("{} trace(s), need at least 2", ids.len()),
            });
        }
        let n_train = (train_fraction * ids.len() as f64).floor() as usize;
        if n_train == 0 || n_train == ids.len() {
            return Err(Error::UnsplittableTask {
                task,
                reason: format!("fraction {train_fraction} leaves an empty split"),
            });
        }
        ids.shuffle(&mut rng);
        train.extend_from_slice(&ids[..n_train]);
        test.extend_from_slice(&ids[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train_fraction, train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: World,
    pub split: Split,
}

impl Dataset {
    pub fn build(spec: &WorldSpec, train_fraction: f64) -> Result<Self> {
        let world = generate_world(spec)?;
        let split = split_traces(&world, train_fraction)?;
        Ok(Self { world, split })
    }

    pub fn noise(&self) -> ObservationNoise {
        ObservationNoise {
            sigma: self.world.spec.obs_noise_sigma,
            seed: self.world.spec.seed,
        }
    }

    /// All windows of the given horizon from one part of the split. Traces
    /// shorter than the horizon contribute nothing.
    pub fn instances(&self, horizon: usize, part: Part) -> Result<Vec<PlanningInstance>> {
        let ids = match part {
            Part::Train => &self.split.train,
            Part::Test => &self.split.test,
        };
        let mut out = Vec::new();
        for &id in ids {
            let trace = &self.world.traces[id];
            if trace.actions.len() >= horizon {
                out.extend(window_instances(trace, horizon, self.noise())?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let w = &self.world;
        let mut out = ArchiveWriter::create(dir, DATASET_KIND)?;
        let flat_scopes: Vec<i32> = w.scopes.iter().flatten().map(|&a| a as i32).collect();
        out.put_i32("scopes", &[w.scopes.len(), w.spec.actions_per_task], &flat_scopes)?;
        let n = w.traces.len();
        let tasks: Vec<i32> = w.traces.iter().map(|t| t.task_id as i32).collect();
        let lens: Vec<i32> = w.traces.iter().map(|t| t.actions.len() as i32).collect();
        let actions: Vec<i32> = w.traces.iter().flat_map(|t| t.actions.iter().map(|&a| a as i32)).collect();
        let states: Vec<f32> = w.traces.iter().flat_map(|t| t.state_embeddings.iter().copied()).collect();
        out.put_i32("trace_task", &[n], &tasks)?;
        out.put_i32("trace_length", &[n], &lens)?;
        out.put_i32("trace_actions", &[actions.len()], &actions)?;
        out.put_f32("state_embeddings", &[states.len() / w.spec.obs_dim, w.spec.obs_dim], &states)?;
        let ids = |v: &[usize]| v.iter().map(|&i| i as i32).collect::<Vec<_>>();
        out.put_i32("split_train", &[self.split.train.len()], &ids(&self.split.train))?;
        out.put_i32("split_test", &[self.split.test.len()], &ids(&self.split.test))?;
        out.finish(serde_json::json!({
            "world_spec": w.spec,
            "seed": w.spec.seed,
            "train_fraction": self.split.train_fraction,
            "num_traces": n,
        }))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let archive = Archive::open(dir, DATASET_KIND)?;
        let malformed = |reason: &str| Error::Malformed {
            path: dir.to_path_buf(),
            reason: reason.to_string(),
        };
        let spec: WorldSpec = serde_json::from_value(archive.meta()["world_spec"].clone())?;
        let train_fraction = archive.meta()["train_fraction"]
            .as_f64()
            .ok_or_else(|| malformed("missing train_fraction"))?;
        let (scope_shape, scopes) = archive.i32("scopes")?;
        let (_, tasks) = archive.i32("trace_task")?;
        let (_, lens) = archive.i32("trace_length")?;
        let (_, actions) = archive.i32("trace_actions")?;
        let (state_shape, states) = archive.f32("state_embeddings")?;
        let (_, train) = archive.i32("split_train")?;
        let (_, test) = archive.i32("split_test")?;
        let o = spec.obs_dim;
        if scope_shape.len() != 2 || state_shape.get(1) != Some(&o) || tasks.len() != lens.len() {
            return Err(malformed("inconsistent array shapes"));
        }

        let scopes = scopes
            .chunks(scope_shape[1].max(1))
            .map(|c| c.iter().map(|&a| a as usize).collect())
            .collect();
        let mut traces = Vec::with_capacity(tasks.len());
        let (mut a_off, mut s_off) = (0usize, 0usize);
        for (id, (&task, &len)) in tasks.iter().zip(&lens).enumerate() {
            let len = len as usize;
            if a_off + len > actions.len() || (s_off + len + 1) * o > states.len() {
                return Err(malformed("trace arrays shorter than recorded lengths"));
            }
            traces.push(VideoTrace {
                id,
                task_id: task as usize,
                actions: actions[a_off..a_off + len].iter().map(|&a| a as usize).collect(),
                state_embeddings: states[s_off * o..(s_off + len + 1) * o].to_vec(),
                obs_dim: o,
            });
            a_off += len;
            s_off += len + 1;
        }
        let to_ids = |v: Vec<i32>| v.into_iter().map(|i| i as usize).collect();
        Ok(Self {
            world: World { spec, scopes, traces },
            split: Split {
                train_fraction,
                train: to_ids(train),
                test: to_ids(test),
            },
        })
    }
}

/// Scope table lookup: membership bitmap per task, `[task][action]`.
pub fn scope_table(world: &World) -> Vec<Vec<bool>> {
    world
        .scopes
        .iter()
        .map(|s| {
            let set: BTreeSet<usize> = s.iter().copied().collect();
            (0..world.spec.num_actions).map(|a| set.contains(&a)).collect()
        })
        .collect()
}
