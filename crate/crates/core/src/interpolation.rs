//! Latent temporal interpolation.
//!
//! Start and goal observations are encoded to latent vectors, `M` convex
//! mixtures of the two are formed with a learnable sigmoid-gated ratio
//! matrix, and a transformer encoder refines the mixtures into the features
//! consumed by the denoiser's cross-attention sites.

use candle_core::{Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::denoiser::UNetConfig;
use crate::error::{Error, Result};
use crate::nn::{relu, sigmoid, Conv1d, EncoderLayer, Init, InitKind, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolationStrategy {
    /// `phi = sigmoid(W * tau + k)`, learned end to end.
    #[default]
    Learned,
    /// Every feature is the encoded goal.
    #[serde(rename = "copy-gs")]
    CopyGoal,
    /// First half the encoded start, second half the encoded goal.
    #[serde(rename = "copy-lt")]
    CopyLt,
    /// Evenly spaced fixed ratios `j / (M + 1)`.
    FixedLinear,
    /// Learned interpolation, then a second interpolation between the
    /// refined features `F_i` and `F_{M-i+1}` (1-based `i`).
    SecondInterpolation(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauInit {
    Constant(f64),
    LinearIncreasing,
    LinearDecreasing,
    Square,
    UpThenDown,
}

impl Default for TauInit {
    fn default() -> Self {
        TauInit::Constant(1.0)
    }
}

impl TauInit {
    /// Initial tau for feature `j` of `m` (0-based).
    pub fn value(self, j: usize, m: usize) -> f64 {
        let x = (j as f64 + 1.0) / m as f64;
        match self {
            TauInit::Constant(c) => c,
            TauInit::LinearIncreasing => x,
            TauInit::LinearDecreasing => 1.0 - j as f64 / m as f64,
            TauInit::Square => x * x,
            TauInit::UpThenDown => 1.0 - (2.0 * (j as f64 + 0.5) / m as f64 - 1.0).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpolationConfig {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub encoder_channels: usize,
    pub encoder_kernel: usize,
    pub refiner_layers: usize,
    pub refiner_heads: usize,
    pub refiner_ff_dim: usize,
    pub strategy: InterpolationStrategy,
    pub tau_init: TauInit,
    pub w_init_std: f64,
    pub use_encoder: bool,
    pub use_refiner: bool,
}

impl InterpolationConfig {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            latent_dim: obs_dim,
            encoder_channels: 8,
            encoder_kernel: 3,
            refiner_layers: 6,
            refiner_heads: 4,
            refiner_ff_dim: 4 * obs_dim,
            strategy: InterpolationStrategy::Learned,
            tau_init: TauInit::default(),
            w_init_std: 0.02,
            use_encoder: true,
            use_refiner: true,
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if !self.use_encoder && self.latent_dim != self.obs_dim {
            return Err(Error::config("latent_dim must equal obs_dim without an encoder"));
        }
        if let InterpolationStrategy::SecondInterpolation(i) = self.strategy {
            if i == 0 || 2 * i > m {
                return Err(Error::config(format!("second interpolation index {i} outside 1..={}", m / 2)));
            }
        }
        Ok(())
    }
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        Self::new(32)
    }
}

/// Number of residual temporal blocks, hence of interpolated features.
pub fn interpolation_count(unet: &UNetConfig) -> Result<usize> {
    let levels = unet.widths.len();
    let m = 2 * unet.blocks_per_level * levels + unet.middle_blocks;
    if m == 0 {
        return Err(Error::config("U-Net has no residual blocks"));
    }
    Ok(m)
}

/// Two convolutions over the feature axis with a rectifier between them.
#[derive(Debug, Clone)]
pub struct ObservationEncoder {
    conv1: Conv1d,
    conv2: Conv1d,
    proj: Option<Linear>,
}

impl ObservationEncoder {
    pub fn new(init: &mut Init, cfg: &InterpolationConfig) -> Result<Self> {
        let k = cfg.encoder_kernel;
        Ok(Self {
            conv1: Conv1d::same(&mut init.sub("conv1"), 1, cfg.encoder_channels, k)?,
            conv2: Conv1d::same(&mut init.sub("conv2"), cfg.encoder_channels, 1, k)?,
            proj: if cfg.latent_dim != cfg.obs_dim {
                Some(Linear::new(&mut init.sub("proj"), cfg.obs_dim, cfg.latent_dim)?)
            } else {
                None
            },
        })
    }

    /// `(B, O) -> (B, O_lat)`.
    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        let h = relu(&self.conv1.forward(&v.unsqueeze(1)?)?)?;
        let h = self.conv2.forward(&h)?.squeeze(1)?;
        Ok(match &self.proj {
            Some(p) => p.forward(&h)?,
            None => h,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TemporalRefiner {
    layers: Vec<EncoderLayer>,
}

impl TemporalRefiner {
    pub fn new(init: &mut Init, cfg: &InterpolationConfig) -> Result<Self> {
        let layers = (0..cfg.refiner_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut init.sub(i),
                    cfg.latent_dim,
                    cfg.refiner_heads,
                    cfg.refiner_ff_dim,
                    0.0,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `(B, M, O_lat) -> (B, M, O_lat)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.layers.iter().try_fold(x.clone(), |h, l| l.forward(&h, None))
    }
}

/// Raw interpolations `I` and refined features `F`, both `(B, M, O_lat)`.
#[derive(Debug, Clone)]
pub struct LatentFeatureSet {
    pub raw: Tensor,
    pub refined: Tensor,
}

impl LatentFeatureSet {
    pub fn count(&self) -> Result<usize> {
        Ok(self.refined.dim(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct InterpolationModule {
    cfg: InterpolationConfig,
    m: usize,
    encoder: Option<ObservationEncoder>,
    w: Tensor,
    k: Tensor,
    tau: Tensor,
    refiner: Option<TemporalRefiner>,
}

impl InterpolationModule {
    pub fn new(init: &mut Init, cfg: &InterpolationConfig, m: usize) -> Result<Self> {
        cfg.validate(m)?;
        let lat = cfg.latent_dim;
        let encoder = if cfg.use_encoder {
            Some(ObservationEncoder::new(&mut init.sub("encoder"), cfg)?)
        } else {
            None
        };
        let mut p = init.sub("interpolator");
        let w = p.param("w", &[m, lat], InitKind::Normal(cfg.w_init_std))?;
        let k = p.param("k", &[m, lat], InitKind::Zeros)?;
        let tau_values: Vec<f64> = (0..m)
            .flat_map(|j| std::iter::repeat(cfg.tau_init.value(j, m)).take(lat))
            .collect();
        let tau = p.param_values("tau", &[m, lat], tau_values)?;
        let refiner = if cfg.use_refiner {
            Some(TemporalRefiner::new(&mut init.sub("refiner"), cfg)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            m,
            encoder,
            w,
            k,
            tau,
            refiner,
        })
    }

    pub fn config(&self) -> &InterpolationConfig {
        &self.cfg
    }

    pub fn count(&self) -> usize {
        self.m
    }

    pub fn encode(&self, start: &Tensor, goal: &Tensor) -> Result<(Tensor, Tensor)> {
        let width = start.dim(D::Minus1)?;
        if width != self.cfg.obs_dim || goal.dim(D::Minus1)? != self.cfg.obs_dim {
            return Err(Error::shape(format!(
                "observation width {width}, encoder expects {}",
                self.cfg.obs_dim
            )));
        }
        match &self.encoder {
            Some(e) => Ok((e.forward(start)?, e.forward(goal)?)),
            None => Ok((start.clone(), goal.clone())),
        }
    }

    /// Interpolation ratios `phi`, `(M, O_lat)`, each entry in `(0, 1)`.
    pub fn phi(&self) -> Result<Tensor> {
        Ok(sigmoid(&((&self.w * &self.tau)? + &self.k)?)?)
    }

    fn ratios(&self) -> Result<Tensor> {
        let (m, lat) = (self.m, self.cfg.latent_dim);
        let dev = self.w.device();
        let rows = |f: &dyn Fn(usize) -> f64| -> Result<Tensor> {
            let v: Vec<f64> = (0..m).flat_map(|j| std::iter::repeat(f(j)).take(lat)).collect();
            Ok(Tensor::from_vec(v, (m, lat), dev)?.to_dtype(self.w.dtype())?)
        };
        match self.cfg.strategy {
            InterpolationStrategy::Learned | InterpolationStrategy::SecondInterpolation(_) => self.phi(),
            InterpolationStrategy::CopyGoal => rows(&|_| 1.0),
            InterpolationStrategy::CopyLt => rows(&|j| if j < m / 2 { 0.0 } else { 1.0 }),
            InterpolationStrategy::FixedLinear => rows(&|j| (j as f64 + 1.0) / (m as f64 + 1.0)),
        }
    }

    /// `I_j = (1 - phi_j) * L_s + phi_j * L_g`: `(B, O_lat) x 2 -> (B, M, O_lat)`.
    pub fn interpolate(&self, ls: &Tensor, lg: &Tensor) -> Result<Tensor> {
        mix(ls, lg, &self.ratios()?)
    }

    pub fn refine(&self, raw: &Tensor) -> Result<Tensor> {
        if raw.dim(1)? != self.m || raw.dim(2)? != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "refiner input {:?}, expected (B, {}, {})",
                raw.dims(),
                self.m,
                self.cfg.latent_dim
            )));
        }
        match &self.refiner {
            Some(r) => r.forward(raw),
            None => Ok(raw.clone()),
        }
    }

    pub fn forward(&self, start: &Tensor, goal: &Tensor) -> Result<LatentFeatureSet> {
        let (ls, lg) = self.encode(start, goal)?;
        let raw = self.interpolate(&ls, &lg)?;
        let mut refined = self.refine(&raw)?;
        if let InterpolationStrategy::SecondInterpolation(i) = self.cfg.strategy {
            let first = refined.narrow(1, i - 1, 1)?.squeeze(1)?;
            let last = refined.narrow(1, self.m - i, 1)?.squeeze(1)?;
            refined = mix(&first, &last, &self.phi()?)?;
        }
        Ok(LatentFeatureSet { raw, refined })
    }
}

/// Rowwise convex combination of two `(B, W)` tensors with `(M, W)` ratios.
pub fn mix(a: &Tensor, b: &Tensor, phi: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() || a.dim(D::Minus1)? != phi.dim(D::Minus1)? {
        return Err(Error::shape(format!(
            "interpolate: {:?}, {:?} with ratios {:?}",
            a.dims(),
            b.dims(),
            phi.dims()
        )));
    }
    let phi = phi.unsqueeze(0)?;
    let a = a.unsqueeze(1)?;
    let b = b.unsqueeze(1)?;
    let one_minus = (phi.ones_like()? - &phi)?;
    Ok((one_minus.broadcast_mul(&a)? + phi.broadcast_mul(&b)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, ParamStore};
    use candle_core::{DType, Device};

    fn module(cfg: &InterpolationConfig, m: usize) -> (ParamStore, InterpolationModule) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = seeded_rng(3);
        let module = InterpolationModule::new(&mut store.init(&mut rng), cfg, m).unwrap();
        (store, module)
    }

    fn small(o: usize) -> InterpolationConfig {
        InterpolationConfig {
            refiner_layers: 2,
            refiner_heads: 2,
            ..InterpolationConfig::new(o)
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n: usize = shape.iter().product();
        let v = crate::objective::gaussian_init(n, 1, &mut rng);
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn set_zero(store: &ParamStore, name: &str) {
        let v = store.get(name).unwrap();
        v.set(&v.zeros_like().unwrap()).unwrap();
    }

    #[test]
    fn identical_inputs_identical_latents() {
        let (_, m) = module(&small(8), 2);
        let v = randn(&[3, 8], 1);
        let (ls, lg) = m.encode(&v, &v).unwrap();
        assert_eq!(ls.dims(), &[3, 8]);
        assert_eq!(ls.flatten_all().unwrap().to_vec1::<f64>().unwrap(), lg.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert!(m.encode(&randn(&[3, 7], 1), &v).is_err());
    }

    #[test]
    fn zero_gate_gives_midpoint() {
        let (store, m) = module(&small(2), 3);
        set_zero(&store, "interpolator.w");
        let ls = Tensor::new(&[[0.0f64, 2.0]], &Device::Cpu).unwrap();
        let lg = Tensor::new(&[[4.0f64, 6.0]], &Device::Cpu).unwrap();
        let i = m.interpolate(&ls, &lg).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for row in i {
            assert_eq!(row, vec![2.0, 4.0]);
        }
    }

    #[test]
    fn hand_evaluated_mix() {
        let ls = Tensor::new(&[[0.0f64, 2.0]], &Device::Cpu).unwrap();
        let lg = Tensor::new(&[[4.0f64, 6.0]], &Device::Cpu).unwrap();
        let phi = Tensor::new(&[[0.25f64, 0.25]], &Device::Cpu).unwrap();
        let i = mix(&ls, &lg, &phi).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(i, vec![1.0, 3.0]);
    }

    #[test]
    fn saturated_gate_reaches_goal() {
        let (store, m) = module(&small(2), 2);
        let k = store.get("interpolator.k").unwrap();
        k.set(&(k.ones_like().unwrap() * 60.0).unwrap()).unwrap();
        let ls = Tensor::new(&[[0.0f64, 2.0]], &Device::Cpu).unwrap();
        let lg = Tensor::new(&[[4.0f64, 6.0]], &Device::Cpu).unwrap();
        let i = m.interpolate(&ls, &lg).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (got, want) in i.iter().zip([4.0, 6.0, 4.0, 6.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn copy_strategies() {
        let ls = randn(&[2, 4], 7);
        let lg = randn(&[2, 4], 8);
        let cfg = InterpolationConfig { strategy: InterpolationStrategy::CopyGoal, ..small(4) };
        let (_, m) = module(&cfg, 4);
        let i = m.interpolate(&ls, &lg).unwrap();
        for j in 0..4 {
            let row = i.narrow(1, j, 1).unwrap().squeeze(1).unwrap();
            assert_eq!(row.to_vec2::<f64>().unwrap(), lg.to_vec2::<f64>().unwrap());
        }
        let cfg = InterpolationConfig { strategy: InterpolationStrategy::CopyLt, ..small(4) };
        let (_, m) = module(&cfg, 4);
        let i = m.interpolate(&ls, &lg).unwrap();
        for j in 0..4 {
            let row = i.narrow(1, j, 1).unwrap().squeeze(1).unwrap().to_vec2::<f64>().unwrap();
            let want = if j + 1 <= 2 { &ls } else { &lg };
            assert_eq!(row, want.to_vec2::<f64>().unwrap());
        }
    }

    #[test]
    fn convexity_for_random_parameters() {
        for seed in 0..5 {
            let mut store = ParamStore::new(DType::F64);
            let mut rng = seeded_rng(seed);
            let cfg = InterpolationConfig { w_init_std: 3.0, ..small(6) };
            let m = InterpolationModule::new(&mut store.init(&mut rng), &cfg, 5).unwrap();
            let (ls, lg) = (randn(&[2, 6], seed + 10), randn(&[2, 6], seed + 20));
            let i = m.interpolate(&ls, &lg).unwrap().to_vec3::<f64>().unwrap();
            let (a, b) = (ls.to_vec2::<f64>().unwrap(), lg.to_vec2::<f64>().unwrap());
            for (bi, rows) in i.iter().enumerate() {
                for row in rows {
                    for d in 0..6 {
                        let (lo, hi) = (a[bi][d].min(b[bi][d]), a[bi][d].max(b[bi][d]));
                        assert!(row[d] >= lo - 1e-12 && row[d] <= hi + 1e-12);
                    }
                }
            }
            let phi = m.phi().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(phi.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn refine_shapes_and_determinism() {
        for m_count in [2, 14] {
            let (_, m) = module(&small(8), m_count);
            let raw = randn(&[2, m_count, 8], 4);
            let a = m.refine(&raw).unwrap();
            assert_eq!(a.dims(), raw.dims());
            let b = m.refine(&raw).unwrap();
            assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
        }
    }

    #[test]
    fn tau_initializers() {
        assert_eq!(TauInit::Constant(1.0).value(3, 14), 1.0);
        assert!((TauInit::LinearIncreasing.value(13, 14) - 1.0).abs() < 1e-12);
        assert!((TauInit::LinearDecreasing.value(0, 14) - 1.0).abs() < 1e-12);
        assert!(TauInit::Square.value(1, 4) < TauInit::LinearIncreasing.value(1, 4));
        let ud: Vec<f64> = (0..4).map(|j| TauInit::UpThenDown.value(j, 4)).collect();
        assert!(ud[1] > ud[0] && ud[2] > ud[3]);

        let cfg = InterpolationConfig { tau_init: TauInit::LinearIncreasing, ..small(2) };
        let (store, _) = module(&cfg, 4);
        let tau = store.get("interpolator.tau").unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(tau[0], vec![0.25, 0.25]);
        assert_eq!(tau[3], vec![1.0, 1.0]);
    }

    #[test]
    fn count_from_unet() {
        let full = UNetConfig::full();
        assert_eq!(interpolation_count(&full).unwrap(), 14);
        let tiny = UNetConfig {
            widths: vec![8],
            blocks_per_level: 1,
            middle_blocks: 0,
            ..UNetConfig::full()
        };
        assert_eq!(interpolation_count(&tiny).unwrap(), 2);
        let empty = UNetConfig { blocks_per_level: 0, middle_blocks: 0, ..tiny };
        assert!(interpolation_count(&empty).is_err());
    }
}
