//! Finite-difference gradient checking shared by the integration tests.

use candle_core::{Device, Tensor, Var};
use mtid_core::nn::{seeded_rng, ParamStore};
use mtid_core::objective::gaussian_init;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(gaussian_init(n, 1, &mut rng), shape, &Device::Cpu).unwrap()
}

/// Worst relative error between autograd and central differences over up to
/// `probes` entries of each named parameter.
pub fn check(store: &ParamStore, names: &[&str], probes: usize, loss: impl Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for name in names {
        let var: &Var = store.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let analytic = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let stride = (original.len() / probes).max(1);
        for i in (0..original.len()).step_by(stride).take(probes) {
            let eval = |delta: f64| {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(original.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-4);
            if err > 1e-3 {
                eprintln!("{name}[{i}]: numeric {numeric:e} analytic {:e}", analytic[i]);
            }
            worst = worst.max(err);
        }
    }
    worst
}
