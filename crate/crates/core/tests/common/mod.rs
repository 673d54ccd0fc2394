#![allow(dead_code)]

use flexattn::model::{AttentionKind, Model, ModelConfig};
use flexattn::tensor::Tensor;

/// Small dims so finite-difference checks stay fast.
pub fn tiny_config(kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        embed_dim: 3,
        hidden_dim: 2,
        preout_dim: 3,
        ..ModelConfig::new(10, 10, kind)
    }
}

pub fn tiny_model(kind: AttentionKind, seed: u64) -> Model {
    Model::new(tiny_config(kind), seed).unwrap()
}

/// Overwrites a parameter's values in place.
pub fn set_param(model: &mut Model, name: &str, values: &[f64]) {
    let t: &mut Tensor = model.params.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    assert_eq!(t.len(), values.len(), "{name}");
    t.values_mut().copy_from_slice(values);
}

/// Scales every parameter, giving the random init enough magnitude for
/// gradient checks to exercise non-linear regions.
pub fn scale_params(model: &mut Model, k: f64) {
    for t in model.params.tensors_mut() {
        t.values_mut().iter_mut().for_each(|v| *v *= k);
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y} (tol {tol})");
    }
}
