#![allow(dead_code)]

use gst_autodiff::{ParamStore, Tensor};
use gst_core::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Small architecture for property tests.
pub fn small_config(sparsity: bool, neighbors: usize) -> ModelConfig {
    ModelConfig {
        node_dim: 8,
        edge_dim: 8,
        hidden_dim: 8,
        encoder_layers: 2,
        encoder_heads: 2,
        feed_forward_dim: 16,
        sparsity,
        neighbors,
        layer_norm_eps: 1e-5,
    }
}

/// Initialized model with every parameter jittered, so zero biases do not
/// hide bugs.
pub fn jittered(cfg: ModelConfig, seed: u64) -> Model {
    let mut model = Model::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let mut params = ParamStore::new();
    for (name, t) in model.params.iter() {
        let data = t
            .data()
            .iter()
            .map(|v| v + r.gen_range(-0.2..0.2))
            .collect();
        params.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    model.params = params;
    model
}

pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.cols();
    let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::matrix(perm.len(), cols, data).unwrap()
}

/// `P A P^T` for an `N x N` matrix, where row `k` of the result is row
/// `perm[k]` of `a`.
pub fn permute_square(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let data = (0..n * n)
        .map(|k| a.data()[perm[k / n] * n + perm[k % n]])
        .collect();
    Tensor::matrix(n, n, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
