mod common;

use common::*;
use gst_autodiff::{ParamStore, Tensor};
use gst_core::encoder::{encode_nodes, normalized_adjacency};
use gst_core::gradcheck::{check_block, Block};
use gst_core::graph::adjacency;
use gst_core::ModelConfig;
use proptest::prelude::*;
use rand::Rng;

fn random_adj(r: &mut impl Rng, mask: &[bool]) -> Tensor {
    let n = mask.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let mut s = 0.0;
        for j in 0..n {
            if mask[j] && r.gen_bool(0.7) {
                data[i * n + j] = r.gen_range(0.05..1.0);
                s += data[i * n + j];
            }
        }
        if s == 0.0 {
            data[i * n + i] = 1.0;
            s = 1.0;
        }
        for j in 0..n {
            data[i * n + j] /= s;
        }
    }
    Tensor::matrix(n, n, data).unwrap()
}

fn instance(seed: u64, n: usize) -> (ModelConfig, ParamStore, Tensor, Tensor, Vec<bool>) {
    let mut r = rng(seed);
    let cfg = small_config(false, 1);
    let model = jittered(cfg.clone(), seed);
    let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
    mask[0] = true;
    let v = uniform(&mut r, n, cfg.node_dim, -1.0, 1.0);
    let adj = random_adj(&mut r, &mask);
    (cfg, model.params, v, adj, mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn absent_node_features_do_not_leak(seed in any::<u64>(), n in 1usize..8) {
        let (cfg, params, v, adj, mask) = instance(seed, n);
        let mut r = rng(seed ^ 1);
        let zeroed: Vec<f64> = v.data().iter().enumerate()
            .map(|(k, x)| if mask[k / cfg.node_dim] { *x } else { 0.0 }).collect();
        let noisy: Vec<f64> = v.data().iter().enumerate()
            .map(|(k, x)| if mask[k / cfg.node_dim] { *x } else { r.gen_range(-100.0..100.0) }).collect();
        let a = encode_nodes(&Tensor::matrix(n, cfg.node_dim, zeroed).unwrap(), &adj, &mask, &params, &cfg).unwrap();
        let b = encode_nodes(&Tensor::matrix(n, cfg.node_dim, noisy).unwrap(), &adj, &mask, &params, &cfg).unwrap();
        prop_assert_eq!(a.data(), b.data());
        for i in 0..n {
            if !mask[i] {
                prop_assert!(a.row(i).iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn permutation_equivariance(seed in any::<u64>(), n in 1usize..8) {
        use rand::seq::SliceRandom;
        let (cfg, params, v, adj, mask) = instance(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed ^ 2));
        let out = encode_nodes(&v, &adj, &mask, &params, &cfg).unwrap();
        let pmask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let pout = encode_nodes(&permute_rows(&v, &perm), &permute_square(&adj, &perm), &pmask, &params, &cfg).unwrap();
        // attention sums run in a different order after permuting
        prop_assert!(max_abs_diff(pout.data(), permute_rows(&out, &perm).data()) < 1e-12);
    }
}

fn linear(params: &ParamStore, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = params.get(&format!("{prefix}.weight")).unwrap();
    let b = params.get(&format!("{prefix}.bias")).unwrap();
    let (fi, fo) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            (0..fo)
                .map(|o| b.data()[o] + (0..fi).map(|i| row[i] * w.data()[i * fo + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(params: &ParamStore, prefix: &str, x: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    let g = params.get(&format!("{prefix}.gain")).unwrap();
    let b = params.get(&format!("{prefix}.bias")).unwrap();
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) / (var + eps).sqrt() * g.data()[k] + b.data()[k])
                .collect()
        })
        .collect()
}

/// Textbook post-norm encoder: masked multi-head attention over valid keys,
/// then a ReLU feed-forward block; invalid rows zeroed after each layer.
fn reference_encoder(
    cfg: &ModelConfig,
    params: &ParamStore,
    v: &Tensor,
    mask: &[bool],
) -> Vec<Vec<f64>> {
    let n = mask.len();
    let d = cfg.node_dim;
    let heads = cfg.encoder_heads;
    let dk = d / heads;
    let mut x: Vec<Vec<f64>> = (0..n).map(|i| v.row(i).to_vec()).collect();
    for l in 0..cfg.encoder_layers {
        let pre = format!("encoder.layer{l}");
        let q = linear(params, &format!("{pre}.attn.query"), &x);
        let k = linear(params, &format!("{pre}.attn.key"), &x);
        let val = linear(params, &format!("{pre}.attn.value"), &x);
        let mut cat = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let valid: Vec<usize> = (0..n).filter(|&j| mask[i] && mask[j]).collect();
                if valid.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = valid
                    .iter()
                    .map(|&j| {
                        (0..dk)
                            .map(|c| q[i][h * dk + c] * k[j][h * dk + c])
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&valid) {
                    for c in 0..dk {
                        cat[i][h * dk + c] += w / z * val[j][h * dk + c];
                    }
                }
            }
        }
        let attn = linear(params, &format!("{pre}.attn.out"), &cat);
        let r1: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();
        let x1 = norm(params, &format!("{pre}.norm1"), &r1, cfg.layer_norm_eps);
        let hid: Vec<Vec<f64>> = linear(params, &format!("{pre}.ff.hidden"), &x1)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let ff = linear(params, &format!("{pre}.ff.out"), &hid);
        let r2: Vec<Vec<f64>> = x1
            .iter()
            .zip(&ff)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();
        x = norm(params, &format!("{pre}.norm2"), &r2, cfg.layer_norm_eps);
        for (i, row) in x.iter_mut().enumerate() {
            if !mask[i] {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    x
}

#[test]
fn binary_adjacency_matches_textbook_encoder() {
    for seed in 0..200u64 {
        let n = 1 + (seed as usize % 4);
        let (cfg, params, v, _, mask) = instance(seed, n);
        let adj = normalized_adjacency(&adjacency(&mask), n);
        let out = encode_nodes(&v, &adj, &mask, &params, &cfg).unwrap();
        let want: Vec<f64> = reference_encoder(&cfg, &params, &v, &mask).concat();
        let err = max_abs_diff(out.data(), &want);
        assert!(err < 1e-10, "seed {seed}: {err:e}");
    }
}

#[test]
fn three_layer_encoder_gradients_match_finite_differences() {
    for seed in 0..8 {
        for n in 1..=5 {
            let r = check_block(Block::Encoder, n, 100 + seed).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
