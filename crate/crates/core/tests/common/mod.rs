//! Helpers shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use tunegen::model::{init_model, Example, ModelConfig, IGNORE_ID};
use tunegen::nn::{
    cross_entropy, finite_diff_check, finite_diff_check_at, gelu, gelu_backward, layer_norm,
    layer_norm_backward, matmul, matmul_backward, softmax_rows, softmax_rows_backward, Tensor,
    LAYER_NORM_EPS,
};
use tunegen::Rng;

/// Central-difference step used by every check.
pub const FD_EPS: f64 = 1e-5;

fn random_vec(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, std)).collect()
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Projects a tensor output onto fixed random weights so every output
/// element contributes to a scalar objective.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_matmul(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (m, k, n) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4));
    let w = random_vec(m * n, 1.0, &mut rng);
    let x = random_vec(m * k + k * n, 1.0, &mut rng);
    finite_diff_check(
        |x| {
            let a = tensor(&[m, k], &x[..m * k]);
            let b = tensor(&[k, n], &x[m * k..]);
            let c = matmul(&a, &b).unwrap();
            let (da, db) = matmul_backward(&a, &b, &tensor(&[m, n], &w)).unwrap();
            (dot(c.data(), &w), [da.data(), db.data()].concat())
        },
        &x,
        FD_EPS,
    )
}

pub fn check_softmax(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (r, c) = (1 + rng.below(4), 2 + rng.below(6));
    let w = random_vec(r * c, 1.0, &mut rng);
    let x = random_vec(r * c, 2.0, &mut rng);
    finite_diff_check(
        |x| {
            let y = softmax_rows(&tensor(&[r, c], x));
            let dx = softmax_rows_backward(&y, &tensor(&[r, c], &w));
            (dot(y.data(), &w), dx.data().to_vec())
        },
        &x,
        FD_EPS,
    )
}

pub fn check_layer_norm(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (r, h) = (1 + rng.below(4), 2 + rng.below(7));
    let w = random_vec(r * h, 1.0, &mut rng);
    let mut x = random_vec(r * h, 1.0, &mut rng);
    x.extend(random_vec(h, 0.5, &mut rng).iter().map(|v| 1.0 + v));
    x.extend(random_vec(h, 0.5, &mut rng));
    finite_diff_check(
        |x| {
            let xs = tensor(&[r, h], &x[..r * h]);
            let g = tensor(&[h], &x[r * h..r * h + h]);
            let b = tensor(&[h], &x[r * h + h..]);
            let (y, cache) = layer_norm(&xs, &g, &b, LAYER_NORM_EPS).unwrap();
            let (dx, dg, db) = layer_norm_backward(&cache, &g, &tensor(&[r, h], &w));
            (dot(y.data(), &w), [dx.data(), dg.data(), db.data()].concat())
        },
        &x,
        FD_EPS,
    )
}

pub fn check_gelu(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.below(16);
    let w = random_vec(n, 1.0, &mut rng);
    let x = random_vec(n, 2.0, &mut rng);
    finite_diff_check(
        |x| {
            let xs = tensor(&[n], x);
            let dx = gelu_backward(&xs, &tensor(&[n], &w));
            (dot(gelu(&xs).data(), &w), dx.data().to_vec())
        },
        &x,
        FD_EPS,
    )
}

pub fn check_cross_entropy(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (r, v) = (2 + rng.below(4), 2 + rng.below(6));
    let mut targets: Vec<usize> = (0..r).map(|_| rng.below(v)).collect();
    targets[r - 1] = IGNORE_ID;
    let x = random_vec(r * v, 2.0, &mut rng);
    finite_diff_check(
        |x| {
            let (loss, d) = cross_entropy(&tensor(&[r, v], x), &targets, IGNORE_ID).unwrap();
            (loss, d.data().to_vec())
        },
        &x,
        FD_EPS,
    )
}

/// A one-layer-each model small enough for exhaustive-ish checking.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        hidden: 8,
        heads: 2,
        ffn: 16,
        src_vocab: 11,
        tgt_vocab: 9,
        max_src_len: 8,
        max_tgt_len: 8,
        dropout: 0.0,
    }
}

/// Gradient check of the full teacher-forced loss with respect to every
/// parameter tensor. Weights are drawn with a larger spread than the
/// training initialization so attention is far from uniform. Two
/// coordinates of each tensor plus a random sample of the rest are probed.
pub fn check_seq2seq(seed: u64) -> f64 {
    let config = gradcheck_config();
    let mut model = init_model::<f64>(&config, seed).unwrap();
    let mut rng = Rng::derive(seed, 1);
    let x: Vec<f64> = model
        .params()
        .flatten()
        .iter()
        .map(|&v| v + rng.normal(0.0, 0.3))
        .collect();
    let src_len = 2 + rng.below(5);
    let tgt_len = 2 + rng.below(5);
    let src: Vec<usize> = (0..src_len).map(|_| rng.below(config.src_vocab)).collect();
    let mut src_pad = vec![false; src_len];
    src_pad[src_len - 1] = rng.bernoulli(0.5);
    let tgt_in: Vec<usize> = (0..tgt_len).map(|_| rng.below(config.tgt_vocab)).collect();
    let mut tgt_out: Vec<usize> = (0..tgt_len).map(|_| rng.below(config.tgt_vocab)).collect();
    if rng.bernoulli(0.5) {
        tgt_out[0] = IGNORE_ID;
    }
    let ex = Example {
        src,
        src_pad,
        tgt_in,
        tgt_out,
    };

    let mut coords = Vec::new();
    let mut offset = 0;
    for (_, t) in model.params().iter() {
        coords.push(offset + rng.below(t.len()));
        coords.push(offset + rng.below(t.len()));
        offset += t.len();
    }
    for _ in 0..32 {
        coords.push(rng.below(offset));
    }

    finite_diff_check_at(
        |x| {
            model.params_mut().assign_flat(x);
            let mut grads = model.zero_grads();
            let (loss, _) = model.example_loss(&ex, 1.0, Some(&mut grads), None).unwrap();
            (loss, grads.flatten())
        },
        &x,
        &coords,
        FD_EPS,
    )
}

/// Worst error of each check over `seeds`, labelled.
pub fn gradcheck_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    let checks: [(&'static str, fn(u64) -> f64); 6] = [
        ("matmul", check_matmul),
        ("softmax_rows", check_softmax),
        ("layer_norm", check_layer_norm),
        ("gelu", check_gelu),
        ("cross_entropy", check_cross_entropy),
        ("seq2seq_loss", check_seq2seq),
    ];
    checks
        .iter()
        .map(|&(name, f)| (name, seeds.clone().map(f).fold(0.0f64, f64::max)))
        .collect()
}
