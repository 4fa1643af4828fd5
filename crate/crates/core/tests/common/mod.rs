#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stzero::data::{synth_dataset, Dataset, SynthConfig};
use stzero::nd::Tensor;
use stzero::train::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn small_synth() -> SynthConfig {
    SynthConfig {
        n_slides: 2,
        windows_per_slide: 40,
        n_genes: 8,
        n_seen: 6,
        d_e: 6,
        d_t: 4,
        l: 5,
        d_latent: 3,
        noise_sigma: 0.1,
        seed: 11,
    }
}

pub fn small_dataset() -> Dataset {
    synth_dataset(&small_synth()).unwrap().dataset
}

/// A model small enough to train for a few epochs in well under a second.
pub fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        sage_layers: 2,
        hidden: 12,
        proj_dim: 6,
        emb_blocks: 1,
        emb_dim: 8,
        heads: 2,
        epochs,
        genes_per_step: 4,
        lr: 5e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, step: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Full O(N²) sort of every other node by (distance, index).
pub fn knn_oracle(points: &Tensor, k: usize, cosine: bool) -> Vec<Vec<usize>> {
    let n = points.rows();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        if cosine {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for t in 0..a.len() {
                dot += a[t] * b[t];
                na += a[t] * a[t];
                nb += b[t] * b[t];
            }
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        } else {
            let mut s = 0.0;
            for t in 0..a.len() {
                s += (a[t] - b[t]).powi(2);
            }
            s
        }
    };
    (0..n)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist(points.row(i), points.row(j)), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// One GraphSAGE layer written as explicit per-node loops.
pub fn sage_layer_oracle(
    h: &Tensor,
    pos: &[Vec<usize>],
    fea: &[Vec<usize>],
    w: &Tensor,
    relu: bool,
) -> Tensor {
    let (n, d) = h.dims();
    let d_out = w.cols();
    let mut out = Tensor::zeros(n, d_out);
    for i in 0..n {
        let mut x = vec![0.0; 3 * d];
        x[..d].copy_from_slice(h.row(i));
        for (block, lists) in [(1, pos), (2, fea)] {
            let list = &lists[i];
            for t in 0..d {
                let s: f64 = list.iter().map(|&j| h.get(j, t)).sum();
                x[block * d + t] = if list.is_empty() {
                    0.0
                } else {
                    s / list.len() as f64
                };
            }
        }
        for o in 0..d_out {
            let mut acc = 0.0;
            for t in 0..3 * d {
                acc += x[t] * w.get(t, o);
            }
            out.set(i, o, if relu { acc.max(0.0) } else { acc });
        }
    }
    out
}

/// Pearson correlation from raw moment sums.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Linear-interpolated quantile by direct rank arithmetic.
pub fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}
