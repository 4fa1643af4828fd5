mod common;

use common::{rng, uniform};
use stzero::embedder::{EmbedderParams, EmbedderShape, GeneDescription, Split};
use stzero::nd::Tensor;
use stzero::Error;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

/// Embedding computed from the textbook definitions, with loops over heads
/// and explicit exponentials.
fn embed_oracle(p: &EmbedderParams, tokens: &Tensor) -> Vec<f64> {
    let d_e = p.cls.cols();
    let heads = p.heads;
    let dh = d_e / heads;
    let mut x = vec![p.cls.row(0).to_vec()];
    x.extend(mm(&mat(tokens), &mat(&p.in_proj)));
    for (i, row) in x.iter_mut().enumerate() {
        for (v, e) in row.iter_mut().zip(p.pos_emb.row(i)) {
            *v += e;
        }
    }
    let t = x.len();
    for b in &p.blocks {
        let n1 = layer_norm(&x, b.ln1_gain.row(0), b.ln1_bias.row(0));
        let (q, k, v) = (
            mm(&n1, &mat(&b.w_q)),
            mm(&n1, &mat(&b.w_k)),
            mm(&n1, &mat(&b.w_v)),
        );
        let mut cat = vec![vec![0.0; d_e]; t];
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[i][h * dh + c] * k[j][h * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[i][h * dh + c] = (0..t).map(|j| e[j] / z * v[j][h * dh + c]).sum();
                }
            }
        }
        let proj = mm(&cat, &mat(&b.w_o));
        for i in 0..t {
            for c in 0..d_e {
                x[i][c] += proj[i][c];
            }
        }
        let n2 = layer_norm(&x, b.ln2_gain.row(0), b.ln2_bias.row(0));
        let mut hid = mm(&n2, &mat(&b.w_1));
        for row in &mut hid {
            for (v, bias) in row.iter_mut().zip(b.b_1.row(0)) {
                *v = (*v + bias).max(0.0);
            }
        }
        let f = mm(&hid, &mat(&b.w_2));
        for i in 0..t {
            for c in 0..d_e {
                x[i][c] += f[i][c] + b.b_2.get(0, c);
            }
        }
    }
    mm(&vec![x[0].clone()], &mat(&p.out_proj)).remove(0)
}

fn shape() -> EmbedderShape {
    EmbedderShape {
        d_t: 5,
        d_e: 8,
        d: 6,
        l_max: 7,
        blocks: 2,
        heads: 4,
    }
}

/// Random nonzero values everywhere, so biases and gains are exercised.
fn scrambled(seed: u64) -> EmbedderParams {
    let mut r = rng(seed);
    let mut p = EmbedderParams::init(shape(), &mut r).unwrap();
    for t in p.tensors_mut() {
        let (rows, cols) = t.dims();
        *t = uniform(&mut r, rows, cols);
    }
    p
}

fn desc(tokens: Tensor) -> GeneDescription {
    GeneDescription {
        gene: "g".into(),
        tokens,
        split: Split::Unseen,
    }
}

#[test]
fn embedding_matches_explicit_attention_oracle() {
    for seed in 0..5 {
        let p = scrambled(seed);
        let mut r = rng(100 + seed);
        for l in [1, 3, 7] {
            let tokens = uniform(&mut r, l, 5);
            let got = p.embed_gene(&desc(tokens.clone())).unwrap();
            let want = embed_oracle(&p, &tokens);
            assert_eq!(got.dims(), (1, 6));
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10, "seed {seed} l {l}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn single_head_matches_oracle_too() {
    let mut r = rng(9);
    let sh = EmbedderShape {
        heads: 1,
        ..shape()
    };
    let mut p = EmbedderParams::init(sh, &mut r).unwrap();
    for t in p.tensors_mut() {
        let (rows, cols) = t.dims();
        *t = uniform(&mut r, rows, cols);
    }
    let tokens = uniform(&mut r, 4, 5);
    let got = p.embed_gene(&desc(tokens.clone())).unwrap();
    let want = embed_oracle(&p, &tokens);
    assert!(got
        .data()
        .iter()
        .zip(&want)
        .all(|(a, b)| (a - b).abs() <= 1e-10));
}

#[test]
fn embedding_depends_only_on_tokens() {
    let p = scrambled(1);
    let mut r = rng(2);
    let tokens = uniform(&mut r, 3, 5);
    let a = p
        .embed_gene(&GeneDescription {
            gene: "A".into(),
            tokens: tokens.clone(),
            split: Split::Seen,
        })
        .unwrap();
    let b = p
        .embed_gene(&GeneDescription {
            gene: "B".into(),
            tokens,
            split: Split::Unseen,
        })
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn init_shapes_and_scales() {
    let p = EmbedderParams::init(shape(), &mut rng(3)).unwrap();
    assert_eq!(p.pos_emb.dims(), (8, 8));
    assert!(p.pos_emb.data().iter().all(|v| v.abs() <= 0.02));
    assert_eq!(p.blocks.len(), 2);
    assert_eq!(p.blocks[0].w_1.dims(), (8, 32));
    assert!(p.blocks[0].ln1_gain.data().iter().all(|&v| v == 1.0));
    assert_eq!(p.shape(), shape());
}

#[test]
fn rejects_overlong_empty_and_mis_sized_descriptions() {
    let p = scrambled(4);
    let long = desc(Tensor::zeros(8, 5));
    assert!(matches!(
        p.embed_gene(&long),
        Err(Error::Capacity { len: 8, max: 7, .. })
    ));
    let empty = desc(Tensor::new(vec![0, 5], vec![]).unwrap());
    assert!(matches!(p.embed_gene(&empty), Err(Error::Data(_))));
    let narrow = desc(Tensor::zeros(2, 4));
    assert!(matches!(
        p.embed_gene(&narrow),
        Err(Error::Dimension { .. })
    ));
    let mut nan = Tensor::zeros(2, 5);
    nan.set(1, 1, f64::NAN);
    assert!(matches!(p.embed_gene(&desc(nan)), Err(Error::Data(_))));
}

#[test]
fn head_count_must_divide_width() {
    let bad = EmbedderShape {
        heads: 3,
        ..shape()
    };
    assert!(matches!(
        EmbedderParams::init(bad, &mut rng(5)),
        Err(Error::Config(_))
    ));
}

#[test]
fn embed_all_rejects_duplicates() {
    let p = scrambled(6);
    let d = desc(Tensor::zeros(2, 5));
    assert_eq!(p.embed_all(std::slice::from_ref(&d)).unwrap().len(), 1);
    assert!(matches!(p.embed_all(&[d.clone(), d]), Err(Error::Data(_))));
}
