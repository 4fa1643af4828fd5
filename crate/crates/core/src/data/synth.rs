//! Planted-model synthetic datasets.
//!
//! Every gene `c` has a latent vector `u_c` and every window a spatially
//! smooth latent state `s_i`. Expression is `s_i · u_c + noise`, window
//! features are a fixed random linear image of `s_i` plus noise, and each
//! description token is a fixed random linear image of `u_c` plus noise.
//! Descriptions therefore determine how a gene reads out the window state,
//! which is what a zero-shot predictor has to learn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, SlideWindows};
use crate::embedder::{GeneDescription, Split};
use crate::error::{Error, Result};
use crate::graph::{knn_brute, Metric};
use crate::nd::Tensor;

const SMOOTHING_K: usize = 5;
const SMOOTHING_PASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub windows_per_slide: usize,
    pub n_genes: usize,
    pub n_seen: usize,
    pub d_e: usize,
    pub d_t: usize,
    /// Description length.
    pub l: usize,
    pub d_latent: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 4,
            windows_per_slide: 400,
            n_genes: 50,
            n_seen: 40,
            d_e: 32,
            d_t: 16,
            l: 12,
            d_latent: 8,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_slides,
            self.windows_per_slide,
            self.n_genes,
            self.n_seen,
            self.d_e,
            self.d_t,
            self.l,
            self.d_latent,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("all synth counts must be at least 1".into()));
        }
        if self.n_seen >= self.n_genes {
            return Err(Error::Config(format!(
                "n_seen ({}) must be smaller than n_genes ({})",
                self.n_seen, self.n_genes
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "noise_sigma must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Ground-truth latents behind a synthetic dataset (all `f32`-exact).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthLatents {
    /// `G × D_latent`, rows in dataset gene order.
    pub gene_vectors: Tensor,
    /// Per slide, `N × D_latent`.
    pub window_states: Vec<Tensor>,
    /// `D_e × D_latent`
    pub feature_map: Tensor,
    /// `D_T × D_latent`
    pub token_map: Tensor,
}

#[derive(Clone, Debug)]
pub struct Synthesized {
    pub dataset: Dataset,
    pub latents: SynthLatents,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut t = Tensor::matrix(rows, cols, data).expect("shape");
    t.quantize_f32();
    t
}

/// `x · mapᵀ + sigma·noise`, quantized to `f32`.
fn noisy_image(x: &Tensor, map: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = x.matmul(&map.transpose()).expect("widths agree");
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out.quantize_f32();
    out
}

/// Jittered square grid, row-major, one unit between neighbors.
fn grid_positions(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let side = (n as f64).sqrt().ceil() as usize;
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (r, c) = (i / side, i % side);
        data.push(c as f64 + rng.random_range(-0.1..0.1));
        data.push(r as f64 + rng.random_range(-0.1..0.1));
    }
    let mut t = Tensor::matrix(n, 2, data).expect("shape");
    t.quantize_f32();
    t
}

/// Averages white noise over spatial neighborhoods, then standardizes each
/// latent dimension to zero mean and unit variance.
fn smooth_states(positions: &Tensor, d_latent: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = positions.rows();
    let neighbors = knn_brute(positions, SMOOTHING_K, Metric::Euclidean)?;
    let mut s = gaussian(n, d_latent, 1.0, rng);
    for _ in 0..SMOOTHING_PASSES {
        let mut next = Tensor::zeros(n, d_latent);
        for (i, list) in neighbors.iter().enumerate() {
            let w = 1.0 / (list.len() + 1) as f64;
            for j in std::iter::once(i).chain(list.iter().copied()) {
                for (o, v) in next.row_mut(i).iter_mut().zip(s.row(j)) {
                    *o += w * v;
                }
            }
        }
        s = next;
    }
    for c in 0..d_latent {
        let col = s.column(c);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            s.set(i, c, (v - mean) * inv);
        }
    }
    s.quantize_f32();
    Ok(s)
}

/// Generates a dataset from `cfg`. All randomness derives from `cfg.seed`;
/// the first `n_seen` genes are seen, the rest unseen.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Synthesized> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma = cfg.noise_sigma;

    let gene_vectors = gaussian(
        cfg.n_genes,
        cfg.d_latent,
        1.0 / (cfg.d_latent as f64).sqrt(),
        &mut rng,
    );
    let feature_map = gaussian(
        cfg.d_e,
        cfg.d_latent,
        1.0 / (cfg.d_latent as f64).sqrt(),
        &mut rng,
    );
    let token_map = gaussian(cfg.d_t, cfg.d_latent, 1.0, &mut rng);

    let width = cfg.n_genes.to_string().len().max(3);
    let mut genes = Vec::with_capacity(cfg.n_genes);
    for c in 0..cfg.n_genes {
        let u = Tensor::from_rows(&vec![gene_vectors.row(c).to_vec(); cfg.l])?;
        genes.push(GeneDescription {
            gene: format!("gene{c:0width$}"),
            tokens: noisy_image(&u, &token_map, sigma, &mut rng),
            split: if c < cfg.n_seen {
                Split::Seen
            } else {
                Split::Unseen
            },
        });
    }

    let mut slides = Vec::with_capacity(cfg.n_slides);
    let mut states = Vec::with_capacity(cfg.n_slides);
    for s in 0..cfg.n_slides {
        let positions = grid_positions(cfg.windows_per_slide, &mut rng);
        let latent = smooth_states(&positions, cfg.d_latent, &mut rng)?;
        let features = noisy_image(&latent, &feature_map, sigma, &mut rng);
        let expression = noisy_image(&latent, &gene_vectors, sigma, &mut rng);
        slides.push(SlideWindows {
            slide_id: format!("slide{s:02}"),
            positions,
            features,
            expression,
        });
        states.push(latent);
    }

    let dataset = Dataset {
        slides,
        genes,
        d_e: cfg.d_e,
        d_t: cfg.d_t,
        l_max: cfg.l,
    };
    dataset.validate()?;
    Ok(Synthesized {
        dataset,
        latents: SynthLatents {
            gene_vectors,
            window_states: states,
            feature_map,
            token_map,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_slides: 2,
            windows_per_slide: 30,
            n_genes: 6,
            n_seen: 4,
            d_e: 5,
            d_t: 3,
            l: 4,
            d_latent: 2,
            noise_sigma: 0.1,
            seed: 1,
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            SynthConfig {
                n_seen: 6,
                ..small()
            },
            SynthConfig {
                n_slides: 0,
                ..small()
            },
            SynthConfig {
                noise_sigma: -1.0,
                ..small()
            },
        ] {
            assert!(matches!(synth_dataset(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn noiseless_expression_is_the_planted_product() {
        let out = synth_dataset(&SynthConfig {
            noise_sigma: 0.0,
            ..small()
        })
        .unwrap();
        let u = &out.latents.gene_vectors;
        for (slide, s) in out.dataset.slides.iter().zip(&out.latents.window_states) {
            let mut want = s.matmul(&u.transpose()).unwrap();
            want.quantize_f32();
            assert_eq!(slide.expression, want);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = synth_dataset(&small()).unwrap().dataset;
        let b = synth_dataset(&small()).unwrap().dataset;
        assert_eq!(a, b);
        let c = synth_dataset(&SynthConfig { seed: 2, ..small() })
            .unwrap()
            .dataset;
        assert_ne!(a, c);
    }

    #[test]
    fn splits_and_dims() {
        let ds = synth_dataset(&small()).unwrap().dataset;
        assert_eq!(ds.split_indices(Split::Seen), vec![0, 1, 2, 3]);
        assert_eq!(ds.split_indices(Split::Unseen), vec![4, 5]);
        assert_eq!((ds.d_e, ds.d_t, ds.l_max), (5, 3, 4));
        assert!(ds.slides.iter().all(|s| s.n() == 30));
    }
}
