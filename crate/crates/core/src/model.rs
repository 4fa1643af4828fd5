//! Full predictor: refined window features dotted with gene description embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{EmbedderParams, EmbedderShape, EmbedderVars, GeneDescription};
use crate::error::{Error, Result};
use crate::graph::SlideGraph;
use crate::nd::{ParamSet, Tape, Tensor, Var};
use crate::predictor::{predict, predict_values};
use crate::sage::{SageLayer, SageStack};
use crate::train::TrainConfig;

/// Stream of the parameter-initialization generator; training streams are per epoch.
const INIT_STREAM: u64 = u64::MAX;

/// Widths fixed by the data rather than by the model configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub d_e: usize,
    pub d_t: usize,
    pub l_max: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub sage: SageStack,
    pub embedder: EmbedderParams,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub sage: Vec<Var>,
    pub embed: EmbedderVars,
}

impl ModelVars {
    /// Vars in [`Model::named_tensors`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.sage.clone();
        out.extend(self.embed.flat());
        out
    }
}

impl Model {
    /// Seeded initialization. Values are rounded to `f32` so a saved
    /// checkpoint reproduces the in-memory model exactly.
    pub fn init(cfg: &TrainConfig, dims: DataDims) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let sage = SageStack::init(
            dims.d_e,
            cfg.hidden,
            cfg.proj_dim,
            cfg.sage_layers,
            &mut rng,
        )?;
        let mut embedder = EmbedderParams::init(Self::embedder_shape(cfg, dims), &mut rng)?;
        if cfg.zero_head {
            embedder.out_proj.data_mut().fill(0.0);
        }
        let mut model = Self { sage, embedder };
        model.quantize_f32();
        Ok(model)
    }

    fn embedder_shape(cfg: &TrainConfig, dims: DataDims) -> EmbedderShape {
        EmbedderShape {
            d_t: dims.d_t,
            d_e: cfg.emb_dim,
            d: cfg.proj_dim,
            l_max: dims.l_max,
            blocks: cfg.emb_blocks,
            heads: cfg.heads,
        }
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against what `cfg` and `dims` imply.
    pub fn from_named(
        cfg: &TrainConfig,
        dims: DataDims,
        mut tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::init(
            &TrainConfig {
                zero_head: false,
                ..cfg.clone()
            },
            dims,
        )?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Corruption(format!(
                "model has {} tensors, checkpoint provides {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Corruption(format!(
                    "expected tensor {name} {shape:?}, found {got_name} {:?}",
                    got.shape()
                )));
            }
        }
        for (dst, (_, src)) in model.tensors_mut().into_iter().zip(tensors.drain(..)) {
            *dst = src;
        }
        Ok(model)
    }

    pub fn dims(&self) -> DataDims {
        DataDims {
            d_e: self.sage.d_e(),
            d_t: self.embedder.in_proj.rows(),
            l_max: self.embedder.l_max(),
        }
    }

    pub fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            t.quantize_f32();
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            sage: self.sage.bind(tape),
            embed: self.embedder.bind(tape),
        }
    }

    /// Records `ŷ` (N × G) for one slide and the given genes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        graph: &SlideGraph,
        genes: &[&GeneDescription],
        vars: &ModelVars,
    ) -> Result<Var> {
        if genes.is_empty() {
            return Err(Error::Contract("forward needs at least one gene".into()));
        }
        let h = tape.constant(features.clone());
        let z = self.sage.forward(tape, h, graph, &vars.sage)?;
        let rows = genes
            .iter()
            .map(|g| self.embedder.forward(tape, g, &vars.embed))
            .collect::<Result<Vec<_>>>()?;
        let v = tape.concat_rows(&rows)?;
        predict(tape, z, v)
    }

    /// Gene vectors stacked as rows (G × D).
    pub fn gene_matrix(&self, genes: &[&GeneDescription]) -> Result<Tensor> {
        let rows = genes
            .iter()
            .map(|g| self.embedder.embed_gene(g).map(|t| t.into_data()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Refined window features (N × D).
    pub fn refine(&self, features: &Tensor, graph: &SlideGraph) -> Result<Tensor> {
        self.sage.apply(features, graph)
    }

    pub fn predict(
        &self,
        features: &Tensor,
        graph: &SlideGraph,
        genes: &[&GeneDescription],
    ) -> Result<Tensor> {
        predict_values(&self.refine(features, graph)?, &self.gene_matrix(genes)?)
    }
}

impl ParamSet for Model {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .sage
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("sage.layer{i}.weight"), &l.weight))
            .collect();
        out.extend(self.embedder.named_tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .sage
            .layers
            .iter_mut()
            .map(|l: &mut SageLayer| &mut l.weight)
            .collect();
        out.extend(self.embedder.tensors_mut());
        out
    }
}
