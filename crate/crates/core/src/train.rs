//! Training loop, optimizer, and split evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedder::{GeneDescription, Split, DEFAULT_HEADS};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, Metric, SlideGraph, DEFAULT_K};
use crate::metrics::{aggregate_reports, evaluate, EvalReport};
use crate::model::{DataDims, Model};
use crate::nd::{ParamSet, Tape, Tensor};
use crate::predictor::{loss_total, predict_values};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k_pos: usize,
    pub k_fea: usize,
    pub fea_metric: Metric,
    pub sage_layers: usize,
    pub hidden: usize,
    /// Shared width `D` of refined window features and gene vectors.
    pub proj_dim: usize,
    pub emb_blocks: usize,
    pub emb_dim: usize,
    pub heads: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub genes_per_step: usize,
    pub seed: u64,
    /// Initialize the gene projection to zero, so every prediction starts at 0.
    pub zero_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_pos: DEFAULT_K,
            k_fea: DEFAULT_K,
            fea_metric: Metric::Cosine,
            sage_layers: 4,
            hidden: 512,
            proj_dim: 256,
            emb_blocks: 2,
            emb_dim: 256,
            heads: DEFAULT_HEADS,
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 100,
            genes_per_step: 16,
            seed: 0,
            zero_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sage_layers", self.sage_layers),
            ("hidden", self.hidden),
            ("proj_dim", self.proj_dim),
            ("emb_dim", self.emb_dim),
            ("heads", self.heads),
            ("genes_per_step", self.genes_per_step),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.emb_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide emb_dim ({})",
                self.heads, self.emb_dim
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            k_pos: self.k_pos,
            k_fea: self.k_fea,
            fea_metric: self.fea_metric,
        }
    }
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &[&Tensor]) -> Self {
        let zeros =
            |t: &&Tensor| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape");
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seen: EvalReport,
}

/// Model plus everything needed to resume training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, dims: DataDims) -> Result<Self> {
        let model = Model::init(cfg, dims)?;
        let optimizer = AdamW::new(
            cfg.lr,
            cfg.weight_decay,
            &model
                .named_tensors()
                .into_iter()
                .map(|(_, t)| t)
                .collect::<Vec<_>>(),
        );
        Ok(Self {
            config: cfg.clone(),
            model,
            optimizer,
            epochs_done: 0,
        })
    }
}

pub fn dataset_dims(ds: &Dataset) -> DataDims {
    DataDims {
        d_e: ds.d_e,
        d_t: ds.d_t,
        l_max: ds.l_max,
    }
}

pub fn build_graphs(ds: &Dataset, cfg: GraphConfig) -> Result<Vec<SlideGraph>> {
    ds.slides
        .iter()
        .map(|s| SlideGraph::build(&s.positions, &s.features, cfg))
        .collect()
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Trains from a fresh initialization for `cfg.epochs` epochs.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochLog>)> {
    let mut state = TrainState::new(cfg, dataset_dims(ds))?;
    let log = resume(ds, &mut state, |_| {})?;
    Ok((state, log))
}

/// Continues training `state` until `state.config.epochs`, calling
/// `on_epoch` after each epoch.
///
/// Only expression columns of seen genes are read. The returned model is
/// rounded to `f32`, matching its checkpoint.
pub fn resume(
    ds: &Dataset,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let cfg = state.config.clone();
    cfg.validate()?;
    if state.model.dims() != dataset_dims(ds) {
        return Err(Error::Config(format!(
            "model dims {:?} do not match dataset dims {:?}",
            state.model.dims(),
            dataset_dims(ds)
        )));
    }
    let seen = ds.split_indices(Split::Seen);
    if seen.is_empty() {
        return Err(Error::Config("no seen genes to train on".into()));
    }
    if let Some(s) = ds.slides.iter().find(|s| s.n() < 2) {
        return Err(Error::Data(format!(
            "slide {} has fewer than 2 windows",
            s.slide_id
        )));
    }
    let graphs = build_graphs(ds, cfg.graph())?;
    let per_step = cfg.genes_per_step.min(seen.len());
    let mut log = Vec::new();

    for epoch in state.epochs_done..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..ds.slides.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, &si) in order.iter().enumerate() {
            let slide = &ds.slides[si];
            let mut pool = seen.clone();
            let (picked, _) = pool.partial_shuffle(&mut rng, per_step);
            let cols: Vec<usize> = picked.to_vec();
            let genes: Vec<&GeneDescription> = cols.iter().map(|&c| &ds.genes[c]).collect();

            let mut tape = Tape::new();
            let vars = state.model.bind(&mut tape);
            let y_hat =
                state
                    .model
                    .forward(&mut tape, &slide.features, &graphs[si], &genes, &vars)?;
            let y = tape.constant(slide.expression.select_cols(&cols));
            let loss = loss_total(&mut tape, y_hat, y)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += value;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .flat()
                .into_iter()
                .map(|v| tape.grad_tensor(v))
                .collect();
            state.optimizer.update(state.model.tensors_mut(), &grads);
        }
        state.epochs_done = epoch + 1;
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / order.len().max(1) as f64,
            seen: evaluate_with_graphs(&state.model, ds, &graphs, SplitSelection::Seen)?,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    state.model.quantize_f32();
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelection {
    Seen,
    Unseen,
    All,
}

impl SplitSelection {
    pub fn columns(self, ds: &Dataset) -> Vec<usize> {
        match self {
            SplitSelection::Seen => ds.split_indices(Split::Seen),
            SplitSelection::Unseen => ds.split_indices(Split::Unseen),
            SplitSelection::All => (0..ds.n_genes()).collect(),
        }
    }
}

impl fmt::Display for SplitSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitSelection::Seen => "seen",
            SplitSelection::Unseen => "unseen",
            SplitSelection::All => "all",
        })
    }
}

impl FromStr for SplitSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(SplitSelection::Seen),
            "unseen" => Ok(SplitSelection::Unseen),
            "all" => Ok(SplitSelection::All),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Predictions for every slide over the genes at `cols` (each N × |cols|).
pub fn predict_columns(
    model: &Model,
    ds: &Dataset,
    graphs: &[SlideGraph],
    cols: &[usize],
) -> Result<Vec<Tensor>> {
    let genes: Vec<&GeneDescription> = cols.iter().map(|&c| &ds.genes[c]).collect();
    let v = model.gene_matrix(&genes)?;
    ds.slides
        .iter()
        .zip(graphs)
        .map(|(s, g)| predict_values(&model.refine(&s.features, g)?, &v))
        .collect()
}

pub fn evaluate_with_graphs(
    model: &Model,
    ds: &Dataset,
    graphs: &[SlideGraph],
    split: SplitSelection,
) -> Result<EvalReport> {
    let cols = split.columns(ds);
    if cols.is_empty() {
        return Err(Error::Config(format!("the {split} split has no genes")));
    }
    let names: Vec<String> = cols.iter().map(|&c| ds.genes[c].gene.clone()).collect();
    let preds = predict_columns(model, ds, graphs, &cols)?;
    let reports = ds
        .slides
        .iter()
        .zip(&preds)
        .map(|(s, p)| evaluate(p, &s.expression.select_cols(&cols), &names))
        .collect::<Result<Vec<_>>>()?;
    aggregate_reports(&reports)
}

/// Evaluates `model` on a split with slide graphs built from `graph`.
pub fn evaluate_split(
    model: &Model,
    ds: &Dataset,
    graph: GraphConfig,
    split: SplitSelection,
) -> Result<EvalReport> {
    if model.dims() != dataset_dims(ds) {
        return Err(Error::Config(format!(
            "checkpoint dims {:?} do not match dataset dims {:?}",
            model.dims(),
            dataset_dims(ds)
        )));
    }
    let graphs = build_graphs(ds, graph)?;
    evaluate_with_graphs(model, ds, &graphs, split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k_fea: usize,
    pub report: EvalReport,
}

/// For each feature-neighbor count, evaluates `split`. With `retrain_epochs`
/// a fresh model is trained per count with that many epochs; otherwise
/// `model` is evaluated on graphs rebuilt with each count.
pub fn k_fea_sweep(
    ds: &Dataset,
    cfg: &TrainConfig,
    model: &Model,
    ks: &[usize],
    split: SplitSelection,
    retrain_epochs: Option<usize>,
) -> Result<Vec<SweepPoint>> {
    ks.iter()
        .map(|&k_fea| {
            let point_cfg = TrainConfig {
                k_fea,
                ..cfg.clone()
            };
            let report = match retrain_epochs {
                Some(epochs) => {
                    let (state, _) = train(
                        ds,
                        &TrainConfig {
                            epochs,
                            ..point_cfg.clone()
                        },
                    )?;
                    evaluate_split(&state.model, ds, point_cfg.graph(), split)?
                }
                None => evaluate_split(model, ds, point_cfg.graph(), split)?,
            };
            Ok(SweepPoint { k_fea, report })
        })
        .collect()
}
