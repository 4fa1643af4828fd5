//! Command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{synth_dataset, Checkpoint, Dataset, SynthConfig, SynthLatents};
use crate::embedder::{GeneDescription, Split};
use crate::graph::{GraphConfig, Metric, SlideGraph};
use crate::model::{DataDims, Model};
use crate::nd::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use crate::predictor::loss_total;
use crate::train::{
    build_graphs, evaluate_split, k_fea_sweep, predict_columns, resume, EpochLog, SplitSelection,
    TrainConfig, TrainState,
};

pub const SEED_ENV: &str = "STZERO_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "stzero",
    version,
    about = "Zero-shot spatial gene-expression prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-model synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a gene split.
    Eval(EvalArgs),
    /// Per-window predictions for one gene on one slide, as CSV.
    Predict(PredictArgs),
    /// Degree statistics of the slide graphs.
    GraphStats(GraphStatsArgs),
    /// Finite-difference gradient check of a micro-model.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_slides: usize,
    #[arg(long, default_value_t = 400)]
    pub windows_per_slide: usize,
    #[arg(long, default_value_t = 50)]
    pub n_genes: usize,
    #[arg(long, default_value_t = 40)]
    pub n_seen: usize,
    #[arg(long, default_value_t = 32)]
    pub d_e: usize,
    #[arg(long, default_value_t = 16)]
    pub d_t: usize,
    /// Description length.
    #[arg(long, default_value_t = 12)]
    pub l: usize,
    #[arg(long, default_value_t = 8)]
    pub d_latent: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write the generating latents as JSON.
    #[arg(long)]
    pub latents: Option<PathBuf>,
}

/// Training hyperparameters; unset flags keep the base configuration.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub k_pos: Option<usize>,
    #[arg(long)]
    pub k_fea: Option<usize>,
    #[arg(long)]
    pub fea_metric: Option<Metric>,
    #[arg(long)]
    pub sage_layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    #[arg(long)]
    pub emb_blocks: Option<usize>,
    #[arg(long)]
    pub emb_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub genes_per_step: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from a zero gene projection (predictions are all zero).
    #[arg(long)]
    pub zero_head: bool,
}

impl ConfigArgs {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(
            k_pos,
            k_fea,
            fea_metric,
            sage_layers,
            hidden,
            proj_dim,
            emb_blocks,
            emb_dim,
            heads,
            lr,
            weight_decay,
            epochs,
            genes_per_step,
            seed
        );
        cfg.zero_head |= self.zero_head;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write the per-epoch log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Write the final summary here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "unseen")]
    pub split: SplitSelection,
    /// Override the checkpoint's neighbor counts for graph construction.
    #[arg(long)]
    pub k_pos: Option<usize>,
    #[arg(long)]
    pub k_fea: Option<usize>,
    /// Evaluate at each of these feature-neighbor counts, e.g. `1,3,5,7,10`.
    #[arg(long, value_delimiter = ',')]
    pub k_fea_sweep: Option<Vec<usize>>,
    /// With a sweep, train a fresh model per count for this many epochs.
    #[arg(long, requires = "k_fea_sweep")]
    pub retrain_epochs: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub slide: String,
    #[arg(long)]
    pub gene: String,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GraphStatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k_pos: usize,
    #[arg(long, default_value_t = 5)]
    pub k_fea: usize,
    #[arg(long, default_value_t = Metric::Cosine)]
    pub fea_metric: Metric,
    /// Only this slide; all slides when absent.
    #[arg(long)]
    pub slide: Option<String>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Sizes of the gradient-check micro-model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MicroConfig {
    pub n_windows: usize,
    pub d_e: usize,
    pub hidden: usize,
    pub d: usize,
    pub emb_blocks: usize,
    pub emb_dim: usize,
    pub heads: usize,
    pub l: usize,
    pub d_t: usize,
    pub n_genes: usize,
    pub sage_layers: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            n_windows: 6,
            d_e: 8,
            hidden: 16,
            d: 8,
            emb_blocks: 1,
            emb_dim: 8,
            heads: 4,
            l: 3,
            d_t: 4,
            n_genes: 3,
            sage_layers: 4,
            k: 2,
            seed: 0,
        }
    }
}

/// Checks every parameter gradient of the full loss on a random micro-model.
pub fn micro_grad_check(
    micro: MicroConfig,
    opts: GradCheckOptions,
) -> crate::Result<GradCheckReport> {
    let cfg = TrainConfig {
        k_pos: micro.k,
        k_fea: micro.k,
        sage_layers: micro.sage_layers,
        hidden: micro.hidden,
        proj_dim: micro.d,
        emb_blocks: micro.emb_blocks,
        emb_dim: micro.emb_dim,
        heads: micro.heads,
        seed: micro.seed,
        ..TrainConfig::default()
    };
    let dims = DataDims {
        d_e: micro.d_e,
        d_t: micro.d_t,
        l_max: micro.l,
    };
    let model = Model::init(&cfg, dims)?;

    let mut rng = ChaCha8Rng::seed_from_u64(micro.seed);
    let mut uniform = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(r, c, data)
    };
    let positions = uniform(micro.n_windows, 2)?;
    let features = uniform(micro.n_windows, micro.d_e)?;
    let target = uniform(micro.n_windows, micro.n_genes)?;
    let genes = (0..micro.n_genes)
        .map(|c| {
            Ok(GeneDescription {
                gene: format!("g{c}"),
                tokens: uniform(micro.l, micro.d_t)?,
                split: Split::Seen,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let gene_refs: Vec<&GeneDescription> = genes.iter().collect();
    let graph = SlideGraph::build(&positions, &features, cfg.graph())?;

    grad_check(
        &model,
        |tape, m: &Model| {
            let vars = m.bind(tape);
            let y_hat = m.forward(tape, &features, &graph, &gene_refs, &vars)?;
            let y = tape.constant(target.clone());
            Ok((loss_total(tape, y_hat, y)?, vars.flat()))
        },
        opts,
    )
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            Ok(Some(s.trim().parse().with_context(|| {
                format!("{SEED_ENV}={s:?} is not an integer")
            })?))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

fn emit(
    value: &impl Serialize,
    report: Option<&Path>,
    stdout: &mut dyn Write,
) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match report {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn latents_json(l: &SynthLatents) -> Value {
    json!({
        "gene_vectors": tensor_rows(&l.gene_vectors),
        "window_states": l.window_states.iter().map(tensor_rows).collect::<Vec<_>>(),
        "feature_map": tensor_rows(&l.feature_map),
        "token_map": tensor_rows(&l.token_map),
    })
}

/// Runs one parsed command. Reports go to `stdout`; progress to stderr.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let seed_override = env_seed()?;
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                n_slides: a.n_slides,
                windows_per_slide: a.windows_per_slide,
                n_genes: a.n_genes,
                n_seen: a.n_seen,
                d_e: a.d_e,
                d_t: a.d_t,
                l: a.l,
                d_latent: a.d_latent,
                noise_sigma: a.noise_sigma,
                seed: seed_override.unwrap_or(a.seed),
            };
            let out = synth_dataset(&cfg)?;
            out.dataset.save(&a.out)?;
            if let Some(p) = &a.latents {
                emit(&latents_json(&out.latents), Some(p), stdout)?;
            }
            emit(&out.dataset.meta(), None, stdout)
        }
        Command::Train(a) => {
            let ds = Dataset::load(&a.data)?;
            let mut state = match &a.resume {
                Some(p) => {
                    let mut st = Checkpoint::load(p)?.to_state()?;
                    st.config = a.config.apply(st.config.clone());
                    st
                }
                None => {
                    let cfg = a.config.apply(TrainConfig::default());
                    TrainState::new(&cfg, crate::train::dataset_dims(&ds))?
                }
            };
            if let Some(seed) = seed_override {
                if a.resume.is_some() {
                    state.config.seed = seed;
                } else {
                    let cfg = TrainConfig {
                        seed,
                        ..state.config.clone()
                    };
                    state = TrainState::new(&cfg, crate::train::dataset_dims(&ds))?;
                }
            }
            let mut lines = Vec::new();
            let quiet = a.quiet;
            let log = resume(&ds, &mut state, |e: &EpochLog| {
                if !quiet {
                    eprintln!(
                        "epoch {:>4}  loss {:.6}  seen pcc@m {}",
                        e.epoch,
                        e.mean_loss,
                        e.seen.pcc_m.map_or("n/a".into(), |v| format!("{v:.4}"))
                    );
                }
                lines.push(serde_json::to_string(e).expect("log serializes"));
            })?;
            if let Some(p) = &a.log {
                let mut text = lines.join("\n");
                text.push('\n');
                fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            Checkpoint::from_state(&state).save(&a.out)?;
            let summary = json!({
                "checkpoint": a.out,
                "config": state.config,
                "epochs_done": state.epochs_done,
                "final_loss": log.last().map(|e| e.mean_loss),
                "seen": log.last().map(|e| &e.seen),
            });
            emit(&summary, a.report.as_deref(), stdout)
        }
        Command::Eval(a) => {
            let ds = Dataset::load(&a.data)?;
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let model = ckpt.model()?;
            let mut cfg = ckpt.config.clone();
            if let Some(k) = a.k_pos {
                cfg.k_pos = k;
            }
            if let Some(k) = a.k_fea {
                cfg.k_fea = k;
            }
            match &a.k_fea_sweep {
                Some(ks) => {
                    let series = k_fea_sweep(&ds, &cfg, &model, ks, a.split, a.retrain_epochs)?;
                    let out = json!({
                        "split": a.split,
                        "retrain_epochs": a.retrain_epochs,
                        "series": series,
                    });
                    emit(&out, a.report.as_deref(), stdout)
                }
                None => emit(
                    &evaluate_split(&model, &ds, cfg.graph(), a.split)?,
                    a.report.as_deref(),
                    stdout,
                ),
            }
        }
        Command::Predict(a) => {
            let ds = Dataset::load(&a.data)?;
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let model = ckpt.model()?;
            let slide = ds.slide(&a.slide)?;
            let col = ds.gene_index(&a.gene)?;
            let graph = SlideGraph::build(&slide.positions, &slide.features, ckpt.config.graph())?;
            let single = Dataset {
                slides: vec![slide.clone()],
                ..ds.clone()
            };
            let pred = predict_columns(&model, &single, &[graph], &[col])?.remove(0);
            let mut csv = String::from("window_index,x,y,predicted\n");
            for i in 0..slide.n() {
                let p = slide.positions.row(i);
                csv.push_str(&format!("{i},{},{},{}\n", p[0], p[1], pred.get(i, 0)));
            }
            match &a.out {
                Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => stdout.write_all(csv.as_bytes())?,
            }
            Ok(())
        }
        Command::GraphStats(a) => {
            let ds = Dataset::load(&a.data)?;
            let cfg = GraphConfig {
                k_pos: a.k_pos,
                k_fea: a.k_fea,
                fea_metric: a.fea_metric,
            };
            let slides: Vec<_> = match &a.slide {
                Some(id) => vec![ds.slide(id)?.clone()],
                None => ds.slides.clone(),
            };
            let sub = Dataset { slides, ..ds };
            let graphs = build_graphs(&sub, cfg)?;
            let mut out = serde_json::Map::new();
            for (s, g) in sub.slides.iter().zip(&graphs) {
                out.insert(s.slide_id.clone(), g.stats().to_json());
            }
            emit(&Value::Object(out), a.report.as_deref(), stdout)
        }
        Command::GradCheck(a) => {
            let micro = MicroConfig {
                seed: seed_override.unwrap_or(a.seed),
                ..MicroConfig::default()
            };
            let opts = GradCheckOptions {
                step: a.step,
                tol: a.tol,
                ..GradCheckOptions::default()
            };
            let report = micro_grad_check(micro, opts)?;
            emit(
                &json!({ "micro": micro, "report": &report, "passed": report.passed() }),
                a.report.as_deref(),
                stdout,
            )?;
            if !report.passed() {
                let w = report.worst().expect("at least one tensor");
                bail!(
                    "gradient check failed: {} has relative error {:.3e}",
                    w.name,
                    w.max_rel_err
                );
            }
            Ok(())
        }
    }
}
