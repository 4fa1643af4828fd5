//! Gene description embedding.
//!
//! A description token matrix `T` (L×D_T) is projected to width D_E, a
//! learned CLS row is prepended, learned positional rows are added, and the
//! sequence passes through pre-norm transformer blocks. The final CLS row,
//! projected by `out_proj`, is the gene's vector in the window feature space.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{Tape, Tensor, Var};

pub const DEFAULT_HEADS: usize = 4;
pub const FFN_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// A gene's description token matrix (`L × D_T`).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneDescription {
    pub gene: String,
    pub tokens: Tensor,
    pub split: Split,
}

impl GeneDescription {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_1", "b_1",
    "w_2", "b_2",
];

impl Block {
    fn init(d_e: usize, rng: &mut impl Rng) -> Self {
        let inner = FFN_RATIO * d_e;
        Self {
            ln1_gain: Tensor::filled(1, d_e, 1.0),
            ln1_bias: Tensor::zeros(1, d_e),
            w_q: uniform(d_e, d_e, fan_in_bound(d_e), rng),
            w_k: uniform(d_e, d_e, fan_in_bound(d_e), rng),
            w_v: uniform(d_e, d_e, fan_in_bound(d_e), rng),
            w_o: uniform(d_e, d_e, fan_in_bound(d_e), rng),
            ln2_gain: Tensor::filled(1, d_e, 1.0),
            ln2_bias: Tensor::zeros(1, d_e),
            w_1: uniform(d_e, inner, fan_in_bound(d_e), rng),
            b_1: Tensor::zeros(1, inner),
            w_2: uniform(inner, d_e, fan_in_bound(inner), rng),
            b_2: Tensor::zeros(1, d_e),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }

    fn check(&self, d_e: usize) -> Result<()> {
        let inner = FFN_RATIO * d_e;
        let want = [
            (1, d_e),
            (1, d_e),
            (d_e, d_e),
            (d_e, d_e),
            (d_e, d_e),
            (d_e, d_e),
            (1, d_e),
            (1, d_e),
            (d_e, inner),
            (1, inner),
            (inner, d_e),
            (1, d_e),
        ];
        for ((name, t), (r, c)) in BLOCK_TENSORS.iter().zip(self.tensors()).zip(want) {
            if t.dims() != (r, c) {
                return Err(Error::Data(format!(
                    "block tensor {name} has shape {:?}, expected [{r}, {c}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// `E + W_o·MHSA(LN(E))`, then `E + FFN(LN(E))`.
    fn forward(&self, tape: &mut Tape, x: Var, v: &BlockVars, heads: usize) -> Result<Var> {
        let d_e = tape.value(x).cols();
        let d_head = d_e / heads;
        let n1 = tape.layer_norm(x, v.ln1_gain, v.ln1_bias)?;
        let q = tape.matmul(n1, v.w_q)?;
        let k = tape.matmul(n1, v.w_k)?;
        let val = tape.matmul(n1, v.w_v)?;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(val, lo, hi)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        let proj = tape.matmul(cat, v.w_o)?;
        let x = tape.add(x, proj)?;

        let n2 = tape.layer_norm(x, v.ln2_gain, v.ln2_bias)?;
        let hid = tape.matmul(n2, v.w_1)?;
        let hid = tape.add_row(hid, v.b_1)?;
        let hid = tape.relu(hid);
        let f = tape.matmul(hid, v.w_2)?;
        let f = tape.add_row(f, v.b_2)?;
        tape.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

impl BlockVars {
    fn flat(&self) -> [Var; 12] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ln2_gain,
            self.ln2_bias,
            self.w_1,
            self.b_1,
            self.w_2,
            self.b_2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams {
    /// `D_T × D_E`, no bias.
    pub in_proj: Tensor,
    /// `1 × D_E`
    pub cls: Tensor,
    /// `(L_max + 1) × D_E`; row 0 belongs to the CLS position.
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    /// `D_E × D`, no bias.
    pub out_proj: Tensor,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct EmbedderVars {
    pub in_proj: Var,
    pub cls: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub out_proj: Var,
}

impl EmbedderVars {
    /// Vars in [`EmbedderParams::named_tensors`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.in_proj, self.cls, self.pos_emb];
        for b in &self.blocks {
            out.extend(b.flat());
        }
        out.push(self.out_proj);
        out
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Width configuration of an [`EmbedderParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedderShape {
    pub d_t: usize,
    pub d_e: usize,
    pub d: usize,
    pub l_max: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl EmbedderParams {
    pub fn init(shape: EmbedderShape, rng: &mut impl Rng) -> Result<Self> {
        let EmbedderShape {
            d_t,
            d_e,
            d,
            l_max,
            blocks,
            heads,
        } = shape;
        if d_t == 0 || d_e == 0 || d == 0 || l_max == 0 {
            return Err(Error::Config(
                "embedder widths and L_max must be positive".into(),
            ));
        }
        check_heads(d_e, heads)?;
        let in_proj = uniform(d_t, d_e, fan_in_bound(d_t), rng);
        let cls = uniform(1, d_e, fan_in_bound(d_e), rng);
        let pos_emb = uniform(l_max + 1, d_e, 0.02, rng);
        let blocks = (0..blocks).map(|_| Block::init(d_e, rng)).collect();
        let out_proj = uniform(d_e, d, fan_in_bound(d_e), rng);
        Ok(Self {
            in_proj,
            cls,
            pos_emb,
            blocks,
            out_proj,
            heads,
        })
    }

    pub fn shape(&self) -> EmbedderShape {
        EmbedderShape {
            d_t: self.in_proj.rows(),
            d_e: self.d_e(),
            d: self.out_proj.cols(),
            l_max: self.l_max(),
            blocks: self.blocks.len(),
            heads: self.heads,
        }
    }

    pub fn d_e(&self) -> usize {
        self.in_proj.cols()
    }

    pub fn l_max(&self) -> usize {
        self.pos_emb.rows() - 1
    }

    /// Validates every tensor shape against `in_proj`'s widths.
    pub fn check(&self) -> Result<()> {
        let d_e = self.d_e();
        check_heads(d_e, self.heads)?;
        if self.cls.dims() != (1, d_e) || self.pos_emb.cols() != d_e || self.pos_emb.rows() < 2 {
            return Err(Error::Data(
                "cls/pos_emb widths disagree with in_proj".into(),
            ));
        }
        if self.out_proj.rows() != d_e {
            return Err(Error::dim(
                "out_proj",
                self.in_proj.shape(),
                self.out_proj.shape(),
            ));
        }
        self.blocks.iter().try_for_each(|b| b.check(d_e))
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.in_proj".to_string(), &self.in_proj),
            ("embed.cls".to_string(), &self.cls),
            ("embed.pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                out.push((format!("embed.block{i}.{name}"), t));
            }
        }
        out.push(("embed.out_proj".to_string(), &self.out_proj));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.in_proj, &mut self.cls, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.out_proj);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> EmbedderVars {
        self.bind_with(tape, |tape, t| tape.param(t))
    }

    fn bind_with(
        &self,
        tape: &mut Tape,
        mut f: impl FnMut(&mut Tape, &Tensor) -> Var,
    ) -> EmbedderVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_gain: f(tape, &b.ln1_gain),
                ln1_bias: f(tape, &b.ln1_bias),
                w_q: f(tape, &b.w_q),
                w_k: f(tape, &b.w_k),
                w_v: f(tape, &b.w_v),
                w_o: f(tape, &b.w_o),
                ln2_gain: f(tape, &b.ln2_gain),
                ln2_bias: f(tape, &b.ln2_bias),
                w_1: f(tape, &b.w_1),
                b_1: f(tape, &b.b_1),
                w_2: f(tape, &b.w_2),
                b_2: f(tape, &b.b_2),
            })
            .collect();
        EmbedderVars {
            in_proj: f(tape, &self.in_proj),
            cls: f(tape, &self.cls),
            pos_emb: f(tape, &self.pos_emb),
            blocks,
            out_proj: f(tape, &self.out_proj),
        }
    }

    fn validate_desc(&self, desc: &GeneDescription) -> Result<()> {
        if desc.is_empty() {
            return Err(Error::Data(format!(
                "description of {} is empty",
                desc.gene
            )));
        }
        if desc.len() > self.l_max() {
            return Err(Error::Capacity {
                gene: desc.gene.clone(),
                len: desc.len(),
                max: self.l_max(),
            });
        }
        if desc.tokens.cols() != self.in_proj.rows() {
            return Err(Error::dim(
                "embed_gene",
                desc.tokens.shape(),
                self.in_proj.shape(),
            ));
        }
        if !desc.tokens.is_finite() {
            return Err(Error::Data(format!(
                "non-finite tokens in description of {}",
                desc.gene
            )));
        }
        Ok(())
    }

    /// Records the embedding of one description and returns its `1 × D` row.
    pub fn forward(
        &self,
        tape: &mut Tape,
        desc: &GeneDescription,
        vars: &EmbedderVars,
    ) -> Result<Var> {
        self.validate_desc(desc)?;
        let tokens = tape.constant(desc.tokens.clone());
        let projected = tape.matmul(tokens, vars.in_proj)?;
        let seq = tape.concat_rows(&[vars.cls, projected])?;
        let pos = tape.slice_rows(vars.pos_emb, 0, desc.len() + 1)?;
        let mut x = tape.add(seq, pos)?;
        for (block, bv) in self.blocks.iter().zip(&vars.blocks) {
            x = block.forward(tape, x, bv, self.heads)?;
        }
        let cls_out = tape.slice_rows(x, 0, 1)?;
        tape.matmul(cls_out, vars.out_proj)
    }

    /// The projection vector `v_c` of one gene, without gradient tracking.
    pub fn embed_gene(&self, desc: &GeneDescription) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_with(&mut tape, |tape, t| tape.constant(t.clone()));
        let v = self.forward(&mut tape, desc, &vars)?;
        Ok(tape.value(v).clone())
    }

    /// `gene → v_c` for every description. Duplicate gene names are rejected.
    pub fn embed_all(&self, descs: &[GeneDescription]) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for d in descs {
            if out.contains_key(&d.gene) {
                return Err(Error::Data(format!("duplicate gene {}", d.gene)));
            }
            out.insert(d.gene.clone(), self.embed_gene(d)?);
        }
        Ok(out)
    }
}

fn check_heads(d_e: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d_e.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "head count {heads} must divide embedding width {d_e}"
        )));
    }
    Ok(())
}
