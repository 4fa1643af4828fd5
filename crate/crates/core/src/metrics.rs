//! Evaluation: MSE, MAE, per-gene Pearson correlation, and its first
//! quartile (`pcc_f`), median (`pcc_s`) and mean (`pcc_m`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{pearson, Tensor, PCC_EPS};

/// Zero-shot results on the STNet benchmark (MSE, MAE, PCC@F, PCC@S, PCC@M).
/// Orientation only; these are not reproducible from synthetic data.
pub const STNET_ZERO_SHOT_SCALE: [f64; 5] = [11.86e-2, 2.88e-1, 1.79e-1, 2.89e-1, 2.69e-1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    /// `None` when every gene is degenerate.
    pub pcc_f: Option<f64>,
    pub pcc_s: Option<f64>,
    pub pcc_m: Option<f64>,
    /// Genes whose ground truth has zero variance; excluded from the PCC aggregates.
    pub degenerate_genes: Vec<String>,
    pub pcc_per_gene: BTreeMap<String, f64>,
    pub n_windows: usize,
    pub n_genes: usize,
}

/// Quantile of an ascending slice by linear interpolation at `q·(n−1)`.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Fills in the PCC aggregates from `pcc_per_gene`.
fn summarize(per_gene: &BTreeMap<String, f64>) -> (Option<f64>, Option<f64>, Option<f64>) {
    let mut values: Vec<f64> = per_gene.values().copied().collect();
    values.sort_by(f64::total_cmp);
    let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    (quantile(&values, 0.25), quantile(&values, 0.5), mean)
}

pub fn evaluate(y_hat: &Tensor, y: &Tensor, gene_names: &[String]) -> Result<EvalReport> {
    if y_hat.shape() != y.shape() {
        return Err(Error::dim("evaluate", y_hat.shape(), y.shape()));
    }
    let (n, g) = y.dims();
    if n < 2 {
        return Err(Error::Contract(format!(
            "evaluation needs at least 2 windows, got {n}"
        )));
    }
    if gene_names.len() != g {
        return Err(Error::dim("evaluate", &[gene_names.len()], y.shape()));
    }
    let count = (n * g).max(1) as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in y_hat.data().iter().zip(y.data()) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    let mut per_gene = BTreeMap::new();
    let mut degenerate = Vec::new();
    for (c, name) in gene_names.iter().enumerate() {
        let truth = y.column(c);
        let mean = truth.iter().sum::<f64>() / n as f64;
        let spread = truth.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        if spread < PCC_EPS {
            degenerate.push(name.clone());
            continue;
        }
        // A constant prediction is uncorrelated.
        let r = pearson(&y_hat.column(c), &truth).unwrap_or(0.0);
        per_gene.insert(name.clone(), r);
    }
    degenerate.sort();
    let (pcc_f, pcc_s, pcc_m) = summarize(&per_gene);
    Ok(EvalReport {
        mse: se / count,
        mae: ae / count,
        pcc_f,
        pcc_s,
        pcc_m,
        degenerate_genes: degenerate,
        pcc_per_gene: per_gene,
        n_windows: n,
        n_genes: g,
    })
}

/// Combines per-slide reports over one gene set.
///
/// MSE and MAE are weighted by entry count. Each gene's PCC is the mean of
/// its per-slide PCCs over the slides where it is not degenerate; a gene
/// degenerate on every slide is reported as degenerate.
pub fn aggregate_reports(per_slide: &[EvalReport]) -> Result<EvalReport> {
    let first = per_slide
        .first()
        .ok_or_else(|| Error::Contract("aggregate of zero reports".into()))?;
    let genes = gene_set(first);
    let mut total_entries = 0.0;
    let (mut se, mut ae) = (0.0, 0.0);
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut n_windows = 0;
    for r in per_slide {
        if gene_set(r) != genes {
            return Err(Error::Data("reports cover different gene sets".into()));
        }
        let entries = (r.n_windows * r.n_genes) as f64;
        total_entries += entries;
        se += r.mse * entries;
        ae += r.mae * entries;
        n_windows += r.n_windows;
        for (g, v) in &r.pcc_per_gene {
            let e = sums.entry(g.as_str()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let per_gene: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(g, (s, k))| (g.to_string(), s / k as f64))
        .collect();
    let degenerate: Vec<String> = genes
        .iter()
        .filter(|g| !per_gene.contains_key(g.as_str()))
        .cloned()
        .collect();
    let (pcc_f, pcc_s, pcc_m) = summarize(&per_gene);
    let denom = total_entries.max(1.0);
    Ok(EvalReport {
        mse: se / denom,
        mae: ae / denom,
        pcc_f,
        pcc_s,
        pcc_m,
        degenerate_genes: degenerate,
        pcc_per_gene: per_gene,
        n_windows,
        n_genes: first.n_genes,
    })
}

fn gene_set(r: &EvalReport) -> Vec<String> {
    let mut all: Vec<String> = r
        .pcc_per_gene
        .keys()
        .cloned()
        .chain(r.degenerate_genes.iter().cloned())
        .collect();
    all.sort();
    all
}
