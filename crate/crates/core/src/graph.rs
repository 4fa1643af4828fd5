//! Window graph with two directed edge types: spatial k-NN over window
//! positions and feature-similarity k-NN over extracted window features.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nd::Tensor;

pub const DEFAULT_K: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    /// `1 − cos(a, b)`; a zero vector has similarity 0 to everything.
    #[default]
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl Metric {
    /// Dissimilarity used for ranking. Euclidean ranks by squared distance.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

/// For each row of `points`, the `k` nearest other rows under `metric`,
/// closest first, ties broken by lower index.
pub fn knn_brute(points: &Tensor, k: usize, metric: Metric) -> Result<Vec<Vec<usize>>> {
    let (n, _) = points.dims();
    if !points.is_finite() {
        return Err(Error::Data("non-finite coordinates in k-NN input".into()));
    }
    let k = k.min(n.saturating_sub(1));
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        if k == 0 {
            out.push(Vec::new());
            continue;
        }
        let pi = points.row(i);
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (metric.distance(pi, points.row(j)), j)),
        );
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_rank);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_rank);
        out.push(cand.iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Node set plus two directed neighbor lists per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideGraph {
    pub n_nodes: usize,
    pub k_pos: usize,
    pub k_fea: usize,
    pub pos_neighbors: Vec<Vec<usize>>,
    pub fea_neighbors: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub k_pos: usize,
    pub k_fea: usize,
    pub fea_metric: Metric,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_pos: DEFAULT_K,
            k_fea: DEFAULT_K,
            fea_metric: Metric::Cosine,
        }
    }
}

impl SlideGraph {
    /// Positional edges from euclidean k-NN on `positions`, feature edges
    /// from `cfg.fea_metric` k-NN on `features`.
    pub fn build(positions: &Tensor, features: &Tensor, cfg: GraphConfig) -> Result<Self> {
        let n = positions.rows();
        if n == 0 {
            return Err(Error::EmptySlide);
        }
        if features.rows() != n {
            return Err(Error::dim(
                "build_slide_graph",
                positions.shape(),
                features.shape(),
            ));
        }
        Ok(Self {
            n_nodes: n,
            k_pos: cfg.k_pos,
            k_fea: cfg.k_fea,
            pos_neighbors: knn_brute(positions, cfg.k_pos, Metric::Euclidean)?,
            fea_neighbors: knn_brute(features, cfg.k_fea, cfg.fea_metric)?,
        })
    }

    /// A graph with no edges.
    pub fn isolated(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            k_pos: 0,
            k_fea: 0,
            pos_neighbors: vec![Vec::new(); n_nodes],
            fea_neighbors: vec![Vec::new(); n_nodes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, lists) in [("pos", &self.pos_neighbors), ("fea", &self.fea_neighbors)] {
            if lists.len() != self.n_nodes {
                return Err(Error::Data(format!(
                    "{kind} neighbor lists: {} for {} nodes",
                    lists.len(),
                    self.n_nodes
                )));
            }
            for (i, list) in lists.iter().enumerate() {
                if let Some(&j) = list.iter().find(|&&j| j == i || j >= self.n_nodes) {
                    return Err(Error::Data(format!(
                        "{kind} neighbor {j} invalid for node {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let relabel = |lists: &[Vec<usize>]| {
            let mut out = vec![Vec::new(); lists.len()];
            for (i, list) in lists.iter().enumerate() {
                out[perm[i]] = list.iter().map(|&j| perm[j]).collect();
            }
            out
        };
        Self {
            n_nodes: self.n_nodes,
            k_pos: self.k_pos,
            k_fea: self.k_fea,
            pos_neighbors: relabel(&self.pos_neighbors),
            fea_neighbors: relabel(&self.fea_neighbors),
        }
    }

    pub fn stats(&self) -> GraphStats {
        let in_hist = |lists: &[Vec<usize>]| {
            let mut deg = vec![0usize; self.n_nodes];
            for &j in lists.iter().flatten() {
                deg[j] += 1;
            }
            let mut hist = BTreeMap::new();
            for d in deg {
                *hist.entry(d).or_insert(0) += 1;
            }
            hist
        };
        let pos_edges: HashSet<(usize, usize)> = self
            .pos_neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
            .collect();
        let overlap = self
            .fea_neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
            .filter(|e| pos_edges.contains(e))
            .count();
        GraphStats {
            n_nodes: self.n_nodes,
            k_pos: self.k_pos,
            k_fea: self.k_fea,
            pos_edges: self.pos_neighbors.iter().map(Vec::len).sum(),
            fea_edges: self.fea_neighbors.iter().map(Vec::len).sum(),
            overlap,
            pos_in_degree: in_hist(&self.pos_neighbors),
            fea_in_degree: in_hist(&self.fea_neighbors),
        }
    }
}

/// Degree and overlap summary of a [`SlideGraph`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphStats {
    pub n_nodes: usize,
    pub k_pos: usize,
    pub k_fea: usize,
    /// Total out-degree over positional lists.
    pub pos_edges: usize,
    pub fea_edges: usize,
    /// Directed edges present in both edge sets.
    pub overlap: usize,
    /// in-degree → node count
    pub pos_in_degree: BTreeMap<usize, usize>,
    pub fea_in_degree: BTreeMap<usize, usize>,
}

impl GraphStats {
    /// Flat key-value JSON object; histogram bins become `pos_in_degree.<d>` keys.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("n_nodes".into(), self.n_nodes.into());
        m.insert("k_pos".into(), self.k_pos.into());
        m.insert("k_fea".into(), self.k_fea.into());
        m.insert("pos_edges".into(), self.pos_edges.into());
        m.insert("fea_edges".into(), self.fea_edges.into());
        m.insert("overlap".into(), self.overlap.into());
        for (prefix, hist) in [
            ("pos_in_degree", &self.pos_in_degree),
            ("fea_in_degree", &self.fea_in_degree),
        ] {
            for (d, c) in hist {
                m.insert(format!("{prefix}.{d}"), (*c).into());
            }
        }
        Value::Object(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn collinear_hand_case() {
        let p = pts(&[&[0.0], &[1.0], &[3.0]]);
        assert_eq!(
            knn_brute(&p, 1, Metric::Euclidean).unwrap(),
            vec![vec![1], vec![0], vec![1]]
        );
    }

    #[test]
    fn k_zero_gives_empty_lists() {
        let p = pts(&[&[0.0, 1.0], &[1.0, 2.0]]);
        assert_eq!(
            knn_brute(&p, 0, Metric::Cosine).unwrap(),
            vec![Vec::<usize>::new(); 2]
        );
    }

    #[test]
    fn non_finite_rejected() {
        let p = pts(&[&[0.0], &[f64::INFINITY]]);
        assert!(matches!(
            knn_brute(&p, 1, Metric::Euclidean),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn unit_square_ties_go_to_lower_index() {
        // 0:(0,0) 1:(1,0) 2:(0,1) 3:(1,1)
        let p = pts(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let g = SlideGraph::build(
            &p,
            &p,
            GraphConfig {
                k_pos: 1,
                k_fea: 1,
                fea_metric: Metric::Euclidean,
            },
        )
        .unwrap();
        assert_eq!(g.pos_neighbors, vec![vec![1], vec![0], vec![0], vec![1]]);
    }

    #[test]
    fn identical_features_pick_lowest_indices() {
        let pos = pts(&[&[0.0, 0.0], &[5.0, 0.0], &[0.0, 9.0], &[3.0, 3.0]]);
        let fea = Tensor::filled(4, 3, 0.7);
        let g = SlideGraph::build(
            &pos,
            &fea,
            GraphConfig {
                k_pos: 1,
                k_fea: 2,
                fea_metric: Metric::Cosine,
            },
        )
        .unwrap();
        assert_eq!(
            g.fea_neighbors,
            vec![vec![1, 2], vec![0, 2], vec![0, 1], vec![0, 1]]
        );
    }

    #[test]
    fn empty_and_single_node() {
        let empty = Tensor::zeros(0, 2);
        assert!(matches!(
            SlideGraph::build(&empty, &empty, GraphConfig::default()),
            Err(Error::EmptySlide)
        ));
        let one = pts(&[&[1.0, 2.0]]);
        let g = SlideGraph::build(&one, &one, GraphConfig::default()).unwrap();
        assert_eq!(g.pos_neighbors, vec![Vec::<usize>::new()]);
        assert_eq!(g.fea_neighbors, vec![Vec::<usize>::new()]);
    }

    #[test]
    fn stats_zero_k() {
        let p = pts(&[&[0.0], &[1.0], &[2.0]]);
        let s = SlideGraph::build(
            &p,
            &p,
            GraphConfig {
                k_pos: 0,
                k_fea: 0,
                fea_metric: Metric::Euclidean,
            },
        )
        .unwrap()
        .stats();
        assert_eq!(s.overlap, 0);
        assert_eq!(s.pos_in_degree, BTreeMap::from([(0, 3)]));
        assert_eq!(s.fea_in_degree, BTreeMap::from([(0, 3)]));
    }

    #[test]
    fn stats_forced_coincidence() {
        let p = pts(&[
            &[0.0, 0.1],
            &[1.0, 0.3],
            &[2.5, -1.0],
            &[0.2, 4.0],
            &[3.0, 3.3],
        ]);
        let g = SlideGraph::build(
            &p,
            &p,
            GraphConfig {
                k_pos: 2,
                k_fea: 2,
                fea_metric: Metric::Euclidean,
            },
        )
        .unwrap();
        let s = g.stats();
        assert_eq!(s.overlap, 5 * 2);
        let json = s.to_json();
        assert!(json.as_object().unwrap().values().all(|v| v.is_number()));
        assert_eq!(json["overlap"], 10);
    }
}
