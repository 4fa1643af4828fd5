//! Window feature refinement over the slide graph.
//!
//! Each layer maps row `i` to `act([h_i ∥ mean(h_pos(i)) ∥ mean(h_fea(i))] · W)`.
//! Layers carry no bias. Hidden layers use ReLU; the last layer is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SlideGraph;
use crate::nd::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    /// `(3·d_in) × d_out`
    pub weight: Tensor,
    pub activation: Activation,
}

impl SageLayer {
    pub fn new(weight: Tensor, activation: Activation) -> Result<Self> {
        if !weight.rows().is_multiple_of(3) || weight.rows() == 0 {
            return Err(Error::Config(format!(
                "sage weight needs a multiple of 3 rows, got {:?}",
                weight.shape()
            )));
        }
        Ok(Self { weight, activation })
    }

    /// Uniform in `±sqrt(1/fan_in)` with `fan_in = 3·d_in`.
    pub fn init(d_in: usize, d_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let fan_in = 3 * d_in;
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, d_out, data).expect("shape"),
            activation,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows() / 3
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, g: &SlideGraph, weight: Var) -> Result<Var> {
        let (n, d_in) = tape.value(h).dims();
        if g.n_nodes != n {
            return Err(Error::dim(
                "sage_layer",
                &[g.n_nodes],
                tape.value(h).shape(),
            ));
        }
        if d_in != self.d_in() {
            return Err(Error::dim(
                "sage_layer",
                tape.value(h).shape(),
                self.weight.shape(),
            ));
        }
        let pos = tape.neighbor_mean(h, &g.pos_neighbors)?;
        let fea = tape.neighbor_mean(h, &g.fea_neighbors)?;
        let cat = tape.concat_cols(&[h, pos, fea])?;
        let out = tape.matmul(cat, weight)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(out),
            Activation::None => out,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SageStack {
    pub layers: Vec<SageLayer>,
}

impl SageStack {
    /// Checks that widths chain from layer to layer.
    pub fn new(layers: Vec<SageLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("sage stack needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::dim(
                    "sage_stack",
                    pair[0].weight.shape(),
                    pair[1].weight.shape(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// `n_layers` layers `d_e → hidden → … → hidden → d`.
    pub fn init(
        d_e: usize,
        hidden: usize,
        d: usize,
        n_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_layers == 0 || d_e == 0 || hidden == 0 || d == 0 {
            return Err(Error::Config(
                "sage widths and depth must be positive".into(),
            ));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let d_in = if l == 0 { d_e } else { hidden };
                let last = l + 1 == n_layers;
                let (d_out, act) = if last {
                    (d, Activation::None)
                } else {
                    (hidden, Activation::Relu)
                };
                SageLayer::init(d_in, d_out, act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn d_e(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d(&self) -> usize {
        self.layers.last().expect("nonempty").d_out()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers.iter().map(|l| tape.param(&l.weight)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, g: &SlideGraph, weights: &[Var]) -> Result<Var> {
        let mut x = h;
        for (layer, &w) in self.layers.iter().zip(weights) {
            x = layer.forward(tape, x, g, w)?;
        }
        Ok(x)
    }

    /// Forward pass without gradient tracking.
    pub fn apply(&self, h: &Tensor, g: &SlideGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let weights: Vec<Var> = self
            .layers
            .iter()
            .map(|l| tape.constant(l.weight.clone()))
            .collect();
        let out = self.forward(&mut tape, hv, g, &weights)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn stacked_identity_on_isolated_node_passes_features() {
        let i = Tensor::identity(3);
        let w =
            Tensor::from_rows(&(0..9).map(|r| i.row(r % 3).to_vec()).collect::<Vec<_>>()).unwrap();
        let stack = SageStack::new(vec![SageLayer::new(w, Activation::None).unwrap()]).unwrap();
        let h = Tensor::from_rows(&[[0.5, -2.0, 7.0]]).unwrap();
        let out = stack.apply(&h, &SlideGraph::isolated(1)).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn mutual_identical_rows_stay_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = SageLayer::init(4, 5, Activation::Relu, &mut rng);
        let stack = SageStack::new(vec![layer]).unwrap();
        let row = [0.3, -0.2, 1.1, 0.4];
        let h = Tensor::from_rows(&[row, row]).unwrap();
        let g = SlideGraph {
            n_nodes: 2,
            k_pos: 1,
            k_fea: 1,
            pos_neighbors: vec![vec![1], vec![0]],
            fea_neighbors: vec![vec![1], vec![0]],
        };
        let out = stack.apply(&h, &g).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn width_and_node_count_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = SageStack::init(4, 6, 2, 2, &mut rng).unwrap();
        assert!(stack
            .apply(&random(3, 5, &mut rng), &SlideGraph::isolated(3))
            .is_err());
        assert!(stack
            .apply(&random(3, 4, &mut rng), &SlideGraph::isolated(2))
            .is_err());
        let bad = vec![
            SageLayer::init(4, 6, Activation::Relu, &mut rng),
            SageLayer::init(5, 2, Activation::None, &mut rng),
        ];
        assert!(SageStack::new(bad).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stack = SageStack::init(4, 6, 2, 3, &mut rng).unwrap();
        for l in &mut stack.layers {
            l.weight.data_mut().fill(0.0);
        }
        let out = stack
            .apply(&random(5, 4, &mut rng), &SlideGraph::isolated(5))
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isolated_graph_is_a_per_row_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = SageStack::init(3, 5, 2, 2, &mut rng).unwrap();
        let h = random(4, 3, &mut rng);
        let out = stack.apply(&h, &SlideGraph::isolated(4)).unwrap();
        for i in 0..4 {
            let mut x: Vec<f64> = h.row(i).to_vec();
            for layer in &stack.layers {
                let d_in = layer.d_in();
                let mut padded = x.clone();
                padded.extend(std::iter::repeat_n(0.0, 2 * d_in));
                x = (0..layer.d_out())
                    .map(|o| {
                        (0..3 * d_in)
                            .map(|r| padded[r] * layer.weight.get(r, o))
                            .sum::<f64>()
                    })
                    .map(|v| {
                        if layer.activation == Activation::Relu {
                            v.max(0.0)
                        } else {
                            v
                        }
                    })
                    .collect();
            }
            for (a, b) in x.iter().zip(out.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
