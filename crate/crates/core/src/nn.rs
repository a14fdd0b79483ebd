//! Fully connected networks on top of [`crate::autodiff`]: ReLU between
//! layers, no activation after the last one.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Graph handles of one forward pass, needed to pull gradients back out.
pub struct Bound {
    vars: Vec<(Var, Var)>,
}

impl Mlp {
    /// He-uniform weights, zero biases. `sizes` lists every layer width,
    /// input first.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in.max(1) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Dense {
                    weight: Tensor::new(vec![fan_in, fan_out], data)
                        .expect("sized")
                        .requires_grad(true),
                    bias: Tensor::zeros(vec![fan_out]).requires_grad(true),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(vec![w[0], w[1]]).requires_grad(true),
                bias: Tensor::zeros(vec![w[1]]).requires_grad(true),
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.shape()[0])
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.shape()[1])
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Bound)> {
        let mut h = x;
        let mut vars = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(&layer.weight);
            let b = g.param(&layer.bias);
            h = g.linear(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
            vars.push((w, b));
        }
        Ok((h, Bound { vars }))
    }

    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (layer, (w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(*w, &mut layer.weight);
            grads.accumulate_into(*b, &mut layer.bias);
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }

    /// Forward pass without gradient bookkeeping; one output row per input.
    pub fn infer<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<Vec<f64>>> {
        let d = self.output_dim();
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = Tensor::from_rows(rows, self.input_dim())?;
        let mut g = Graph::new();
        let mut h = g.constant(&x);
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.constant(&layer.weight);
            let b = g.constant(&layer.bias);
            h = g.linear(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(g.value(h).chunks(d).map(<[f64]>::to_vec).collect())
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    /// Rebuilds a network from checkpoint entries named by [`Mlp::named`].
    pub fn from_named(prefix: &str, entries: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let w = entries.get(&format!("{prefix}.{i}.weight"));
            let b = entries.get(&format!("{prefix}.{i}.bias"));
            match (w, b) {
                (Some(w), Some(b)) => {
                    if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
                        return Err(Error::Checkpoint(format!(
                            "{prefix}.{i}: weight {:?} / bias {:?}",
                            w.shape(),
                            b.shape()
                        )));
                    }
                    layers.push(Dense {
                        weight: w.clone(),
                        bias: b.clone(),
                    });
                }
                (None, None) => break,
                _ => return Err(Error::Checkpoint(format!("{prefix}.{i}: incomplete layer"))),
            }
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint(format!("no layers under {prefix:?}")));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.shape()[1] != pair[1].weight.shape()[0] {
                return Err(Error::Checkpoint(format!(
                    "{prefix}: layer widths do not chain"
                )));
            }
        }
        Ok(Self { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infer_matches_graph_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 5, 2], &mut rng);
        let rows = vec![vec![0.1, -0.2, 0.3], vec![1.0, 2.0, -1.0]];
        let out = net.infer(&rows).unwrap();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_rows(&rows, 3).unwrap());
        let (y, _) = net.forward(&mut g, x).unwrap();
        assert_eq!(out.concat(), g.value(y));
        assert!(net.infer::<Vec<f64>>(&[]).unwrap().is_empty());
    }

    #[test]
    fn named_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[4, 3, 2], &mut rng);
        let map: BTreeMap<String, Tensor> = net
            .named("enc")
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(Mlp::from_named("enc", &map).unwrap(), net);
        assert!(Mlp::from_named("head", &map).is_err());
    }
}
