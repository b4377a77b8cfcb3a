use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, NamedTensors, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Sigmoid,
}

/// Fully connected network: leaky-rectifier hidden layers and a bounded
/// output nonlinearity. Parameters are `w{i}` (`[in, out]`) and `b{i}` (`[out]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub leaky_slope: f64,
    pub output: OutputActivation,
    pub params: NamedTensors,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(
        sizes: &[usize],
        leaky_slope: f64,
        output: OutputActivation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = NamedTensors::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            params.insert(
                format!("w{i}"),
                Tensor::matrix(fan_in, fan_out, w).expect("weight shape"),
            );
            params.insert(format!("b{i}"), Tensor::zeros(&[fan_out]));
        }
        Self {
            sizes: sizes.to_vec(),
            leaky_slope,
            output,
            params,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn n_params(&self) -> usize {
        self.params.numel()
    }

    /// Parameter nodes as named graph inputs `{prefix}{name}`, in
    /// `self.params` order.
    pub fn bind_inputs(&self, g: &mut Graph, prefix: &str) -> Vec<Var> {
        self.params
            .names()
            .iter()
            .map(|n| g.input(&format!("{prefix}{n}")))
            .collect()
    }

    /// Parameter nodes as constants, for inference and latent optimization.
    pub fn bind_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Append the network applied to `x` (`[batch, input]`). `vars` come from
    /// one of the `bind_*` methods.
    pub fn build(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Var {
        let mut h = x;
        for layer in 0..self.n_layers() {
            h = g.matmul(h, vars[2 * layer]);
            h = g.add_row(h, vars[2 * layer + 1]);
            h = if layer + 1 < self.n_layers() {
                g.leaky_relu(h, self.leaky_slope)
            } else {
                match self.output {
                    OutputActivation::Tanh => g.tanh(h),
                    OutputActivation::Sigmoid => g.sigmoid(h),
                }
            };
        }
        h
    }

    /// Plain evaluation on a batch `[batch, input]`.
    pub fn eval(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.input("x");
        let vars = self.bind_constants(&mut g);
        let out = self.build(&mut g, xv, &vars);
        g.forward(&[("x", x)]).expect("network shapes are consistent");
        g.value(out).expect("evaluated").clone()
    }
}
