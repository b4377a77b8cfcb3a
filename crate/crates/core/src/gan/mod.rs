//! Generator and discriminator over windows of compressed states, and their
//! adversarial training.

pub mod mlp;
pub mod train;
pub mod window;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{sha256_hex, Container, ContainerError};
use crate::pod::NormalizationSpec;
use crate::tensor::{AdamConfig, AutodiffError, Graph, Tensor, Var};

pub use mlp::{Mlp, OutputActivation};
pub use train::{train, EpochLosses, TrainOptions, TrainingHistory};
pub use window::{fit_normalization, make_training_windows, CoefficientSeries, Window};

pub const CHECKPOINT_KIND: &str = "gan-checkpoint";

#[derive(Debug, Error)]
pub enum GanError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite {which} loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        which: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("window of {got} values, model expects {expected}")]
    Shape { got: usize, expected: usize },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub latent_dim: usize,
    /// Time levels per window.
    pub window_rows: usize,
    /// Channels per level: POD coefficients plus model parameters.
    pub window_cols: usize,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Train the generator on `E[ln(1 − D(G(z)))]` instead of `−E[ln D(G(z))]`.
    pub saturating_generator_loss: bool,
    /// Windows the discriminator judges jointly (1 = one at a time). Packed
    /// real and fake sets make a collapsed generator easy to spot.
    pub discriminator_packing: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            window_rows: 10,
            window_cols: 17,
            generator_hidden: vec![256, 512],
            discriminator_hidden: vec![512, 256],
            leaky_slope: 0.2,
            adam: AdamConfig::gan(),
            batch_size: 32,
            epochs: 5000,
            saturating_generator_loss: false,
            discriminator_packing: 1,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn window_len(&self) -> usize {
        self.window_rows * self.window_cols
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Anything that maps a latent vector to a (normalised) window through graph
/// nodes, so losses on the window can be differentiated back to `z`.
pub trait WindowGenerator {
    fn latent_dim(&self) -> usize;
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// Append nodes mapping `z` (`[1, latent_dim]`) to `[1, rows · cols]`.
    fn build(&self, g: &mut Graph, z: Var) -> Var;

    fn generate(&self, z: &[f64]) -> Window {
        let mut g = Graph::new();
        let zv = g.input("z");
        let out = self.build(&mut g, zv);
        let zt = Tensor::matrix(1, z.len(), z.to_vec()).expect("latent row");
        g.forward(&[("z", &zt)]).expect("generator shapes are consistent");
        Window::new(
            self.rows(),
            self.cols(),
            g.value(out).expect("evaluated").data().to_vec(),
        )
    }
}

/// Affine generator `z ↦ zW + b`, useful where the exact inverse is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGenerator {
    pub rows: usize,
    pub cols: usize,
    /// `[latent_dim, rows · cols]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl WindowGenerator for LinearGenerator {
    fn latent_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn build(&self, g: &mut Graph, z: Var) -> Var {
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let h = g.matmul(z, w);
        g.add_row(h, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub config: GanConfig,
    pub generator: Mlp,
    pub discriminator: Mlp,
    /// Maps windows between physical and generator units, when known.
    pub normalization: Option<NormalizationSpec>,
}

impl GanModel {
    /// Fresh networks initialised from `config.seed`.
    pub fn new(config: GanConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let out = config.window_len();
        let mut g_sizes = vec![config.latent_dim];
        g_sizes.extend(&config.generator_hidden);
        g_sizes.push(out);
        let mut d_sizes = vec![out * config.discriminator_packing.max(1)];
        d_sizes.extend(&config.discriminator_hidden);
        d_sizes.push(1);
        let generator = Mlp::new(&g_sizes, config.leaky_slope, OutputActivation::Tanh, &mut rng);
        let discriminator =
            Mlp::new(&d_sizes, config.leaky_slope, OutputActivation::Sigmoid, &mut rng);
        Self {
            config,
            generator,
            discriminator,
            normalization: None,
        }
    }

    /// Generator on a batch of latent rows `[batch, latent_dim]`.
    pub fn generate_batch(&self, z: &Tensor) -> Tensor {
        self.generator.eval(z)
    }

    /// `D(w)` for one window. A packing discriminator sees `w` repeated.
    pub fn discriminate(&self, w: &Window) -> Result<f64, GanError> {
        if w.values.len() != self.config.window_len() {
            return Err(GanError::Shape {
                got: w.values.len(),
                expected: self.config.window_len(),
            });
        }
        let k = self.config.discriminator_packing.max(1);
        let x = Tensor::matrix(1, k * w.values.len(), w.values.repeat(k))?;
        Ok(self.discriminator.eval(&x).data()[0])
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new()
            .with_meta("kind", CHECKPOINT_KIND)
            .with_meta(
                "config",
                serde_json::to_string(&self.config).expect("config serializes"),
            )
            .with_meta("config_digest", self.config.digest());
        for (name, t) in self.generator.params.iter() {
            c.tensors.insert(format!("g.{name}"), t.clone());
        }
        for (name, t) in self.discriminator.params.iter() {
            c.tensors.insert(format!("d.{name}"), t.clone());
        }
        if let Some(n) = &self.normalization {
            c.tensors.insert("norm.min", Tensor::vector(n.min.clone()));
            c.tensors.insert("norm.max", Tensor::vector(n.max.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, GanError> {
        if c.meta("kind")? != CHECKPOINT_KIND {
            return Err(GanError::Format(format!("not a {CHECKPOINT_KIND} container")));
        }
        let config: GanConfig = serde_json::from_str(c.meta("config")?)
            .map_err(|e| GanError::Format(format!("config: {e}")))?;
        let mut model = Self::new(config);
        for (prefix, net) in [("g.", &mut model.generator), ("d.", &mut model.discriminator)] {
            let names: Vec<String> = net.params.names().to_vec();
            for name in names {
                let t = c.tensor(&format!("{prefix}{name}"))?;
                let slot = net.params.names().iter().position(|n| *n == name).expect("own name");
                if t.shape() != net.params.tensors()[slot].shape() {
                    return Err(GanError::Format(format!(
                        "{prefix}{name} has shape {:?}, config implies {:?}",
                        t.shape(),
                        net.params.tensors()[slot].shape()
                    )));
                }
                net.params.tensors_mut()[slot] = t.clone();
            }
        }
        if let (Ok(lo), Ok(hi)) = (c.tensor("norm.min"), c.tensor("norm.max")) {
            model.normalization = Some(
                NormalizationSpec::new(lo.data().to_vec(), hi.data().to_vec())
                    .map_err(|e| GanError::Format(e.to_string()))?,
            );
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), GanError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, GanError> {
        Self::from_container(&Container::load(path)?)
    }
}

impl WindowGenerator for GanModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn rows(&self) -> usize {
        self.config.window_rows
    }

    fn cols(&self) -> usize {
        self.config.window_cols
    }

    fn build(&self, g: &mut Graph, z: Var) -> Var {
        let vars = self.generator.bind_constants(g);
        self.generator.build(g, z, &vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GanConfig {
        GanConfig {
            latent_dim: 4,
            window_rows: 3,
            window_cols: 2,
            generator_hidden: vec![8],
            discriminator_hidden: vec![8],
            seed: 11,
            ..GanConfig::default()
        }
    }

    #[test]
    fn outputs_bounded_and_deterministic() {
        let m = GanModel::new(small());
        let z = [0.3, -1.2, 2.0, 0.0];
        let a = m.generate(&z);
        assert_eq!(a, m.generate(&z));
        assert!(a.values.iter().all(|v| v.abs() < 1.0));
        let p = m.discriminate(&a).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = GanModel::new(small());
        m.normalization = Some(NormalizationSpec::new(vec![0.0; 2], vec![1.0, 2.0]).unwrap());
        let back = GanModel::from_container(&Container::from_bytes(&m.to_container().to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn discriminator_rejects_wrong_shape() {
        let m = GanModel::new(small());
        assert!(m.discriminate(&Window::new(1, 2, vec![0.0, 0.0])).is_err());
    }
}
