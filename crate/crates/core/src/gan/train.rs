use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GanError, GanModel, Window};
use crate::tensor::{Adam, Graph, Tensor, Var};

/// `ln` operands are clamped here so a saturated discriminator cannot give −∞.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Write `checkpoint_{epoch}.dpgc` into this directory every
    /// `checkpoint_every` epochs.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub discriminator: f64,
    pub generator: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochLosses>,
}

impl TrainingHistory {
    pub fn write_csv(&self, path: &Path) -> Result<(), GanError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss_d", "loss_g"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.discriminator.to_string(),
                e.generator.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Net {
    names: Vec<String>,
}

impl Net {
    fn bindings<'a>(&'a self, params: &'a [Tensor]) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.names.iter().map(String::as_str).zip(params)
    }
}

/// Alternating discriminator / generator Adam updates over shuffled batches.
/// Each epoch uses the full batches of a fresh shuffle; a dataset smaller than
/// the batch size forms a single batch.
///
/// The discriminator minimises `−E[ln D(x)] − E[ln(1 − D(G(z)))]`; the
/// generator minimises `−E[ln D(G(z))]`, or `E[ln(1 − D(G(z)))]` when the
/// config asks for the saturating form. Fresh latent samples are drawn for
/// each of the two updates.
pub fn train(
    model: &mut GanModel,
    data: &[Window],
    opts: &TrainOptions,
) -> Result<TrainingHistory, GanError> {
    let cfg = model.config.clone();
    let mut history = TrainingHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if data.is_empty() {
        return Err(GanError::EmptyDataset);
    }
    let width = cfg.window_len();
    if let Some(w) = data.iter().find(|w| w.values.len() != width) {
        return Err(GanError::Shape {
            got: w.values.len(),
            expected: width,
        });
    }

    let pack = cfg.discriminator_packing.max(1);
    // Full batches only, a multiple of the packing size.
    let batch_len = cfg.batch_size.min(data.len()) / pack * pack;
    if batch_len == 0 {
        return Err(GanError::Shape {
            got: data.len(),
            expected: pack,
        });
    }
    let packed = [batch_len / pack, pack * width];

    let g_net = Net {
        names: model.generator.params.names().iter().map(|n| format!("g.{n}")).collect(),
    };
    let d_net = Net {
        names: model.discriminator.params.names().iter().map(|n| format!("d.{n}")).collect(),
    };

    // Generator alone, to produce fakes for the discriminator step.
    let mut gen_graph = Graph::new();
    let z_in = gen_graph.input("z");
    let gv = model.generator.bind_inputs(&mut gen_graph, "g.");
    let gen_out = model.generator.build(&mut gen_graph, z_in, &gv);

    // Discriminator loss on a real and a fake batch.
    let mut d_graph = Graph::new();
    let real = d_graph.input("real");
    let fake = d_graph.input("fake");
    let dv = model.discriminator.bind_inputs(&mut d_graph, "d.");
    let d_loss = {
        let real = d_graph.reshape(real, &packed);
        let fake = d_graph.reshape(fake, &packed);
        let pr = model.discriminator.build(&mut d_graph, real, &dv);
        let pf = model.discriminator.build(&mut d_graph, fake, &dv);
        let lr = d_graph.ln(pr, LOG_FLOOR);
        let lr = d_graph.mean(lr);
        let qf = d_graph.affine(pf, -1.0, 1.0);
        let lf = d_graph.ln(qf, LOG_FLOOR);
        let lf = d_graph.mean(lf);
        let s = d_graph.add(lr, lf);
        d_graph.scale(s, -1.0)
    };

    // Generator loss through the discriminator.
    let mut gd_graph = Graph::new();
    let z2 = gd_graph.input("z");
    let gv2 = model.generator.bind_inputs(&mut gd_graph, "g.");
    let dv2 = model.discriminator.bind_inputs(&mut gd_graph, "d.");
    let g_loss = {
        let x = model.generator.build(&mut gd_graph, z2, &gv2);
        let x = gd_graph.reshape(x, &packed);
        let p = model.discriminator.build(&mut gd_graph, x, &dv2);
        generator_objective(&mut gd_graph, p, cfg.saturating_generator_loss)
    };

    let mut g_params: Vec<Tensor> = model.generator.params.tensors().to_vec();
    let mut d_params: Vec<Tensor> = model.discriminator.params.tensors().to_vec();
    let mut g_opt = Adam::new(cfg.adam);
    let mut d_opt = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_g, mut n_batches) = (0.0, 0.0, 0usize);
        for (batch, idx) in order.chunks_exact(batch_len).enumerate() {
            let b = idx.len();
            let real_t = Tensor::matrix(
                b,
                width,
                idx.iter().flat_map(|&i| data[i].values.iter().copied()).collect(),
            )?;

            let z = sample_latent(&mut rng, b, cfg.latent_dim);
            let mut inputs: Vec<(&str, &Tensor)> = vec![("z", &z)];
            inputs.extend(g_net.bindings(&g_params));
            gen_graph.forward(&inputs)?;
            let fake_t = gen_graph.value(gen_out)?.clone();

            let mut inputs: Vec<(&str, &Tensor)> = vec![("real", &real_t), ("fake", &fake_t)];
            inputs.extend(d_net.bindings(&d_params));
            d_graph.forward(&inputs)?;
            let ld = d_graph.value(d_loss)?.item();
            if !ld.is_finite() {
                return Err(GanError::NonFinite {
                    which: "discriminator",
                    epoch,
                    batch,
                });
            }
            let grads = d_graph.backward(d_loss)?;
            let dg: Vec<&Tensor> = d_net.names.iter().map(|n| grads.get(n).expect("bound")).collect();
            d_opt.step(&mut d_params, &dg)?;

            let z = sample_latent(&mut rng, b, cfg.latent_dim);
            let mut inputs: Vec<(&str, &Tensor)> = vec![("z", &z)];
            inputs.extend(g_net.bindings(&g_params));
            inputs.extend(d_net.bindings(&d_params));
            gd_graph.forward(&inputs)?;
            let lg = gd_graph.value(g_loss)?.item();
            if !lg.is_finite() {
                return Err(GanError::NonFinite {
                    which: "generator",
                    epoch,
                    batch,
                });
            }
            let grads = gd_graph.backward(g_loss)?;
            let gg: Vec<&Tensor> = g_net.names.iter().map(|n| grads.get(n).expect("bound")).collect();
            g_opt.step(&mut g_params, &gg)?;

            sum_d += ld;
            sum_g += lg;
            n_batches += 1;
        }
        let e = EpochLosses {
            epoch,
            discriminator: sum_d / n_batches as f64,
            generator: sum_g / n_batches as f64,
        };
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            info!("epoch {epoch}: L_D {:.4} L_G {:.4}", e.discriminator, e.generator);
        }
        history.epochs.push(e);

        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0 {
                store(model, &g_params, &d_params);
                model.save(&dir.join(format!("checkpoint_{}.dpgc", epoch + 1)))?;
            }
        }
    }
    store(model, &g_params, &d_params);
    Ok(history)
}

fn store(model: &mut GanModel, g: &[Tensor], d: &[Tensor]) {
    model.generator.params.tensors_mut().clone_from_slice(g);
    model.discriminator.params.tensors_mut().clone_from_slice(d);
}

fn generator_objective(g: &mut Graph, p: Var, saturating: bool) -> Var {
    if saturating {
        let q = g.affine(p, -1.0, 1.0);
        let l = g.ln(q, LOG_FLOOR);
        g.mean(l)
    } else {
        let l = g.ln(p, LOG_FLOOR);
        let l = g.mean(l);
        g.scale(l, -1.0)
    }
}

/// `[rows, dim]` standard-normal draws.
pub fn sample_latent(rng: &mut impl rand::Rng, rows: usize, dim: usize) -> Tensor {
    let data = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, dim, data).expect("latent shape")
}
