//! Central finite differences.

use dapredgan::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `‖g − g_fd‖ / max(‖g_fd‖, tiny)` for `f` at `x`, step `h`.
pub fn relative_error(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], g: &[f64], h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        num += (g[i] - fd) * (g[i] - fd);
        den += fd * fd;
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

pub const STEP: f64 = 1e-5;

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Largest per-component error of reverse-mode gradients of `⟨c, f(x…)⟩`
/// against central differences, relative to `max(|fd|, 1e-3)`.
pub fn max_gradient_error(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("x{i}")).collect();

    // First pass for the output shape of `f`.
    let mut probe = Graph::new();
    let vars: Vec<Var> = names.iter().map(|n| probe.input(n)).collect();
    let out = build(&mut probe, &vars);
    let bind = |xs: &[Tensor]| -> Vec<(String, Tensor)> { names.iter().cloned().zip(xs.iter().cloned()).collect() };
    let bound = bind(inputs);
    let refs: Vec<(&str, &Tensor)> = bound.iter().map(|(n, t)| (n.as_str(), t)).collect();
    probe.forward(&refs).unwrap();
    let shape = probe.value(out).unwrap().shape().to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let mut g = Graph::new();
    let vars: Vec<Var> = names.iter().map(|n| g.input(n)).collect();
    let out = build(&mut g, &vars);
    let cv = g.constant(c);
    let prod = g.mul(out, cv);
    let s = g.sum(prod);

    let eval = |g: &mut Graph, xs: &[Tensor]| -> f64 {
        let bound = bind(xs);
        let refs: Vec<(&str, &Tensor)> = bound.iter().map(|(n, t)| (n.as_str(), t)).collect();
        g.forward(&refs).unwrap();
        g.value(s).unwrap().item()
    };
    eval(&mut g, inputs);
    let grads = g.backward(s).unwrap();
    let analytic: Vec<Vec<f64>> = names.iter().map(|n| grads.get(n).unwrap().data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..xs[i].len() {
            let x0 = xs[i].data()[k];
            xs[i].data_mut()[k] = x0 + STEP;
            let fp = eval(&mut g, &xs);
            xs[i].data_mut()[k] = x0 - STEP;
            let fm = eval(&mut g, &xs);
            xs[i].data_mut()[k] = x0;
            let fd = (fp - fm) / (2.0 * STEP);
            worst = worst.max((grad[k] - fd).abs() / fd.abs().max(1e-3));
        }
    }
    worst
}
