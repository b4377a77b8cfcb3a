//! Linear window generators with a planted dynamics, whose windows are exact
//! shifts of one trajectory.

use dapredgan::gan::LinearGenerator;
use dapredgan::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat_vec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|r| (0..n).map(|j| r.iter().zip(b).map(|(x, row)| x * row[j]).sum()).collect())
        .collect()
}

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// `s ↦ M s` on `(α, μ)`: `α' = A α + C μ`, `μ' = μ`, with `A` a scaled
/// rotation-like matrix of spectral radius below one.
pub fn planted_dynamics(n_pod: usize, n_mu: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_pod + n_mu;
    // Orthonormal Q by Gram-Schmidt on random columns.
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n_pod {
        let mut v: Vec<f64> = (0..n_pod).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nrm > 1e-3 {
            q.push(v.into_iter().map(|a| a / nrm).collect());
        }
    }
    let mut m = identity(n);
    for i in 0..n_pod {
        for j in 0..n_pod {
            m[i][j] = 0.95 * q[j][i];
        }
        for j in n_pod..n {
            m[i][j] = rng.random_range(-0.1..0.1);
        }
    }
    m
}

/// Generator with latent `s` and window rows `s, M s, …, M^{m−1} s`.
pub fn dynamics_generator(dyn_mat: &Mat, m: usize) -> LinearGenerator {
    let c = dyn_mat.len();
    let mut weight = vec![0.0; c * m * c];
    let mut power = identity(c);
    for r in 0..m {
        for i in 0..c {
            for j in 0..c {
                weight[i * m * c + r * c + j] = power[j][i];
            }
        }
        power = mat_mul(dyn_mat, &power);
    }
    LinearGenerator {
        rows: m,
        cols: c,
        weight: Tensor::matrix(c, m * c, weight).unwrap(),
        bias: Tensor::zeros(&[m * c]),
    }
}

/// `s_k = M^k s_0` for `k < n`.
pub fn trajectory(dyn_mat: &Mat, s0: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![s0.to_vec()];
    while out.len() < n {
        let next = mat_vec(dyn_mat, out.last().unwrap());
        out.push(next);
    }
    out
}

pub fn split(states: &[Vec<f64>], n_pod: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        states.iter().map(|s| s[..n_pod].to_vec()).collect(),
        states.iter().map(|s| s[n_pod..].to_vec()).collect(),
    )
}
