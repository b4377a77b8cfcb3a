//! Proper orthogonal decomposition of snapshot ensembles, and the min-max
//! scaling that maps compressed windows into the generator's output range.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{sha256_hex, Container, ContainerError};
use crate::tensor::{gemm, Tensor};

pub const BASIS_KIND: &str = "pod-basis";

/// Eigenvalues of the Gram matrix below this fraction of the largest are
/// treated as zero when counting the rank.
const RANK_RTOL: f64 = 1e-12;

/// Convergence tolerances tried in turn by the eigensolver. At machine
/// precision it can return NaN eigenvalues on strongly rank-deficient Gram
/// matrices; the first fully finite decomposition wins.
const EIGEN_TOLERANCES: [f64; 4] = [f64::EPSILON, 1e-14, 1e-12, 1e-10];

#[derive(Debug, Error)]
pub enum PodError {
    #[error("need more snapshots than modes: {n_snapshots} snapshots, {n_pod} modes")]
    TooFewSnapshots { n_snapshots: usize, n_pod: usize },
    #[error("centred snapshot matrix has rank {rank}, fewer than the {n_pod} requested modes")]
    RankDeficient { rank: usize, n_pod: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("channel {channel} is degenerate (min {min}, max {max})")]
    DegenerateChannel { channel: usize, min: f64, max: f64 },
    #[error("eigensolver did not converge on the {0}x{0} Gram matrix")]
    Eigen(usize),
    #[error("bad basis file: {0}")]
    Format(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Basis `B` (`n_state × n_pod`, row-major), snapshot mean `ū` and the
/// singular values of the centred snapshot matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    pub n_state: usize,
    pub n_pod: usize,
    pub basis: Vec<f64>,
    pub mean: Vec<f64>,
    /// All non-negative singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// Smallest and largest entry over every snapshot, in state units.
    pub state_range: (f64, f64),
    pub ensemble_digest: String,
}

/// Digest of a snapshot set; identifies which ensemble a basis came from.
pub fn ensemble_digest(snapshots: &[Vec<f64>]) -> String {
    let mut bytes = Vec::with_capacity(snapshots.len() * snapshots.first().map_or(0, Vec::len) * 8);
    for s in snapshots {
        for v in s {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// Build a POD basis of `n_pod` modes from `snapshots` (one state per entry).
///
/// The modes are eigenvectors of the `n_state × n_state` Gram matrix `XᵀX`
/// of the centred snapshots `X`, which are the right singular vectors of `X`.
pub fn build_basis(snapshots: &[Vec<f64>], n_pod: usize) -> Result<PodBasis, PodError> {
    let n_snap = snapshots.len();
    if n_snap <= n_pod {
        return Err(PodError::TooFewSnapshots {
            n_snapshots: n_snap,
            n_pod,
        });
    }
    let n_state = snapshots[0].len();
    if let Some(bad) = snapshots.iter().find(|s| s.len() != n_state) {
        return Err(PodError::Shape(format!(
            "snapshot of length {} among snapshots of length {n_state}",
            bad.len()
        )));
    }

    let mut mean = vec![0.0; n_state];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in snapshots {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_snap as f64);

    let mut x = Vec::with_capacity(n_snap * n_state);
    for s in snapshots {
        x.extend(s.iter().zip(&mean).map(|(v, m)| v - m));
    }
    let mut gram = vec![0.0; n_state * n_state];
    gemm(&x, true, &x, false, n_state, n_snap, n_state, &mut gram, false);
    // Symmetrise away the round-off of the two triangle computations.
    for i in 0..n_state {
        for j in 0..i {
            let v = 0.5 * (gram[i * n_state + j] + gram[j * n_state + i]);
            gram[i * n_state + j] = v;
            gram[j * n_state + i] = v;
        }
    }

    let gram = DMatrix::from_row_slice(n_state, n_state, &gram);
    let eig = EIGEN_TOLERANCES
        .iter()
        .filter_map(|&eps| gram.clone().try_symmetric_eigen(eps, 0))
        .find(|e| e.eigenvalues.iter().all(|v| v.is_finite()))
        .ok_or(PodError::Eigen(n_state))?;
    let mut order: Vec<usize> = (0..n_state).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| lambda_max > 0.0 && eig.eigenvalues[i] > RANK_RTOL * lambda_max)
        .count();
    if rank < n_pod {
        return Err(PodError::RankDeficient { rank, n_pod });
    }

    let n_sv = n_snap.min(n_state);
    let singular_values = order[..n_sv]
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let mut basis = vec![0.0; n_state * n_pod];
    for (j, &i) in order[..n_pod].iter().enumerate() {
        let col = eig.eigenvectors.column(i);
        // Sign convention: largest-magnitude entry positive.
        let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n_state {
            basis[r * n_pod + j] = sign * col[r];
        }
    }

    Ok(PodBasis {
        n_state,
        n_pod,
        basis,
        mean,
        singular_values,
        state_range: (lo, hi),
        ensemble_digest: ensemble_digest(snapshots),
    })
}

impl PodBasis {
    /// `α = Bᵀ(u − ū)`.
    pub fn project(&self, u: &[f64]) -> Result<Vec<f64>, PodError> {
        if u.len() != self.n_state {
            return Err(PodError::Shape(format!(
                "state of length {}, basis expects {}",
                u.len(),
                self.n_state
            )));
        }
        let mut alpha = vec![0.0; self.n_pod];
        for (r, (ui, mi)) in u.iter().zip(&self.mean).enumerate() {
            let d = ui - mi;
            let row = &self.basis[r * self.n_pod..(r + 1) * self.n_pod];
            for (a, b) in alpha.iter_mut().zip(row) {
                *a += b * d;
            }
        }
        Ok(alpha)
    }

    /// `u = Bα + ū`.
    pub fn reconstruct(&self, alpha: &[f64]) -> Result<Vec<f64>, PodError> {
        if alpha.len() != self.n_pod {
            return Err(PodError::Shape(format!(
                "{} coefficients, basis has {} modes",
                alpha.len(),
                self.n_pod
            )));
        }
        Ok((0..self.n_state)
            .map(|r| {
                let row = &self.basis[r * self.n_pod..(r + 1) * self.n_pod];
                self.mean[r] + row.iter().zip(alpha).map(|(b, a)| b * a).sum::<f64>()
            })
            .collect())
    }

    /// Fraction of the centred snapshot energy captured by the first `k` modes.
    pub fn captured_variance(&self, k: usize) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return 0.0;
        }
        self.singular_values.iter().take(k).map(|s| s * s).sum::<f64>() / total
    }

    /// Captured variance for every mode count `1..=len(singular_values)`.
    pub fn variance_curve(&self) -> Vec<f64> {
        (1..=self.singular_values.len())
            .map(|k| self.captured_variance(k))
            .collect()
    }

    /// Column `j` of `B`.
    pub fn mode(&self, j: usize) -> Vec<f64> {
        (0..self.n_state).map(|r| self.basis[r * self.n_pod + j]).collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new()
            .with_meta("kind", BASIS_KIND)
            .with_meta("n_state", self.n_state)
            .with_meta("n_pod", self.n_pod)
            .with_meta("ensemble_digest", &self.ensemble_digest);
        c.tensors.insert(
            "basis",
            Tensor::matrix(self.n_state, self.n_pod, self.basis.clone()).expect("basis shape"),
        );
        c.tensors.insert("mean", Tensor::vector(self.mean.clone()));
        c.tensors.insert("singular_values", Tensor::vector(self.singular_values.clone()));
        c.tensors.insert(
            "state_range",
            Tensor::vector(vec![self.state_range.0, self.state_range.1]),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, PodError> {
        if c.meta("kind")? != BASIS_KIND {
            return Err(PodError::Format(format!("not a {BASIS_KIND} container")));
        }
        let parse = |k: &str| -> Result<usize, PodError> {
            c.meta(k)?
                .parse()
                .map_err(|_| PodError::Format(format!("metadata {k} is not an integer")))
        };
        let (n_state, n_pod) = (parse("n_state")?, parse("n_pod")?);
        let basis = c.tensor("basis")?;
        if basis.shape() != [n_state, n_pod] {
            return Err(PodError::Format(format!("basis tensor shape {:?}", basis.shape())));
        }
        let mean = c.tensor("mean")?.data().to_vec();
        if mean.len() != n_state {
            return Err(PodError::Format(format!("mean of length {}", mean.len())));
        }
        let range = c.tensor("state_range")?.data();
        if range.len() != 2 {
            return Err(PodError::Format("state_range must hold two values".into()));
        }
        Ok(Self {
            n_state,
            n_pod,
            basis: basis.data().to_vec(),
            mean,
            singular_values: c.tensor("singular_values")?.data().to_vec(),
            state_range: (range[0], range[1]),
            ensemble_digest: c.meta("ensemble_digest")?.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PodError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, PodError> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Per-channel affine map of `[min, max]` onto `[−1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationSpec {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self, PodError> {
        if min.len() != max.len() {
            return Err(PodError::Shape(format!(
                "{} minima and {} maxima",
                min.len(),
                max.len()
            )));
        }
        for (channel, (&lo, &hi)) in min.iter().zip(&max).enumerate() {
            if !(hi > lo) {
                return Err(PodError::DegenerateChannel {
                    channel,
                    min: lo,
                    max: hi,
                });
            }
        }
        Ok(Self { min, max })
    }

    /// Channel ranges over `rows`, each row holding one value per channel.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self, PodError> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for row in rows {
            if min.is_empty() {
                min = row.to_vec();
                max = row.to_vec();
                continue;
            }
            if row.len() != min.len() {
                return Err(PodError::Shape(format!(
                    "row of {} channels among rows of {}",
                    row.len(),
                    min.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Self::new(min, max)
    }

    pub fn n_channels(&self) -> usize {
        self.min.len()
    }

    /// `max − min` per channel.
    pub fn ranges(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(lo, hi)| hi - lo).collect()
    }

    /// Scale per channel of the inverse map: `x = scale · y + offset`.
    pub fn scale(&self) -> Vec<f64> {
        self.ranges().iter().map(|r| 0.5 * r).collect()
    }

    pub fn offset(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// Normalise row-major `values` (`n_channels` per row). The flag is set
    /// when any value falls outside the training range.
    pub fn normalize(&self, values: &[f64]) -> (Vec<f64>, bool) {
        let nc = self.n_channels();
        let mut outside = false;
        let out = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (self.min[i % nc], self.max[i % nc]);
                outside |= v < lo || v > hi;
                2.0 * (v - lo) / (hi - lo) - 1.0
            })
            .collect();
        (out, outside)
    }

    /// Inverse of [`normalize`](Self::normalize); flags values outside `[−1, 1]`.
    pub fn denormalize(&self, values: &[f64]) -> (Vec<f64>, bool) {
        let nc = self.n_channels();
        let mut outside = false;
        let out = values
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let (lo, hi) = (self.min[i % nc], self.max[i % nc]);
                outside |= !(-1.0..=1.0).contains(&y);
                lo + 0.5 * (y + 1.0) * (hi - lo)
            })
            .collect();
        (out, outside)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_snapshots_are_rank_zero() {
        let s = vec![vec![1.0, 2.0, 3.0]; 5];
        match build_basis(&s, 1) {
            Err(PodError::RankDeficient { rank: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_snapshots() {
        let s = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        assert!(matches!(
            build_basis(&s, 2),
            Err(PodError::TooFewSnapshots { .. })
        ));
    }

    #[test]
    fn mean_projects_to_zero() {
        let s: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, (i * i) as f64, 1.0, -(i as f64)])
            .collect();
        let b = build_basis(&s, 2).unwrap();
        let a = b.project(&b.mean).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(b.reconstruct(&[0.0, 0.0]).unwrap(), b.mean);
    }

    #[test]
    fn normalization_examples() {
        let n = NormalizationSpec::new(vec![-2.0], vec![2.0]).unwrap();
        assert_eq!(n.normalize(&[0.0]).0, vec![0.0]);
        assert_eq!(n.normalize(&[2.0]).0, vec![1.0]);
        let (v, flag) = n.normalize(&[3.0]);
        assert!(flag && v[0] > 1.0);
        assert!(NormalizationSpec::new(vec![1.0], vec![1.0]).is_err());
    }
}
