use log::warn;
use serde::{Deserialize, Serialize};

use crate::pod::{NormalizationSpec, PodError};

/// `rows × cols` block of time levels, row-major: row `k` holds `(αᵏ, μᵏ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Window {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "window values do not match {rows}x{cols}");
        Self { rows, cols, values }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.cols..(k + 1) * self.cols]
    }

    /// Euclidean distance between the flattened windows.
    pub fn distance(&self, other: &Window) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// POD coefficients of one run at every stored level, with the run's
/// (constant) model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSeries {
    pub alpha: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
}

impl CoefficientSeries {
    /// Row `(αᵏ, μ)` for level `k`.
    pub fn row(&self, k: usize) -> Vec<f64> {
        let mut r = self.alpha[k].clone();
        r.extend_from_slice(&self.mu);
        r
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Channel ranges over every level of every series.
pub fn fit_normalization(series: &[CoefficientSeries]) -> Result<NormalizationSpec, PodError> {
    let rows: Vec<Vec<f64>> = series
        .iter()
        .flat_map(|s| (0..s.len()).map(move |k| s.row(k)))
        .collect();
    NormalizationSpec::fit(rows.iter().map(Vec::as_slice))
}

/// Every window of `m` levels spaced `stride` apart, at every start offset,
/// normalised with `norm`. Series shorter than one window are skipped.
pub fn make_training_windows(
    series: &[CoefficientSeries],
    m: usize,
    stride: usize,
    norm: &NormalizationSpec,
) -> Vec<Window> {
    assert!(m >= 1 && stride >= 1, "window needs m >= 1 and stride >= 1");
    let span = (m - 1) * stride + 1;
    let mut out = Vec::new();
    for (i, s) in series.iter().enumerate() {
        if s.len() < span {
            warn!("series {i} has {} levels, fewer than one window ({span}); skipped", s.len());
            continue;
        }
        let cols = s.alpha[0].len() + s.mu.len();
        for start in 0..=s.len() - span {
            let raw: Vec<f64> = (0..m).flat_map(|r| s.row(start + r * stride)).collect();
            out.push(Window::new(m, cols, norm.normalize(&raw).0));
        }
    }
    out
}
