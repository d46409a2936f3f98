//! Binned surrogates of empirical measures on a shared 1D or 2D grid.

use serde::{Deserialize, Serialize};

use super::EmpiricalMeasure;
use crate::error::{Error, Result};

/// Bin-count rule, applied per axis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BinRule {
    #[default]
    FreedmanDiaconis,
    Count {
        bins: usize,
    },
}

const MAX_BINS_1D: usize = 10_000;
const MAX_BINS_2D: usize = 400;

/// Two probability vectors over one tensor-product grid.
///
/// Edges are laid out so the smallest and largest pooled samples sit at the
/// centres of the first and last bins: with `B` bins over the range `[lo, hi]`
/// the width is `(hi - lo)/(B - 1)` and the edges run from `lo - h/2` to `hi + h/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramPair {
    pub edges: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl HistogramPair {
    pub fn new(edges: Vec<Vec<f64>>, p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let cells: usize = edges.iter().map(|e| e.len().saturating_sub(1)).product();
        if edges.is_empty() || edges.len() > 2 || cells != p.len() || cells != q.len() {
            return Err(Error::InvalidParameter("histogram shape does not match its grid".into()));
        }
        for v in [&p, &q] {
            let s: f64 = v.iter().sum();
            if v.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter("histogram must be a probability vector".into()));
            }
        }
        Ok(Self { edges, p, q })
    }

    /// Bins both measures on a grid covering their pooled support.
    pub fn from_measures(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, rule: BinRule) -> Result<Self> {
        let dim = mu.dim();
        if dim != nu.dim() {
            return Err(Error::DimensionMismatch { expected: dim, got: nu.dim() });
        }
        if dim > 2 {
            return Err(Error::InvalidParameter("histograms support dimension 1 or 2".into()));
        }
        let max_bins = if dim == 1 { MAX_BINS_1D } else { MAX_BINS_2D };
        let edges: Vec<Vec<f64>> = (0..dim)
            .map(|axis| {
                let mut pooled: Vec<f64> = mu.iter_points().chain(nu.iter_points()).map(|x| x[axis]).collect();
                pooled.sort_by(f64::total_cmp);
                axis_edges(&pooled, rule, max_bins)
            })
            .collect();
        let p = bin(mu, &edges);
        let q = bin(nu, &edges);
        Ok(Self { edges, p, q })
    }

    pub fn dim(&self) -> usize {
        self.edges.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.len() - 1).collect()
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Centre of cell `k` (row-major, last axis fastest).
    pub fn center(&self, k: usize) -> Vec<f64> {
        let shape = self.shape();
        let mut idx = vec![0; shape.len()];
        let mut rest = k;
        for axis in (0..shape.len()).rev() {
            idx[axis] = rest % shape[axis];
            rest /= shape[axis];
        }
        idx.iter().enumerate().map(|(axis, &i)| 0.5 * (self.edges[axis][i] + self.edges[axis][i + 1])).collect()
    }

    pub fn cell_volume(&self, k: usize) -> f64 {
        let shape = self.shape();
        let mut rest = k;
        let mut vol = 1.0;
        for axis in (0..shape.len()).rev() {
            let i = rest % shape[axis];
            rest /= shape[axis];
            vol *= self.edges[axis][i + 1] - self.edges[axis][i];
        }
        vol
    }
}

fn axis_edges(sorted: &[f64], rule: BinRule, max_bins: usize) -> Vec<f64> {
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let range = hi - lo;
    if range <= 0.0 {
        return vec![lo - 0.5, lo + 0.5];
    }
    let bins = match rule {
        BinRule::Count { bins } => bins.max(2),
        BinRule::FreedmanDiaconis => {
            let q = |f: f64| sorted[((sorted.len() - 1) as f64 * f).round() as usize];
            let iqr = q(0.75) - q(0.25);
            let width = 2.0 * iqr / (sorted.len() as f64).cbrt();
            if width > 0.0 {
                ((range / width).ceil() as usize + 1).clamp(2, max_bins)
            } else {
                2
            }
        }
    };
    let h = range / (bins - 1) as f64;
    (0..=bins).map(|k| lo - 0.5 * h + h * k as f64).collect()
}

fn locate(edges: &[f64], x: f64) -> usize {
    let cells = edges.len() - 1;
    let h = (edges[cells] - edges[0]) / cells as f64;
    let k = ((x - edges[0]) / h).floor();
    if k < 0.0 {
        0
    } else {
        (k as usize).min(cells - 1)
    }
}

fn bin(m: &EmpiricalMeasure, edges: &[Vec<f64>]) -> Vec<f64> {
    let shape: Vec<usize> = edges.iter().map(|e| e.len() - 1).collect();
    let mut out = vec![0.0; shape.iter().product()];
    for (x, w) in m.iter_points().zip(m.weights()) {
        let mut k = 0;
        for axis in 0..shape.len() {
            k = k * shape[axis] + locate(&edges[axis], x[axis]);
        }
        out[k] += w;
    }
    out
}

/// Cell masses of an empirical measure on fixed uniform 1D edges; mass outside
/// the edges is returned separately.
pub fn bin_on_edges(m: &EmpiricalMeasure, lower: f64, upper: f64, cells: usize) -> (Vec<f64>, f64) {
    let h = (upper - lower) / cells as f64;
    let mut out = vec![0.0; cells];
    let mut outside = 0.0;
    for (x, w) in m.iter_points().zip(m.weights()) {
        let v = x[0];
        if v < lower || v > upper {
            outside += w;
            continue;
        }
        let k = (((v - lower) / h).floor() as usize).min(cells - 1);
        out[k] += w;
    }
    (out, outside)
}
