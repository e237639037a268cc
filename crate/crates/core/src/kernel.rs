//! RBF kernel and MMD² U-statistic primitives.
//!
//! These are the statistical core of the drift detector: an RBF kernel
//! k(x, x') = exp(-||x - x'||² / 2σ²), the four-kernel h-term, and the
//! unbiased U-statistic estimate of MMD² between two equal-size windows.

use crate::error::{Error, Result};

/// RBF kernel configuration. `bandwidth` is the σ in exp(-d²/2σ²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub bandwidth: f64,
}

impl KernelConfig {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "kernel bandwidth must be > 0, got {bandwidth}"
            )));
        }
        Ok(KernelConfig { bandwidth })
    }
}

/// Two non-overlapping windows of equal length B: `reference` (older) and
/// `test` (newer). All vectors share one dimension.
#[derive(Debug, Clone)]
pub struct WindowPair {
    pub reference: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
}

impl WindowPair {
    pub fn new(reference: Vec<Vec<f64>>, test: Vec<Vec<f64>>) -> Result<Self> {
        if reference.len() != test.len() {
            return Err(Error::invalid(format!(
                "window lengths differ: {} vs {}",
                reference.len(),
                test.len()
            )));
        }
        if reference.len() < 2 {
            return Err(Error::invalid("windows need at least 2 vectors"));
        }
        let dim = reference[0].len();
        for v in reference.iter().chain(test.iter()) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch(dim, v.len()));
            }
        }
        Ok(WindowPair { reference, test })
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }
}

pub fn squared_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(x.len(), y.len()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn euclidean_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    squared_distance(x, y).map(f64::sqrt)
}

/// RBF kernel k(x, y) = exp(-||x - y||² / 2σ²). Always in (0, 1]; equals 1
/// iff x == y.
pub fn rbf_kernel(x: &[f64], y: &[f64], cfg: &KernelConfig) -> Result<f64> {
    let d2 = squared_distance(x, y)?;
    Ok((-d2 / (2.0 * cfg.bandwidth * cfg.bandwidth)).exp())
}

/// The four-kernel combination
/// h = k(u_i, u_j) + k(v_i, v_j) - k(u_i, v_j) - k(u_j, v_i).
pub fn h_term(u_i: &[f64], u_j: &[f64], v_i: &[f64], v_j: &[f64], cfg: &KernelConfig) -> Result<f64> {
    Ok(rbf_kernel(u_i, u_j, cfg)? + rbf_kernel(v_i, v_j, cfg)?
        - rbf_kernel(u_i, v_j, cfg)?
        - rbf_kernel(u_j, v_i, cfg)?)
}

/// Unbiased U-statistic estimate of MMD² over a window pair:
/// 1/(B(B-1)) Σ_{i≠j} h(u_i, u_j, v_i, v_j).
///
/// Computed from precomputed Gram sums; the i≠j sum over the cross terms
/// counts both (i, j) and (j, i), which collapses the two cross kernels into
/// one doubled sum. Values may be slightly negative (unbiased estimator) and
/// are passed through unclamped.
pub fn mmd2_ustat(w: &WindowPair, cfg: &KernelConfig) -> Result<f64> {
    let b = w.len();
    if b < 2 {
        return Err(Error::invalid("U-statistic needs window length >= 2"));
    }
    let mut k_uu = 0.0;
    let mut k_vv = 0.0;
    let mut k_uv = 0.0; // Σ_{i≠j} k(u_i, v_j), off-diagonal only
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            k_uu += rbf_kernel(&w.reference[i], &w.reference[j], cfg)?;
            k_vv += rbf_kernel(&w.test[i], &w.test[j], cfg)?;
            k_uv += rbf_kernel(&w.reference[i], &w.test[j], cfg)?;
        }
    }
    Ok((k_uu + k_vv - 2.0 * k_uv) / (b * (b - 1)) as f64)
}

/// Median of pairwise Euclidean distances over a sample set.
///
/// For very large sets the pair enumeration is capped by a deterministic
/// stride so the cost stays bounded. Returns `floor` (default 1e-6 via
/// [`median_heuristic_bandwidth`]) when all samples coincide.
pub fn median_heuristic_bandwidth_with_floor(samples: &[Vec<f64>], floor: f64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("median heuristic needs at least 2 samples"));
    }
    const MAX_PAIRS: usize = 250_000;
    let total_pairs = n * (n - 1) / 2;
    let stride = (total_pairs / MAX_PAIRS).max(1);
    let mut dists = Vec::with_capacity(total_pairs.min(MAX_PAIRS) + 1);
    let mut pair_idx = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if pair_idx % stride == 0 {
                dists.push(euclidean_distance(&samples[i], &samples[j])?);
            }
            pair_idx += 1;
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    Ok(if median > 0.0 { median } else { floor })
}

/// Median pairwise distance with the default floor of 1e-6 for degenerate
/// (all-identical) sample sets.
pub fn median_heuristic_bandwidth(samples: &[Vec<f64>]) -> Result<f64> {
    median_heuristic_bandwidth_with_floor(samples, 1e-6)
}
