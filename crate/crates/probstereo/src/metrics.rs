//! Disparity-accuracy and uncertainty-quality metrics: bad-pixel rates,
//! MAE/RMSE, the joint error/uncertainty histogram and sparsification
//! curves with their AUSE summary.

use crate::error::{Error, Result};
use crate::inference::{uncertainty_stddev_maps, UncertainDisparity};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentages of valid pixels whose absolute error exceeds 1 / 3 / 5 px.
    pub bad1: f64,
    pub bad3: f64,
    pub bad5: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Valid-pixel means of the uncertainty stddev maps (px), when supplied.
    pub mean_aleatoric_px: Option<f64>,
    pub mean_epistemic_px: Option<f64>,
    pub n_valid: usize,
}

impl MetricsReport {
    fn assert_invariants(&self) {
        debug_assert!(self.bad5 <= self.bad3 + 1e-12 && self.bad3 <= self.bad1 + 1e-12);
        debug_assert!(self.rmse >= self.mae - 1e-12);
    }
}

/// Running sums that merge commutatively across images; avoids averaging
/// averages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub n_valid: usize,
    pub sum_abs: f64,
    pub sum_sq: f64,
    pub n_bad1: usize,
    pub n_bad3: usize,
    pub n_bad5: usize,
    pub sum_aleatoric: f64,
    pub sum_epistemic: f64,
    pub has_uncertainty: bool,
}

impl MetricsAccumulator {
    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.n_valid += other.n_valid;
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.n_bad1 += other.n_bad1;
        self.n_bad3 += other.n_bad3;
        self.n_bad5 += other.n_bad5;
        self.sum_aleatoric += other.sum_aleatoric;
        self.sum_epistemic += other.sum_epistemic;
        self.has_uncertainty |= other.has_uncertainty;
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n_valid == 0 {
            return Err(Error::Data("no valid pixels to evaluate".into()));
        }
        let n = self.n_valid as f64;
        let report = MetricsReport {
            bad1: 100.0 * self.n_bad1 as f64 / n,
            bad3: 100.0 * self.n_bad3 as f64 / n,
            bad5: 100.0 * self.n_bad5 as f64 / n,
            mae: self.sum_abs / n,
            rmse: (self.sum_sq / n).sqrt(),
            mean_aleatoric_px: self.has_uncertainty.then_some(self.sum_aleatoric / n),
            mean_epistemic_px: self.has_uncertainty.then_some(self.sum_epistemic / n),
            n_valid: self.n_valid,
        };
        report.assert_invariants();
        Ok(report)
    }
}

/// Accumulate error statistics for one image.
pub fn accumulate(
    d_hat: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
    u: Option<&UncertainDisparity>,
) -> Result<MetricsAccumulator> {
    if d_hat.shape() != gt.shape() || gt.shape() != mask.shape() {
        return Err(Error::shape(
            "accuracy_metrics",
            format!(
                "prediction {:?}, ground truth {:?}, mask {:?}",
                d_hat.shape(),
                gt.shape(),
                mask.shape()
            ),
        ));
    }
    let stddevs = u.map(uncertainty_stddev_maps);
    let mut acc = MetricsAccumulator {
        has_uncertainty: stddevs.is_some(),
        ..Default::default()
    };
    for i in 0..gt.len() {
        if mask.data()[i] <= 0.0 {
            continue;
        }
        let err = (d_hat.data()[i] - gt.data()[i]).abs();
        acc.n_valid += 1;
        acc.sum_abs += err;
        acc.sum_sq += err * err;
        if err > 1.0 {
            acc.n_bad1 += 1;
        }
        if err > 3.0 {
            acc.n_bad3 += 1;
        }
        if err > 5.0 {
            acc.n_bad5 += 1;
        }
        if let Some((alea, epi, _)) = &stddevs {
            acc.sum_aleatoric += alea.data()[i];
            acc.sum_epistemic += epi.data()[i];
        }
    }
    if acc.n_valid == 0 {
        return Err(Error::Data("empty validity mask".into()));
    }
    Ok(acc)
}

/// Per-image accuracy metrics over the valid pixels.
pub fn accuracy_metrics(
    d_hat: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
    u: Option<&UncertainDisparity>,
) -> Result<MetricsReport> {
    accumulate(d_hat, gt, mask, u)?.report()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsificationCurve {
    /// Strictly increasing density fractions in (0, 1].
    pub densities: Vec<f64>,
    /// MAE of the `density·n` lowest-uncertainty pixels.
    pub mae_at_density: Vec<f64>,
    /// Same curve with the true absolute error as the ranking.
    pub oracle_mae_at_density: Vec<f64>,
    /// Mean over densities of (model MAE − oracle MAE).
    pub ause: f64,
}

/// Uniform density grid used when the caller does not supply one.
pub fn default_density_grid(steps: usize) -> Vec<f64> {
    (1..=steps).map(|i| 0.01 + 0.99 * (i - 1) as f64 / (steps - 1) as f64).collect()
}

/// Sort valid pixels by ascending uncertainty (ties broken by pixel index)
/// and report the running MAE at each density; the oracle ranks by the true
/// absolute error instead.
pub fn sparsification(
    abs_error: &Tensor,
    uncertainty: &Tensor,
    mask: &Tensor,
    steps: usize,
) -> Result<SparsificationCurve> {
    if steps < 2 {
        return Err(Error::Parameter("sparsification needs >= 2 steps".into()));
    }
    if abs_error.shape() != uncertainty.shape() || abs_error.shape() != mask.shape() {
        return Err(Error::shape(
            "sparsification",
            format!(
                "error {:?}, uncertainty {:?}, mask {:?}",
                abs_error.shape(),
                uncertainty.shape(),
                mask.shape()
            ),
        ));
    }
    let mut errs = Vec::new();
    let mut uncs = Vec::new();
    for i in 0..abs_error.len() {
        if mask.data()[i] > 0.0 {
            errs.push(abs_error.data()[i]);
            uncs.push(uncertainty.data()[i]);
        }
    }
    if errs.is_empty() {
        return Err(Error::Data("empty validity mask".into()));
    }
    let densities = default_density_grid(steps);
    let model = ranked_running_mae(&errs, &uncs, &densities);
    let oracle = ranked_running_mae(&errs, &errs, &densities);
    let ause = model
        .iter()
        .zip(&oracle)
        .map(|(m, o)| m - o)
        .sum::<f64>()
        / densities.len() as f64;
    Ok(SparsificationCurve {
        densities,
        mae_at_density: model,
        oracle_mae_at_density: oracle,
        ause,
    })
}

fn ranked_running_mae(errs: &[f64], ranking: &[f64], densities: &[f64]) -> Vec<f64> {
    let n = errs.len();
    let mut order: Vec<usize> = (0..n).collect();
    // ascending ranking value, pixel index as the documented tie-break
    order.sort_by(|&a, &b| ranking[a].partial_cmp(&ranking[b]).unwrap().then(a.cmp(&b)));
    let mut prefix = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &i in &order {
        acc += errs[i];
        prefix.push(acc);
    }
    densities
        .iter()
        .map(|&f| {
            let k = ((f * n as f64).round() as usize).clamp(1, n);
            prefix[k - 1] / k as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    /// Row-major `[error_bins, sigma_bins]` counts.
    pub counts: Vec<u64>,
    pub error_bins: usize,
    pub sigma_bins: usize,
    pub error_max: f64,
    pub sigma_max: f64,
}

impl Histogram2d {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Marginal over the sigma axis: the 1D error histogram.
    pub fn error_marginal(&self) -> Vec<u64> {
        (0..self.error_bins)
            .map(|e| (0..self.sigma_bins).map(|s| self.counts[e * self.sigma_bins + s]).sum())
            .collect()
    }
}

/// Joint histogram of (absolute error, estimated stddev) over valid pixels.
/// The top edges are inclusive so counts always sum to the mask population.
pub fn error_uncertainty_histogram(
    abs_error: &Tensor,
    stddev_map: &Tensor,
    mask: &Tensor,
    error_bins: usize,
    sigma_bins: usize,
) -> Result<Histogram2d> {
    if error_bins == 0 || sigma_bins == 0 {
        return Err(Error::Parameter("histogram needs >= 1 bin per axis".into()));
    }
    let mut error_max: f64 = 0.0;
    let mut sigma_max: f64 = 0.0;
    let mut n = 0usize;
    for i in 0..abs_error.len() {
        if mask.data()[i] > 0.0 {
            error_max = error_max.max(abs_error.data()[i]);
            sigma_max = sigma_max.max(stddev_map.data()[i]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("empty validity mask".into()));
    }
    let error_max = if error_max > 0.0 { error_max } else { 1.0 };
    let sigma_max = if sigma_max > 0.0 { sigma_max } else { 1.0 };
    let mut counts = vec![0u64; error_bins * sigma_bins];
    for i in 0..abs_error.len() {
        if mask.data()[i] > 0.0 {
            let be = bin_index(abs_error.data()[i], error_max, error_bins);
            let bs = bin_index(stddev_map.data()[i], sigma_max, sigma_bins);
            counts[be * sigma_bins + bs] += 1;
        }
    }
    Ok(Histogram2d {
        counts,
        error_bins,
        sigma_bins,
        error_max,
        sigma_max,
    })
}

fn bin_index(v: f64, vmax: f64, bins: usize) -> usize {
    (((v / vmax) * bins as f64) as usize).min(bins - 1)
}
