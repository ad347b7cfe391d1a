//! Gaussian kernels over squared distances, their input gradient, the
//! per-iteration median bandwidth heuristic, and the geometric bandwidth bank
//! behind the mixture kernel.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sq_dist, Tensor};

/// Bandwidths below this are clamped up; protects `exp(-d/sigma)` when a
/// mini-batch collapses onto (nearly) one point early in training.
pub const SIGMA_FLOOR: f64 = 1e-8;

thread_local! {
    static KERNEL_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of scalar kernel evaluations performed by this thread since the
/// last reset. Cheap instrumentation used to verify cost-scaling claims.
pub fn kernel_eval_count() -> u64 {
    KERNEL_EVALS.with(|c| c.get())
}

pub fn reset_kernel_eval_count() {
    KERNEL_EVALS.with(|c| c.set(0));
}

fn count_kernel_evals(n: u64) {
    KERNEL_EVALS.with(|c| c.set(c.get() + n));
}

/// A set of `g` Gaussian bandwidths derived from one base bandwidth.
/// Bandwidths are in squared-distance units: `k(x, y) = exp(-|x-y|^2 / sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    sigmas: Vec<f64>,
    sigma_med: f64,
}

impl KernelBank {
    /// Wrap an explicit bandwidth list. The first entry doubles as the base.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::InvalidArgument("kernel bank needs g >= 1".into()));
        }
        if let Some(bad) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidths must be positive and finite, got {bad}"
            )));
        }
        let sigma_med = sigmas[0];
        Ok(KernelBank { sigmas, sigma_med })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_med(&self) -> f64 {
        self.sigma_med
    }

    pub fn g(&self) -> usize {
        self.sigmas.len()
    }
}

/// Geometric bandwidth schedule `sigma_i = 2^i * sigma_med` for `i = 0..g`.
pub fn build_bank(sigma_med: f64, g: usize) -> Result<KernelBank> {
    if !(sigma_med.is_finite() && sigma_med > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_med must be positive and finite, got {sigma_med}"
        )));
    }
    if g == 0 {
        return Err(Error::InvalidArgument("kernel bank needs g >= 1".into()));
    }
    let sigmas = (0..g).map(|i| (1u64 << i) as f64 * sigma_med).collect();
    Ok(KernelBank { sigmas, sigma_med })
}

/// Entry-wise `exp(-d / sigma)` over a matrix of squared distances.
pub fn gaussian_kernel_matrix(sq_dists: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    let inv = -1.0 / sigma;
    let data = sq_dists.data().iter().map(|d| (d * inv).exp()).collect();
    count_kernel_evals(sq_dists.len() as u64);
    Tensor::new(sq_dists.shape().to_vec(), data)
}

/// Gradient of `k(x, y) = exp(-|x-y|^2 / sigma)` with respect to `x`:
/// `-2 k(x, y) (x - y) / sigma`.
pub fn gaussian_kernel_grad(x: &[f64], y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "gaussian_kernel_grad: {} vs {} dims",
            x.len(),
            y.len()
        )));
    }
    let sq: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let k = (-sq / sigma).exp();
    count_kernel_evals(1);
    let coef = -2.0 * k / sigma;
    Ok(x.iter().zip(y).map(|(a, b)| coef * (a - b)).collect())
}

/// Lower median of all cross-pair squared distances between the rows of `h1`
/// and `h2`, clamped below at [`SIGMA_FLOOR`].
pub fn median_sq_dist(h1: &Tensor, h2: &Tensor) -> Result<f64> {
    if h1.rows() == 0 || h2.rows() == 0 {
        return Err(Error::EmptyInput("median_sq_dist"));
    }
    let dists = pairwise_sq_dist(h1, h2)?;
    let mut v = dists.into_data();
    let idx = (v.len() - 1) / 2;
    let (_, median, _) = v.select_nth_unstable_by(idx, f64::total_cmp);
    Ok(median.max(SIGMA_FLOOR))
}

/// Uniform average of the `g` Gaussian kernels in `bank`.
pub fn mixture_kernel_matrix(sq_dists: &Tensor, bank: &KernelBank) -> Result<Tensor> {
    let mut acc = vec![0.0; sq_dists.len()];
    for &sigma in bank.sigmas() {
        let k = gaussian_kernel_matrix(sq_dists, sigma)?;
        for (a, v) in acc.iter_mut().zip(k.data()) {
            *a += v;
        }
    }
    let inv_g = 1.0 / bank.g() as f64;
    for a in &mut acc {
        *a *= inv_g;
    }
    Tensor::new(sq_dists.shape().to_vec(), acc)
}

/// Entry-wise `(1/g) sum_s exp(-d / sigma_s) / sigma_s`, the weight each pair
/// contributes to the mixture kernel's input gradient.
pub(crate) fn mixture_grad_weights(sq_dists: &Tensor, bank: &KernelBank) -> Result<Tensor> {
    let mut acc = vec![0.0; sq_dists.len()];
    for &sigma in bank.sigmas() {
        let inv = -1.0 / sigma;
        for (a, d) in acc.iter_mut().zip(sq_dists.data()) {
            *a += (d * inv).exp() / sigma;
        }
        count_kernel_evals(sq_dists.len() as u64);
    }
    let inv_g = 1.0 / bank.g() as f64;
    for a in &mut acc {
        *a *= inv_g;
    }
    Tensor::new(sq_dists.shape().to_vec(), acc)
}
