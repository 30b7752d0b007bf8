//! Single-pass (Welford) mean and population covariance of a group's member
//! positions, with the reverse pass that maps `dL/dK` onto every member.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Running statistics for one group.
///
/// With history retained (the default) the member positions and every prefix
/// mean are kept so that [`covariance_backward`] can run in O(N).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    count: usize,
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
    history: Option<History>,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct History {
    points: Vec<Vector3<f64>>,
    prefix_means: Vec<Vector3<f64>>,
}

impl Default for GroupStats {
    fn default() -> Self {
        Self::new()
    }
}

impl GroupStats {
    pub fn new() -> Self {
        Self { count: 0, mean: Vector3::zeros(), cov: Matrix3::zeros(), history: Some(History::default()) }
    }

    /// Statistics that keep only the running state; cannot be differentiated.
    pub fn without_history() -> Self {
        Self { history: None, ..Self::new() }
    }

    pub fn from_points<'a, I>(points: I) -> Self
    where
        I: IntoIterator<Item = &'a Vector3<f64>>,
    {
        let mut stats = Self::new();
        for p in points {
            stats.update(p);
        }
        stats
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &Vector3<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.cov
    }

    /// Prefix means `μ̄_1..μ̄_n`, if retained.
    pub fn prefix_means(&self) -> Option<&[Vector3<f64>]> {
        self.history.as_ref().map(|h| h.prefix_means.as_slice())
    }

    /// `K_n = (n-1)/n K_{n-1} + 1/n (μ_n - μ̄_{n-1})(μ_n - μ̄_n)ᵀ`.
    pub fn update(&mut self, point: &Vector3<f64>) {
        self.count += 1;
        let n = self.count as f64;
        let before = point - self.mean;
        self.mean = ((n - 1.0) / n) * self.mean + point / n;
        let after = point - self.mean;
        self.cov = ((n - 1.0) / n) * self.cov + (before * after.transpose()) / n;
        if let Some(h) = &mut self.history {
            h.points.push(*point);
            h.prefix_means.push(self.mean);
        }
    }

    /// Current mean and covariance.
    pub fn finalize(&self) -> Result<(Vector3<f64>, Matrix3<f64>)> {
        if self.count == 0 {
            return Err(Error::EmptyGroup);
        }
        Ok((self.mean, self.cov))
    }
}

/// Functional form of [`GroupStats::update`].
pub fn welford_update(mut stats: GroupStats, point: &Vector3<f64>) -> GroupStats {
    stats.update(point);
    stats
}

/// `dL/dμ_n` for every member given `dL/dK` at the final covariance.
///
/// Uses `∂K_N/∂μ_{n,k} = (1/N)[(n-1) R_k(n) - Σ_{i>n} R_k(i)]` with
/// `R_k(i) = e_k (μ_i - μ̄_i)ᵀ/(i-1) + (μ_i - μ̄_{i-1}) e_kᵀ/i` and `R(1) = 0`.
/// Contracting with `G = dL/dK` turns each `R_k(i)` into the k-th entry of
/// `r(i) = G (μ_i - μ̄_i)/(i-1) + Gᵀ (μ_i - μ̄_{i-1})/i`, so one reverse sweep
/// with a running suffix sum suffices.
pub fn covariance_backward(stats: &GroupStats, d_cov: &Matrix3<f64>) -> Result<Vec<Vector3<f64>>> {
    let h = stats
        .history
        .as_ref()
        .ok_or_else(|| Error::ContractViolation("covariance_backward needs retained prefix means".into()))?;
    let n_total = stats.count;
    if h.points.len() != n_total || h.prefix_means.len() != n_total {
        return Err(Error::ContractViolation("prefix history does not match member count".into()));
    }
    let g = d_cov;
    let gt = d_cov.transpose();
    let r = |i: usize| -> Vector3<f64> {
        // i is 1-based
        if i == 1 {
            return Vector3::zeros();
        }
        let p = &h.points[i - 1];
        let after = p - h.prefix_means[i - 1];
        let before = p - h.prefix_means[i - 2];
        g * after / (i - 1) as f64 + gt * before / i as f64
    };
    let inv_n = 1.0 / n_total as f64;
    let mut grads = vec![Vector3::zeros(); n_total];
    let mut suffix = Vector3::zeros();
    for n in (1..=n_total).rev() {
        let rn = r(n);
        grads[n - 1] = inv_n * ((n - 1) as f64 * rn - suffix);
        suffix += rn;
    }
    Ok(grads)
}
