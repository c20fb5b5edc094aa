//! Patch-based PCA denoising of cluster centers.
//!
//! Every length-`patch_length` window of every center is denoised against an
//! ensemble of its `L` nearest windows (pooled across all centers): the
//! ensemble is mean-centered, its principal axes computed, and each
//! coefficient of the reference window shrunk by a Wiener-like factor. The
//! overlapping denoised windows are averaged per bin.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Projection;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    /// Odd window length.
    pub patch_length: usize,
    /// Ensemble size per window, reference included.
    pub neighbors: usize,
    /// Noise std of a single raw projection.
    pub sigma: f64,
    /// Average number of projections averaged into each center.
    pub mean_occupancy: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            patch_length: 15,
            neighbors: 40,
            sigma: 0.0,
            mean_occupancy: 1.0,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_length == 0 || self.patch_length % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_length {} must be odd and positive",
                self.patch_length
            )));
        }
        if self.neighbors < self.patch_length {
            return Err(Error::InvalidConfig(format!(
                "neighbors ({}) must be >= patch_length ({})",
                self.neighbors, self.patch_length
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma {} must be >= 0", self.sigma)));
        }
        if !(self.mean_occupancy > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mean occupancy {} must be > 0",
                self.mean_occupancy
            )));
        }
        Ok(())
    }

    /// Residual noise variance of a center, `sigma^2 / K̄`.
    pub fn noise_var(&self) -> f64 {
        self.sigma * self.sigma / self.mean_occupancy
    }
}

/// `alpha * s / (s + noise_var)`; zero when both variances vanish.
pub fn wiener_shrink(alpha: f64, sigma_l_sq: f64, noise_var: f64) -> f64 {
    let den = sigma_l_sq + noise_var;
    if den <= 0.0 {
        return 0.0;
    }
    alpha * (sigma_l_sq / den)
}

/// `max(0, mean(alpha^2) - noise_var)`.
pub fn estimate_coeff_variance(coeffs: &[f64], noise_var: f64) -> f64 {
    if coeffs.is_empty() {
        return 0.0;
    }
    let ms = coeffs.iter().map(|a| a * a).sum::<f64>() / coeffs.len() as f64;
    (ms - noise_var).max(0.0)
}

struct PatchPool {
    len: usize,
    patches: Vec<f64>,
    // (center index, start bin) of every patch, in order.
    origin: Vec<(usize, usize)>,
}

impl PatchPool {
    fn new(centers: &[Projection], len: usize) -> Self {
        let mut patches = Vec::new();
        let mut origin = Vec::new();
        for (c, p) in centers.iter().enumerate() {
            for start in 0..=(p.len() - len) {
                patches.extend_from_slice(&p.bins()[start..start + len]);
                origin.push((c, start));
            }
        }
        Self { len, patches, origin }
    }

    fn count(&self) -> usize {
        self.origin.len()
    }

    fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i * self.len..(i + 1) * self.len]
    }

    /// The `k` nearest patches to patch `i` (itself first).
    fn nearest(&self, i: usize, k: usize) -> Vec<usize> {
        let reference = self.patch(i);
        let mut dist: Vec<(f64, usize)> = (0..self.count())
            .map(|j| {
                let d = if j == i {
                    -1.0
                } else {
                    self.patch(j)
                        .iter()
                        .zip(reference)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                };
                (d, j)
            })
            .collect();
        let k = k.min(dist.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let mut top = dist[..k].to_vec();
        top.sort_by(cmp);
        top.into_iter().map(|(_, j)| j).collect()
    }
}

/// Denoises one reference patch against its ensemble.
fn denoise_patch(pool: &PatchPool, reference: usize, ensemble: &[usize], noise_var: f64) -> Vec<f64> {
    let p = pool.len;
    let l = ensemble.len();
    let mut mean = vec![0.0; p];
    for &j in ensemble {
        for (m, v) in mean.iter_mut().zip(pool.patch(j)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= l as f64;
    }
    let centered = DMatrix::from_fn(l, p, |r, c| pool.patch(ensemble[r])[c] - mean[c]);
    let cov = centered.transpose() * &centered / l as f64;
    let eig = SymmetricEigen::new(cov);
    // coefficients of every ensemble member along every axis
    let coeffs = &centered * &eig.eigenvectors;
    let reference_row = ensemble.iter().position(|&j| j == reference).unwrap_or(0);
    let mut out = mean;
    let mut column = vec![0.0; l];
    for axis in 0..p {
        for (r, slot) in column.iter_mut().enumerate() {
            *slot = coeffs[(r, axis)];
        }
        let var = estimate_coeff_variance(&column, noise_var);
        let beta = wiener_shrink(column[reference_row], var, noise_var);
        for (o, e) in out.iter_mut().zip(eig.eigenvectors.column(axis).iter()) {
            *o += beta * e;
        }
    }
    out
}

pub fn denoise_centers(centers: &[Projection], config: &DenoiseConfig) -> Result<Vec<Projection>> {
    config.validate()?;
    let Some(first) = centers.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if let Some(c) = centers.iter().find(|c| c.len() != len) {
        return Err(Error::LengthMismatch {
            expected: len,
            actual: c.len(),
        });
    }
    if config.patch_length > len {
        return Err(Error::InvalidConfig(format!(
            "patch_length {} exceeds projection length {len}",
            config.patch_length
        )));
    }
    if config.sigma == 0.0 {
        return Ok(centers.to_vec());
    }
    let noise_var = config.noise_var();
    let pool = PatchPool::new(centers, config.patch_length);
    let denoised: Vec<Vec<f64>> = (0..pool.count())
        .into_par_iter()
        .map(|i| {
            let ensemble = pool.nearest(i, config.neighbors);
            denoise_patch(&pool, i, &ensemble, noise_var)
        })
        .collect();

    let mut sums = vec![vec![0.0; len]; centers.len()];
    let mut counts = vec![vec![0u32; len]; centers.len()];
    for (patch, &(c, start)) in denoised.iter().zip(&pool.origin) {
        for (k, v) in patch.iter().enumerate() {
            sums[c][start + k] += v;
            counts[c][start + k] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| {
            Projection::from_vec_unchecked(s.into_iter().zip(n).map(|(v, k)| v / k as f64).collect())
        })
        .collect())
}
