//! Discrete parallel-beam Radon transform, its exact adjoint, sub-bin shifts
//! and filtered backprojection.
//!
//! The projector is pixel driven: every pixel's value is split between the
//! two detector bins adjacent to `rho = x cos(theta) + y sin(theta)` with
//! linear weights. The adjoint reuses the same weights, which makes it the
//! usual linear-interpolation backprojector.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::image::{detector_len, Image, PoseEstimate, Projection};

#[inline]
fn bin_weights(pos: f64, len: usize) -> (isize, f64) {
    let i0 = pos.floor();
    let f = pos - i0;
    debug_assert!(len > 0);
    (i0 as isize, f)
}

/// Line integrals of `image` along parallel rays with normal direction `angle`.
pub fn radon_forward(image: &Image, angle: f64) -> Projection {
    let side = image.side();
    let len = detector_len(side);
    let mut bins = vec![0.0; len];
    let (s, c) = angle.sin_cos();
    let origin = image.origin();
    let det_center = ((len - 1) / 2) as f64;
    let n = len as isize;
    let px = image.pixels();
    for row in 0..side {
        let y = row as f64 - origin;
        let base = y * s + det_center;
        for col in 0..side {
            let v = px[row * side + col];
            if v == 0.0 {
                continue;
            }
            let x = col as f64 - origin;
            let (i0, f) = bin_weights(x * c + base, len);
            if i0 >= 0 && i0 < n {
                bins[i0 as usize] += (1.0 - f) * v;
            }
            if f != 0.0 && i0 + 1 >= 0 && i0 + 1 < n {
                bins[(i0 + 1) as usize] += f * v;
            }
        }
    }
    Projection::from_vec_unchecked(bins)
}

/// Exact transpose of [`radon_forward`] at one angle.
pub fn radon_adjoint(projection: &Projection, angle: f64, side: usize) -> Result<Image> {
    let mut out = Image::zeros(side);
    backproject_into(&mut out, projection.bins(), angle, 1.0)?;
    Ok(out)
}

/// Accumulates `weight * R_theta^T bins` into `out`.
pub(crate) fn backproject_into(out: &mut Image, bins: &[f64], angle: f64, weight: f64) -> Result<()> {
    let side = out.side();
    let len = detector_len(side);
    if bins.len() != len {
        return Err(Error::LengthMismatch {
            expected: len,
            actual: bins.len(),
        });
    }
    let (s, c) = angle.sin_cos();
    let origin = out.origin();
    let det_center = ((len - 1) / 2) as f64;
    let n = len as isize;
    let px = out.pixels_mut();
    for row in 0..side {
        let y = row as f64 - origin;
        let base = y * s + det_center;
        for col in 0..side {
            let x = col as f64 - origin;
            let (i0, f) = bin_weights(x * c + base, len);
            let mut acc = 0.0;
            if i0 >= 0 && i0 < n {
                acc += (1.0 - f) * bins[i0 as usize];
            }
            if f != 0.0 && i0 + 1 >= 0 && i0 + 1 < n {
                acc += f * bins[(i0 + 1) as usize];
            }
            px[row * side + col] += weight * acc;
        }
    }
    Ok(())
}

/// Translates bin contents by `amount` bins (positive moves mass toward
/// higher indices) using linear interpolation; bins sourced from outside
/// the detector read as zero.
pub fn shift_projection(projection: &Projection, amount: f64) -> Projection {
    if amount == 0.0 {
        return projection.clone();
    }
    let src = projection.bins();
    let n = src.len() as isize;
    let read = |i: isize| if i >= 0 && i < n { src[i as usize] } else { 0.0 };
    let bins = (0..src.len())
        .map(|r| {
            let pos = r as f64 - amount;
            let i0 = pos.floor();
            let f = pos - i0;
            let i0 = i0 as isize;
            if f == 0.0 {
                read(i0)
            } else {
                (1.0 - f) * read(i0) + f * read(i0 + 1)
            }
        })
        .collect();
    Projection::from_vec_unchecked(bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FbpFilter {
    #[default]
    RamLak,
    HannRamp,
}

impl FromStr for FbpFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ram-lak" | "ramlak" => Ok(FbpFilter::RamLak),
            "hann-ramp" | "hann" => Ok(FbpFilter::HannRamp),
            other => Err(Error::Parse(format!("unknown FBP filter '{other}'"))),
        }
    }
}

impl std::fmt::Display for FbpFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FbpFilter::RamLak => "ram-lak",
            FbpFilter::HannRamp => "hann-ramp",
        })
    }
}

/// Band-limited ramp filter applied by zero-padded FFT convolution.
///
/// The response is the transform of the spatial Ram-Lak kernel
/// (`h[0] = 1/4`, `h[n odd] = -1/(pi n)^2`), which keeps the DC term
/// correct on a finite detector.
pub struct RampFilter {
    len: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    response: Vec<f64>,
}

impl RampFilter {
    pub fn new(len: usize, kind: FbpFilter) -> Self {
        let n_fft = (2 * len).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n_fft);
        let ifft = planner.plan_fft_inverse(n_fft);

        let mut kernel = vec![Complex::new(0.0, 0.0); n_fft];
        kernel[0].re = 0.25;
        for k in (1..len).step_by(2) {
            let v = -1.0 / (PI * PI * (k * k) as f64);
            kernel[k].re = v;
            kernel[n_fft - k].re = v;
        }
        fft.process(&mut kernel);
        let response = kernel
            .iter()
            .enumerate()
            .map(|(k, h)| {
                let freq = k.min(n_fft - k) as f64 / (n_fft / 2) as f64;
                let window = match kind {
                    FbpFilter::RamLak => 1.0,
                    FbpFilter::HannRamp => 0.5 * (1.0 + (PI * freq).cos()),
                };
                h.re * window
            })
            .collect();
        Self {
            len,
            fft,
            ifft,
            response,
        }
    }

    pub fn apply(&self, bins: &[f64]) -> Vec<f64> {
        debug_assert_eq!(bins.len(), self.len);
        let n_fft = self.response.len();
        let mut buf: Vec<Complex<f64>> = bins
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(n_fft)
            .collect();
        self.fft.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= *h;
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / n_fft as f64;
        buf[..self.len].iter().map(|c| c.re * scale).collect()
    }
}

/// Filtered backprojection: each projection is un-shifted by its pose,
/// ramp filtered, backprojected, and the sum scaled by `pi / N`.
pub fn fbp_reconstruct(
    projections: &[Projection],
    poses: &[PoseEstimate],
    side: usize,
    filter: FbpFilter,
) -> Result<Image> {
    let w = vec![PI / projections.len().max(1) as f64; projections.len()];
    fbp_reconstruct_weighted(projections, poses, &w, side, filter)
}

/// Quadrature weights for directions on `[0, pi)`: half the angular gap to
/// each neighbouring distinct direction, capped at `cap` times the median
/// gap, and shared equally by views at the same direction. Weights sum to
/// `pi` before capping.
pub fn angular_weights(angles: &[f64], cap: f64) -> Vec<f64> {
    const SAME: f64 = 1e-9;
    let n = angles.len();
    if n == 0 {
        return Vec::new();
    }
    let folded: Vec<f64> = angles.iter().map(|a| a.rem_euclid(PI)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| folded[a].total_cmp(&folded[b]).then(a.cmp(&b)));
    // groups of views sharing a direction, in angular order
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if folded[i] - folded[g[0]] < SAME => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    if groups.len() > 1 {
        let first = folded[groups[0][0]];
        let last = folded[groups[groups.len() - 1][0]];
        if first + PI - last < SAME {
            let tail = groups.pop().unwrap_or_default();
            groups[0].extend(tail);
        }
    }
    let m = groups.len();
    let mut w = vec![0.0; n];
    if m == 1 {
        for &i in &groups[0] {
            w[i] = PI / n as f64;
        }
        return w;
    }
    let dir = |k: usize| folded[groups[k][0]];
    let gaps: Vec<f64> = (0..m)
        .map(|k| if k + 1 < m { dir(k + 1) - dir(k) } else { dir(0) + PI - dir(k) })
        .collect();
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    let limit = cap * sorted[m / 2];
    for (k, g) in groups.iter().enumerate() {
        let prev = gaps[(k + m - 1) % m];
        let share = 0.5 * (prev.min(limit) + gaps[k].min(limit)) / g.len() as f64;
        for &i in g {
            w[i] = share;
        }
    }
    w
}

/// [`fbp_reconstruct`] with an explicit quadrature weight per projection.
pub fn fbp_reconstruct_weighted(
    projections: &[Projection],
    poses: &[PoseEstimate],
    weights: &[f64],
    side: usize,
    filter: FbpFilter,
) -> Result<Image> {
    if projections.is_empty() {
        return Err(Error::EmptyInput("fbp_reconstruct needs at least one projection"));
    }
    if projections.len() != poses.len() {
        return Err(Error::LengthMismatch {
            expected: projections.len(),
            actual: poses.len(),
        });
    }
    let len = detector_len(side);
    if let Some(p) = projections.iter().find(|p| p.len() != len) {
        return Err(Error::LengthMismatch {
            expected: len,
            actual: p.len(),
        });
    }
    let ramp = RampFilter::new(len, filter);
    let filtered: Vec<Vec<f64>> = projections
        .par_iter()
        .zip(poses.par_iter())
        .map(|(p, pose)| ramp.apply(shift_projection(p, -pose.shift).bins()))
        .collect();
    if weights.len() != projections.len() {
        return Err(Error::LengthMismatch {
            expected: projections.len(),
            actual: weights.len(),
        });
    }
    let mut out = Image::zeros(side);
    for ((bins, pose), &w) in filtered.iter().zip(poses).zip(weights) {
        backproject_into(&mut out, bins, pose.angle, w)?;
    }
    Ok(out)
}

/// Forward projections of `image` at many angles.
pub fn sinogram(image: &Image, angles: &[f64]) -> Vec<Projection> {
    angles.par_iter().map(|&a| radon_forward(image, a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(side: usize, rng: &mut impl Rng) -> Image {
        Image::new(side, (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let p = radon_forward(&Image::zeros(8), 0.7);
        assert!(p.bins().iter().all(|&v| v == 0.0));
        assert_eq!(p.len(), detector_len(8));
    }

    #[test]
    fn ones_image_mass_at_zero_angle() {
        let img = Image::new(4, vec![1.0; 16]).unwrap();
        let p = radon_forward(&img, 0.0);
        assert!((p.sum() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_peaks_at_projected_rho() {
        // Brute-force delta-line integral of a unit pixel at (x, y) = (3, 2):
        // all of its mass lands at rho = 3 cos 30 + 2 sin 30.
        let side = 17;
        let mut img = Image::zeros(side);
        let o = side / 2;
        img.set(o + 2, o + 3, 1.0);
        let theta = 30f64.to_radians();
        let rho = 3.0 * theta.cos() + 2.0 * theta.sin();
        assert!((rho - 3.598).abs() < 1e-3);
        let p = radon_forward(&img, theta);
        let argmax = p
            .bins()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax as f64, (rho + p.center()).round());
    }

    #[test]
    fn zero_projection_adjoint_is_zero() {
        let img = radon_adjoint(&Projection::zeros(detector_len(8)), 1.1, 8).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_rejects_wrong_length() {
        assert!(matches!(
            radon_adjoint(&Projection::zeros(5), 0.0, 8),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn adjoint_identity_at_57_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let x = random_image(8, &mut rng);
        let y = Projection::new((0..detector_len(8)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let theta = 57f64.to_radians();
        let lhs: f64 = radon_forward(&x, theta).bins().iter().zip(y.bins()).map(|(a, b)| a * b).sum();
        let rhs = x.dot(&radon_adjoint(&y, theta, 8).unwrap());
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-300) < 1e-10);
    }

    #[test]
    fn adjoint_matches_explicit_matrix_transpose() {
        // Build the forward matrix column by column from unit images and
        // compare its transpose against the adjoint for an impulse.
        let side = 9;
        let len = detector_len(side);
        let theta = 0.0;
        let mut matrix = vec![vec![0.0; side * side]; len];
        for p in 0..side * side {
            let mut img = Image::zeros(side);
            img.pixels_mut()[p] = 1.0;
            for (r, v) in radon_forward(&img, theta).bins().iter().enumerate() {
                matrix[r][p] = *v;
            }
        }
        let mut impulse = Projection::zeros(len);
        let c = (len - 1) / 2;
        impulse.bins_mut()[c] = 1.0;
        let back = radon_adjoint(&impulse, theta, side).unwrap();
        for p in 0..side * side {
            assert_eq!(back.pixels()[p], matrix[c][p]);
        }
        let nonzero_cols: std::collections::BTreeSet<usize> = (0..side * side)
            .filter(|&p| back.pixels()[p] != 0.0)
            .map(|p| p % side)
            .collect();
        assert_eq!(nonzero_cols.len(), 1);
    }

    #[test]
    fn shift_examples() {
        let mut p = Projection::zeros(25);
        p.bins_mut()[10] = 1.0;
        assert_eq!(shift_projection(&p, 0.0), p);
        let s2 = shift_projection(&p, 2.0);
        assert_eq!(s2.bins()[12], 1.0);
        assert!((s2.sum() - 1.0).abs() < 1e-15);
        let s15 = shift_projection(&p, 1.5);
        assert!((s15.bins()[11] - 0.5).abs() < 1e-15);
        assert!((s15.bins()[12] - 0.5).abs() < 1e-15);
        assert!((s15.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_projection_backprojection_is_constant_along_rays() {
        let side = 16;
        let img = Image::from_fn(side, |x, y| if x * x + y * y < 20.0 { 1.0 } else { 0.0 });
        let p = radon_forward(&img, 0.0);
        let rec = fbp_reconstruct(&[p], &[PoseEstimate::new(0.0, 0.0)], side, FbpFilter::RamLak).unwrap();
        // At theta = 0 rays are image columns.
        for col in 0..side {
            let v0 = rec.get(0, col);
            for row in 1..side {
                assert!((rec.get(row, col) - v0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fbp_of_zero_image_is_zero_and_empty_is_error() {
        let side = 12;
        let angles: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let projs = sinogram(&Image::zeros(side), &angles);
        let poses: Vec<_> = angles.iter().map(|&a| PoseEstimate::new(a, 0.0)).collect();
        let rec = fbp_reconstruct(&projs, &poses, side, FbpFilter::HannRamp).unwrap();
        assert!(rec.pixels().iter().all(|&v| v == 0.0));
        assert!(matches!(
            fbp_reconstruct(&[], &[], side, FbpFilter::RamLak),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn filter_parses() {
        assert_eq!("ram-lak".parse::<FbpFilter>().unwrap(), FbpFilter::RamLak);
        assert_eq!("hann-ramp".parse::<FbpFilter>().unwrap(), FbpFilter::HannRamp);
        assert!("shepp".parse::<FbpFilter>().is_err());
    }

    #[test]
    fn angular_weights_cover_half_circle() {
        let w = angular_weights(&[0.0, 0.5, 1.0, 2.0], 10.0);
        assert!((w.iter().sum::<f64>() - PI).abs() < 1e-12);
        assert!((w[3] - 0.5 * (1.0 + PI - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn angular_weights_share_repeated_directions() {
        let w = angular_weights(&[0.0, 1.0, 1.0, 2.0, PI], 10.0);
        assert!((w.iter().sum::<f64>() - PI).abs() < 1e-12);
        assert_eq!(w[1], w[2]);
        assert_eq!(w[0], w[4]);
        assert!(angular_weights(&[0.3; 4], 3.0).iter().all(|&x| (x - PI / 4.0).abs() < 1e-15));
    }
}
