//! Domain types shared by every stage: square images, 1D projections and
//! per-projection poses.
//!
//! Pixel `(row, col)` sits at `x = col - side/2`, `y = row - side/2`, so the
//! lattice origin is the pixel at index `side/2` on both axes. Detector bins
//! are centered at `rho = r - (len-1)/2` with unit spacing.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Number of detector bins for an image of the given side:
/// `ceil(sqrt(2) * side)`, bumped to the next odd number.
pub fn detector_len(side: usize) -> usize {
    let n = (std::f64::consts::SQRT_2 * side as f64).ceil() as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if side < 2 {
            return Err(Error::InvalidImage(format!("side must be >= 2, got {side}")));
        }
        if pixels.len() != side * side {
            return Err(Error::LengthMismatch {
                expected: side * side,
                actual: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite pixel at index {i}")));
        }
        Ok(Self { side, pixels })
    }

    pub fn zeros(side: usize) -> Self {
        assert!(side >= 2, "image side must be >= 2");
        Self {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel center.
    pub fn from_fn(side: usize, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut img = Self::zeros(side);
        let c = img.origin();
        for row in 0..side {
            for col in 0..side {
                img.pixels[row * side + col] = f(col as f64 - c, row as f64 - c);
            }
        }
        img
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    /// Index of the lattice origin along either axis.
    #[inline]
    pub fn origin(&self) -> f64 {
        (self.side as f64 - 1.0) / 2.0
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.side + col] = value;
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.pixels.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.side, other.side);
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Bilinear sample at lattice coordinates `(x, y)`; zero outside the grid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let c = self.origin();
        let col = x + c;
        let row = y + c;
        let c0 = col.floor();
        let r0 = row.floor();
        let fx = col - c0;
        let fy = row - r0;
        let (c0, r0) = (c0 as isize, r0 as isize);
        let n = self.side as isize;
        let mut acc = 0.0;
        for (dr, dc, w) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (0, 1, fx * (1.0 - fy)),
            (1, 0, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let (r, cc) = (r0 + dr, c0 + dc);
            if w != 0.0 && r >= 0 && r < n && cc >= 0 && cc < n {
                acc += w * self.pixels[(r * n + cc) as usize];
            }
        }
        acc
    }

    /// Rescales to a new side length with bilinear interpolation, mapping the
    /// full extent of the source grid onto the target grid.
    pub fn resized(&self, side: usize) -> Image {
        if side == self.side {
            return self.clone();
        }
        let scale = (self.side - 1) as f64 / (side - 1).max(1) as f64;
        let mut out = Image::zeros(side);
        let c = self.origin();
        for row in 0..side {
            for col in 0..side {
                let x = col as f64 * scale - c;
                let y = row as f64 * scale - c;
                out.pixels[row * side + col] = self.sample_bilinear(x, y);
            }
        }
        out
    }

    /// `self * a + other * b`, element-wise.
    pub fn combine(&self, a: f64, other: &Image, b: f64) -> Image {
        debug_assert_eq!(self.side, other.side);
        Image {
            side: self.side,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    bins: Vec<f64>,
}

impl Projection {
    pub fn new(bins: Vec<f64>) -> Result<Self> {
        if let Some(i) = bins.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite projection bin {i}")));
        }
        Ok(Self { bins })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bins: vec![0.0; len],
        }
    }

    pub(crate) fn from_vec_unchecked(bins: Vec<f64>) -> Self {
        Self { bins }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    #[inline]
    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    #[inline]
    pub fn bins_mut(&mut self) -> &mut [f64] {
        &mut self.bins
    }

    pub fn into_bins(self) -> Vec<f64> {
        self.bins
    }

    /// Index of the bin at `rho = 0`.
    #[inline]
    pub fn center(&self) -> f64 {
        ((self.bins.len().saturating_sub(1)) / 2) as f64
    }

    #[inline]
    pub fn rho(&self, r: usize) -> f64 {
        r as f64 - self.center()
    }

    pub fn sum(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn reversed(&self) -> Projection {
        let mut bins = self.bins.clone();
        bins.reverse();
        Projection { bins }
    }

    pub fn sq_dist(&self, other: &Projection) -> f64 {
        self.bins
            .iter()
            .zip(&other.bins)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Orientation and detector shift of one (cluster-averaged) projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    /// Radians in `[0, pi)`.
    pub angle: f64,
    /// Detector-bin units; the projection was translated by `+shift`.
    pub shift: f64,
}

impl PoseEstimate {
    /// Folds an arbitrary direction into `[0, pi)`. A view at `theta + pi`
    /// is the bin-reversed view at `theta`, so folding negates the shift.
    pub fn new(angle: f64, shift: f64) -> Self {
        let mut a = angle.rem_euclid(2.0 * PI);
        let mut s = shift;
        if a >= PI {
            a -= PI;
            s = -s;
        }
        if a >= PI {
            a = 0.0;
        }
        Self { angle: a, shift: s }
    }

    pub fn from_degrees(angle_deg: f64, shift: f64) -> Self {
        Self::new(angle_deg.to_radians(), shift)
    }

    pub fn angle_degrees(&self) -> f64 {
        self.angle.to_degrees()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_length_is_odd_and_covers_diagonal() {
        assert_eq!(detector_len(64), 91);
        assert_eq!(detector_len(16), 23);
        assert_eq!(detector_len(8), 13);
        for side in 2..300 {
            let n = detector_len(side);
            assert_eq!(n % 2, 1);
            assert!(n as f64 >= std::f64::consts::SQRT_2 * side as f64);
        }
    }

    #[test]
    fn image_rejects_bad_input() {
        assert!(Image::new(1, vec![0.0]).is_err());
        assert!(Image::new(3, vec![0.0; 8]).is_err());
        assert!(Image::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pose_folding_negates_shift() {
        let p = PoseEstimate::new(PI + 0.25, 1.5);
        assert!((p.angle - 0.25).abs() < 1e-12);
        assert_eq!(p.shift, -1.5);
        let q = PoseEstimate::new(-0.25, 1.0);
        assert!((q.angle - (PI - 0.25)).abs() < 1e-12);
        assert_eq!(q.shift, -1.0);
    }

    #[test]
    fn bilinear_sampling_hits_pixel_centers() {
        let img = Image::from_fn(6, |x, y| x + 10.0 * y);
        assert!((img.sample_bilinear(1.0, -2.0) - (1.0 - 20.0)).abs() < 1e-12);
        assert!((img.sample_bilinear(0.5, 0.0) - 0.5).abs() < 1e-12);
        assert_eq!(img.sample_bilinear(100.0, 0.0), 0.0);
    }
}
