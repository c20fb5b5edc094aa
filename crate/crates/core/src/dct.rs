//! Orthonormal 2D type-II cosine transform, applied separably with a cached
//! basis matrix.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone)]
pub struct Dct2 {
    side: usize,
    // basis[k * side + n] = a_k cos(pi (2n + 1) k / (2 side))
    basis: Vec<f64>,
}

impl Dct2 {
    pub fn new(side: usize) -> Self {
        let n = side as f64;
        let mut basis = vec![0.0; side * side];
        for k in 0..side {
            let a = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for i in 0..side {
                basis[k * side + i] = a * (PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
            }
        }
        Self { side, basis }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Coefficients in row-major order, `coeffs[ky * side + kx]`.
    pub fn forward(&self, image: &Image) -> Result<Vec<f64>> {
        if image.side() != self.side {
            return Err(Error::LengthMismatch {
                expected: self.side,
                actual: image.side(),
            });
        }
        // C Z C^T
        let tmp = self.mul_rows(image.pixels(), false);
        Ok(self.mul_cols(&tmp, false))
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Result<Image> {
        if coeffs.len() != self.side * self.side {
            return Err(Error::LengthMismatch {
                expected: self.side * self.side,
                actual: coeffs.len(),
            });
        }
        // C^T X C
        let tmp = self.mul_rows(coeffs, true);
        Image::new(self.side, self.mul_cols(&tmp, true))
    }

    // Transforms every row: out[r][k] = sum_i B[k][i] m[r][i] (or B^T).
    fn mul_rows(&self, m: &[f64], transpose: bool) -> Vec<f64> {
        let n = self.side;
        let b = &self.basis;
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            let row = &m[r * n..(r + 1) * n];
            for k in 0..n {
                out[r * n + k] = if transpose {
                    (0..n).map(|i| b[i * n + k] * row[i]).sum()
                } else {
                    b[k * n..(k + 1) * n].iter().zip(row).map(|(x, y)| x * y).sum()
                };
            }
        }
        out
    }

    // Transforms every column.
    fn mul_cols(&self, m: &[f64], transpose: bool) -> Vec<f64> {
        let n = self.side;
        let b = &self.basis;
        let mut out = vec![0.0; n * n];
        for k in 0..n {
            for i in 0..n {
                let w = if transpose { b[i * n + k] } else { b[k * n + i] };
                if w == 0.0 {
                    continue;
                }
                let src = &m[i * n..(i + 1) * n];
                let dst = &mut out[k * n..(k + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

pub fn dct2_forward(image: &Image) -> Vec<f64> {
    Dct2::new(image.side())
        .forward(image)
        .expect("transform built for this side")
}

pub fn dct2_inverse(coeffs: &[f64], side: usize) -> Result<Image> {
    Dct2::new(side).inverse(coeffs)
}
