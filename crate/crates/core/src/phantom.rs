//! Test objects: a soft-edged head phantom in the Shepp-Logan tradition and
//! random blob images used as foreign objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

/// Ellipse in normalized coordinates (the image spans `[-1, 1]`).
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub intensity: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Degrees.
    pub tilt: f64,
}

impl Ellipse {
    const fn new(intensity: f64, semi_x: f64, semi_y: f64, center_x: f64, center_y: f64, tilt: f64) -> Self {
        Self {
            intensity,
            semi_x,
            semi_y,
            center_x,
            center_y,
            tilt,
        }
    }

    /// The same ellipse rotated counterclockwise about the origin.
    pub fn rotated(&self, degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self {
            center_x: self.center_x * c - self.center_y * s,
            center_y: self.center_x * s + self.center_y * c,
            tilt: self.tilt + degrees,
            ..*self
        }
    }

    /// Coverage in `[0, 1]` at normalized `(u, v)` with a linear edge ramp
    /// `edge` normalized units wide.
    fn coverage(&self, u: f64, v: f64, edge: f64) -> f64 {
        let (s, c) = self.tilt.to_radians().sin_cos();
        let du = u - self.center_x;
        let dv = v - self.center_y;
        let a = (du * c + dv * s) / self.semi_x;
        let b = (-du * s + dv * c) / self.semi_y;
        let r = (a * a + b * b).sqrt();
        let dist = (1.0 - r) * self.semi_x.min(self.semi_y);
        if edge <= 0.0 {
            return if r <= 1.0 { 1.0 } else { 0.0 };
        }
        (0.5 + dist / edge).clamp(0.0, 1.0)
    }
}

/// Head-like phantom: thick skull, two dark ventricles and a few bright
/// features placed off the mirror axis so the object has no reflection
/// symmetry.
pub const HEAD_ELLIPSES: [Ellipse; 9] = [
    Ellipse::new(1.0, 0.70, 0.88, 0.0, 0.0, 0.0),
    Ellipse::new(-0.7, 0.60, 0.78, 0.0, -0.02, 0.0),
    Ellipse::new(-0.15, 0.12, 0.30, 0.22, 0.02, -18.0),
    Ellipse::new(-0.15, 0.16, 0.38, -0.22, 0.0, 18.0),
    Ellipse::new(0.25, 0.22, 0.24, 0.0, 0.38, 0.0),
    Ellipse::new(0.60, 0.13, 0.08, 0.30, -0.42, 30.0),
    Ellipse::new(0.30, 0.09, 0.09, 0.32, 0.36, 0.0),
    Ellipse::new(0.20, 0.07, 0.14, 0.05, -0.55, -10.0),
    Ellipse::new(0.40, 0.08, 0.08, 0.40, 0.10, 0.0),
];

/// Width of the soft edge of every rendered ellipse.
const EDGE_PIXELS: f64 = 2.0;

/// Subsamples per pixel along each axis.
const SUPERSAMPLE: usize = 4;

fn render_point(ellipses: &[Ellipse], u: f64, v: f64, edge: f64) -> f64 {
    ellipses
        .iter()
        .map(|e| e.intensity * e.coverage(u, v, edge))
        .sum::<f64>()
        .max(0.0)
}

/// Renders with a linear edge ramp `edge_pixels` wide, averaging a
/// `4 x 4` grid of subsamples per pixel.
pub fn render_ellipses(side: usize, ellipses: &[Ellipse], edge_pixels: f64) -> Image {
    let half = side as f64 / 2.0;
    let edge = edge_pixels / half;
    let k = SUPERSAMPLE as f64;
    Image::from_fn(side, |x, y| {
        let mut acc = 0.0;
        for a in 0..SUPERSAMPLE {
            let v = (y + (a as f64 + 0.5) / k - 0.5) / half;
            for b in 0..SUPERSAMPLE {
                let u = (x + (b as f64 + 0.5) / k - 0.5) / half;
                acc += render_point(ellipses, u, v, edge);
            }
        }
        acc / (k * k)
    })
}

/// The default test object.
pub fn head_phantom(side: usize) -> Image {
    render_ellipses(side, &HEAD_ELLIPSES, EDGE_PIXELS)
}

/// The head phantom rendered rotated counterclockwise by `degrees`.
pub fn head_phantom_rotated(side: usize, degrees: f64) -> Image {
    let e: Vec<Ellipse> = HEAD_ELLIPSES.iter().map(|e| e.rotated(degrees)).collect();
    render_ellipses(side, &e, EDGE_PIXELS)
}

/// One random blob image: a handful of random ellipses inside the disk.
pub fn random_blobs(side: usize, rng: &mut impl Rng) -> Image {
    let count = rng.random_range(3..9);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let r = rng.random_range(0.0..0.55);
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            Ellipse::new(
                rng.random_range(0.2..0.9),
                rng.random_range(0.08..0.45),
                rng.random_range(0.08..0.45),
                r * t.cos(),
                r * t.sin(),
                rng.random_range(0.0..180.0),
            )
        })
        .collect();
    render_ellipses(side, &ellipses, EDGE_PIXELS)
}

/// A pool of distinct foreign objects, reproducible from `seed`.
pub fn outlier_pool(side: usize, count: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_blobs(side, &mut rng)).collect()
}
