//! Initial pose estimation from moment consistency.
//!
//! The order-`n` moment of a projection at angle `theta` is a fixed
//! trigonometric combination of the image's order-`n` geometric moments:
//!
//! ```text
//! m(n) = sum_j C(n, j) cos^(n-j)(theta) sin^j(theta) v(n-j, j)
//! ```
//!
//! [`solve_poses`] minimizes the squared violation of this identity over the
//! unknown poses and image moments by alternating a least-squares solve for
//! the moments with a per-cluster grid search over poses.
//!
//! Coordinates are scaled by `h = side / 2` so that `x`, `y` and `rho` lie in
//! roughly `[-1, 1]`, and every sum carries a `1 / h^2` area element.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, PoseEstimate, Projection};
use crate::radon::shift_projection;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentFrame {
    half_width: f64,
    /// Bins farther than this from the detector center are ignored.
    support: f64,
}

impl MomentFrame {
    pub fn new(side: usize) -> Self {
        Self {
            half_width: side as f64 / 2.0,
            support: f64::INFINITY,
        }
    }

    /// Restricts projection moments to `|rho| <= radius` bins.
    pub fn with_support(self, radius: f64) -> Self {
        Self { support: radius, ..self }
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }
}

/// Geometric moments up to order `k`; `order(n)[j]` is `v(n - j, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMoments {
    orders: Vec<Vec<f64>>,
}

impl ImageMoments {
    pub fn zeros(k: usize) -> Self {
        Self {
            orders: (0..=k).map(|n| vec![0.0; n + 1]).collect(),
        }
    }

    pub fn from_orders(orders: Vec<Vec<f64>>) -> Result<Self> {
        for (n, v) in orders.iter().enumerate() {
            if v.len() != n + 1 {
                return Err(Error::LengthMismatch {
                    expected: n + 1,
                    actual: v.len(),
                });
            }
        }
        if orders.is_empty() {
            return Err(Error::EmptyInput("image moments"));
        }
        Ok(Self { orders })
    }

    pub fn max_order(&self) -> usize {
        self.orders.len() - 1
    }

    pub fn order(&self, n: usize) -> &[f64] {
        &self.orders[n]
    }

    /// `v(p, q)`.
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.orders[p + q][q]
    }

    pub fn orders(&self) -> &[Vec<f64>] {
        &self.orders
    }

    /// Predicted order-`n` projection moment at `angle`.
    pub fn predict(&self, n: usize, angle: f64) -> f64 {
        design_row(n, angle).iter().zip(&self.orders[n]).map(|(a, v)| a * v).sum()
    }
}

pub fn image_moments(image: &Image, k: usize) -> ImageMoments {
    let frame = MomentFrame::new(image.side());
    let h = frame.half_width;
    let side = image.side();
    let origin = image.origin();
    let mut m = ImageMoments::zeros(k);
    let mut xp = vec![0.0; k + 1];
    let mut yp = vec![0.0; k + 1];
    for row in 0..side {
        let y = (row as f64 - origin) / h;
        powers(y, &mut yp);
        for col in 0..side {
            let z = image.get(row, col);
            if z == 0.0 {
                continue;
            }
            let x = (col as f64 - origin) / h;
            powers(x, &mut xp);
            for n in 0..=k {
                for j in 0..=n {
                    m.orders[n][j] += z * xp[n - j] * yp[j];
                }
            }
        }
    }
    let area = 1.0 / (h * h);
    for v in m.orders.iter_mut().flatten() {
        *v *= area;
    }
    m
}

fn powers(x: f64, out: &mut [f64]) {
    let mut p = 1.0;
    for o in out.iter_mut() {
        *o = p;
        p *= x;
    }
}

fn binomial(n: usize, j: usize) -> f64 {
    (0..j).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Row of the order-`n` design matrix: `C(n, j) cos^(n-j) sin^j`.
pub fn design_row(n: usize, angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    (0..=n)
        .map(|j| binomial(n, j) * c.powi((n - j) as i32) * s.powi(j as i32))
        .collect()
}

/// Order-`n` design matrix for a list of angles.
pub fn design_matrix(n: usize, angles: &[f64]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(angles.len(), n + 1);
    for (i, &t) in angles.iter().enumerate() {
        for (j, v) in design_row(n, t).into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    a
}

/// Moments `0..=k` of `projection` after undoing a translation of `unshift`
/// bins.
pub fn projection_moments(projection: &Projection, k: usize, unshift: f64, frame: MomentFrame) -> Vec<f64> {
    let p = shift_projection(projection, -unshift);
    let h = frame.half_width;
    let mut out = vec![0.0; k + 1];
    let mut rp = vec![0.0; k + 1];
    for (r, &g) in p.bins().iter().enumerate() {
        let rho = p.rho(r);
        if g == 0.0 || rho.abs() > frame.support {
            continue;
        }
        powers(rho / h, &mut rp);
        for (o, w) in out.iter_mut().zip(&rp) {
            *o += g * w;
        }
    }
    let area = 1.0 / (h * h);
    out.iter_mut().for_each(|v| *v *= area);
    out
}

pub fn projection_moment(projection: &Projection, n: usize, unshift: f64, frame: MomentFrame) -> f64 {
    projection_moments(projection, n, unshift, frame)[n]
}

fn residual_sq(measured: &[f64], v: &ImageMoments, row_cache: &[Vec<f64>]) -> f64 {
    measured
        .iter()
        .zip(v.orders.iter().zip(row_cache))
        .map(|(m, (vn, an))| {
            let pred: f64 = an.iter().zip(vn).map(|(a, b)| a * b).sum();
            (m - pred) * (m - pred)
        })
        .sum()
}

fn design_rows(k: usize, angle: f64) -> Vec<Vec<f64>> {
    (0..=k).map(|n| design_row(n, angle)).collect()
}

/// Total squared violation of the moment identity, orders `0..=k` where `k`
/// is the order of `v`.
pub fn hlcc_energy(poses: &[PoseEstimate], v: &ImageMoments, projections: &[Projection], frame: MomentFrame) -> Result<f64> {
    if poses.len() != projections.len() {
        return Err(Error::LengthMismatch {
            expected: projections.len(),
            actual: poses.len(),
        });
    }
    let k = v.max_order();
    Ok(poses
        .iter()
        .zip(projections)
        .map(|(pose, p)| {
            let m = projection_moments(p, k, pose.shift, frame);
            residual_sq(&m, v, &design_rows(k, pose.angle))
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseInitConfig {
    pub max_order: usize,
    pub num_starts: usize,
    pub seed: u64,
    /// Degrees.
    pub angle_step: f64,
    pub shift_bound: f64,
    pub shift_step: f64,
    pub max_sweeps: usize,
    /// Relative energy decrease below which a start stops.
    pub tol: f64,
    /// Fix each shift to the projection's centroid instead of searching.
    pub centroid_shifts: bool,
    /// Rescale every projection's moments to the median zeroth moment, so
    /// projections of uniformly dimmed copies still fit the same image
    /// moments.
    pub normalize_mass: bool,
    /// Moments only integrate `|rho| <= support_fraction * side / 2`, the
    /// inscribed disk when 1.
    pub support_fraction: f64,
}

impl Default for PoseInitConfig {
    fn default() -> Self {
        Self {
            max_order: 3,
            num_starts: 10,
            seed: 0,
            angle_step: 1.0,
            shift_bound: 0.0,
            shift_step: 0.5,
            max_sweeps: 200,
            tol: 1e-6,
            centroid_shifts: false,
            normalize_mass: true,
            support_fraction: 1.0,
        }
    }
}

impl PoseInitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_order < 1 {
            return Err(Error::InvalidConfig("moment order must be >= 1".into()));
        }
        if self.num_starts < 1 {
            return Err(Error::InvalidConfig("num_starts must be >= 1".into()));
        }
        if !(self.angle_step > 0.0 && self.angle_step <= 180.0) {
            return Err(Error::InvalidConfig(format!("angle step {} out of range", self.angle_step)));
        }
        if !(self.shift_bound >= 0.0 && self.shift_step > 0.0) {
            return Err(Error::InvalidConfig("shift grid needs bound >= 0 and step > 0".into()));
        }
        if !(self.support_fraction > 0.0) {
            return Err(Error::InvalidConfig("support_fraction must be > 0".into()));
        }
        Ok(())
    }
}

/// Angles (radians) of the search grid.
pub fn angle_grid(step_deg: f64) -> Vec<f64> {
    let count = (180.0 / step_deg - 1e-9).ceil().max(1.0) as usize;
    (0..count).map(|a| (a as f64 * step_deg).to_radians()).collect()
}

/// Shifts of the search grid, symmetric around zero.
pub fn shift_grid(bound: f64, step: f64) -> Vec<f64> {
    let half = (bound / step + 1e-9).floor() as i64;
    (-half..=half).map(|i| i as f64 * step).collect()
}

#[derive(Debug, Clone)]
pub struct PoseSolution {
    pub poses: Vec<PoseEstimate>,
    pub moments: ImageMoments,
    pub energy: f64,
    /// Energy after every half-step of the winning start, starting with the
    /// energy of its first moment fit.
    pub trace: Vec<f64>,
    pub start_energies: Vec<f64>,
}

struct Problem {
    k: usize,
    angles: Vec<f64>,
    rows: Vec<Vec<Vec<f64>>>,
    // per cluster: candidate shifts and the moments at each
    shifts: Vec<Vec<f64>>,
    moments: Vec<Vec<Vec<f64>>>,
}

impl Problem {
    fn cluster_cost(&self, i: usize, a: usize, s: usize, v: &ImageMoments) -> f64 {
        residual_sq(&self.moments[i][s], v, &self.rows[a])
    }

    fn energy(&self, state: &[(usize, usize)], v: &ImageMoments) -> f64 {
        state
            .iter()
            .enumerate()
            .map(|(i, &(a, s))| self.cluster_cost(i, a, s, v))
            .sum()
    }

    fn fit_moments(&self, state: &[(usize, usize)]) -> ImageMoments {
        let kc = state.len();
        let mut orders = Vec::with_capacity(self.k + 1);
        for n in 0..=self.k {
            let mut a = DMatrix::zeros(kc, n + 1);
            let mut b = DVector::zeros(kc);
            for (i, &(ai, si)) in state.iter().enumerate() {
                for j in 0..=n {
                    a[(i, j)] = self.rows[ai][n][j];
                }
                b[i] = self.moments[i][si][n];
            }
            let svd = a.svd(true, true);
            let x = svd
                .solve(&b, 1e-12)
                .map(|x| x.iter().copied().collect())
                .unwrap_or_else(|_| vec![0.0; n + 1]);
            orders.push(x);
        }
        ImageMoments { orders }
    }

    fn best_pose(&self, i: usize, current: (usize, usize), v: &ImageMoments) -> (usize, usize) {
        let mut best = current;
        let mut best_cost = self.cluster_cost(i, current.0, current.1, v);
        for a in 0..self.angles.len() {
            for s in 0..self.shifts[i].len() {
                let c = self.cluster_cost(i, a, s, v);
                if c < best_cost {
                    best_cost = c;
                    best = (a, s);
                }
            }
        }
        best
    }

    fn run_start(&self, rng: &mut ChaCha8Rng, cfg: &PoseInitConfig) -> (Vec<(usize, usize)>, ImageMoments, Vec<f64>) {
        let mut state: Vec<(usize, usize)> = self
            .shifts
            .iter()
            .map(|s| (rng.random_range(0..self.angles.len()), rng.random_range(0..s.len())))
            .collect();
        let mut v = self.fit_moments(&state);
        let mut energy = self.energy(&state, &v);
        let mut trace = vec![energy];
        for _ in 0..cfg.max_sweeps {
            let before = energy;
            state = state
                .par_iter()
                .enumerate()
                .map(|(i, &cur)| self.best_pose(i, cur, &v))
                .collect();
            let after_pose = self.energy(&state, &v);
            debug_assert!(after_pose <= energy * (1.0 + 1e-12) + 1e-300);
            trace.push(after_pose);
            let new_v = self.fit_moments(&state);
            let after_fit = self.energy(&state, &new_v);
            // guard against round-off making the solve marginally worse
            if after_fit <= after_pose {
                v = new_v;
                energy = after_fit;
            } else {
                energy = after_pose;
            }
            trace.push(energy);
            if before <= 0.0 || (before - energy) <= cfg.tol * before {
                break;
            }
        }
        (state, v, trace)
    }
}

/// Jointly estimates one pose per projection and the image moments.
pub fn solve_poses(projections: &[Projection], side: usize, cfg: &PoseInitConfig) -> Result<PoseSolution> {
    cfg.validate()?;
    if projections.is_empty() {
        return Err(Error::EmptyInput("projections"));
    }
    let kc = projections.len();
    if kc >= 2 && cfg.max_order + 1 > kc {
        return Err(Error::Underdetermined {
            order: cfg.max_order,
            clusters: kc,
            unknowns: cfg.max_order + 1,
        });
    }
    let frame = MomentFrame::new(side).with_support(cfg.support_fraction * side as f64 / 2.0);
    let k = cfg.max_order;
    let angles = angle_grid(cfg.angle_step);
    let rows = angles.iter().map(|&t| design_rows(k, t)).collect();
    let grid = shift_grid(cfg.shift_bound, cfg.shift_step);
    let shifts: Vec<Vec<f64>> = projections
        .iter()
        .map(|p| {
            if cfg.centroid_shifts {
                vec![centroid(p)]
            } else {
                grid.clone()
            }
        })
        .collect();
    let mut moments: Vec<Vec<Vec<f64>>> = projections
        .par_iter()
        .zip(&shifts)
        .map(|(p, ss)| ss.iter().map(|&s| projection_moments(p, k, s, frame)).collect())
        .collect();
    if cfg.normalize_mass {
        normalize_mass(&mut moments);
    }
    let problem = Problem {
        k,
        angles,
        rows,
        shifts,
        moments,
    };

    let runs: Vec<_> = (0..cfg.num_starts)
        .into_par_iter()
        .map(|start| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(start as u64 + 1);
            problem.run_start(&mut rng, cfg)
        })
        .collect();
    let start_energies: Vec<f64> = runs.iter().map(|r| *r.2.last().unwrap()).collect();
    let best = start_energies
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap();
    let (state, moments, trace) = runs.into_iter().nth(best).unwrap();
    let poses = state
        .iter()
        .enumerate()
        .map(|(i, &(a, s))| PoseEstimate {
            angle: problem.angles[a],
            shift: problem.shifts[i][s],
        })
        .collect();
    log::debug!("pose init: start energies {start_energies:?}, best {best}");
    Ok(PoseSolution {
        poses,
        moments,
        energy: start_energies[best],
        trace,
        start_energies,
    })
}

fn normalize_mass(moments: &mut [Vec<Vec<f64>>]) {
    let mut mass: Vec<f64> = moments.iter().map(|m| m[0][0]).collect();
    mass.sort_by(f64::total_cmp);
    let reference = mass[mass.len() / 2];
    if !(reference.abs() > f64::EPSILON) {
        return;
    }
    for per_shift in moments.iter_mut() {
        for m in per_shift.iter_mut() {
            let own = m[0];
            if own.abs() > f64::EPSILON {
                let scale = reference / own;
                m.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

/// Centroid of a projection in bins relative to the detector center.
fn centroid(p: &Projection) -> f64 {
    let mass = p.sum();
    if mass.abs() < f64::EPSILON {
        return 0.0;
    }
    p.bins().iter().enumerate().map(|(r, g)| g * p.rho(r)).sum::<f64>() / mass
}

/// Degrees in `[0, 180)`.
pub fn wrap_degrees(angle_deg: f64) -> f64 {
    angle_deg.rem_euclid(180.0)
}

/// Folds radians into `[0, pi)`.
pub fn wrap_angle(angle: f64) -> f64 {
    angle.rem_euclid(PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::head_phantom;
    use crate::radon::radon_forward;
    use rand::Rng;

    #[test]
    fn moments_of_zero_image() {
        let m = image_moments(&Image::zeros(8), 3);
        assert!(m.orders().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_moment_of_mirror_symmetric_image() {
        // columns c and side - 1 - c mirror around x = 0
        let img = Image::from_fn(8, |x, y| if x.abs() <= 2.0 && x > -4.0 { 1.0 + y * y } else { 0.0 });
        assert!(image_moments(&img, 1).get(1, 0).abs() < 1e-14);
    }

    #[test]
    fn second_moment_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let side = 8;
        let img = Image::new(side, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let h = 4.0;
        let mut brute = 0.0;
        for r in 0..side {
            for c in 0..side {
                let x = (c as f64 - 3.5) / h;
                brute += img.get(r, c) * x * x;
            }
        }
        brute /= h * h;
        assert!((image_moments(&img, 2).get(2, 0) - brute).abs() < 1e-12);
    }

    #[test]
    fn delta_projection_moment() {
        let frame = MomentFrame::new(8);
        let mut bins = vec![0.0; 13];
        // rho = 0.25 * h = 1 bin right of center
        bins[7] = 16.0;
        let p = Projection::new(bins).unwrap();
        assert!((projection_moment(&p, 2, 0.0, frame) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn zeroth_moment_ignores_shift() {
        let frame = MomentFrame::new(16);
        let p = radon_forward(&head_phantom(16), 0.3);
        let a = projection_moment(&p, 0, 0.0, frame);
        let b = projection_moment(&p, 0, 1.5, frame);
        assert!((a - b).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn first_moment_identity() {
        let img = head_phantom(32);
        let v = image_moments(&img, 1);
        let frame = MomentFrame::new(32);
        for deg in [0.0, 17.0, 45.0, 101.0, 163.0] {
            let t = f64::to_radians(deg);
            let m = projection_moment(&radon_forward(&img, t), 1, 0.0, frame);
            assert!((m - v.predict(1, t)).abs() < 1e-3);
        }
    }

    #[test]
    fn design_row_zero_is_one() {
        assert_eq!(design_row(0, 1.234), vec![1.0]);
        let r = design_row(2, 0.4);
        let (s, c) = 0.4f64.sin_cos();
        assert!((r[0] - c * c).abs() < 1e-15);
        assert!((r[1] - 2.0 * c * s).abs() < 1e-15);
        assert!((r[2] - s * s).abs() < 1e-15);
    }

    #[test]
    fn energy_of_zeros() {
        let p = vec![Projection::zeros(13); 3];
        let poses = vec![PoseEstimate::new(0.1, 0.0); 3];
        assert_eq!(hlcc_energy(&poses, &ImageMoments::zeros(3), &p, MomentFrame::new(8)).unwrap(), 0.0);
    }

    #[test]
    fn grids() {
        assert_eq!(angle_grid(1.0).len(), 180);
        assert_eq!(shift_grid(0.0, 0.5), vec![0.0]);
        assert_eq!(shift_grid(1.0, 0.5), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn underdetermined_and_single_view() {
        let p = vec![radon_forward(&head_phantom(16), 0.2); 3];
        let cfg = PoseInitConfig {
            num_starts: 2,
            ..Default::default()
        };
        assert!(matches!(solve_poses(&p, 16, &cfg), Err(Error::Underdetermined { .. })));
        let one = solve_poses(&p[..1], 16, &cfg).unwrap();
        assert!(one.energy < 1e-20);
    }
}
