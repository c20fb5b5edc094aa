//! Final structure estimation.
//!
//! [`reconstruct_alternating`] relaxes the image toward the filtered
//! backprojection of random cluster subsets and re-estimates every pose by
//! brute-force grid search against the current image.
//! [`reconstruct_sparse_baseline`] instead solves an ℓ1-regularized least
//! squares problem in the cosine-transform domain at fixed poses.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dct::Dct2;
use crate::error::{Error, Result};
use crate::image::{detector_len, Image, PoseEstimate, Projection};
use crate::pose_init::{angle_grid, shift_grid};
use crate::radon::{
    angular_weights, backproject_into, fbp_reconstruct, fbp_reconstruct_weighted, radon_forward, shift_projection,
    FbpFilter,
};

/// Number of poses whose backprojections are summed per parallel task.
const CHUNK: usize = 8;

fn check_aligned(image: &Image, poses: &[PoseEstimate], projections: &[Projection]) -> Result<()> {
    if poses.len() != projections.len() {
        return Err(Error::LengthMismatch {
            expected: projections.len(),
            actual: poses.len(),
        });
    }
    let len = detector_len(image.side());
    if let Some(p) = projections.iter().find(|p| p.len() != len) {
        return Err(Error::LengthMismatch {
            expected: len,
            actual: p.len(),
        });
    }
    Ok(())
}

fn residual(image: &Image, pose: &PoseEstimate, projection: &Projection) -> Vec<f64> {
    let target = shift_projection(projection, -pose.shift);
    let model = radon_forward(image, pose.angle);
    target.bins().iter().zip(model.bins()).map(|(t, m)| t - m).collect()
}

/// `sum_i |unshift(q_i, s_i) - R_theta_i z|^2`.
pub fn data_energy(image: &Image, poses: &[PoseEstimate], projections: &[Projection]) -> Result<f64> {
    check_aligned(image, poses, projections)?;
    let terms: Vec<f64> = poses
        .par_iter()
        .zip(projections.par_iter())
        .map(|(pose, p)| residual(image, pose, p).iter().map(|r| r * r).sum())
        .collect();
    Ok(terms.iter().sum())
}

/// Gradient of [`data_energy`] with respect to the image:
/// `-2 sum_i R^T (unshift(q_i) - R z)`.
pub fn data_energy_gradient(image: &Image, poses: &[PoseEstimate], projections: &[Projection]) -> Result<Image> {
    check_aligned(image, poses, projections)?;
    let side = image.side();
    let idx: Vec<usize> = (0..poses.len()).collect();
    let partial: Vec<Result<Image>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Image::zeros(side);
            for &i in chunk {
                let r = residual(image, &poses[i], &projections[i]);
                backproject_into(&mut g, &r, poses[i].angle, -2.0)?;
            }
            Ok(g)
        })
        .collect();
    let mut out = Image::zeros(side);
    for g in partial {
        add_into(&mut out, &g?, 1.0);
    }
    Ok(out)
}

fn add_into(dst: &mut Image, src: &Image, w: f64) {
    for (d, s) in dst.pixels_mut().iter_mut().zip(src.pixels()) {
        *d += w * s;
    }
}

/// `sum_i R_i^T R_i x` at the given angles.
fn normal_operator(x: &Image, angles: &[f64]) -> Result<Image> {
    let side = x.side();
    let partial: Vec<Result<Image>> = angles
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Image::zeros(side);
            for &a in chunk {
                backproject_into(&mut g, radon_forward(x, a).bins(), a, 1.0)?;
            }
            Ok(g)
        })
        .collect();
    let mut out = Image::zeros(side);
    for g in partial {
        add_into(&mut out, &g?, 1.0);
    }
    Ok(out)
}

/// Pose search grid shared by the refinement steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrid {
    /// Degrees.
    pub angle_step: f64,
    pub shift_bound: f64,
    pub shift_step: f64,
}

impl Default for PoseGrid {
    fn default() -> Self {
        Self {
            angle_step: 1.0,
            shift_bound: 0.0,
            shift_step: 0.5,
        }
    }
}

impl PoseGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_step > 0.0 && self.angle_step <= 180.0) {
            return Err(Error::InvalidConfig(format!("angle step {} out of range", self.angle_step)));
        }
        if !(self.shift_bound >= 0.0 && self.shift_step > 0.0) {
            return Err(Error::InvalidConfig("shift grid needs bound >= 0 and step > 0".into()));
        }
        Ok(())
    }

    /// Shifts ordered by increasing magnitude, negative first on ties.
    fn shifts_by_magnitude(&self) -> Vec<f64> {
        let mut s = shift_grid(self.shift_bound, self.shift_step);
        s.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
        s
    }
}

/// Forward projections of one image at every grid angle, for repeated
/// brute-force pose searches.
pub struct PoseRefiner {
    angles: Vec<f64>,
    shifts: Vec<f64>,
    views: Vec<Projection>,
}

impl PoseRefiner {
    pub fn new(image: &Image, grid: &PoseGrid) -> Self {
        let angles = angle_grid(grid.angle_step);
        let views = angles.par_iter().map(|&a| radon_forward(image, a)).collect();
        Self {
            angles,
            shifts: grid.shifts_by_magnitude(),
            views,
        }
    }

    /// Grid pose minimizing `|unshift(q, s) - R_theta z|^2`; ties go to the
    /// smaller angle, then the smaller `|shift|`.
    pub fn refine(&self, projection: &Projection) -> PoseEstimate {
        let mut best = (f64::INFINITY, 0usize, 0usize);
        let targets: Vec<Projection> = self.shifts.iter().map(|&s| shift_projection(projection, -s)).collect();
        for (a, view) in self.views.iter().enumerate() {
            for (si, t) in targets.iter().enumerate() {
                let d = t.sq_dist(view);
                // strict improvement keeps the earliest (angle, |shift|) on ties
                if d < best.0 || (d == best.0 && (a, si) < (best.1, best.2)) {
                    best = (d, a, si);
                }
            }
        }
        PoseEstimate {
            angle: self.angles[best.1],
            shift: self.shifts[best.2],
        }
    }

    pub fn refine_all(&self, projections: &[Projection]) -> Vec<PoseEstimate> {
        projections.par_iter().map(|p| self.refine(p)).collect()
    }
}

pub fn refine_pose(image: &Image, projection: &Projection, grid: &PoseGrid) -> PoseEstimate {
    PoseRefiner::new(image, grid).refine(projection)
}

pub fn refine_poses(image: &Image, projections: &[Projection], grid: &PoseGrid) -> Vec<PoseEstimate> {
    PoseRefiner::new(image, grid).refine_all(projections)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub learning_rate: f64,
    /// Subtracted from the learning rate after every outer iteration.
    pub anneal_rate: f64,
    pub learning_rate_floor: f64,
    /// Clusters per image update; `None` means a third of them.
    pub batch_size: Option<usize>,
    /// Stop once an iteration lowers the energy by no more than this
    /// fraction of the initial energy.
    pub tol_rel: f64,
    pub grid: PoseGrid,
    pub max_outer_iters: usize,
    pub seed: u64,
    pub filter: FbpFilter,
    pub weighting: ViewWeighting,
    pub update: ImageUpdate,
    /// Clamp the image at zero after every update.
    pub nonnegative: bool,
}

/// How a subset of clusters moves the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageUpdate {
    /// `z + alpha * FBP(q - R z)`: a ramp-filtered gradient step on the
    /// subset energy.
    #[default]
    Residual,
    /// `z - alpha * (z - FBP(q))`.
    Relax,
}

impl std::str::FromStr for ImageUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(ImageUpdate::Residual),
            "relax" => Ok(ImageUpdate::Relax),
            other => Err(Error::Parse(format!("unknown image update '{other}'"))),
        }
    }
}

impl std::fmt::Display for ImageUpdate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImageUpdate::Residual => "residual",
            ImageUpdate::Relax => "relax",
        })
    }
}

/// Quadrature weights of the backprojection sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewWeighting {
    /// `pi / N` for every view.
    Uniform,
    /// Half the angular gap to the neighbouring views, capped at ten
    /// median gaps.
    #[default]
    Voronoi,
}

impl std::str::FromStr for ViewWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ViewWeighting::Uniform),
            "voronoi" => Ok(ViewWeighting::Voronoi),
            other => Err(Error::Parse(format!("unknown view weighting '{other}'"))),
        }
    }
}

impl std::fmt::Display for ViewWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ViewWeighting::Uniform => "uniform",
            ViewWeighting::Voronoi => "voronoi",
        })
    }
}

/// Gap cap of [`ViewWeighting::Voronoi`], in median gaps.
const WEIGHT_CAP: f64 = 10.0;

/// Filtered backprojection with the configured view weighting.
pub fn weighted_fbp(
    projections: &[Projection],
    poses: &[PoseEstimate],
    side: usize,
    filter: FbpFilter,
    weighting: ViewWeighting,
) -> Result<Image> {
    match weighting {
        ViewWeighting::Uniform => fbp_reconstruct(projections, poses, side, filter),
        ViewWeighting::Voronoi => {
            let angles: Vec<f64> = poses.iter().map(|p| p.angle).collect();
            let w = angular_weights(&angles, WEIGHT_CAP);
            fbp_reconstruct_weighted(projections, poses, &w, side, filter)
        }
    }
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            anneal_rate: 0.01,
            learning_rate_floor: 0.05,
            batch_size: None,
            tol_rel: 1e-4,
            grid: PoseGrid::default(),
            max_outer_iters: 100,
            seed: 0,
            filter: FbpFilter::HannRamp,
            weighting: ViewWeighting::Voronoi,
            update: ImageUpdate::Residual,
            nonnegative: true,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be in (0, 1]",
                self.learning_rate
            )));
        }
        if !(self.anneal_rate >= 0.0) {
            return Err(Error::InvalidConfig("anneal rate must be >= 0".into()));
        }
        if !(self.learning_rate_floor > 0.0 && self.learning_rate_floor <= 1.0) {
            return Err(Error::InvalidConfig("learning rate floor must be in (0, 1]".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.tol_rel >= 0.0) {
            return Err(Error::InvalidConfig("tolerance must be >= 0".into()));
        }
        self.grid.validate()
    }

    fn batch(&self, kc: usize) -> usize {
        self.batch_size.unwrap_or(kc / 3).clamp(1, kc)
    }
}

/// Consecutive energy increases, all above the initial energy, after which
/// the iteration counts as divergent.
pub const DIVERGENCE_PATIENCE: usize = 5;

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub image: Image,
    pub poses: Vec<PoseEstimate>,
    /// Energy of the initial image, then after every outer iteration.
    pub energy_trace: Vec<f64>,
    /// Index into `energy_trace` of the returned iterate.
    pub best_iteration: usize,
}

pub fn reconstruct_alternating(
    centers: &[Projection],
    init_poses: &[PoseEstimate],
    side: usize,
    config: &ReconConfig,
) -> Result<ReconResult> {
    config.validate()?;
    if centers.is_empty() {
        return Err(Error::EmptyInput("cluster centers"));
    }
    let kc = centers.len();
    let mut image = weighted_fbp(centers, init_poses, side, config.filter, config.weighting)?;
    if config.nonnegative {
        clamp_nonnegative(&mut image);
    }
    let mut poses = init_poses.to_vec();
    let mut energy = data_energy(&image, &poses, centers)?;
    let initial_energy = energy;
    let tol = config.tol_rel * energy;
    let mut trace = vec![energy];
    let mut best = (energy, image.clone(), poses.clone(), 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut alpha = config.learning_rate;
    let batch = config.batch(kc);
    let mut increases = 0;

    for it in 1..=config.max_outer_iters {
        let mut chosen = index::sample(&mut rng, kc, batch).into_vec();
        chosen.sort_unstable();
        let sub_poses: Vec<PoseEstimate> = chosen.iter().map(|&i| poses[i]).collect();
        image = match config.update {
            ImageUpdate::Relax => {
                let sub: Vec<Projection> = chosen.iter().map(|&i| centers[i].clone()).collect();
                let target = weighted_fbp(&sub, &sub_poses, side, config.filter, config.weighting)?;
                image.combine(1.0 - alpha, &target, alpha)
            }
            ImageUpdate::Residual => {
                let sub: Vec<Projection> = chosen
                    .par_iter()
                    .map(|&i| Projection::from_vec_unchecked(residual(&image, &poses[i], &centers[i])))
                    .collect();
                let centred: Vec<PoseEstimate> = sub_poses
                    .iter()
                    .map(|p| PoseEstimate { angle: p.angle, shift: 0.0 })
                    .collect();
                let step = weighted_fbp(&sub, &centred, side, config.filter, config.weighting)?;
                image.combine(1.0, &step, alpha)
            }
        };
        if config.nonnegative {
            clamp_nonnegative(&mut image);
        }
        poses = PoseRefiner::new(&image, &config.grid).refine_all(centers);
        alpha = (alpha - config.anneal_rate).max(config.learning_rate_floor);

        let new_energy = data_energy(&image, &poses, centers)?;
        trace.push(new_energy);
        log::debug!("outer iteration {it}: energy {new_energy:.6e}, alpha {alpha:.3}");
        if new_energy < best.0 {
            best = (new_energy, image.clone(), poses.clone(), it);
        }
        let decrease = energy - new_energy;
        energy = new_energy;
        if decrease < 0.0 {
            if new_energy > initial_energy {
                increases += 1;
            } else {
                increases = 0;
            }
            if increases >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    consecutive: increases,
                    trace,
                });
            }
            continue;
        }
        increases = 0;
        if decrease <= tol {
            break;
        }
    }
    let (_, image, poses, best_iteration) = best;
    Ok(ReconResult {
        image,
        poses,
        energy_trace: trace,
        best_iteration,
    })
}

fn clamp_nonnegative(image: &mut Image) {
    for v in image.pixels_mut() {
        *v = v.max(0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseReconConfig {
    /// ℓ1 weight relative to `lambda_max`, the smallest weight for which the
    /// zero image is optimal.
    pub lambda_rel: f64,
    pub inner_iters: usize,
    /// Relative objective change under which the inner solver counts as
    /// converged.
    pub inner_tol: f64,
    pub outer_iters: usize,
    pub grid: PoseGrid,
    pub power_iters: usize,
}

impl Default for SparseReconConfig {
    fn default() -> Self {
        Self {
            lambda_rel: 1e-5,
            inner_iters: 300,
            inner_tol: 1e-6,
            outer_iters: 10,
            grid: PoseGrid::default(),
            power_iters: 30,
        }
    }
}

impl SparseReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rel >= 0.0 && self.lambda_rel.is_finite()) {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.inner_iters == 0 {
            return Err(Error::InvalidConfig("inner iterations must be >= 1".into()));
        }
        self.grid.validate()
    }
}

/// `sum_i |q_i - R_i U beta|^2 + lambda |beta|_1` at fixed poses, with `U`
/// the inverse orthonormal cosine transform.
pub struct SparseProblem<'a> {
    dct: Dct2,
    poses: &'a [PoseEstimate],
    targets: Vec<Projection>,
    lambda: f64,
}

impl<'a> SparseProblem<'a> {
    pub fn new(centers: &[Projection], poses: &'a [PoseEstimate], side: usize, lambda: f64) -> Result<Self> {
        if centers.len() != poses.len() {
            return Err(Error::LengthMismatch {
                expected: centers.len(),
                actual: poses.len(),
            });
        }
        let targets = centers
            .iter()
            .zip(poses)
            .map(|(c, p)| shift_projection(c, -p.shift))
            .collect();
        Ok(Self {
            dct: Dct2::new(side),
            poses,
            targets,
            lambda,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    fn unshifted_poses(&self) -> Vec<PoseEstimate> {
        self.poses.iter().map(|p| PoseEstimate { angle: p.angle, shift: 0.0 }).collect()
    }

    /// Gradient of the quadratic term with respect to `beta`.
    pub fn smooth_gradient(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let z = self.dct.inverse(beta)?;
        let g = data_energy_gradient(&z, &self.unshifted_poses(), &self.targets)?;
        self.dct.forward(&g)
    }

    pub fn smooth_value(&self, beta: &[f64]) -> Result<f64> {
        let z = self.dct.inverse(beta)?;
        data_energy(&z, &self.unshifted_poses(), &self.targets)
    }

    pub fn objective(&self, beta: &[f64]) -> Result<f64> {
        Ok(self.smooth_value(beta)? + self.lambda * beta.iter().map(|b| b.abs()).sum::<f64>())
    }

    /// Smallest weight for which `beta = 0` is optimal.
    pub fn lambda_max(&self) -> Result<f64> {
        let side = self.dct.side();
        let g = self.smooth_gradient(&vec![0.0; side * side])?;
        Ok(g.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
    }

    /// Upper estimate of the gradient's Lipschitz constant,
    /// `2 |sum_i R_i^T R_i|` by power iteration (the transform is
    /// orthonormal and drops out).
    pub fn lipschitz(&self, iters: usize) -> Result<f64> {
        let side = self.dct.side();
        let angles: Vec<f64> = self.poses.iter().map(|p| p.angle).collect();
        let mut x = Image::from_fn(side, |x, y| 1.0 + 0.01 * (x - 0.3 * y).sin());
        let mut est = 0.0;
        for _ in 0..iters.max(1) {
            let n = x.norm();
            if n == 0.0 {
                return Ok(0.0);
            }
            let unit = x.combine(1.0 / n, &x, 0.0);
            x = normal_operator(&unit, &angles)?;
            est = x.norm();
        }
        // small margin since power iteration approaches from below
        Ok(2.0 * est * 1.01)
    }
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct L1Solution {
    pub beta: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

/// Accelerated proximal gradient (FISTA) with step `0.9 / lipschitz` and
/// gradient restart; returns the best iterate seen. Stops once an update
/// moves `beta` by less than `tol` relative to its norm.
pub fn solve_l1(problem: &SparseProblem, beta0: Vec<f64>, lipschitz: f64, iters: usize, tol: f64) -> Result<L1Solution> {
    let step = if lipschitz > 0.0 { 0.9 / lipschitz } else { 1.0 };
    let t_shrink = problem.lambda * step;
    let mut beta = beta0;
    let mut y = beta.clone();
    let mut momentum = 1.0f64;
    let obj = problem.objective(&beta)?;
    let mut trace = vec![obj];
    let mut best = (obj, beta.clone());
    let mut converged = false;
    for _ in 0..iters {
        let g = problem.smooth_gradient(&y)?;
        let next: Vec<f64> = y
            .iter()
            .zip(&g)
            .map(|(b, gi)| soft_threshold(b - step * gi, t_shrink))
            .collect();
        let new_obj = problem.objective(&next)?;
        trace.push(new_obj);
        if new_obj < best.0 {
            best = (new_obj, next.clone());
        }
        let moved: f64 = next.iter().zip(&beta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let size: f64 = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        // restart when the step goes against the momentum direction
        let uphill: f64 = y
            .iter()
            .zip(&next)
            .zip(&beta)
            .map(|((yi, ni), bi)| (yi - ni) * (ni - bi))
            .sum();
        let next_momentum = if uphill > 0.0 {
            1.0
        } else {
            0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt())
        };
        let w = if uphill > 0.0 { 0.0 } else { (momentum - 1.0) / next_momentum };
        y = next.iter().zip(&beta).map(|(n, b)| n + w * (n - b)).collect();
        momentum = next_momentum;
        beta = next;
        if moved <= tol * size.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(L1Solution {
        beta: best.1,
        objective_trace: trace,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct SparseReconResult {
    pub image: Image,
    pub poses: Vec<PoseEstimate>,
    /// Set when some inner solve hit its iteration cap before converging.
    pub warning: bool,
    pub lambda: f64,
}

pub fn reconstruct_sparse_baseline(
    centers: &[Projection],
    init_poses: &[PoseEstimate],
    side: usize,
    config: &SparseReconConfig,
) -> Result<SparseReconResult> {
    config.validate()?;
    if centers.is_empty() {
        return Err(Error::EmptyInput("cluster centers"));
    }
    let dct = Dct2::new(side);
    let mut poses = init_poses.to_vec();
    let start = fbp_reconstruct(centers, &poses, side, FbpFilter::RamLak)?;
    let mut beta = dct.forward(&start)?;
    let mut warning = false;
    let mut lambda = 0.0;
    for outer in 0..config.outer_iters.max(1) {
        let mut problem = SparseProblem::new(centers, &poses, side, 0.0)?;
        lambda = config.lambda_rel * problem.lambda_max()?;
        problem.set_lambda(lambda);
        let lip = problem.lipschitz(config.power_iters)?;
        let sol = solve_l1(&problem, beta, lip, config.inner_iters, config.inner_tol)?;
        warning |= !sol.converged;
        beta = sol.beta;
        let image = dct.inverse(&beta)?;
        let refined = PoseRefiner::new(&image, &config.grid).refine_all(centers);
        let unchanged = refined == poses;
        poses = refined;
        log::debug!("sparse outer {outer}: objective {:?}", sol.objective_trace.last());
        if unchanged {
            break;
        }
    }
    if warning {
        log::warn!("sparse baseline: inner solver stopped at its iteration cap");
    }
    Ok(SparseReconResult {
        image: dct.inverse(&beta)?,
        poses,
        warning,
        lambda,
    })
}
