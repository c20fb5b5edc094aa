//! End-to-end configuration and in-memory stage runners.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::cluster::{detect_class1_outliers, lq_kmeans, robust_average, Clustering, KMeansParams};
use crate::denoise::{denoise_centers, DenoiseConfig};
use crate::error::{Error, Result};
use crate::eval::{align_poses, cluster_truth, outlier_metrics, register_and_rmse, EvalReport, PoseAlignment};
use crate::image::{Image, PoseEstimate, Projection};
use crate::phantom::{head_phantom, outlier_pool};
use crate::pose_init::{solve_poses, PoseInitConfig, PoseSolution};
use crate::radon::FbpFilter;
use crate::reconstruct::{
    reconstruct_alternating, reconstruct_sparse_baseline, weighted_fbp, PoseGrid, ReconConfig, ReconResult, SparseReconConfig,
    SparseReconResult,
};
use crate::simulate::{make_dataset, AngleDistribution, GroundTruth, SimulatedDataset, SimulationConfig};

/// Every tunable of the pipeline, flat so it maps onto `key=value` files.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub side: usize,
    pub simulation: SimulationConfig,
    /// Distinct foreign objects; `None` means one per class-1 projection.
    pub pool_size: Option<usize>,
    pub pool_seed: u64,
    pub kmeans: KMeansParams,
    /// Discard fraction; `None` means `f1 + 0.02`.
    pub discard_fraction: Option<f64>,
    /// Clusters whose center mass differs from the median center mass by
    /// more than this fraction are discarded whole.
    pub mass_tolerance: f64,
    /// Clusters retaining fewer members than this fraction of the median
    /// occupancy are discarded.
    pub min_occupancy: f64,
    pub patch_length: usize,
    pub neighbors: usize,
    pub pose_init: PoseInitConfig,
    pub recon: ReconConfig,
    pub sparse: SparseReconConfig,
    /// Bound of every shift search; `None` follows the simulation bound.
    pub search_shift_bound: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            side: 64,
            simulation: SimulationConfig {
                num_projections: 3600,
                ..Default::default()
            },
            pool_size: None,
            pool_seed: 99,
            kmeans: KMeansParams {
                clusters: 120,
                ..Default::default()
            },
            discard_fraction: None,
            mass_tolerance: 0.25,
            min_occupancy: 0.25,
            patch_length: 15,
            neighbors: 40,
            pose_init: PoseInitConfig::default(),
            recon: ReconConfig::default(),
            sparse: SparseReconConfig::default(),
            search_shift_bound: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {key}={value}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "auto" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| "auto".into())
}

impl PipelineConfig {
    pub const KEYS: &'static [&'static str] = &[
        "side",
        "seed",
        "num_projections",
        "angle_distribution",
        "noise_fraction",
        "f1",
        "f2",
        "f3",
        "shift_bound",
        "pool_size",
        "pool_seed",
        "clusters",
        "q",
        "kmeans_seed",
        "kmeans_iters",
        "discard_fraction",
        "mass_tolerance",
        "min_occupancy",
        "patch_length",
        "neighbors",
        "moment_order",
        "num_starts",
        "pose_seed",
        "init_angle_step",
        "max_sweeps",
        "init_tol",
        "centroid_shifts",
        "normalize_mass",
        "support_fraction",
        "search_shift_bound",
        "shift_step",
        "learning_rate",
        "anneal_rate",
        "learning_rate_floor",
        "batch_size",
        "tol_rel",
        "angle_step",
        "max_outer_iters",
        "recon_seed",
        "filter",
        "fbp_weights",
        "image_update",
        "nonnegative",
        "lambda_rel",
        "inner_iters",
        "inner_tol",
        "sparse_outer_iters",
        "power_iters",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "side" => self.side = parse(key, v)?,
            "seed" => self.simulation.seed = parse(key, v)?,
            "num_projections" => self.simulation.num_projections = parse(key, v)?,
            "angle_distribution" => self.simulation.angle_distribution = v.trim().parse::<AngleDistribution>()?,
            "noise_fraction" => self.simulation.noise_fraction = parse(key, v)?,
            "f1" => self.simulation.f1 = parse(key, v)?,
            "f2" => self.simulation.f2 = parse(key, v)?,
            "f3" => self.simulation.f3 = parse(key, v)?,
            "shift_bound" => self.simulation.shift_bound = parse(key, v)?,
            "pool_size" => self.pool_size = parse_opt(key, v)?,
            "pool_seed" => self.pool_seed = parse(key, v)?,
            "clusters" => self.kmeans.clusters = parse(key, v)?,
            "q" => self.kmeans.q = parse(key, v)?,
            "kmeans_seed" => self.kmeans.seed = parse(key, v)?,
            "kmeans_iters" => self.kmeans.max_iters = parse(key, v)?,
            "discard_fraction" => self.discard_fraction = parse_opt(key, v)?,
            "mass_tolerance" => self.mass_tolerance = parse(key, v)?,
            "min_occupancy" => self.min_occupancy = parse(key, v)?,
            "patch_length" => self.patch_length = parse(key, v)?,
            "neighbors" => self.neighbors = parse(key, v)?,
            "moment_order" => self.pose_init.max_order = parse(key, v)?,
            "num_starts" => self.pose_init.num_starts = parse(key, v)?,
            "pose_seed" => self.pose_init.seed = parse(key, v)?,
            "init_angle_step" => self.pose_init.angle_step = parse(key, v)?,
            "max_sweeps" => self.pose_init.max_sweeps = parse(key, v)?,
            "init_tol" => self.pose_init.tol = parse(key, v)?,
            "centroid_shifts" => self.pose_init.centroid_shifts = parse(key, v)?,
            "normalize_mass" => self.pose_init.normalize_mass = parse(key, v)?,
            "support_fraction" => self.pose_init.support_fraction = parse(key, v)?,
            "search_shift_bound" => self.search_shift_bound = parse_opt(key, v)?,
            "shift_step" => self.pose_init.shift_step = parse(key, v)?,
            "learning_rate" => self.recon.learning_rate = parse(key, v)?,
            "anneal_rate" => self.recon.anneal_rate = parse(key, v)?,
            "learning_rate_floor" => self.recon.learning_rate_floor = parse(key, v)?,
            "batch_size" => self.recon.batch_size = parse_opt(key, v)?,
            "tol_rel" => self.recon.tol_rel = parse(key, v)?,
            "angle_step" => self.recon.grid.angle_step = parse(key, v)?,
            "max_outer_iters" => self.recon.max_outer_iters = parse(key, v)?,
            "recon_seed" => self.recon.seed = parse(key, v)?,
            "filter" => self.recon.filter = v.trim().parse::<FbpFilter>()?,
            "fbp_weights" => self.recon.weighting = v.trim().parse()?,
            "image_update" => self.recon.update = v.trim().parse()?,
            "nonnegative" => self.recon.nonnegative = parse(key, v)?,
            "lambda_rel" => self.sparse.lambda_rel = parse(key, v)?,
            "inner_iters" => self.sparse.inner_iters = parse(key, v)?,
            "inner_tol" => self.sparse.inner_tol = parse(key, v)?,
            "sparse_outer_iters" => self.sparse.outer_iters = parse(key, v)?,
            "power_iters" => self.sparse.power_iters = parse(key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "side" => self.side.to_string(),
            "seed" => self.simulation.seed.to_string(),
            "num_projections" => self.simulation.num_projections.to_string(),
            "angle_distribution" => self.simulation.angle_distribution.to_string(),
            "noise_fraction" => self.simulation.noise_fraction.to_string(),
            "f1" => self.simulation.f1.to_string(),
            "f2" => self.simulation.f2.to_string(),
            "f3" => self.simulation.f3.to_string(),
            "shift_bound" => self.simulation.shift_bound.to_string(),
            "pool_size" => opt_to_string(&self.pool_size),
            "pool_seed" => self.pool_seed.to_string(),
            "clusters" => self.kmeans.clusters.to_string(),
            "q" => self.kmeans.q.to_string(),
            "kmeans_seed" => self.kmeans.seed.to_string(),
            "kmeans_iters" => self.kmeans.max_iters.to_string(),
            "discard_fraction" => opt_to_string(&self.discard_fraction),
            "mass_tolerance" => self.mass_tolerance.to_string(),
            "min_occupancy" => self.min_occupancy.to_string(),
            "patch_length" => self.patch_length.to_string(),
            "neighbors" => self.neighbors.to_string(),
            "moment_order" => self.pose_init.max_order.to_string(),
            "num_starts" => self.pose_init.num_starts.to_string(),
            "pose_seed" => self.pose_init.seed.to_string(),
            "init_angle_step" => self.pose_init.angle_step.to_string(),
            "max_sweeps" => self.pose_init.max_sweeps.to_string(),
            "init_tol" => self.pose_init.tol.to_string(),
            "centroid_shifts" => self.pose_init.centroid_shifts.to_string(),
            "normalize_mass" => self.pose_init.normalize_mass.to_string(),
            "support_fraction" => self.pose_init.support_fraction.to_string(),
            "search_shift_bound" => opt_to_string(&self.search_shift_bound),
            "shift_step" => self.pose_init.shift_step.to_string(),
            "learning_rate" => self.recon.learning_rate.to_string(),
            "anneal_rate" => self.recon.anneal_rate.to_string(),
            "learning_rate_floor" => self.recon.learning_rate_floor.to_string(),
            "batch_size" => opt_to_string(&self.recon.batch_size),
            "tol_rel" => self.recon.tol_rel.to_string(),
            "angle_step" => self.recon.grid.angle_step.to_string(),
            "max_outer_iters" => self.recon.max_outer_iters.to_string(),
            "recon_seed" => self.recon.seed.to_string(),
            "filter" => self.recon.filter.to_string(),
            "fbp_weights" => self.recon.weighting.to_string(),
            "image_update" => self.recon.update.to_string(),
            "nonnegative" => self.recon.nonnegative.to_string(),
            "lambda_rel" => self.sparse.lambda_rel.to_string(),
            "inner_iters" => self.sparse.inner_iters.to_string(),
            "inner_tol" => self.sparse.inner_tol.to_string(),
            "sparse_outer_iters" => self.sparse.outer_iters.to_string(),
            "power_iters" => self.sparse.power_iters.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` rendering, one line per key in [`Self::KEYS`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("every listed key renders"));
        }
        s
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("every listed key renders")))
            .collect()
    }

    pub fn discard_fraction(&self) -> f64 {
        self.discard_fraction
            .unwrap_or_else(|| (self.simulation.f1 + 0.02).min(0.99))
    }

    pub fn search_shift_bound(&self) -> f64 {
        self.search_shift_bound.unwrap_or(self.simulation.shift_bound)
    }

    pub fn pose_init_config(&self) -> PoseInitConfig {
        PoseInitConfig {
            shift_bound: self.search_shift_bound(),
            ..self.pose_init.clone()
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            grid: PoseGrid {
                shift_bound: self.search_shift_bound(),
                shift_step: self.pose_init.shift_step,
                ..self.recon.grid.clone()
            },
            ..self.recon.clone()
        }
    }

    pub fn sparse_config(&self) -> SparseReconConfig {
        SparseReconConfig {
            grid: self.recon_config().grid,
            ..self.sparse.clone()
        }
    }

    pub fn denoise_config(&self, sigma: f64, mean_occupancy: f64) -> DenoiseConfig {
        DenoiseConfig {
            patch_length: self.patch_length,
            neighbors: self.neighbors,
            sigma,
            mean_occupancy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::InvalidConfig(format!("side {} must be >= 8", self.side)));
        }
        self.simulation.validate()?;
        if self.simulation.f1 > 0.0 && self.pool_size == Some(0) {
            return Err(Error::InvalidConfig("f1 > 0 needs pool_size >= 1".into()));
        }
        if self.kmeans.clusters == 0 || self.kmeans.clusters > self.simulation.num_projections {
            return Err(Error::InvalidConfig(format!(
                "clusters = {} must be in [1, num_projections]",
                self.kmeans.clusters
            )));
        }
        if !(self.kmeans.q > 0.0 && self.kmeans.q <= 1.0) {
            return Err(Error::InvalidConfig(format!("q = {} must be in (0, 1]", self.kmeans.q)));
        }
        let f = self.discard_fraction();
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidConfig(format!("discard_fraction = {f} must be in [0, 1)")));
        }
        if !(self.mass_tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mass_tolerance = {} must be > 0",
                self.mass_tolerance
            )));
        }
        if !(0.0..1.0).contains(&self.min_occupancy) {
            return Err(Error::InvalidConfig(format!(
                "min_occupancy = {} must be in [0, 1)",
                self.min_occupancy
            )));
        }
        self.denoise_config(1.0, 1.0).validate()?;
        self.pose_init_config().validate()?;
        self.recon_config().validate()?;
        self.sparse_config().validate()
    }
}

/// Output of the clustering stage.
#[derive(Debug, Clone)]
pub struct ClusterStage {
    pub clustering: Clustering,
    pub centers: Vec<Projection>,
}

pub fn object_image(cfg: &PipelineConfig) -> Image {
    head_phantom(cfg.side)
}

pub fn run_simulate(cfg: &PipelineConfig, object: &Image) -> Result<SimulatedDataset> {
    let pool = if cfg.simulation.f1 > 0.0 {
        let n = cfg.pool_size.unwrap_or_else(|| cfg.simulation.class1_count().max(1));
        outlier_pool(cfg.side, n, cfg.pool_seed)
    } else {
        Vec::new()
    };
    make_dataset(object, &pool, &cfg.simulation)
}

pub fn run_cluster(cfg: &PipelineConfig, projections: &[Projection]) -> Result<ClusterStage> {
    let clustering = lq_kmeans(projections, &cfg.kmeans)?;
    let f = cfg.discard_fraction();
    let mask = detect_class1_outliers(projections, &clustering, f)?;
    let mut clustering = drop_empty_clusters(clustering.with_discarded(mask, f), projections);
    let mut centers = robust_average(projections, &clustering)?;
    if let Some(mask) = mass_outlier_mask(&clustering, &centers, cfg.mass_tolerance) {
        clustering = drop_empty_clusters(clustering.with_discarded(mask, f), projections);
        centers = robust_average(projections, &clustering)?;
    }
    if let Some(mask) = sparse_cluster_mask(&clustering, cfg.min_occupancy) {
        clustering = drop_empty_clusters(clustering.with_discarded(mask, f), projections);
        centers = robust_average(projections, &clustering)?;
    }
    Ok(ClusterStage { clustering, centers })
}

/// Discard mask extended by every member of a cluster retaining fewer than
/// `min_fraction` times the median number of retained members; `None` when
/// no cluster is that small.
pub fn sparse_cluster_mask(clustering: &Clustering, min_fraction: f64) -> Option<Vec<bool>> {
    let occupancy = clustering.occupancy();
    let mut sorted = occupancy.clone();
    sorted.sort_unstable();
    let median = *sorted.get(sorted.len() / 2)? as f64;
    let small: Vec<bool> = occupancy.iter().map(|&n| (n as f64) < min_fraction * median).collect();
    let dropped = small.iter().filter(|s| **s).count();
    if dropped == 0 || dropped == small.len() {
        return None;
    }
    log::warn!("discarding {dropped} clusters with fewer than {:.1} retained members", min_fraction * median);
    Some(
        clustering
            .assignments
            .iter()
            .zip(&clustering.discarded)
            .map(|(&a, &d)| d || small[a])
            .collect(),
    )
}

/// Discard mask extended by every member of a cluster whose center mass is
/// off the median center mass by more than `tolerance` (relative); `None`
/// when no cluster is off.
pub fn mass_outlier_mask(clustering: &Clustering, centers: &[Projection], tolerance: f64) -> Option<Vec<bool>> {
    let mass: Vec<f64> = centers.iter().map(Projection::sum).collect();
    let mut sorted = mass.clone();
    sorted.sort_by(f64::total_cmp);
    let median = *sorted.get(sorted.len() / 2)?;
    let off: Vec<bool> = mass
        .iter()
        .map(|m| (m - median).abs() > tolerance * median.abs())
        .collect();
    let dropped = off.iter().filter(|o| **o).count();
    if dropped == 0 || dropped == off.len() {
        return None;
    }
    log::warn!("discarding {dropped} clusters with inconsistent mass");
    Some(
        clustering
            .assignments
            .iter()
            .zip(&clustering.discarded)
            .map(|(&a, &d)| d || off[a])
            .collect(),
    )
}

/// Removes clusters left without retained members (clusters made of
/// outliers only). Their discarded members move to the nearest surviving
/// centroid so every assignment stays valid.
pub fn drop_empty_clusters(mut clustering: Clustering, projections: &[Projection]) -> Clustering {
    let occupancy = clustering.occupancy();
    if occupancy.iter().all(|&n| n > 0) {
        return clustering;
    }
    let mut remap = vec![usize::MAX; occupancy.len()];
    let mut kept = Vec::new();
    for (j, &n) in occupancy.iter().enumerate() {
        if n > 0 {
            remap[j] = kept.len();
            kept.push(j);
        }
    }
    log::warn!(
        "dropping {} clusters whose members were all discarded",
        occupancy.len() - kept.len()
    );
    let centroids: Vec<Projection> = kept.iter().map(|&j| clustering.centroids[j].clone()).collect();
    for (i, a) in clustering.assignments.iter_mut().enumerate() {
        *a = if remap[*a] != usize::MAX {
            remap[*a]
        } else {
            centroids
                .iter()
                .enumerate()
                .map(|(c, x)| (projections[i].sq_dist(x), c))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, c)| c)
                .unwrap_or(0)
        };
    }
    clustering.centroids = centroids;
    clustering
}

pub fn run_denoise(cfg: &PipelineConfig, centers: &[Projection], sigma: f64, mean_occupancy: f64) -> Result<Vec<Projection>> {
    denoise_centers(centers, &cfg.denoise_config(sigma, mean_occupancy))
}

pub fn run_pose_init(cfg: &PipelineConfig, centers: &[Projection]) -> Result<PoseSolution> {
    solve_poses(centers, cfg.side, &cfg.pose_init_config())
}

pub fn run_reconstruct(cfg: &PipelineConfig, centers: &[Projection], init: &[PoseEstimate]) -> Result<ReconResult> {
    reconstruct_alternating(centers, init, cfg.side, &cfg.recon_config())
}

pub fn run_reconstruct_sparse(cfg: &PipelineConfig, centers: &[Projection], init: &[PoseEstimate]) -> Result<SparseReconResult> {
    reconstruct_sparse_baseline(centers, init, cfg.side, &cfg.sparse_config())
}

/// Scores a reconstruction and its poses against the simulation truth.
pub fn evaluate(
    object: &Image,
    recon: &Image,
    truth: &GroundTruth,
    clustering: &Clustering,
    poses: &[PoseEstimate],
) -> Result<(EvalReport, PoseAlignment)> {
    let reg = register_and_rmse(object, recon)?;
    let truth_poses = cluster_truth(truth, clustering);
    let align = align_poses(&truth_poses, poses)?;
    let metrics = outlier_metrics(&truth.labels, &clustering.discarded)?;
    let report = EvalReport {
        rmse: reg.rmse,
        offset_deg: reg.offset_deg,
        reflected: reg.reflected,
        median_angle_error_deg: align.median_angle_error(),
        mean_angle_error_deg: align.mean_angle_error(),
        mean_shift_error: align.mean_shift_error(),
        class1_recall: metrics.recall,
        class1_precision: metrics.precision,
        extra: Vec::new(),
    };
    Ok((report, align))
}

/// Every intermediate of an in-memory run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub object: Image,
    pub dataset: SimulatedDataset,
    pub cluster: ClusterStage,
    pub denoised: Vec<Projection>,
    pub init: PoseSolution,
    pub init_fbp: Image,
    pub recon: ReconResult,
    pub report: EvalReport,
    pub alignment: PoseAlignment,
}

pub fn run_all(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let object = object_image(cfg);
    let dataset = run_simulate(cfg, &object)?;
    let cluster = run_cluster(cfg, &dataset.projections)?;
    let denoised = run_denoise(cfg, &cluster.centers, dataset.sigma, cluster.clustering.mean_occupancy())?;
    let init = run_pose_init(cfg, &denoised)?;
    let init_fbp = weighted_fbp(&denoised, &init.poses, cfg.side, cfg.recon.filter, cfg.recon.weighting)?;
    let recon = run_reconstruct(cfg, &denoised, &init.poses)?;
    let (report, alignment) = evaluate(&object, &recon.image, &dataset.truth, &cluster.clustering, &recon.poses)?;
    Ok(PipelineRun {
        object,
        dataset,
        cluster,
        denoised,
        init,
        init_fbp,
        recon,
        report,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("noise_fraction", "0.5").unwrap();
        cfg.set("angle_distribution", "four-interval").unwrap();
        cfg.set("batch_size", "17").unwrap();
        let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("side", "abc").is_err());
        assert!(PipelineConfig::from_text("side=64\nq=2\n").is_err());
    }

    #[test]
    fn discard_fraction_follows_f1() {
        let cfg = PipelineConfig::default();
        assert!((cfg.discard_fraction() - 0.12).abs() < 1e-12);
    }
}
