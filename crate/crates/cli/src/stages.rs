use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use uvt_core::cluster::Clustering;
use uvt_core::eval::register_and_rmse;
use uvt_core::io;
use uvt_core::pipeline::{self, PipelineConfig};
use uvt_core::reconstruct::weighted_fbp;
use uvt_core::{Error, Result};

use crate::Stage;

pub struct Context {
    pub cfg: PipelineConfig,
    pub dir: PathBuf,
    pub emit_truth: bool,
}

const SINOGRAM: &str = "sinogram.csv";
const TRUTH: &str = "truth.csv";
const META: &str = "meta.txt";
const CLUSTERS: &str = "clusters.csv";
const CENTERS: &str = "centers.csv";
const DENOISED: &str = "denoised.csv";
const POSES_INIT: &str = "poses_init.csv";
const MOMENTS: &str = "moments.csv";
const RECON_PGM: &str = "recon.pgm";
const RECON_CSV: &str = "recon.csv";
const POSES_FINAL: &str = "poses_final.csv";
const ENERGY: &str = "energy_trace.csv";
const SPARSE_PGM: &str = "recon_sparse.pgm";
const SPARSE_CSV: &str = "recon_sparse.csv";
const POSES_SPARSE: &str = "poses_sparse.csv";
const SPARSE_META: &str = "sparse.txt";
const REPORT: &str = "report.txt";
const SCATTER: &str = "angle_scatter.csv";
const MANIFEST: &str = "manifest.txt";

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        names.iter().try_for_each(|n| io::require(&self.path(n)))
    }
}

pub fn run(ctx: &Context, stage: Stage) -> Result<()> {
    match stage {
        Stage::All => {
            for s in [
                Stage::Simulate,
                Stage::Cluster,
                Stage::Denoise,
                Stage::PoseInit,
                Stage::Reconstruct,
                Stage::ReconstructSparse,
                Stage::Evaluate,
            ] {
                run_one(ctx, s, true)?;
            }
            Ok(())
        }
        s => run_one(ctx, s, ctx.emit_truth),
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Simulate => "simulate",
        Stage::Cluster => "cluster",
        Stage::Denoise => "denoise",
        Stage::PoseInit => "pose-init",
        Stage::Reconstruct => "reconstruct",
        Stage::ReconstructSparse => "reconstruct-sparse",
        Stage::Evaluate => "evaluate",
        Stage::All => "all",
    }
}

fn run_one(ctx: &Context, stage: Stage, emit_truth: bool) -> Result<()> {
    let start = Instant::now();
    let (inputs, outputs) = match stage {
        Stage::Simulate => simulate(ctx, emit_truth)?,
        Stage::Cluster => cluster(ctx)?,
        Stage::Denoise => denoise(ctx)?,
        Stage::PoseInit => pose_init(ctx)?,
        Stage::Reconstruct => reconstruct(ctx)?,
        Stage::ReconstructSparse => reconstruct_sparse(ctx)?,
        Stage::Evaluate => evaluate(ctx)?,
        Stage::All => unreachable!("expanded by run"),
    };
    record(ctx, stage, &inputs, &outputs, start.elapsed().as_millis())
}

type Files = (Vec<&'static str>, Vec<&'static str>);

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn record(ctx: &Context, stage: Stage, inputs: &[&str], outputs: &[&str], wall_ms: u128) -> Result<()> {
    let mut line = format!("stage={}", stage_name(stage));
    let _ = write!(line, " config_sha256={}", hex::encode(Sha256::digest(ctx.cfg.to_text())));
    for (label, names) in [("inputs", inputs), ("outputs", outputs)] {
        let mut parts = Vec::new();
        for n in names {
            parts.push(format!("{n}:{}", sha256_file(&ctx.path(n))?));
        }
        let _ = write!(line, " {label}={}", parts.join(","));
    }
    let _ = writeln!(line, " wall_ms={wall_ms}");
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(ctx.path(MANIFEST))?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

fn meta_value(ctx: &Context, key: &str) -> Result<f64> {
    let kv = io::read_key_values(&ctx.path(META))?;
    kv.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("{META} has no numeric '{key}'")))
}

fn simulate(ctx: &Context, emit_truth: bool) -> Result<Files> {
    let object = pipeline::object_image(&ctx.cfg);
    let ds = pipeline::run_simulate(&ctx.cfg, &object)?;
    io::write_projections(&ctx.path(SINOGRAM), &ds.projections)?;
    let mut meta: Vec<(String, String)> = ctx.cfg.to_map().into_iter().collect();
    meta.push(("sigma".into(), ds.sigma.to_string()));
    meta.push(("mean_projection_value".into(), ds.mean_projection_value.to_string()));
    meta.push(("outlier_images".into(), "random_ellipses".into()));
    meta.push(("outlier_images_rescaled".into(), ds.pool_rescaled.to_string()));
    io::write_key_values(&ctx.path(META), &meta)?;
    let mut outputs = vec![SINOGRAM, META];
    if emit_truth {
        io::write_truth(&ctx.path(TRUTH), &ds.truth)?;
        outputs.push(TRUTH);
    }
    Ok((vec![], outputs))
}

fn cluster(ctx: &Context) -> Result<Files> {
    ctx.require(&[SINOGRAM])?;
    let projections = io::read_projections(&ctx.path(SINOGRAM))?;
    let stage = pipeline::run_cluster(&ctx.cfg, &projections)?;
    io::write_clusters(&ctx.path(CLUSTERS), &stage.clustering)?;
    io::write_projections(&ctx.path(CENTERS), &stage.centers)?;
    Ok((vec![SINOGRAM], vec![CLUSTERS, CENTERS]))
}

/// The clustering as far as later stages need it: assignments, discard
/// flags and the number of clusters.
fn load_clustering(ctx: &Context) -> Result<Clustering> {
    let centers = io::read_projections(&ctx.path(CENTERS))?;
    let (assignments, discarded) = io::read_clusters(&ctx.path(CLUSTERS))?;
    if let Some(&a) = assignments.iter().find(|&&a| a >= centers.len()) {
        return Err(Error::Parse(format!("{CLUSTERS} refers to cluster {a} of {}", centers.len())));
    }
    Ok(Clustering {
        assignments,
        centroids: centers,
        discarded,
        q: ctx.cfg.kmeans.q,
        discard_fraction: ctx.cfg.discard_fraction(),
        objective_trace: Vec::new(),
    })
}

fn denoise(ctx: &Context) -> Result<Files> {
    ctx.require(&[CENTERS, CLUSTERS, META])?;
    let clustering = load_clustering(ctx)?;
    let sigma = meta_value(ctx, "sigma")?;
    let denoised = pipeline::run_denoise(&ctx.cfg, &clustering.centroids, sigma, clustering.mean_occupancy())?;
    io::write_projections(&ctx.path(DENOISED), &denoised)?;
    Ok((vec![CENTERS, CLUSTERS, META], vec![DENOISED]))
}

fn pose_init(ctx: &Context) -> Result<Files> {
    ctx.require(&[DENOISED])?;
    let denoised = io::read_projections(&ctx.path(DENOISED))?;
    let sol = pipeline::run_pose_init(&ctx.cfg, &denoised)?;
    io::write_poses(&ctx.path(POSES_INIT), &sol.poses)?;
    io::write_matrix(&ctx.path(MOMENTS), sol.moments.orders())?;
    Ok((vec![DENOISED], vec![POSES_INIT, MOMENTS]))
}

fn reconstruct(ctx: &Context) -> Result<Files> {
    ctx.require(&[DENOISED, POSES_INIT])?;
    let denoised = io::read_projections(&ctx.path(DENOISED))?;
    let init = io::read_poses(&ctx.path(POSES_INIT))?;
    let rec = pipeline::run_reconstruct(&ctx.cfg, &denoised, &init)?;
    io::write_pgm(&ctx.path(RECON_PGM), &rec.image)?;
    io::write_image_csv(&ctx.path(RECON_CSV), &rec.image)?;
    io::write_poses(&ctx.path(POSES_FINAL), &rec.poses)?;
    let mut trace = String::from("iteration,energy,best\n");
    for (i, e) in rec.energy_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{e},{}", u8::from(i == rec.best_iteration));
    }
    fs::write(ctx.path(ENERGY), trace)?;
    Ok((vec![DENOISED, POSES_INIT], vec![RECON_PGM, RECON_CSV, POSES_FINAL, ENERGY]))
}

fn reconstruct_sparse(ctx: &Context) -> Result<Files> {
    ctx.require(&[DENOISED, POSES_INIT])?;
    let denoised = io::read_projections(&ctx.path(DENOISED))?;
    let init = io::read_poses(&ctx.path(POSES_INIT))?;
    let rec = pipeline::run_reconstruct_sparse(&ctx.cfg, &denoised, &init)?;
    io::write_pgm(&ctx.path(SPARSE_PGM), &rec.image)?;
    io::write_image_csv(&ctx.path(SPARSE_CSV), &rec.image)?;
    io::write_poses(&ctx.path(POSES_SPARSE), &rec.poses)?;
    io::write_key_values(
        &ctx.path(SPARSE_META),
        &[("lambda", rec.lambda.to_string()), ("warning", rec.warning.to_string())],
    )?;
    Ok((
        vec![DENOISED, POSES_INIT],
        vec![SPARSE_PGM, SPARSE_CSV, POSES_SPARSE, SPARSE_META],
    ))
}

fn evaluate(ctx: &Context) -> Result<Files> {
    ctx.require(&[RECON_CSV, POSES_FINAL, CLUSTERS, CENTERS, TRUTH])?;
    let object = pipeline::object_image(&ctx.cfg);
    let recon = io::read_image_csv(&ctx.path(RECON_CSV))?;
    let poses = io::read_poses(&ctx.path(POSES_FINAL))?;
    let truth = io::read_truth(&ctx.path(TRUTH))?;
    let clustering = load_clustering(ctx)?;
    let (mut report, alignment) = pipeline::evaluate(&object, &recon, &truth, &clustering, &poses)?;
    let mut inputs = vec![RECON_CSV, POSES_FINAL, CLUSTERS, CENTERS, TRUTH];

    if ctx.path(POSES_INIT).is_file() && ctx.path(DENOISED).is_file() {
        let init = io::read_poses(&ctx.path(POSES_INIT))?;
        let denoised = io::read_projections(&ctx.path(DENOISED))?;
        let fbp = weighted_fbp(&denoised, &init, ctx.cfg.side, ctx.cfg.recon.filter, ctx.cfg.recon.weighting)?;
        report.extra.push(("rmse_fbp_init".into(), register_and_rmse(&object, &fbp)?.rmse.to_string()));
        let truth_poses = uvt_core::eval::cluster_truth(&truth, &clustering);
        let a = uvt_core::eval::align_poses(&truth_poses, &init)?;
        report.extra.push(("init_median_angle_error_deg".into(), a.median_angle_error().to_string()));
        inputs.extend([POSES_INIT, DENOISED]);
    }
    if ctx.path(SPARSE_CSV).is_file() {
        let sparse = io::read_image_csv(&ctx.path(SPARSE_CSV))?;
        report.extra.push(("rmse_sparse".into(), register_and_rmse(&object, &sparse)?.rmse.to_string()));
        inputs.push(SPARSE_CSV);
    }
    fs::write(ctx.path(REPORT), report.to_key_value())?;

    let truth_poses = uvt_core::eval::cluster_truth(&truth, &clustering);
    let mut scatter = String::from("true_deg,estimated_deg,aligned_deg\n");
    for (t, e) in truth_poses.iter().zip(&poses) {
        let est = e.angle_degrees();
        let _ = writeln!(scatter, "{},{},{}", t.angle_degrees(), est, alignment.unmap_angle_deg(est));
    }
    fs::write(ctx.path(SCATTER), scatter)?;
    Ok((inputs, vec![REPORT, SCATTER]))
}
