use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--side",
    "32",
    "--num_projections",
    "400",
    "--clusters",
    "40",
    "--noise_fraction",
    "0.1",
    "--f1",
    "0.1",
    "--f2",
    "0.1",
    "--max_outer_iters",
    "10",
    "--sparse_outer_iters",
    "2",
];

const STAGES: &[&str] = &[
    "simulate",
    "cluster",
    "denoise",
    "pose-init",
    "reconstruct",
    "reconstruct-sparse",
    "evaluate",
];

const ARTIFACTS: &[&str] = &[
    "sinogram.csv",
    "truth.csv",
    "meta.txt",
    "clusters.csv",
    "centers.csv",
    "denoised.csv",
    "poses_init.csv",
    "moments.csv",
    "recon.pgm",
    "recon.scale.txt",
    "recon.csv",
    "poses_final.csv",
    "energy_trace.csv",
    "recon_sparse.csv",
    "poses_sparse.csv",
    "sparse.txt",
    "report.txt",
    "angle_scatter.csv",
];

fn uvt(stage: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvt"))
        .arg(stage)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("UVT_THREADS")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn error_line(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error ")).collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    lines[0].to_string()
}

fn report_value(dir: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(dir.join("report.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn denoise_without_clusters_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = uvt("denoise", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("kind=missing_artifact"));
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = uvt("simulate", dir.path(), &["--no_such_key", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).contains("kind=invalid_config"));

    let o = uvt("simulate", dir.path(), &["--noise_fraction", "-0.5"]);
    assert_eq!(o.status.code(), Some(3));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "side = banana\n").unwrap();
    let o = uvt("simulate", dir.path(), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("sinogram.csv").exists());
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small\nside = 24\nnum_projections = 50\nclusters = 10\n").unwrap();
    let o = uvt("simulate", dir.path(), &["--config", cfg.to_str().unwrap(), "--num-projections=60"]);
    ok(&o);
    let sino = fs::read_to_string(dir.path().join("sinogram.csv")).unwrap();
    assert_eq!(sino.lines().count(), 60);
    let meta = fs::read_to_string(dir.path().join("meta.txt")).unwrap();
    assert!(meta.lines().any(|l| l == "side=24"));
}

#[test]
fn all_matches_stagewise_runs_and_reruns_are_identical() {
    let whole = tempfile::tempdir().unwrap();
    ok(&uvt("all", whole.path(), SMALL));

    let staged = tempfile::tempdir().unwrap();
    for stage in STAGES {
        let mut args = SMALL.to_vec();
        if *stage == "simulate" {
            args.push("--emit-truth");
        }
        ok(&uvt(stage, staged.path(), &args));
    }
    for name in ARTIFACTS {
        let a = fs::read(whole.path().join(name)).unwrap();
        let b = fs::read(staged.path().join(name)).unwrap();
        assert!(a == b, "{name} differs between `all` and staged runs");
    }

    let before = fs::read(staged.path().join("recon.csv")).unwrap();
    ok(&uvt("reconstruct", staged.path(), SMALL));
    assert_eq!(before, fs::read(staged.path().join("recon.csv")).unwrap());

    let manifest = fs::read_to_string(whole.path().join("manifest.txt")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), STAGES.len());
    for (line, stage) in lines.iter().zip(STAGES) {
        assert!(line.starts_with(&format!("stage={stage} config_sha256=")));
        assert!(line.contains(" wall_ms="));
    }
    assert!(lines[1].contains("inputs=sinogram.csv:"));
}

#[test]
fn thread_count_does_not_change_results() {
    let one = tempfile::tempdir().unwrap();
    let mut args = SMALL.to_vec();
    args.extend(["--threads", "1"]);
    ok(&uvt("simulate", one.path(), &args));
    ok(&uvt("cluster", one.path(), &args));

    let many = tempfile::tempdir().unwrap();
    let mut args = SMALL.to_vec();
    args.extend(["--threads", "4"]);
    ok(&uvt("simulate", many.path(), &args));
    ok(&uvt("cluster", many.path(), &args));
    assert_eq!(
        fs::read(one.path().join("clusters.csv")).unwrap(),
        fs::read(many.path().join("clusters.csv")).unwrap()
    );
}

#[test]
fn clean_phantom_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    ok(&uvt("all", dir.path(), &["--noise_fraction", "0", "--f1", "0", "--f2", "0"]));
    let rmse = report_value(dir.path(), "rmse");
    assert!(rmse <= 0.10, "rmse {rmse}");
    let pgm = fs::read(dir.path().join("recon.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n65535\n"));
}
