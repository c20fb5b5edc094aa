//! Gauge-aware scoring against simulation ground truth.
//!
//! Reconstructions are only defined up to a global rotation, a reflection
//! and a translation. Every score here first removes those by a fit.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cluster::Clustering;
use crate::error::{Error, Result};
use crate::image::{Image, PoseEstimate};
use crate::simulate::{GroundTruth, Label};

// Keys cubic convolution kernel, a = -1/2.
fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Cubic-convolution sample at lattice coordinates; zero outside the grid.
pub fn sample_cubic(image: &Image, x: f64, y: f64) -> f64 {
    let o = image.origin();
    let (col, row) = (x + o, y + o);
    let (c0, r0) = (col.floor(), row.floor());
    let (fx, fy) = (col - c0, row - r0);
    let n = image.side() as isize;
    let (c0, r0) = (c0 as isize, r0 as isize);
    if c0 < -2 || r0 < -2 || c0 > n || r0 > n {
        return 0.0;
    }
    let wx = [keys(fx + 1.0), keys(fx), keys(1.0 - fx), keys(2.0 - fx)];
    let wy = [keys(fy + 1.0), keys(fy), keys(1.0 - fy), keys(2.0 - fy)];
    let px = image.pixels();
    let mut acc = 0.0;
    for (dr, wr) in wy.iter().enumerate() {
        let r = r0 + dr as isize - 1;
        if r < 0 || r >= n {
            continue;
        }
        for (dc, wc) in wx.iter().enumerate() {
            let c = c0 + dc as isize - 1;
            if c >= 0 && c < n {
                acc += wr * wc * px[(r * n + c) as usize];
            }
        }
    }
    acc
}

/// Rotates counterclockwise by `angle` radians about the image origin.
pub fn rotate_image(image: &Image, angle: f64) -> Image {
    if angle == 0.0 {
        return image.clone();
    }
    let (s, c) = angle.sin_cos();
    Image::from_fn(image.side(), |x, y| sample_cubic(image, x * c + y * s, -x * s + y * c))
}

/// Mirrors `x -> -x`.
pub fn flip_image(image: &Image) -> Image {
    Image::from_fn(image.side(), |x, y| sample_cubic(image, -x, y))
}

fn disk_mask(side: usize) -> Vec<bool> {
    let r = side as f64 / 2.0 - 0.5;
    let origin = (side as f64 - 1.0) / 2.0;
    (0..side * side)
        .map(|i| {
            let x = (i % side) as f64 - origin;
            let y = (i / side) as f64 - origin;
            x * x + y * y <= r * r
        })
        .collect()
}

fn masked_relative_error(truth: &Image, other: &Image, mask: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((a, b), &m) in truth.pixels().iter().zip(other.pixels()).zip(mask) {
        if m {
            num += (a - b) * (a - b);
            den += a * a;
        }
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    pub rmse: f64,
    /// Degrees; `recon ≈ rotate(flip?(truth), offset)`.
    pub offset_deg: f64,
    pub reflected: bool,
}

impl Registration {
    /// Applies the inverse transform to `recon`, bringing it onto the truth.
    pub fn align(&self, recon: &Image) -> Image {
        let r = rotate_image(recon, -self.offset_deg.to_radians());
        if self.reflected {
            flip_image(&r)
        } else {
            r
        }
    }
}

/// Relative error over the inscribed disk after the best rotation (0.5°
/// grid) and optional reflection of `recon`.
pub fn register_and_rmse(truth: &Image, recon: &Image) -> Result<Registration> {
    if truth.side() != recon.side() {
        return Err(Error::LengthMismatch {
            expected: truth.side(),
            actual: recon.side(),
        });
    }
    let mask = disk_mask(truth.side());
    let candidates: Vec<(usize, bool)> = (0..720).flat_map(|i| [(i, false), (i, true)]).collect();
    let scored: Vec<Registration> = candidates
        .par_iter()
        .map(|&(i, reflected)| {
            let reg = Registration {
                rmse: 0.0,
                offset_deg: i as f64 * 0.5,
                reflected,
            };
            Registration {
                rmse: masked_relative_error(truth, &reg.align(recon), &mask),
                ..reg
            }
        })
        .collect();
    // first minimum in grid order keeps the result deterministic
    Ok(scored
        .into_iter()
        .reduce(|best, r| if r.rmse < best.rmse { r } else { best })
        .expect("grid is non-empty"))
}

/// Distance between two directions modulo 180°.
pub fn circular_distance_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Reference pose of each cluster: doubled-angle circular mean of its
/// retained inlier members, with member shifts sign-corrected to that
/// direction before averaging. Falls back to all members when a cluster has
/// no retained inliers.
pub fn cluster_truth(truth: &GroundTruth, clustering: &Clustering) -> Vec<PoseEstimate> {
    let kc = clustering.num_clusters();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); kc];
    let mut fallback: Vec<Vec<usize>> = vec![Vec::new(); kc];
    for (j, &c) in clustering.assignments.iter().enumerate() {
        fallback[c].push(j);
        let discarded = clustering.discarded.get(j).copied().unwrap_or(false);
        if !discarded && truth.labels[j] != Label::Class1 {
            members[c].push(j);
        }
    }
    members
        .iter()
        .zip(&fallback)
        .map(|(m, f)| {
            let set = if m.is_empty() { f } else { m };
            if set.is_empty() {
                return PoseEstimate::new(0.0, 0.0);
            }
            let (sx, sy) = set.iter().fold((0.0, 0.0), |(sx, sy), &j| {
                let (s, c) = (2.0 * truth.angles[j]).sin_cos();
                (sx + c, sy + s)
            });
            let mean = (sy.atan2(sx) / 2.0).rem_euclid(PI);
            let shift = set
                .iter()
                .map(|&j| {
                    // same direction, or the opposite one with reversed bins
                    let d = (truth.angles[j] - mean).rem_euclid(2.0 * PI);
                    let same = d < PI / 2.0 || d > 1.5 * PI;
                    if same {
                        truth.shifts[j]
                    } else {
                        -truth.shifts[j]
                    }
                })
                .sum::<f64>()
                / set.len() as f64;
            PoseEstimate::new(mean, shift)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseAlignment {
    /// Degrees; `estimated ≈ ±true + offset (mod 180)`.
    pub offset_deg: f64,
    pub reflected: bool,
    pub angle_errors_deg: Vec<f64>,
    pub shift_errors: Vec<f64>,
    /// Fitted global translation `(a, b)` in bins.
    pub translation: (f64, f64),
}

impl PoseAlignment {
    pub fn median_angle_error(&self) -> f64 {
        median(&self.angle_errors_deg)
    }

    pub fn mean_angle_error(&self) -> f64 {
        mean(&self.angle_errors_deg)
    }

    pub fn mean_shift_error(&self) -> f64 {
        mean(&self.shift_errors.iter().map(|e| e.abs()).collect::<Vec<_>>())
    }

    /// `true` pose mapped into the estimate's gauge, in degrees.
    pub fn map_angle_deg(&self, true_deg: f64) -> f64 {
        let sign = if self.reflected { -1.0 } else { 1.0 };
        (sign * true_deg + self.offset_deg).rem_euclid(180.0)
    }

    /// Inverse of [`Self::map_angle_deg`]: an estimate in the truth's gauge.
    pub fn unmap_angle_deg(&self, estimated_deg: f64) -> f64 {
        let sign = if self.reflected { -1.0 } else { 1.0 };
        (sign * (estimated_deg - self.offset_deg)).rem_euclid(180.0)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Fits the global offset and reflection minimizing the summed circular
/// angle error, then the global translation absorbing shift differences.
pub fn align_poses(truth: &[PoseEstimate], estimated: &[PoseEstimate]) -> Result<PoseAlignment> {
    if truth.len() != estimated.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: estimated.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("poses"));
    }
    let t: Vec<f64> = truth.iter().map(|p| p.angle_degrees()).collect();
    let e: Vec<f64> = estimated.iter().map(|p| p.angle_degrees()).collect();
    let cost = |sign: f64, delta: f64| -> f64 {
        t.iter()
            .zip(&e)
            .map(|(ti, ei)| circular_distance_deg(*ei, sign * ti + delta))
            .sum()
    };
    // the optimum of a sum of circular absolute deviations sits at a data point
    let mut best = (f64::INFINITY, 0.0, false);
    for reflected in [false, true] {
        let sign = if reflected { -1.0 } else { 1.0 };
        for (ti, ei) in t.iter().zip(&e) {
            let delta = (ei - sign * ti).rem_euclid(180.0);
            let c = cost(sign, delta);
            if c < best.0 - 1e-12 {
                best = (c, delta, reflected);
            }
        }
    }
    let (_, offset_deg, reflected) = best;
    let sign = if reflected { -1.0 } else { 1.0 };
    let angle_errors_deg: Vec<f64> = t
        .iter()
        .zip(&e)
        .map(|(ti, ei)| circular_distance_deg(*ei, sign * ti + offset_deg))
        .collect();

    // The offset is only known mod 180; both lifts to 360 are tried since
    // they disagree on which views arrive reversed.
    let mut shift_fit: Option<(f64, Vec<f64>, (f64, f64))> = None;
    for lift in [0.0, 180.0] {
        let (residuals, dirs): (Vec<f64>, Vec<f64>) = truth
            .iter()
            .zip(estimated)
            .map(|(tp, ep)| {
                let raw = sign * tp.angle_degrees() + offset_deg + lift;
                // representative of the estimate nearest the mapped direction
                let ed = ep.angle_degrees();
                let m = ((raw - ed) / 180.0).round();
                let psi = ed + 180.0 * m;
                let es = if (m as i64) % 2 == 0 { ep.shift } else { -ep.shift };
                (es - tp.shift, psi.to_radians())
            })
            .unzip();
        let (ab, errs) = fit_translation(&residuals, &dirs);
        let sse: f64 = errs.iter().map(|x| x * x).sum();
        if shift_fit.as_ref().is_none_or(|(best, _, _)| sse < *best) {
            shift_fit = Some((sse, errs, ab));
        }
    }
    let (_, shift_errors, translation) = shift_fit.expect("two candidates tried");
    Ok(PoseAlignment {
        offset_deg,
        reflected,
        angle_errors_deg,
        shift_errors,
        translation,
    })
}

/// Least-squares `r ≈ a cos(psi) + b sin(psi)`; returns `(a, b)` and the
/// residuals.
fn fit_translation(r: &[f64], psi: &[f64]) -> ((f64, f64), Vec<f64>) {
    let (mut scc, mut scs, mut sss, mut rc, mut rs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&ri, &p) in r.iter().zip(psi) {
        let (s, c) = p.sin_cos();
        scc += c * c;
        scs += c * s;
        sss += s * s;
        rc += ri * c;
        rs += ri * s;
    }
    let det = scc * sss - scs * scs;
    let (a, b) = if det.abs() > 1e-12 * (scc + sss).max(1.0) {
        ((rc * sss - rs * scs) / det, (rs * scc - rc * scs) / det)
    } else if scc + sss > 0.0 {
        // all directions parallel: one component identifiable
        let n = scc + sss;
        (rc / n, rs / n)
    } else {
        (0.0, 0.0)
    };
    let errs = r
        .iter()
        .zip(psi)
        .map(|(&ri, &p)| ri - a * p.cos() - b * p.sin())
        .collect();
    ((a, b), errs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierMetrics {
    pub recall: f64,
    pub precision: f64,
}

/// Recall and precision of `discarded` as a class-1 detector. Recall is 1
/// when there are no class-1 projections; precision is 1 when nothing was
/// discarded.
pub fn outlier_metrics(labels: &[Label], discarded: &[bool]) -> Result<OutlierMetrics> {
    if labels.len() != discarded.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: discarded.len(),
        });
    }
    let class1 = labels.iter().filter(|&&l| l == Label::Class1).count();
    let flagged = discarded.iter().filter(|&&d| d).count();
    let hits = labels
        .iter()
        .zip(discarded)
        .filter(|(&l, &d)| d && l == Label::Class1)
        .count();
    Ok(OutlierMetrics {
        recall: if class1 == 0 { 1.0 } else { hits as f64 / class1 as f64 },
        precision: if flagged == 0 { 1.0 } else { hits as f64 / flagged as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rmse: f64,
    pub offset_deg: f64,
    pub reflected: bool,
    pub median_angle_error_deg: f64,
    pub mean_angle_error_deg: f64,
    pub mean_shift_error: f64,
    pub class1_recall: f64,
    pub class1_precision: f64,
    pub extra: Vec<(String, String)>,
}

impl EvalReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rmse={}", self.rmse);
        let _ = writeln!(s, "offset_deg={}", self.offset_deg);
        let _ = writeln!(s, "reflected={}", self.reflected);
        let _ = writeln!(s, "median_angle_error_deg={}", self.median_angle_error_deg);
        let _ = writeln!(s, "mean_angle_error_deg={}", self.mean_angle_error_deg);
        let _ = writeln!(s, "mean_shift_error={}", self.mean_shift_error);
        let _ = writeln!(s, "class1_recall={}", self.class1_recall);
        let _ = writeln!(s, "class1_precision={}", self.class1_precision);
        let _ = writeln!(s, "rmse_region=inscribed_disk");
        for (k, v) in &self.extra {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{head_phantom, head_phantom_rotated};

    #[test]
    fn identity_registration() {
        let z = head_phantom(32);
        let r = register_and_rmse(&z, &z).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.offset_deg, 0.0);
        assert!(!r.reflected);
    }

    #[test]
    fn zero_recon_has_unit_error() {
        let z = head_phantom(32);
        assert_eq!(register_and_rmse(&z, &Image::zeros(32)).unwrap().rmse, 1.0);
    }

    #[test]
    fn rotated_recon_registers() {
        let z = head_phantom(64);
        let r = register_and_rmse(&z, &head_phantom_rotated(64, 30.0)).unwrap();
        assert!(r.rmse < 0.02, "{r:?}");
        assert!((r.offset_deg - 30.0).abs() <= 0.5);
        assert!(!r.reflected);
    }

    #[test]
    fn flipped_recon_registers_as_reflection() {
        let z = head_phantom(32);
        let r = register_and_rmse(&z, &flip_image(&z)).unwrap();
        assert!(r.reflected);
        assert!(r.rmse < 1e-12);
    }

    #[test]
    fn rotation_matches_analytic_rotation() {
        let a = rotate_image(&head_phantom(64), 30f64.to_radians());
        let b = head_phantom_rotated(64, 30.0);
        let mask = disk_mask(64);
        assert!(masked_relative_error(&b, &a, &mask) < 0.02);
    }

    #[test]
    fn size_mismatch() {
        assert!(register_and_rmse(&Image::zeros(8), &Image::zeros(9)).is_err());
    }

    #[test]
    fn pure_offset_poses() {
        let t: Vec<PoseEstimate> = (0..12).map(|i| PoseEstimate::from_degrees(i as f64 * 15.0, 0.0)).collect();
        let e: Vec<PoseEstimate> = t
            .iter()
            .map(|p| PoseEstimate::from_degrees(p.angle_degrees() + 17.0, 0.0))
            .collect();
        let a = align_poses(&t, &e).unwrap();
        assert!((a.offset_deg - 17.0).abs() < 1e-9);
        assert!(!a.reflected);
        assert!(a.angle_errors_deg.iter().all(|&x| x < 1e-9));
    }

    #[test]
    fn pure_reflection_poses() {
        let t: Vec<PoseEstimate> = [10.0, 40.0, 75.0, 120.0, 160.0]
            .iter()
            .map(|&d| PoseEstimate::from_degrees(d, 0.0))
            .collect();
        let e: Vec<PoseEstimate> = t
            .iter()
            .map(|p| PoseEstimate::from_degrees(180.0 - p.angle_degrees(), 0.0))
            .collect();
        let a = align_poses(&t, &e).unwrap();
        assert!(a.reflected);
        assert!(a.angle_errors_deg.iter().all(|&x| x < 1e-9));
    }

    #[test]
    fn translation_gauge_removed_from_shifts() {
        // true shifts s, estimates s + a cos + b sin with folding across 180
        let (a, b) = (0.7, -1.1);
        let delta = 50.0;
        let mut t = Vec::new();
        let mut e = Vec::new();
        for i in 0..20 {
            let deg = i as f64 * 9.0;
            let s = (i as f64 * 0.37).sin();
            t.push(PoseEstimate::from_degrees(deg, s));
            let psi = (deg + delta).to_radians();
            e.push(PoseEstimate::new(psi, s + a * psi.cos() + b * psi.sin()));
        }
        let al = align_poses(&t, &e).unwrap();
        assert!(al.mean_shift_error() < 1e-9, "{al:?}");
    }

    #[test]
    fn metrics_conventions() {
        use Label::*;
        let labels = [Inlier, Class1, Class1, Class2];
        let perfect = outlier_metrics(&labels, &[false, true, true, false]).unwrap();
        assert_eq!((perfect.recall, perfect.precision), (1.0, 1.0));
        let none = outlier_metrics(&labels, &[false; 4]).unwrap();
        assert_eq!((none.recall, none.precision), (0.0, 1.0));
        let half = outlier_metrics(&labels, &[true, true, false, false]).unwrap();
        assert_eq!((half.recall, half.precision), (0.5, 0.5));
    }

    #[test]
    fn report_lines() {
        let r = EvalReport {
            rmse: 0.25,
            ..Default::default()
        };
        assert!(r.to_key_value().starts_with("rmse=0.25\n"));
    }
}
