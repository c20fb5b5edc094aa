//! Corrupted projection datasets: random view angles, foreign-object
//! outliers (class 1), pixel-dropped copies of the object (class 2), random
//! detector shifts and additive Gaussian noise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{detector_len, Image, Projection};
use crate::radon::{radon_forward, shift_projection};

// Independent RNG streams derived from the one configured seed.
const STREAM_ANGLES: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_SHIFTS: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum AngleDistribution {
    /// Uniform over `[0, pi)`.
    Uniform,
    /// Uniform over a union of intervals (radians); each draw picks an
    /// interval with probability proportional to its length.
    Union(Vec<(f64, f64)>),
}

impl AngleDistribution {
    /// `U(0, pi/9) ∪ U(2pi/9, pi/3) ∪ U(4pi/9, 2pi/3) ∪ U(7pi/9, 8pi/9)`.
    pub fn four_interval() -> Self {
        AngleDistribution::Union(vec![
            (0.0, PI / 9.0),
            (2.0 * PI / 9.0, PI / 3.0),
            (4.0 * PI / 9.0, 2.0 * PI / 3.0),
            (7.0 * PI / 9.0, 8.0 * PI / 9.0),
        ])
    }

    fn intervals(&self) -> Vec<(f64, f64)> {
        match self {
            AngleDistribution::Uniform => vec![(0.0, PI)],
            AngleDistribution::Union(v) => v.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let iv = self.intervals();
        if iv.is_empty() {
            return Err(Error::InvalidConfig("angle distribution has no intervals".into()));
        }
        for &(a, b) in &iv {
            if !(a.is_finite() && b.is_finite() && 0.0 <= a && a <= b && b <= PI) {
                return Err(Error::InvalidConfig(format!(
                    "angle interval ({a}, {b}) is not inside [0, pi)"
                )));
            }
        }
        Ok(())
    }

    /// True when `angle` lies in the support, allowing `tolerance` radians.
    pub fn contains(&self, angle: f64, tolerance: f64) -> bool {
        let a = angle.rem_euclid(PI);
        self.intervals().iter().any(|&(lo, hi)| {
            let inside = |x: f64| x >= lo - tolerance && x <= hi + tolerance;
            inside(a) || inside(a + PI) || inside(a - PI)
        })
    }
}

impl FromStr for AngleDistribution {
    type Err = Error;

    /// `uniform`, `four-interval`, or `union:lo-hi,lo-hi,...` in degrees.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "uniform" => return Ok(AngleDistribution::Uniform),
            "four-interval" => return Ok(AngleDistribution::four_interval()),
            _ => {}
        }
        let body = s
            .strip_prefix("union:")
            .ok_or_else(|| Error::Parse(format!("unknown angle distribution '{s}'")))?;
        let mut intervals = Vec::new();
        for part in body.split(',') {
            let (lo, hi) = part
                .split_once('-')
                .ok_or_else(|| Error::Parse(format!("bad interval '{part}'")))?;
            let lo: f64 = lo.trim().parse().map_err(|_| Error::Parse(format!("bad bound '{lo}'")))?;
            let hi: f64 = hi.trim().parse().map_err(|_| Error::Parse(format!("bad bound '{hi}'")))?;
            intervals.push((lo.to_radians(), hi.to_radians()));
        }
        Ok(AngleDistribution::Union(intervals))
    }
}

impl fmt::Display for AngleDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AngleDistribution::Uniform => f.write_str("uniform"),
            AngleDistribution::Union(v) => {
                f.write_str("union:")?;
                for (i, (lo, hi)) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{}-{}", lo.to_degrees(), hi.to_degrees())?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub num_projections: usize,
    pub angle_distribution: AngleDistribution,
    /// Noise std as a fraction of the mean noiseless projection value.
    pub noise_fraction: f64,
    /// Fraction of class-1 outliers.
    pub f1: f64,
    /// Fraction of class-2 outliers.
    pub f2: f64,
    /// Fraction of pixels zeroed in the class-2 source image.
    pub f3: f64,
    pub shift_bound: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            num_projections: 20_000,
            angle_distribution: AngleDistribution::Uniform,
            noise_fraction: 0.1,
            f1: 0.1,
            f2: 0.1,
            f3: 0.1,
            shift_bound: 0.0,
            seed: 1,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_projections == 0 {
            return bad("num_projections must be positive".into());
        }
        for (name, v) in [("f1", self.f1), ("f2", self.f2), ("f3", self.f3)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.f1 + self.f2 > 1.0 {
            return bad(format!("f1 + f2 = {} exceeds 1", self.f1 + self.f2));
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return bad(format!("noise_fraction = {} must be >= 0", self.noise_fraction));
        }
        if !(self.shift_bound >= 0.0 && self.shift_bound.is_finite()) {
            return bad(format!("shift_bound = {} must be >= 0", self.shift_bound));
        }
        self.angle_distribution.validate()
    }

    pub fn class1_count(&self) -> usize {
        (self.f1 * self.num_projections as f64).floor() as usize
    }

    pub fn class2_count(&self) -> usize {
        (self.f2 * self.num_projections as f64).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Inlier,
    Class1,
    Class2,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Inlier => "inlier",
            Label::Class1 => "class1",
            Label::Class2 => "class2",
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inlier" => Ok(Label::Inlier),
            "class1" => Ok(Label::Class1),
            "class2" => Ok(Label::Class2),
            other => Err(Error::Parse(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Object,
    CorruptedObject,
    Pool(usize),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Object => f.write_str("object"),
            Source::CorruptedObject => f.write_str("corrupted"),
            Source::Pool(i) => write!(f, "pool:{i}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Source::Object),
            "corrupted" => Ok(Source::CorruptedObject),
            other => other
                .strip_prefix("pool:")
                .and_then(|i| i.parse().ok())
                .map(Source::Pool)
                .ok_or_else(|| Error::Parse(format!("unknown source '{other}'"))),
        }
    }
}

/// Hidden per-projection metadata; only evaluation may read it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub angles: Vec<f64>,
    pub shifts: Vec<f64>,
    pub labels: Vec<Label>,
    pub sources: Vec<Source>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub side: usize,
    pub projections: Vec<Projection>,
    pub truth: GroundTruth,
    /// Mean over all bins of the noiseless inlier projections.
    pub mean_projection_value: f64,
    /// Per-bin noise standard deviation actually used.
    pub sigma: f64,
    /// Whether any pool image had to be rescaled to the object's side.
    pub pool_rescaled: bool,
}

/// `Q` i.i.d. view angles from the configured distribution.
pub fn sample_angles(config: &SimulationConfig) -> Result<Vec<f64>> {
    config.angle_distribution.validate()?;
    let intervals = config.angle_distribution.intervals();
    let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    let mut rng = stream(config.seed, STREAM_ANGLES);
    let angles = (0..config.num_projections)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut pick = intervals[intervals.len() - 1];
            for &(a, b) in &intervals {
                if u < b - a {
                    pick = (a, b);
                    break;
                }
                u -= b - a;
            }
            let (a, b) = pick;
            if total == 0.0 {
                a
            } else {
                (a + u.clamp(0.0, b - a)).min(b).rem_euclid(PI)
            }
        })
        .collect();
    Ok(angles)
}

/// Simulates `Q` projections of `object` with outliers, shifts and noise.
pub fn make_dataset(object: &Image, outlier_pool: &[Image], config: &SimulationConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let q = config.num_projections;
    let n1 = config.class1_count();
    let n2 = config.class2_count();
    if n1 > 0 && outlier_pool.is_empty() {
        return Err(Error::InvalidConfig("class-1 outliers requested but the outlier pool is empty".into()));
    }
    let side = object.side();
    let angles = sample_angles(config)?;

    let mut label_rng = stream(config.seed, STREAM_LABELS);
    let mut labels = vec![Label::Inlier; q];
    let mut order: Vec<usize> = (0..q).collect();
    order.shuffle(&mut label_rng);
    for &i in &order[..n1] {
        labels[i] = Label::Class1;
    }
    for &i in &order[n1..n1 + n2] {
        labels[i] = Label::Class2;
    }

    let corrupted = if n2 > 0 {
        let mut img = object.clone();
        let drop = (config.f3 * (side * side) as f64).floor() as usize;
        for p in index::sample(&mut label_rng, side * side, drop) {
            img.pixels_mut()[p] = 0.0;
        }
        Some(img)
    } else {
        None
    };

    let pool_rescaled = outlier_pool.iter().any(|img| img.side() != side);
    let pool: Vec<Image> = outlier_pool.iter().map(|img| img.resized(side)).collect();

    let sources: Vec<Source> = labels
        .iter()
        .map(|l| match l {
            Label::Inlier => Source::Object,
            Label::Class2 => Source::CorruptedObject,
            Label::Class1 => Source::Pool(label_rng.random_range(0..pool.len())),
        })
        .collect();

    let mut shift_rng = stream(config.seed, STREAM_SHIFTS);
    let shifts: Vec<f64> = (0..q)
        .map(|_| {
            if config.shift_bound > 0.0 {
                shift_rng.random_range(-config.shift_bound..=config.shift_bound)
            } else {
                0.0
            }
        })
        .collect();

    let clean: Vec<Projection> = (0..q)
        .into_par_iter()
        .map(|i| {
            let src = match sources[i] {
                Source::Object => object,
                Source::CorruptedObject => corrupted.as_ref().expect("class-2 source exists"),
                Source::Pool(k) => &pool[k],
            };
            shift_projection(&radon_forward(src, angles[i]), shifts[i])
        })
        .collect();

    let len = detector_len(side);
    let inlier_mean = |filter: &dyn Fn(Label) -> bool| {
        let (sum, count) = clean
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| filter(l))
            .fold((0.0, 0usize), |(s, c), (p, _)| (s + p.sum(), c + len));
        if count == 0 {
            None
        } else {
            Some(sum / count as f64)
        }
    };
    let mean_projection_value = inlier_mean(&|l| l == Label::Inlier)
        .or_else(|| inlier_mean(&|_| true))
        .unwrap_or(0.0);
    let sigma = config.noise_fraction * mean_projection_value;

    let projections = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut noise_rng = stream(config.seed, STREAM_NOISE);
        clean
            .into_iter()
            .map(|p| {
                let bins = p.into_bins().into_iter().map(|v| v + normal.sample(&mut noise_rng)).collect();
                Projection::from_vec_unchecked(bins)
            })
            .collect()
    } else {
        clean
    };

    Ok(SimulatedDataset {
        side,
        projections,
        truth: GroundTruth {
            angles,
            shifts,
            labels,
            sources,
        },
        mean_projection_value,
        sigma,
        pool_rescaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{head_phantom, outlier_pool};

    fn cfg(q: usize) -> SimulationConfig {
        SimulationConfig {
            num_projections: q,
            noise_fraction: 0.0,
            f1: 0.0,
            f2: 0.0,
            f3: 0.0,
            shift_bound: 0.0,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_angles_fill_histogram_evenly() {
        let c = SimulationConfig {
            num_projections: 10_000,
            ..cfg(0)
        };
        let angles = sample_angles(&c).unwrap();
        let mut hist = [0usize; 18];
        for a in &angles {
            assert!((0.0..PI).contains(a));
            hist[((a / PI) * 18.0) as usize] += 1;
        }
        let p: f64 = 1.0 / 18.0;
        let mean = 10_000.0 * p;
        let sd = (10_000.0 * p * (1.0 - p)).sqrt();
        for h in hist {
            assert!((h as f64 - mean).abs() < 3.0 * sd, "bin count {h}");
        }
    }

    #[test]
    fn four_interval_union_leaves_gaps_empty() {
        let c = SimulationConfig {
            num_projections: 5_000,
            angle_distribution: AngleDistribution::four_interval(),
            ..cfg(0)
        };
        let angles = sample_angles(&c).unwrap();
        assert!(angles.iter().all(|&a| !(a > PI / 9.0 && a < 2.0 * PI / 9.0)));
        assert!(angles.iter().all(|&a| c.angle_distribution.contains(a, 0.0)));
        assert_eq!(angles, sample_angles(&c).unwrap());
    }

    #[test]
    fn empty_union_is_an_error() {
        let c = SimulationConfig {
            angle_distribution: AngleDistribution::Union(vec![]),
            ..cfg(10)
        };
        assert!(sample_angles(&c).is_err());
    }

    #[test]
    fn distribution_round_trips_through_text() {
        let d: AngleDistribution = "union:0-20,40-60".parse().unwrap();
        assert!(d.contains(10f64.to_radians(), 0.0));
        assert!(!d.contains(30f64.to_radians(), 0.0));
        let again: AngleDistribution = d.to_string().parse().unwrap();
        assert!(again.contains(50f64.to_radians(), 1e-9));
        assert_eq!("uniform".parse::<AngleDistribution>().unwrap(), AngleDistribution::Uniform);
    }

    #[test]
    fn uncorrupted_dataset_equals_forward_projection() {
        let obj = head_phantom(16);
        let ds = make_dataset(&obj, &[], &cfg(20)).unwrap();
        for (p, &a) in ds.projections.iter().zip(&ds.truth.angles) {
            assert_eq!(p, &radon_forward(&obj, a));
        }
        assert_eq!(ds.sigma, 0.0);
    }

    #[test]
    fn label_counts_and_sigma_definition() {
        let obj = head_phantom(16);
        let pool = outlier_pool(16, 5, 1);
        let c = SimulationConfig {
            num_projections: 333,
            noise_fraction: 0.1,
            f1: 0.1,
            f2: 0.15,
            f3: 0.1,
            shift_bound: 2.0,
            ..cfg(0)
        };
        let ds = make_dataset(&obj, &pool, &c).unwrap();
        assert_eq!(ds.truth.count(Label::Class1), 33);
        assert_eq!(ds.truth.count(Label::Class2), 49);
        assert!((ds.sigma - 0.1 * ds.mean_projection_value).abs() < 1e-15);
        assert!(ds.truth.shifts.iter().all(|s| s.abs() <= 2.0));
        // The mean is over noiseless inlier projections (shifted, before noise).
        let len = detector_len(16);
        let (sum, n) = (0..333)
            .filter(|&i| ds.truth.labels[i] == Label::Inlier)
            .map(|i| shift_projection(&radon_forward(&obj, ds.truth.angles[i]), ds.truth.shifts[i]).sum())
            .fold((0.0, 0), |(s, n), v| (s + v, n + len));
        assert!((sum / n as f64 - ds.mean_projection_value).abs() < 1e-12);
        assert_eq!(ds, make_dataset(&obj, &pool, &c).unwrap());
    }

    #[test]
    fn class1_requires_pool() {
        let c = SimulationConfig { f1: 0.1, ..cfg(100) };
        assert!(make_dataset(&head_phantom(8), &[], &c).is_err());
    }

    #[test]
    fn invalid_fractions_rejected() {
        let c = SimulationConfig {
            f1: 0.7,
            f2: 0.5,
            ..cfg(10)
        };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let c = SimulationConfig {
            shift_bound: -1.0,
            ..cfg(10)
        };
        assert!(c.validate().is_err());
    }
}
