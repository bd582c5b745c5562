//! Synthetic 2-D source/target distributions and pinned few-shot sets.

use std::f64::consts::{FRAC_PI_4, PI, SQRT_2};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use udad_tensor::{RngStreams, Tensor};

use crate::{Error, Result};

pub const HELD_OUT_SIZE: usize = 2000;
pub const FEW_SHOT_POOL: usize = 10;
pub const SHOT_COUNTS: [usize; 3] = [1, 5, 10];
/// Seed behind every benchmark's few-shot pool and held-out set.
pub const SELECTION_SEED: u64 = 0x5EED_F3A7;
/// Log-density under the source below which a point is off-support.
pub const SUPPORT_FLOOR: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    GaussianRing,
    TwoMoons,
    Grid,
    SingleGaussian,
}

/// `x ↦ R(rotation)·(scale·x) + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl Default for Affine {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            translation: [0.0, 0.0],
        }
    }
}

impl Affine {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (self.scale * p[0], self.scale * p[1]);
        [
            c * x - s * y + self.translation[0],
            s * x + c * y + self.translation[1],
        ]
    }
}

/// An isotropic mixture (or the two-moons shape) followed by an affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionSpec {
    kind: ShapeKind,
    centers: Vec<[f64; 2]>,
    scale: f64,
    transform: Affine,
}

impl DistributionSpec {
    fn build(kind: ShapeKind, centers: Vec<[f64; 2]>, scale: f64) -> Result<Self> {
        if centers.is_empty() || centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "mode centers must be finite and non-empty".into(),
            ));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("mode scale {scale}")));
        }
        Ok(Self {
            kind,
            centers,
            scale,
            transform: Affine::default(),
        })
    }

    pub fn gaussian_ring(modes: usize, radius: f64, scale: f64) -> Result<Self> {
        let centers = (0..modes)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / modes as f64;
                [radius * th.cos(), radius * th.sin()]
            })
            .collect();
        Self::build(ShapeKind::GaussianRing, centers, scale)
    }

    /// `side × side` lattice centred on the origin.
    pub fn grid(side: usize, spacing: f64, scale: f64) -> Result<Self> {
        let off = (side as f64 - 1.0) / 2.0;
        let centers = (0..side * side)
            .map(|i| {
                [
                    ((i % side) as f64 - off) * spacing,
                    ((i / side) as f64 - off) * spacing,
                ]
            })
            .collect();
        Self::build(ShapeKind::Grid, centers, scale)
    }

    pub fn single_gaussian(mean: [f64; 2], scale: f64) -> Result<Self> {
        Self::build(ShapeKind::SingleGaussian, vec![mean], scale)
    }

    /// Unit-radius interleaved half circles; centers are the arc midpoints.
    pub fn two_moons(noise: f64) -> Result<Self> {
        Self::build(ShapeKind::TwoMoons, vec![[0.0, 1.0], [1.0, -0.5]], noise)
    }

    pub fn with_transform(mut self, transform: Affine) -> Result<Self> {
        if !(transform.scale.is_finite() && transform.rotation.is_finite())
            || transform.translation.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument("non-finite transform".into()));
        }
        self.transform = transform;
        Ok(self)
    }

    /// Keeps only the listed modes and replaces the per-mode scale.
    pub fn subset(&self, modes: &[usize], scale: f64) -> Result<Self> {
        if self.kind == ShapeKind::TwoMoons {
            return Err(Error::InvalidArgument(
                "two-moons has no separable modes".into(),
            ));
        }
        let centers = modes
            .iter()
            .map(|&m| {
                self.centers
                    .get(m)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("mode {m} out of range")))
            })
            .collect::<Result<_>>()?;
        let mut out = Self::build(self.kind, centers, scale)?;
        out.transform = self.transform;
        Ok(out)
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn mode_count(&self) -> usize {
        self.centers.len()
    }

    /// Centers after the affine map.
    pub fn mode_centers(&self) -> Vec<[f64; 2]> {
        self.centers
            .iter()
            .map(|&c| self.transform.apply(c))
            .collect()
    }

    /// Per-mode standard deviation after the affine map.
    pub fn effective_scale(&self) -> f64 {
        self.scale * self.transform.scale.abs()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let raw = match self.kind {
            ShapeKind::TwoMoons => {
                let upper = rng.random_bool(0.5);
                let th = rng.random_range(0.0..PI);
                let base = if upper {
                    [th.cos(), th.sin()]
                } else {
                    [1.0 - th.cos(), 0.5 - th.sin()]
                };
                let (n0, n1): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                [base[0] + self.scale * n0, base[1] + self.scale * n1]
            }
            _ => {
                let m = if self.centers.len() == 1 {
                    0
                } else {
                    rng.random_range(0..self.centers.len())
                };
                let c = self.centers[m];
                let (n0, n1): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                [c[0] + self.scale * n0, c[1] + self.scale * n1]
            }
        };
        self.transform.apply(raw)
    }

    /// Mixture log-density; `None` for two-moons, which has no closed form,
    /// and for point masses.
    pub fn log_density(&self, x: [f64; 2]) -> Option<f64> {
        if self.kind == ShapeKind::TwoMoons || self.effective_scale() == 0.0 {
            return None;
        }
        let s2 = self.effective_scale().powi(2);
        let log_w = -(self.centers.len() as f64).ln();
        let terms: Vec<f64> = self
            .mode_centers()
            .iter()
            .map(|c| {
                let r2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                log_w - (2.0 * PI * s2).ln() - r2 / (2.0 * s2)
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
    }
}

/// `n` i.i.d. draws as an `[n, 2]` tensor.
pub fn sample_distribution<R: Rng + ?Sized>(
    spec: &DistributionSpec,
    n: usize,
    rng: &mut R,
) -> Tensor {
    let data = (0..n).flat_map(|_| spec.draw(rng)).collect();
    Tensor::matrix(n, 2, data).expect("sized")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchmarkName {
    Close,
    Distant,
}

impl BenchmarkName {
    pub fn name(self) -> &'static str {
        match self {
            BenchmarkName::Close => "close",
            BenchmarkName::Distant => "distant",
        }
    }
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "close" => Ok(BenchmarkName::Close),
            "distant" => Ok(BenchmarkName::Distant),
            _ => Err(Error::UnknownName {
                kind: "benchmark",
                name: s.to_string(),
            }),
        }
    }
}

/// A few target exemplars with enough provenance to re-derive them.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSet {
    pub samples: Tensor,
    pub benchmark: BenchmarkName,
    pub seed: u64,
}

impl FewShotSet {
    pub fn k(&self) -> usize {
        self.samples.rows()
    }

    pub fn rows(&self) -> Vec<[f64; 2]> {
        (0..self.k())
            .map(|i| [self.samples.row(i)[0], self.samples.row(i)[1]])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: BenchmarkName,
    pub source: DistributionSpec,
    pub target: DistributionSpec,
    /// The largest few-shot set; smaller sets are its prefixes.
    pub few_shot_pool: Tensor,
    pub held_out: Tensor,
}

pub fn source_spec() -> DistributionSpec {
    DistributionSpec::gaussian_ring(8, 4.0, 0.3).expect("valid")
}

pub fn target_spec(name: BenchmarkName) -> DistributionSpec {
    match name {
        BenchmarkName::Close => source_spec().subset(&[0, 1, 2], 0.15).expect("valid"),
        // Corners (±3√2, ±3√2) turned by 45° land on the axes at radius 6.
        BenchmarkName::Distant => DistributionSpec::grid(2, 6.0 * SQRT_2, 0.3)
            .and_then(|g| {
                g.with_transform(Affine {
                    rotation: FRAC_PI_4,
                    ..Affine::default()
                })
            })
            .expect("valid"),
    }
}

pub fn make_benchmark(name: BenchmarkName) -> Benchmark {
    make_benchmark_seeded(name, SELECTION_SEED)
}

pub fn make_benchmark_seeded(name: BenchmarkName, seed: u64) -> Benchmark {
    let streams = RngStreams::new(seed);
    let target = target_spec(name);
    let few_shot_pool = sample_distribution(
        &target,
        FEW_SHOT_POOL,
        &mut streams.stream(&format!("few-shot/{name}"), 0),
    );
    let held_out = sample_distribution(
        &target,
        HELD_OUT_SIZE,
        &mut streams.stream(&format!("held-out/{name}"), 0),
    );
    Benchmark {
        name,
        source: source_spec(),
        target,
        few_shot_pool,
        held_out,
    }
}

impl Benchmark {
    pub fn few_shot(&self, k: usize) -> Result<FewShotSet> {
        if !SHOT_COUNTS.contains(&k) {
            return Err(Error::InvalidArgument(format!(
                "k must be one of {SHOT_COUNTS:?}, got {k}"
            )));
        }
        Ok(FewShotSet {
            samples: self.few_shot_pool.head_rows(k),
            benchmark: self.name,
            seed: SELECTION_SEED,
        })
    }
}

/// Writes rows under an `x0,x1,…` header with 17 significant digits.
pub fn write_points_csv(path: &Path, points: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..points.cols()).map(|j| format!("x{j}")))?;
    for i in 0..points.rows() {
        w.write_record(points.row(i).iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().map_err(|e| {
                Error::InvalidArgument(format!(
                    "{}: row {}: `{field}`: {e}",
                    path.display(),
                    rows + 1
                ))
            })?);
        }
        rows += 1;
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}
