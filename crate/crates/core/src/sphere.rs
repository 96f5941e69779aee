//! Geometry and sampling on the unit hypersphere.
//!
//! Points live on `S^d` embedded in `R^{d+1}`. All distances and radii are
//! geodesic (radians). Caps on `S^1` and `S^2` are sampled exactly by
//! inverse CDF; higher dimensions fall back to rejection sampling from the
//! whole sphere.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::ops::Deref;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};

/// Tolerance on the unit-norm invariant.
pub const NORM_TOL: f64 = 1e-9;

/// Rejection sampling refuses caps whose share of the sphere is below this.
pub const MIN_ACCEPTANCE: f64 = 1e-6;

/// A point on the unit sphere, stored in ambient coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Normalizes `coords` onto the sphere. Fails on empty, zero or non-finite input.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid("unit vector needs at least one coordinate"));
        }
        let norm = norm(&coords);
        if !norm.is_finite() || norm == 0.0 {
            return Err(invalid(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(Self(coords.into_iter().map(|c| c / norm).collect()))
    }

    /// Wraps coordinates that are already unit-norm (checked against [`NORM_TOL`]).
    pub fn from_unit(coords: Vec<f64>) -> Result<Self> {
        let n = norm(&coords);
        if (n - 1.0).abs() > NORM_TOL {
            return Err(invalid(format!("vector norm {n} is not 1")));
        }
        Ok(Self(coords))
    }

    /// The `axis`-th standard basis vector of `R^dim`.
    pub fn basis(dim: usize, axis: usize) -> Self {
        assert!(axis < dim, "basis axis out of range");
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self(v)
    }

    /// Ambient dimension `d + 1`.
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for UnitVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        UnitVector::new(v)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(v: UnitVector) -> Self {
        v.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Angle between two unit vectors given as slices.
pub(crate) fn angle(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}

/// Great-circle distance in radians, in `[0, π]`.
pub fn geodesic_distance(u: &UnitVector, v: &UnitVector) -> f64 {
    angle(u, v)
}

/// Surface area of the whole unit sphere `S^d`.
pub fn sphere_area(d: usize) -> f64 {
    let k = (d + 1) as f64;
    2.0 * PI.powf(k / 2.0) / gamma(k / 2.0)
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    let k = d as f64;
    PI.powf(k / 2.0) / gamma(k / 2.0 + 1.0)
}

/// Fraction of `S^d` covered by a cap of geodesic radius `theta`.
pub fn cap_fraction(d: usize, theta: f64) -> f64 {
    if theta <= 0.0 {
        return 0.0;
    }
    if theta >= PI {
        return 1.0;
    }
    if d == 1 {
        return theta / PI;
    }
    if d == 2 {
        return (1.0 - theta.cos()) / 2.0;
    }
    let s2 = theta.sin().powi(2).min(1.0);
    let half = 0.5 * beta_reg(d as f64 / 2.0, 0.5, s2);
    if theta <= PI / 2.0 {
        half
    } else {
        1.0 - half
    }
}

/// Area of a cap of geodesic radius `theta` on `S^d`; `2π(1 − cos θ)` on `S^2`.
pub fn cap_area(d: usize, theta: f64) -> f64 {
    if d == 2 {
        return 2.0 * PI * (1.0 - theta.clamp(0.0, PI).cos());
    }
    cap_fraction(d, theta) * sphere_area(d)
}

/// Geodesic radius of the cap with the given area on `S^d`.
pub fn cap_radius_for_area(d: usize, area: f64) -> Result<f64> {
    if d == 0 {
        return Err(invalid("sphere dimension must be at least 1"));
    }
    let total = sphere_area(d);
    if !(area > 0.0 && area <= total * (1.0 + 1e-12)) {
        return Err(invalid(format!(
            "cap area {area} outside (0, {total}] for S^{d}"
        )));
    }
    if d == 2 {
        return Ok((1.0 - area / (2.0 * PI)).clamp(-1.0, 1.0).acos());
    }
    let (mut lo, mut hi) = (0.0_f64, PI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cap_area(d, mid) < area {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// How a cap's size is specified. Area is the default parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapSize {
    Area(f64),
    Radius(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalCap {
    pub center: UnitVector,
    pub geodesic_radius: f64,
}

impl SphericalCap {
    pub fn with_radius(center: UnitVector, geodesic_radius: f64) -> Result<Self> {
        if !(geodesic_radius > 0.0 && geodesic_radius <= PI) {
            return Err(invalid(format!(
                "cap radius {geodesic_radius} outside (0, π]"
            )));
        }
        Ok(Self {
            center,
            geodesic_radius,
        })
    }

    pub fn with_area(center: UnitVector, area: f64) -> Result<Self> {
        let d = center.dim().saturating_sub(1);
        let radius = cap_radius_for_area(d, area)?;
        Self::with_radius(center, radius)
    }

    pub fn new(center: UnitVector, size: CapSize) -> Result<Self> {
        match size {
            CapSize::Area(a) => Self::with_area(center, a),
            CapSize::Radius(r) => Self::with_radius(center, r),
        }
    }

    /// Intrinsic dimension `d` of the sphere the cap lives on.
    pub fn sphere_dim(&self) -> usize {
        self.center.dim() - 1
    }

    pub fn area(&self) -> f64 {
        cap_area(self.sphere_dim(), self.geodesic_radius)
    }

    pub fn contains(&self, p: &UnitVector) -> bool {
        geodesic_distance(p, &self.center) <= self.geodesic_radius + NORM_TOL
    }
}

/// Unit vector orthogonal to `c`, built from the coordinate axis least aligned with it.
fn orthogonal_unit(c: &[f64]) -> Vec<f64> {
    let axis = c
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut e: Vec<f64> = c.iter().map(|&ci| -c[axis] * ci).collect();
    e[axis] += 1.0;
    let n = norm(&e);
    e.iter_mut().for_each(|x| *x /= n);
    e
}

fn normalized(mut v: Vec<f64>) -> UnitVector {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    UnitVector(v)
}

/// Uniform draw from the surface of `cap`.
pub fn sample_cap_uniform<R: Rng + ?Sized>(cap: &SphericalCap, rng: &mut R) -> Result<UnitVector> {
    let c = cap.center.as_slice();
    let theta_max = cap.geodesic_radius;
    match c.len() {
        0 | 1 => Err(invalid("cap sampling needs ambient dimension >= 2")),
        2 => {
            let t = theta_max * (2.0 * rng.random::<f64>() - 1.0);
            let (s, co) = t.sin_cos();
            Ok(normalized(vec![
                co * c[0] - s * c[1],
                co * c[1] + s * c[0],
            ]))
        }
        3 => {
            let u: f64 = rng.random();
            let cos_t = 1.0 - u * (1.0 - theta_max.cos());
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let phi = 2.0 * PI * rng.random::<f64>();
            let e1 = orthogonal_unit(c);
            let e2 = [
                c[1] * e1[2] - c[2] * e1[1],
                c[2] * e1[0] - c[0] * e1[2],
                c[0] * e1[1] - c[1] * e1[0],
            ];
            let (sp, cp) = phi.sin_cos();
            let p = (0..3)
                .map(|i| sin_t * (cp * e1[i] + sp * e2[i]) + cos_t * c[i])
                .collect();
            Ok(normalized(p))
        }
        dim => {
            let fraction = cap_fraction(dim - 1, theta_max);
            if fraction < MIN_ACCEPTANCE {
                return Err(Error::CapTooSmall(fraction));
            }
            loop {
                let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                if norm(&g) == 0.0 {
                    continue;
                }
                let p = normalized(g);
                if angle(&p, c) <= theta_max {
                    return Ok(p);
                }
            }
        }
    }
}

/// Random view of `x`: uniform over the geodesic disk of radius `r` around it.
pub fn augment<R: Rng + ?Sized>(x: &UnitVector, r: f64, rng: &mut R) -> Result<UnitVector> {
    if !(0.0..=PI).contains(&r) {
        return Err(invalid(format!("augmentation strength {r} outside [0, π]")));
    }
    if r == 0.0 {
        return Ok(x.clone());
    }
    let cap = SphericalCap {
        center: x.clone(),
        geodesic_radius: r,
    };
    sample_cap_uniform(&cap, rng)
}

/// Labeled natural samples on the sphere, one cap per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSphereDataset {
    pub points: Vec<UnitVector>,
    pub labels: Vec<usize>,
    pub caps: Vec<SphericalCap>,
    pub seed: u64,
    /// Points lying closer to a foreign class center than to their own.
    pub overlap_warnings: usize,
}

impl LabeledSphereDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.caps.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.dim())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// At most `max` points taken at an even stride (all points when `max >= len`).
    pub fn subsample(&self, max: usize) -> Self {
        let n = self.len();
        if max == 0 || max >= n {
            return self.clone();
        }
        let idx: Vec<usize> = (0..max).map(|i| i * n / max).collect();
        Self {
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            caps: self.caps.clone(),
            seed: self.seed,
            overlap_warnings: self.overlap_warnings,
        }
    }

    /// Writes `id,label,x0,...,xd`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let dim = self.ambient_dim();
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..dim).map(|i| format!("x{i}")));
        out.write_record(&header)?;
        for (i, (p, l)) in self.points.iter().zip(&self.labels).enumerate() {
            let mut row = vec![i.to_string(), l.to_string()];
            row.extend(p.iter().map(|x| x.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads points and labels back from the CSV format of [`Self::write_csv`].
    /// Caps are not stored in the file; each class gets the smallest cap around its
    /// normalized mean that covers its points.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(Error::Parse("dataset row needs id, label and coordinates".into()));
            }
            let label: usize = rec[1]
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("label: {e}")))?;
            let coords = rec
                .iter()
                .skip(2)
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("coordinate: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            points.push(UnitVector::new(coords)?);
            labels.push(label);
        }
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let dim = points.first().map_or(0, |p: &UnitVector| p.dim());
        let mut caps = Vec::with_capacity(k);
        for class in 0..k {
            let mut mean = vec![0.0; dim];
            for (p, _) in points.iter().zip(&labels).filter(|(_, &l)| l == class) {
                mean.iter_mut().zip(p.iter()).for_each(|(m, x)| *m += x);
            }
            let center = UnitVector::new(mean).unwrap_or_else(|_| UnitVector::basis(dim, 0));
            let radius = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == class)
                .map(|(p, _)| geodesic_distance(p, &center))
                .fold(0.0, f64::max)
                .max(f64::EPSILON);
            caps.push(SphericalCap::with_radius(center, radius)?);
        }
        Ok(Self {
            points,
            labels,
            caps,
            seed: 0,
            overlap_warnings: 0,
        })
    }
}

/// Samples `per_class` points uniformly from a cap around each center.
pub fn make_dataset(
    centers: &[UnitVector],
    per_class: usize,
    size: CapSize,
    seed: u64,
) -> Result<LabeledSphereDataset> {
    if centers.is_empty() {
        return Err(invalid("at least one class center is required"));
    }
    let dim = centers[0].dim();
    if let Some(c) = centers.iter().find(|c| c.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: c.dim(),
        });
    }
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            if geodesic_distance(a, b) == 0.0 {
                return Err(invalid("class centers must be pairwise distinct"));
            }
        }
    }
    let caps = centers
        .iter()
        .map(|c| SphericalCap::new(c.clone(), size))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(per_class * caps.len());
    let mut labels = Vec::with_capacity(per_class * caps.len());
    for (k, cap) in caps.iter().enumerate() {
        for _ in 0..per_class {
            points.push(sample_cap_uniform(cap, &mut rng)?);
            labels.push(k);
        }
    }

    let overlap_warnings = points
        .iter()
        .zip(&labels)
        .filter(|(p, &l)| {
            let own = geodesic_distance(p, &caps[l].center);
            caps.iter()
                .enumerate()
                .any(|(j, c)| j != l && geodesic_distance(p, &c.center) < own)
        })
        .count();
    if overlap_warnings > 0 {
        log::warn!("{overlap_warnings} points lie closer to a foreign class center");
    }

    Ok(LabeledSphereDataset {
        points,
        labels,
        caps,
        seed,
        overlap_warnings,
    })
}

/// Centers of the two-class synthetic setup: the north and south poles of `S^2`.
pub fn pole_centers() -> Vec<UnitVector> {
    vec![
        UnitVector(vec![0.0, 0.0, 1.0]),
        UnitVector(vec![0.0, 0.0, -1.0]),
    ]
}

/// Seed offset separating the test split from the train split.
pub const TEST_SEED_OFFSET: u64 = 0x5EED_7E57;

/// Train/test pair for the two-pole experiment: area-1 caps, 2500/500 points per class
/// by default.
pub fn synthetic_split(
    train_per_class: usize,
    test_per_class: usize,
    size: CapSize,
    seed: u64,
) -> Result<(LabeledSphereDataset, LabeledSphereDataset)> {
    let centers = pole_centers();
    let train = make_dataset(&centers, train_per_class, size, seed)?;
    let test = make_dataset(
        &centers,
        test_per_class,
        size,
        seed.wrapping_add(TEST_SEED_OFFSET),
    )?;
    Ok((train, test))
}
