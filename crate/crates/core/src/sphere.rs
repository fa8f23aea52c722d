//! Closed-form geometry of the unit hypersphere `S^(d-1)`.
//!
//! Everything here is exact geometry in 64-bit floats: tangent projection,
//! great-circle distance, spherical linear interpolation and its velocity,
//! uniform sampling, and the log-density of the uniform distribution. These
//! primitives are the numerical bedrock for both training (geodesic paths and
//! target velocities) and scoring (manifold-aware integration), so they stay
//! in `f64` even when network internals do not need the precision.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Guard subtracted from the `arccos` domain ends before taking the angle.
pub const DOT_CLAMP_EPS: f64 = 1e-7;

/// Below this angle the slerp denominator `sin(theta)` is unreliable and we
/// switch to normalized linear interpolation (error is O(theta^2)).
pub const SMALL_ANGLE: f64 = 1e-5;

/// Angles within this margin of pi have no unique geodesic and are rejected.
pub const ANTIPODAL_MARGIN: f64 = 1e-6;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A point on `S^(d-1)`: a d-vector of unit Euclidean norm.
///
/// Construction renormalizes, so the stored coordinates satisfy
/// `| ||z|| - 1 | <= 1e-9` for any non-degenerate input.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint {
    coords: Vec<f64>,
}

impl SpherePoint {
    /// Normalizes `coords` onto the sphere. Rejects vectors with norm below
    /// `1e-12` (indistinguishable from the zero vector) and dimensions < 2.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::DimensionTooSmall(coords.len()));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("sphere point coordinates"));
        }
        let n = norm(&coords);
        if n < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let coords = coords.into_iter().map(|x| x / n).collect();
        Ok(SpherePoint { coords })
    }

    /// Wraps coordinates already known to be unit-norm (internal fast path).
    pub(crate) fn from_unit_unchecked(coords: Vec<f64>) -> Self {
        debug_assert!((norm(&coords) - 1.0).abs() <= 1e-9);
        SpherePoint { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// e_i basis point, useful for tests and quadrature seeds.
    pub fn basis(d: usize, i: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::DimensionTooSmall(d));
        }
        assert!(i < d, "basis index out of range");
        let mut coords = vec![0.0; d];
        coords[i] = 1.0;
        Ok(SpherePoint { coords })
    }
}

/// A vector in the tangent space at `base`: orthogonal to the base point.
#[derive(Debug, Clone)]
pub struct TangentVector {
    base: SpherePoint,
    vec: Vec<f64>,
}

impl TangentVector {
    /// Validates the tangency invariant `|<vec, base>| <= 1e-9`.
    pub fn new(base: SpherePoint, vec: Vec<f64>) -> Result<Self> {
        if vec.len() != base.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                got: vec.len(),
            });
        }
        let d = dot(&vec, base.coords());
        if d.abs() > 1e-9 {
            return Err(Error::ProbeNotTangent { dot: d });
        }
        Ok(TangentVector { base, vec })
    }

    pub(crate) fn new_unchecked(base: SpherePoint, vec: Vec<f64>) -> Self {
        TangentVector { base, vec }
    }

    pub fn base(&self) -> &SpherePoint {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vec)
    }

    pub fn into_parts(self) -> (SpherePoint, Vec<f64>) {
        (self.base, self.vec)
    }
}

/// Conditioning tag for the two embedding modalities.
///
/// Serialized as `0` (image) and `1` (text) everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image = 0,
    Text = 1,
}

impl Modality {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            _ => Err(Error::InvalidConfig(format!(
                "modality must be 0 (image) or 1 (text), got {i}"
            ))),
        }
    }

    /// Accepts `image`, `text`, `0`, or `1`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "image" | "0" => Ok(Modality::Image),
            "text" | "1" => Ok(Modality::Text),
            other => Err(Error::InvalidConfig(format!(
                "modality must be image/text/0/1, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Text => write!(f, "text"),
        }
    }
}

/// Projects a raw d-vector onto the tangent space at `z`:
/// `v - <v, z> z`. Idempotent.
pub fn project_tangent(z: &SpherePoint, v: &[f64]) -> Result<TangentVector> {
    if v.len() != z.dim() {
        return Err(Error::DimensionMismatch {
            expected: z.dim(),
            got: v.len(),
        });
    }
    let zc = z.coords();
    let vz = dot(v, zc);
    let vec = v.iter().zip(zc).map(|(vi, zi)| vi - vz * zi).collect();
    Ok(TangentVector::new_unchecked(z.clone(), vec))
}

/// Great-circle distance `arccos(<z0, z1>)` with the dot product clamped to
/// `[-1 + eps, 1 - eps]` so rounding never leaves the `arccos` domain.
/// The result therefore lives in the open interval `(0, pi)`.
pub fn geodesic_distance(z0: &SpherePoint, z1: &SpherePoint) -> Result<f64> {
    if z0.dim() != z1.dim() {
        return Err(Error::DimensionMismatch {
            expected: z0.dim(),
            got: z1.dim(),
        });
    }
    let d = dot(z0.coords(), z1.coords());
    let clamped = d.clamp(-1.0 + DOT_CLAMP_EPS, 1.0 - DOT_CLAMP_EPS);
    Ok(clamped.acos())
}

enum GeodesicRegime {
    SmallAngle,
    Regular(f64),
}

fn classify_pair(z0: &SpherePoint, z1: &SpherePoint) -> Result<GeodesicRegime> {
    if z0.dim() != z1.dim() {
        return Err(Error::DimensionMismatch {
            expected: z0.dim(),
            got: z1.dim(),
        });
    }
    let raw = dot(z0.coords(), z1.coords());
    if raw >= SMALL_ANGLE.cos() {
        return Ok(GeodesicRegime::SmallAngle);
    }
    if raw <= -(ANTIPODAL_MARGIN.cos()) {
        return Err(Error::DegenerateGeodesic);
    }
    let theta = raw.clamp(-1.0 + DOT_CLAMP_EPS, 1.0 - DOT_CLAMP_EPS).acos();
    Ok(GeodesicRegime::Regular(theta))
}

fn nlerp(z0: &SpherePoint, z1: &SpherePoint, t: f64) -> Result<SpherePoint> {
    let coords: Vec<f64> = z0
        .coords()
        .iter()
        .zip(z1.coords())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    SpherePoint::new(coords)
}

/// Spherical linear interpolation along the geodesic from `z0` to `z1`:
///
/// `z_t = sin((1-t) theta)/sin(theta) z0 + sin(t theta)/sin(theta) z1`.
///
/// Falls back to normalized linear interpolation when the endpoints are
/// closer than [`SMALL_ANGLE`]; errors when they are antipodal within
/// [`ANTIPODAL_MARGIN`] (the geodesic is not unique there).
pub fn slerp(z0: &SpherePoint, z1: &SpherePoint, t: f64) -> Result<SpherePoint> {
    assert!((0.0..=1.0).contains(&t), "slerp time must lie in [0, 1]");
    match classify_pair(z0, z1)? {
        GeodesicRegime::SmallAngle => nlerp(z0, z1, t),
        GeodesicRegime::Regular(theta) => {
            let sin_theta = theta.sin();
            let a = ((1.0 - t) * theta).sin() / sin_theta;
            let b = (t * theta).sin() / sin_theta;
            let coords: Vec<f64> = z0
                .coords()
                .iter()
                .zip(z1.coords())
                .map(|(x, y)| a * x + b * y)
                .collect();
            // The closed form is unit-norm up to rounding; keep it exact at
            // the endpoints where a or b is exactly 1.
            if t == 0.0 || t == 1.0 {
                Ok(SpherePoint::from_unit_unchecked(coords))
            } else {
                SpherePoint::new(coords)
            }
        }
    }
}

/// Velocity of the geodesic path at time `t`, tangent at `slerp(z0, z1, t)`:
///
/// `u_t = theta/sin(theta) [cos(t theta) z1 - cos((1-t) theta) z0]`.
///
/// Its norm equals the geodesic distance for every `t` (constant speed).
/// In the small-angle regime the velocity degenerates to `z1 - z0` projected
/// onto the tangent space at the interpolated point.
pub fn target_velocity(z0: &SpherePoint, z1: &SpherePoint, t: f64) -> Result<TangentVector> {
    match classify_pair(z0, z1)? {
        GeodesicRegime::SmallAngle => {
            let base = nlerp(z0, z1, t)?;
            let diff: Vec<f64> = z1
                .coords()
                .iter()
                .zip(z0.coords())
                .map(|(b, a)| b - a)
                .collect();
            project_tangent(&base, &diff)
        }
        GeodesicRegime::Regular(theta) => {
            let scale = theta / theta.sin();
            let c1 = (t * theta).cos();
            let c0 = ((1.0 - t) * theta).cos();
            let vec: Vec<f64> = z0
                .coords()
                .iter()
                .zip(z1.coords())
                .map(|(x, y)| scale * (c1 * y - c0 * x))
                .collect();
            let base = slerp(z0, z1, t)?;
            Ok(TangentVector::new_unchecked(base, vec))
        }
    }
}

/// Uniform sample on `S^(d-1)`: a standard Gaussian draw normalized to unit
/// length, resampling in the (measure-zero) event of norm underflow.
pub fn sample_uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<SpherePoint> {
    if d < 2 {
        return Err(Error::DimensionTooSmall(d));
    }
    loop {
        let coords: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if norm(&coords) >= 1e-12 {
            return SpherePoint::new(coords);
        }
    }
}

/// Log-density (nats) of the uniform distribution on `S^(d-1)`:
/// `-log Vol(S^(d-1)) = -log(2 pi^(d/2) / Gamma(d/2))`, constant in `z`.
pub fn log_uniform_density(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::DimensionTooSmall(d));
    }
    let half_d = d as f64 / 2.0;
    let log_vol =
        std::f64::consts::LN_2 + half_d * std::f64::consts::PI.ln() - libm::lgamma(half_d);
    Ok(-log_vol)
}
