//! Embedding ingestion, validation, and synthetic generation.
//!
//! Two little-endian binary containers cover all on-disk embedding data. A
//! `.gz` extension selects a gzip-compressed variant of either.
//!
//! Paired training embeddings (`SFL1`):
//!
//! ```text
//! magic "SFL1" | u32 version=1 | u32 d | u64 n
//! image rows: n * d f32 | text rows: n * d f32
//! u64 FNV-1a checksum over every preceding byte
//! ```
//!
//! Labeled evaluation embeddings (`SFLE`):
//!
//! ```text
//! magic "SFLE" | u32 version=1 | u32 d | u64 n | u8 has_correctness
//! points: n * d f32 | labels: n * i32 | correctness: n * u8 (if flagged)
//! u64 FNV-1a checksum over every preceding byte
//! ```
//!
//! Rows are renormalized onto the sphere at load time; rows that are more
//! than 1e-2 off unit norm before renormalization are rejected with their
//! indices (they almost always indicate an upstream pipeline bug rather
//! than rounding). Extraction of embeddings from actual encoder backbones
//! happens outside this crate; any producer of `SFL1`/`SFLE` files works.
//!
//! The module also hosts the von Mises-Fisher toolkit used as an analytic
//! oracle: seeded sampling (Wood-style rejection for the radial component),
//! the exact log-density, and a Fibonacci quadrature grid on `S^2`.

use crate::error::{Error, Result};
use crate::fieldnet::fnv1a64;
use crate::sphere::{self, SpherePoint};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rand::SeedableRng;
use std::io::{Read, Write};
use std::path::Path;

const PAIRS_MAGIC: &[u8; 4] = b"SFL1";
const LABELED_MAGIC: &[u8; 4] = b"SFLE";
const FORMAT_VERSION: u32 = 1;

/// How far a stored row may deviate from unit norm before it is treated as
/// corrupt rather than silently fixed.
const ROW_NORM_REJECT: f64 = 1e-2;

fn validate_rows(path: &str, dim: usize, rows: &[f32], side: &str) -> Result<()> {
    let n = rows.len() / dim;
    let mut bad = Vec::new();
    for i in 0..n {
        let row = &rows[i * dim..(i + 1) * dim];
        if row.iter().any(|x| !x.is_finite()) {
            bad.push(i);
            continue;
        }
        let norm: f64 = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > ROW_NORM_REJECT {
            bad.push(i);
        }
    }
    if bad.is_empty() {
        return Ok(());
    }
    bad.truncate(8);
    Err(Error::format(
        path,
        format!("{side} rows with non-finite or off-sphere values at indices {bad:?}"),
    ))
}

fn renormalize_rows(dim: usize, rows: &mut [f32]) {
    for row in rows.chunks_mut(dim) {
        let norm: f64 = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        for x in row.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

fn row_to_point(dim: usize, rows: &[f32], i: usize) -> SpherePoint {
    let row = &rows[i * dim..(i + 1) * dim];
    SpherePoint::new(row.iter().map(|&x| x as f64).collect())
        .expect("validated row is normalizable")
}

/// Aligned image/text embedding pairs backing the flow-matching target
/// distributions.
#[derive(Debug, Clone)]
pub struct EmbeddingPairSet {
    dim: usize,
    n_pairs: usize,
    image: Vec<f32>,
    text: Vec<f32>,
}

impl EmbeddingPairSet {
    pub fn new(dim: usize, mut image: Vec<f32>, mut text: Vec<f32>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimensionTooSmall(dim));
        }
        if image.len() != text.len() || !image.len().is_multiple_of(dim) || image.is_empty() {
            return Err(Error::InvalidConfig(
                "pair sides must be equal-length, non-empty multiples of d".into(),
            ));
        }
        validate_rows("<memory>", dim, &image, "image")?;
        validate_rows("<memory>", dim, &text, "text")?;
        renormalize_rows(dim, &mut image);
        renormalize_rows(dim, &mut text);
        let n_pairs = image.len() / dim;
        Ok(EmbeddingPairSet {
            dim,
            n_pairs,
            image,
            text,
        })
    }

    pub fn from_points(image: &[SpherePoint], text: &[SpherePoint]) -> Result<Self> {
        if image.is_empty() || image.len() != text.len() {
            return Err(Error::InvalidConfig(
                "pair sides must be non-empty and equal length".into(),
            ));
        }
        let dim = image[0].dim();
        let flatten = |pts: &[SpherePoint]| -> Vec<f32> {
            pts.iter()
                .flat_map(|p| p.coords().iter().map(|&x| x as f32))
                .collect()
        };
        EmbeddingPairSet::new(dim, flatten(image), flatten(text))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn image_point(&self, i: usize) -> SpherePoint {
        row_to_point(self.dim, &self.image, i)
    }

    pub fn text_point(&self, i: usize) -> SpherePoint {
        row_to_point(self.dim, &self.text, i)
    }
}

/// Evaluation embeddings with integer labels (class index or 0/1 OOD flag)
/// and optional per-row correctness bits from a downstream predictor.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddingSet {
    dim: usize,
    n: usize,
    points: Vec<f32>,
    labels: Vec<i32>,
    correctness: Option<Vec<bool>>,
}

impl LabeledEmbeddingSet {
    pub fn new(
        dim: usize,
        mut points: Vec<f32>,
        labels: Vec<i32>,
        correctness: Option<Vec<bool>>,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimensionTooSmall(dim));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidConfig(
                "points must be a non-empty multiple of d".into(),
            ));
        }
        let n = points.len() / dim;
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len(),
            });
        }
        if let Some(c) = &correctness {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: c.len(),
                });
            }
        }
        validate_rows("<memory>", dim, &points, "point")?;
        renormalize_rows(dim, &mut points);
        Ok(LabeledEmbeddingSet {
            dim,
            n,
            points,
            labels,
            correctness,
        })
    }

    pub fn from_points(
        points: &[SpherePoint],
        labels: Vec<i32>,
        correctness: Option<Vec<bool>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dim = points[0].dim();
        let flat = points
            .iter()
            .flat_map(|p| p.coords().iter().map(|&x| x as f32))
            .collect();
        LabeledEmbeddingSet::new(dim, flat, labels, correctness)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn point(&self, i: usize) -> SpherePoint {
        row_to_point(self.dim, &self.points, i)
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn correctness(&self) -> Option<&[bool]> {
        self.correctness.as_deref()
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn write_file(path: &Path, payload: &[u8]) -> Result<()> {
    let mut bytes = payload.to_vec();
    bytes.extend_from_slice(&fnv1a64(payload).to_le_bytes());
    let file = std::fs::File::create(path)?;
    if is_gz(path) {
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&bytes)?;
        w.flush()?;
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        flate2::read::GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        std::io::BufReader::new(file).read_to_end(&mut bytes)?;
    }
    if bytes.len() < 8 {
        return Err(Error::format(pstr, "truncated file"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::format(pstr, "checksum mismatch"));
    }
    Ok(payload.to_vec())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated payload"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}

fn push_f32s(out: &mut Vec<u8>, rows: &[f32]) {
    for &x in rows {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_pairs(set: &EmbeddingPairSet, path: &Path) -> Result<()> {
    let mut payload =
        Vec::with_capacity(20 + 8 * set.n_pairs * set.dim);
    payload.extend_from_slice(PAIRS_MAGIC);
    payload.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    payload.extend_from_slice(&(set.dim as u32).to_le_bytes());
    payload.extend_from_slice(&(set.n_pairs as u64).to_le_bytes());
    push_f32s(&mut payload, &set.image);
    push_f32s(&mut payload, &set.text);
    write_file(path, &payload)
}

pub fn load_pairs(path: &Path) -> Result<EmbeddingPairSet> {
    let pstr = path.display().to_string();
    let payload = read_file(path)?;
    let mut c = Cursor {
        bytes: &payload,
        pos: 0,
        path: &pstr,
    };
    if c.take(4)? != PAIRS_MAGIC {
        return Err(Error::format(pstr.clone(), "bad magic (expected SFL1)"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            pstr.clone(),
            format!("unsupported version {version}"),
        ));
    }
    let dim = c.u32()? as usize;
    let n = c.u64()? as usize;
    if dim < 2 {
        return Err(Error::format(pstr.clone(), "header dimension must be >= 2"));
    }
    if n == 0 {
        return Err(Error::format(pstr.clone(), "empty pair set"));
    }
    let image = c.f32_vec(n * dim)?;
    let text = c.f32_vec(n * dim)?;
    c.done()?;
    validate_rows(&pstr, dim, &image, "image")?;
    validate_rows(&pstr, dim, &text, "text")?;
    let mut set = EmbeddingPairSet {
        dim,
        n_pairs: n,
        image,
        text,
    };
    renormalize_rows(dim, &mut set.image);
    renormalize_rows(dim, &mut set.text);
    Ok(set)
}

pub fn save_labeled(set: &LabeledEmbeddingSet, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(21 + 5 * set.n * set.dim);
    payload.extend_from_slice(LABELED_MAGIC);
    payload.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    payload.extend_from_slice(&(set.dim as u32).to_le_bytes());
    payload.extend_from_slice(&(set.n as u64).to_le_bytes());
    payload.push(set.correctness.is_some() as u8);
    push_f32s(&mut payload, &set.points);
    for &l in &set.labels {
        payload.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(c) = &set.correctness {
        payload.extend(c.iter().map(|&b| b as u8));
    }
    write_file(path, &payload)
}

pub fn load_labeled(path: &Path) -> Result<LabeledEmbeddingSet> {
    let pstr = path.display().to_string();
    let payload = read_file(path)?;
    let mut c = Cursor {
        bytes: &payload,
        pos: 0,
        path: &pstr,
    };
    if c.take(4)? != LABELED_MAGIC {
        return Err(Error::format(pstr.clone(), "bad magic (expected SFLE)"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            pstr.clone(),
            format!("unsupported version {version}"),
        ));
    }
    let dim = c.u32()? as usize;
    let n = c.u64()? as usize;
    if dim < 2 {
        return Err(Error::format(pstr.clone(), "header dimension must be >= 2"));
    }
    if n == 0 {
        return Err(Error::format(pstr.clone(), "empty labeled set"));
    }
    let has_correctness = c.take(1)?[0] != 0;
    let points = c.f32_vec(n * dim)?;
    let labels: Vec<i32> = c
        .take(n * 4)?
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let correctness = if has_correctness {
        Some(c.take(n)?.iter().map(|&b| b != 0).collect())
    } else {
        None
    };
    c.done()?;
    validate_rows(&pstr, dim, &points, "point")?;
    let mut set = LabeledEmbeddingSet {
        dim,
        n,
        points,
        labels,
        correctness,
    };
    renormalize_rows(dim, &mut set.points);
    Ok(set)
}

/// Mixture component: a mean direction and a concentration.
#[derive(Debug, Clone)]
pub struct VmfComponent {
    pub mean: SpherePoint,
    pub kappa: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Vmf,
    VmfMixture,
    Uniform,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vmf" => Ok(SyntheticKind::Vmf),
            "vmf_mixture" => Ok(SyntheticKind::VmfMixture),
            "uniform" => Ok(SyntheticKind::Uniform),
            other => Err(Error::InvalidConfig(format!(
                "kind must be vmf, vmf_mixture, or uniform, got {other:?}"
            ))),
        }
    }
}

/// Recipe for a synthetic labeled embedding set.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub dim: usize,
    pub components: Vec<VmfComponent>,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig("d must be at least 2".into()));
        }
        if self.count == 0 {
            return Err(Error::InvalidConfig("count must be positive".into()));
        }
        match self.kind {
            SyntheticKind::Uniform => {
                if !self.components.is_empty() {
                    return Err(Error::InvalidConfig(
                        "uniform kind takes no components".into(),
                    ));
                }
                Ok(())
            }
            SyntheticKind::Vmf | SyntheticKind::VmfMixture => {
                if self.components.is_empty() {
                    return Err(Error::InvalidConfig("component list is empty".into()));
                }
                if self.kind == SyntheticKind::Vmf && self.components.len() != 1 {
                    return Err(Error::InvalidConfig(
                        "kind vmf takes exactly one component".into(),
                    ));
                }
                let mut total = 0.0;
                for (i, comp) in self.components.iter().enumerate() {
                    if comp.kappa < 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "kappa must be nonnegative in component {i}"
                        )));
                    }
                    if comp.weight <= 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "weight must be positive in component {i}"
                        )));
                    }
                    if comp.mean.dim() != self.dim {
                        return Err(Error::InvalidConfig(format!(
                            "mean dimension {} does not match d = {} in component {i}",
                            comp.mean.dim(),
                            self.dim
                        )));
                    }
                    total += comp.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!(
                        "weights must sum to 1, got {total}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// One von Mises-Fisher draw via a Wood-style rejection sampler for the
/// radial component plus a uniform tangential direction.
pub fn sample_vmf<R: Rng + ?Sized>(
    mean: &SpherePoint,
    kappa: f64,
    rng: &mut R,
) -> Result<SpherePoint> {
    let d = mean.dim();
    if kappa < 1e-12 {
        return sphere::sample_uniform(d, rng);
    }
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0)
        .map_err(|e| Error::InvalidConfig(format!("beta sampler: {e}")))?;

    let w = loop {
        let zs: f64 = beta.sample(rng);
        let u: f64 = rng.random::<f64>();
        let w = (1.0 - (1.0 + b) * zs) / (1.0 - (1.0 - b) * zs);
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };

    // Uniform direction in the orthogonal complement of the mean.
    let mu = mean.coords();
    let v = loop {
        let mut g: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let gm = sphere::dot(&g, mu);
        for (gi, &mi) in g.iter_mut().zip(mu) {
            *gi -= gm * mi;
        }
        let n = sphere::dot(&g, &g).sqrt();
        if n >= 1e-12 {
            for gi in g.iter_mut() {
                *gi /= n;
            }
            break g;
        }
    };

    let tangential = (1.0 - w * w).max(0.0).sqrt();
    let coords: Vec<f64> = mu
        .iter()
        .zip(&v)
        .map(|(&mi, &vi)| w * mi + tangential * vi)
        .collect();
    SpherePoint::new(coords)
}

/// Materializes a synthetic labeled set; labels are component indices.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledEmbeddingSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        match spec.kind {
            SyntheticKind::Uniform => {
                points.push(sphere::sample_uniform(spec.dim, &mut rng)?);
                labels.push(0);
            }
            SyntheticKind::Vmf | SyntheticKind::VmfMixture => {
                let pick: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = spec.components.len() - 1;
                for (i, comp) in spec.components.iter().enumerate() {
                    acc += comp.weight;
                    if pick < acc {
                        chosen = i;
                        break;
                    }
                }
                let comp = &spec.components[chosen];
                points.push(sample_vmf(&comp.mean, comp.kappa, &mut rng)?);
                labels.push(chosen as i32);
            }
        }
    }
    LabeledEmbeddingSet::from_points(&points, labels, None)
}

/// As [`generate_synthetic`], but emits aligned pairs: each row draws an
/// image-side and a text-side point independently from the same spec, so
/// both modality distributions match the recipe.
pub fn generate_synthetic_pairs(spec: &SyntheticSpec) -> Result<EmbeddingPairSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Result<SpherePoint> {
        match spec.kind {
            SyntheticKind::Uniform => sphere::sample_uniform(spec.dim, rng),
            SyntheticKind::Vmf | SyntheticKind::VmfMixture => {
                let pick: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = spec.components.len() - 1;
                for (i, comp) in spec.components.iter().enumerate() {
                    acc += comp.weight;
                    if pick < acc {
                        chosen = i;
                        break;
                    }
                }
                let comp = &spec.components[chosen];
                sample_vmf(&comp.mean, comp.kappa, rng)
            }
        }
    };
    let mut image = Vec::with_capacity(spec.count);
    let mut text = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        image.push(draw(&mut rng)?);
        text.push(draw(&mut rng)?);
    }
    EmbeddingPairSet::from_points(&image, &text)
}

/// Log of the modified Bessel function of the first kind, `log I_nu(x)`,
/// by log-sum-exp over the ascending series. Adequate for the moderate
/// arguments the vMF normalizer needs.
fn log_bessel_i(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0 && nu >= 0.0);
    let log_half_x = (x / 2.0).ln();
    // Series terms peak near k* = (-(nu+1) + sqrt((nu+1)^2 + x^2)) / 2.
    let peak = 0.5 * (-(nu + 1.0) + ((nu + 1.0) * (nu + 1.0) + x * x).sqrt());
    let kmax = (peak as usize + 12 * (peak.sqrt() as usize + 1) + 64).max(64);
    let mut max_term = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(kmax + 1);
    for k in 0..=kmax {
        let kf = k as f64;
        let t = (2.0 * kf + nu) * log_half_x
            - libm::lgamma(kf + 1.0)
            - libm::lgamma(kf + nu + 1.0);
        max_term = max_term.max(t);
        terms.push(t);
    }
    max_term + terms.iter().map(|t| (t - max_term).exp()).sum::<f64>().ln()
}

/// Exact vMF log-density at `z` for one component. Uses the closed form
/// `log(kappa / (4 pi sinh kappa)) + kappa <mu, z>` when `d = 3`, and the
/// Bessel-normalized formula for general `d`. `kappa = 0` is the uniform
/// distribution on the sphere.
pub fn analytic_vmf_logpdf(z: &SpherePoint, mean: &SpherePoint, kappa: f64) -> Result<f64> {
    if z.dim() != mean.dim() {
        return Err(Error::DimensionMismatch {
            expected: mean.dim(),
            got: z.dim(),
        });
    }
    if kappa < 0.0 {
        return Err(Error::InvalidConfig("kappa must be nonnegative".into()));
    }
    let d = z.dim();
    if kappa < 1e-12 {
        return sphere::log_uniform_density(d);
    }
    let cos = sphere::dot(z.coords(), mean.coords());
    let log_norm = if d == 3 {
        // log(kappa / (4 pi sinh kappa)), written to stay finite at large kappa.
        let log_sinh = kappa + ((1.0 - (-2.0 * kappa).exp()) / 2.0).ln();
        kappa.ln() - (4.0 * std::f64::consts::PI).ln() - log_sinh
    } else {
        let nu = d as f64 / 2.0 - 1.0;
        nu * kappa.ln()
            - (d as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln()
            - log_bessel_i(nu, kappa)
    };
    Ok(log_norm + kappa * cos)
}

/// Mixture log-density via log-sum-exp over weighted components.
pub fn analytic_mixture_logpdf(z: &SpherePoint, components: &[VmfComponent]) -> Result<f64> {
    if components.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut logs = Vec::with_capacity(components.len());
    for comp in components {
        logs.push(comp.weight.ln() + analytic_vmf_logpdf(z, &comp.mean, comp.kappa)?);
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
}

/// Near-uniform quadrature nodes on `S^2` (Fibonacci lattice); pair each
/// node with weight `4 pi / n` to integrate smooth densities.
pub fn fibonacci_sphere(n: usize) -> Vec<SpherePoint> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            SpherePoint::new(vec![r * phi.cos(), r * phi.sin(), z])
                .expect("lattice points are unit")
        })
        .collect()
}
