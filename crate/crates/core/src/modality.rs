//! Recognizer contracts and the synthetic modality.
//!
//! Every recognizer is a black box reached through [`Comparator`] (score two
//! samples) and [`Fuser`] (signal-level fusion of several samples into one
//! morph). The synthetic modality models identities as points on the unit
//! hypersphere with Gaussian sample noise, compares with Euclidean distance
//! and fuses by renormalized mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sample::{
    Attributes, Gallery, Probe, SampleVector, Subject, SubjectId, AGE_BINS, SEX_CATEGORIES,
    SKIN_TONES,
};

/// Dissimilarity between two samples; lower is more similar.
pub trait Comparator: Sync {
    fn compare(&self, a: &SampleVector, b: &SampleVector) -> Result<f64>;
}

/// Signal-level fusion of parent samples into a single morph.
pub trait Fuser: Sync {
    fn fuse(&self, parents: &[&SampleVector]) -> Result<SampleVector>;
}

fn check_dims(a: &SampleVector, b: &SampleVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    Ok(())
}

/// Euclidean distance; the synthetic default comparator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl Comparator for Euclidean {
    fn compare(&self, a: &SampleVector, b: &SampleVector) -> Result<f64> {
        check_dims(a, b)?;
        let sq: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(sq.sqrt())
    }
}

/// Similarity score emitted by an external recognizer (higher = more similar).
pub trait SimilarityScorer: Sync {
    fn similarity(&self, a: &SampleVector, b: &SampleVector) -> Result<f64>;
}

/// Adapts a similarity-emitting recognizer to the dissimilarity convention by
/// negating and shifting: `upper - similarity`, clamped at zero.
#[derive(Debug, Clone)]
pub struct FromSimilarity<S> {
    pub scorer: S,
    pub upper: f64,
}

impl<S: SimilarityScorer> Comparator for FromSimilarity<S> {
    fn compare(&self, a: &SampleVector, b: &SampleVector) -> Result<f64> {
        let s = self.scorer.similarity(a, b)?;
        Ok((self.upper - s).max(0.0))
    }
}

/// Cosine similarity, mainly useful together with [`FromSimilarity`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Cosine;

impl SimilarityScorer for Cosine {
    fn similarity(&self, a: &SampleVector, b: &SampleVector) -> Result<f64> {
        check_dims(a, b)?;
        let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
        let denom = a.norm() * b.norm();
        if denom == 0.0 {
            return Err(invalid("cosine similarity of a zero vector"));
        }
        Ok(dot / denom)
    }
}

fn check_parents(parents: &[&SampleVector]) -> Result<usize> {
    let first = parents.first().ok_or_else(|| invalid("fusion needs at least one parent"))?;
    let dim = first.dim();
    for p in parents {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: p.dim() });
        }
    }
    Ok(dim)
}

/// Arithmetic mean followed by renormalization; every parent contributes
/// equally.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanFuser;

impl Fuser for MeanFuser {
    fn fuse(&self, parents: &[&SampleVector]) -> Result<SampleVector> {
        let dim = check_parents(parents)?;
        // Summation order is fixed by a total order over the parents so the
        // result is bit-identical under any permutation of the input.
        let mut ordered = parents.to_vec();
        ordered.sort_by(|a, b| {
            a.values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut acc = vec![0.0; dim];
        for p in &ordered {
            for (a, v) in acc.iter_mut().zip(p.values()) {
                *a += v;
            }
        }
        let scale = 1.0 / ordered.len() as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
        SampleVector::normalized(acc).map_err(|_| {
            Error::DegenerateFusion(format!(
                "mean of {} parents has zero norm (antipodal parents)",
                parents.len()
            ))
        })
    }
}

/// Position-weighted mean with renormalization. Models fusion tools that
/// favour one parent; parent order matters.
#[derive(Debug, Clone, Default)]
pub struct WeightedFuser {
    pub weights: Vec<f64>,
}

impl WeightedFuser {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("fusion weights must be finite and non-negative"));
        }
        Ok(WeightedFuser { weights })
    }
}

impl Fuser for WeightedFuser {
    fn fuse(&self, parents: &[&SampleVector]) -> Result<SampleVector> {
        let dim = check_parents(parents)?;
        if parents.len() != self.weights.len() {
            return Err(invalid(format!(
                "{} weights for {} parents",
                self.weights.len(),
                parents.len()
            )));
        }
        let mut acc = vec![0.0; dim];
        for (p, w) in parents.iter().zip(&self.weights) {
            for (a, v) in acc.iter_mut().zip(p.values()) {
                *a += w * v;
            }
        }
        SampleVector::normalized(acc)
            .map_err(|_| Error::DegenerateFusion("weighted mean has zero norm".into()))
    }
}

/// Parameters of the synthetic identity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticModelParams {
    pub n_subjects: usize,
    pub dimension: usize,
    pub centroid_seed: u64,
    pub noise_seed: u64,
    /// Per-coordinate Gaussian std applied before renormalization.
    pub noise_sigma: f64,
    pub probes_per_subject: usize,
    /// Fraction of probe owners that have no reference.
    pub unenrolled_fraction: f64,
    /// Weight of the attribute-dependent offset in each centroid. Zero gives
    /// centroids uniform on the sphere, independent of attributes.
    pub attribute_strength: f64,
}

impl Default for SyntheticModelParams {
    fn default() -> Self {
        SyntheticModelParams {
            n_subjects: 1024,
            dimension: 128,
            centroid_seed: 1,
            noise_seed: 2,
            noise_sigma: 0.05,
            probes_per_subject: 2,
            unenrolled_fraction: 0.1,
            attribute_strength: 0.3,
        }
    }
}

impl SyntheticModelParams {
    /// Both seeds derived from a single value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.centroid_seed = seed;
        self.noise_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(invalid("n_subjects must be at least 2"));
        }
        if self.dimension < 2 {
            return Err(invalid("dimension must be at least 2"));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(invalid("noise_sigma must be positive"));
        }
        if !(0.0..1.0).contains(&self.unenrolled_fraction) {
            return Err(invalid("unenrolled_fraction must lie in [0, 1)"));
        }
        if !(self.attribute_strength >= 0.0) || !self.attribute_strength.is_finite() {
            return Err(invalid("attribute_strength must be non-negative"));
        }
        Ok(())
    }

    /// Unenrolled identities generated so that they make up
    /// `unenrolled_fraction` of all probe owners.
    pub fn unenrolled_count(&self) -> usize {
        let f = self.unenrolled_fraction;
        (self.n_subjects as f64 * f / (1.0 - f)).round() as usize
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        if let Ok(s) = SampleVector::normalized(v) {
            return s.into_inner();
        }
    }
}

fn noisy_sample(rng: &mut ChaCha8Rng, centroid: &[f64], sigma: f64) -> SampleVector {
    loop {
        let v: Vec<f64> = centroid
            .iter()
            .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(s) = SampleVector::normalized(v) {
            return s;
        }
    }
}

/// Generates a synthetic gallery; a pure function of `params`.
///
/// Identities draw their attributes uniformly, then a centroid
/// `normalize(g + strength * (u_sex + u_age + u_skin))` with isotropic `g`
/// and per-category unit directions `u`. Age directions interpolate between
/// two anchors so neighbouring bins stay close. References come first from
/// the noise stream, then probes (enrolled subjects first, then unenrolled).
pub fn generate_gallery(params: &SyntheticModelParams) -> Result<Gallery> {
    params.validate()?;
    let d = params.dimension;
    let n = params.n_subjects;
    let total = n + params.unenrolled_count();
    let mut crng = ChaCha8Rng::seed_from_u64(params.centroid_seed);

    let sex_dirs: Vec<Vec<f64>> = (0..SEX_CATEGORIES).map(|_| unit_vec(&mut crng, d)).collect();
    let skin_dirs: Vec<Vec<f64>> = (0..SKIN_TONES).map(|_| unit_vec(&mut crng, d)).collect();
    let young = unit_vec(&mut crng, d);
    let old = unit_vec(&mut crng, d);
    let age_dirs: Vec<Vec<f64>> = (0..AGE_BINS)
        .map(|b| {
            let t = b as f64 / (AGE_BINS - 1) as f64;
            let mix: Vec<f64> = young.iter().zip(&old).map(|(y, o)| (1.0 - t) * y + t * o).collect();
            SampleVector::normalized(mix).map(|s| s.into_inner()).unwrap_or_else(|_| young.clone())
        })
        .collect();

    let mut identities = Vec::with_capacity(total);
    for _ in 0..total {
        let attrs = Attributes {
            sex: crng.random_range(0..SEX_CATEGORIES),
            age_bin: crng.random_range(0..AGE_BINS),
            skin_tone: crng.random_range(0..SKIN_TONES),
        };
        let g = gaussian_vec(&mut crng, d, 1.0 / (d as f64).sqrt());
        let s = params.attribute_strength;
        let raw: Vec<f64> = (0..d)
            .map(|i| {
                g[i] + s
                    * (sex_dirs[attrs.sex as usize][i]
                        + age_dirs[attrs.age_bin as usize][i]
                        + skin_dirs[attrs.skin_tone as usize][i])
            })
            .collect();
        let centroid = match SampleVector::normalized(raw) {
            Ok(c) => c.into_inner(),
            Err(_) => unit_vec(&mut crng, d),
        };
        identities.push((attrs, centroid));
    }

    let mut nrng = ChaCha8Rng::seed_from_u64(params.noise_seed);
    let mut subjects = Vec::with_capacity(n);
    let mut references = Vec::with_capacity(n);
    for (i, (attrs, centroid)) in identities[..n].iter().enumerate() {
        subjects.push(Subject { id: SubjectId(i as u32), attributes: *attrs });
        references.push(noisy_sample(&mut nrng, centroid, params.noise_sigma));
    }
    let mut unenrolled = Vec::with_capacity(total - n);
    let mut probes = Vec::with_capacity(total * params.probes_per_subject);
    for (i, (attrs, centroid)) in identities.iter().enumerate() {
        let enrolled = i < n;
        let owner = SubjectId(i as u32);
        if !enrolled {
            if params.probes_per_subject == 0 {
                continue;
            }
            unenrolled.push(Subject { id: owner, attributes: *attrs });
        }
        for _ in 0..params.probes_per_subject {
            probes.push(Probe {
                owner,
                enrolled,
                sample: noisy_sample(&mut nrng, centroid, params.noise_sigma),
            });
        }
    }
    Gallery::new(subjects, references, unenrolled, probes)
}
