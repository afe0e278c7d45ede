//! Gallery data model: subjects, their reference and probe samples, and
//! soft-biometric attributes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense subject identifier. Enrolled subjects occupy `0..N`; unenrolled
/// probe owners (open-set trials) use ids `>= N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectId(pub u32);

impl SubjectId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Fixed-dimension embedding standing for one biometric sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleVector(Vec<f64>);

impl SampleVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("sample vector must have at least one coordinate"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("sample coordinate {i} is not finite")));
        }
        Ok(SampleVector(values))
    }

    /// Scales `values` to unit Euclidean norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateFusion(format!(
                "cannot normalize vector with norm {norm}"
            )));
        }
        SampleVector::new(values.into_iter().map(|v| v / norm).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Number of categories for each soft-biometric attribute.
pub const SEX_CATEGORIES: u8 = 2;
pub const AGE_BINS: u8 = 7;
pub const SKIN_TONES: u8 = 6;

/// Attribute code meaning "not annotated".
pub const UNKNOWN_ATTRIBUTE: u8 = u8::MAX;

/// Soft-biometric attributes. Age is bucketed into decade-wide bins so that
/// bin distance is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub sex: u8,
    pub age_bin: u8,
    pub skin_tone: u8,
}

impl Attributes {
    pub const UNKNOWN: Attributes = Attributes {
        sex: UNKNOWN_ATTRIBUTE,
        age_bin: UNKNOWN_ATTRIBUTE,
        skin_tone: UNKNOWN_ATTRIBUTE,
    };

    pub fn new(sex: u8, age_bin: u8, skin_tone: u8) -> Result<Self> {
        let a = Attributes { sex, age_bin, skin_tone };
        a.validate()?;
        Ok(a)
    }

    pub fn is_complete(&self) -> bool {
        self.sex != UNKNOWN_ATTRIBUTE
            && self.age_bin != UNKNOWN_ATTRIBUTE
            && self.skin_tone != UNKNOWN_ATTRIBUTE
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, code: u8, count: u8| {
            if code == UNKNOWN_ATTRIBUTE || code < count {
                Ok(())
            } else {
                Err(invalid(format!("{name} code {code} outside 0..{count}")))
            }
        };
        check("sex", self.sex, SEX_CATEGORIES)?;
        check("age_bin", self.age_bin, AGE_BINS)?;
        check("skin_tone", self.skin_tone, SKIN_TONES)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: SubjectId,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub owner: SubjectId,
    /// False for open-set impostor probes whose owner has no reference.
    pub enrolled: bool,
    pub sample: SampleVector,
}

/// An enrolment database: one reference per enrolled subject plus probes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    dim: usize,
    subjects: Vec<Subject>,
    references: Vec<SampleVector>,
    unenrolled: Vec<Subject>,
    probes: Vec<Probe>,
}

impl Gallery {
    /// Assembles a gallery. `subjects[i]` owns `references[i]` and must carry
    /// id `i`. Unenrolled owners must have ids `>= subjects.len()`.
    pub fn new(
        subjects: Vec<Subject>,
        references: Vec<SampleVector>,
        unenrolled: Vec<Subject>,
        probes: Vec<Probe>,
    ) -> Result<Self> {
        let n = subjects.len();
        if n < 2 {
            return Err(invalid(format!("a gallery needs at least 2 subjects, got {n}")));
        }
        if references.len() != n {
            return Err(invalid(format!(
                "{} references for {n} subjects",
                references.len()
            )));
        }
        let dim = references[0].dim();
        for (i, (s, r)) in subjects.iter().zip(&references).enumerate() {
            if s.id.index() != i {
                return Err(invalid(format!("subject at position {i} has id {}", s.id)));
            }
            s.attributes.validate()?;
            if r.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: r.dim() });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for u in &unenrolled {
            if u.id.index() < n {
                return Err(invalid(format!("unenrolled subject {} collides with enrolled ids", u.id)));
            }
            if !seen.insert(u.id) {
                return Err(invalid(format!("duplicate unenrolled subject {}", u.id)));
            }
            u.attributes.validate()?;
        }
        for p in &probes {
            if p.sample.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: p.sample.dim() });
            }
            if p.enrolled && p.owner.index() >= n {
                return Err(invalid(format!("probe owner {} is not enrolled", p.owner)));
            }
            if !p.enrolled && !seen.contains(&p.owner) {
                return Err(invalid(format!("unenrolled probe owner {} is not declared", p.owner)));
            }
        }
        Ok(Gallery { dim, subjects, references, unenrolled, probes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of enrolled subjects, N.
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn references(&self) -> &[SampleVector] {
        &self.references
    }

    pub fn reference(&self, id: SubjectId) -> &SampleVector {
        &self.references[id.index()]
    }

    pub fn attributes(&self, id: SubjectId) -> &Attributes {
        &self.subjects[id.index()].attributes
    }

    pub fn unenrolled(&self) -> &[Subject] {
        &self.unenrolled
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn enrolled_probes(&self) -> impl Iterator<Item = &Probe> {
        self.probes.iter().filter(|p| p.enrolled)
    }

    pub fn unenrolled_probes(&self) -> impl Iterator<Item = &Probe> {
        self.probes.iter().filter(|p| !p.enrolled)
    }

    /// Probes grouped per enrolled subject, in probe order.
    pub fn probes_by_subject(&self) -> Vec<Vec<&SampleVector>> {
        let mut out = vec![Vec::new(); self.len()];
        for p in self.enrolled_probes() {
            out[p.owner.index()].push(&p.sample);
        }
        out
    }
}
