//! Workload reduction for biometric identification through a morph-based
//! multi-stage index.
//!
//! Subjects of an enrolment gallery are paired (randomly, by soft-biometric
//! attributes, or by comparison scores via an optimal assignment), their
//! samples fused into morphs, and the morphs arranged into a cascade. A
//! probe is compared against the top layer first and only the members of
//! the best-scoring morphs are searched further.

pub mod error;
pub mod harness;
pub mod index;
pub mod io;
pub mod metrics;
pub mod modality;
pub mod pairing;
pub mod retrieval;
pub mod sample;

pub use error::{Error, Result};
pub use index::{build_index, validate_index, CascadeIndex, MorphNode};
pub use modality::{generate_gallery, Comparator, Euclidean, Fuser, MeanFuser, SyntheticModelParams, WeightedFuser};
pub use pairing::{pair_subjects, solve_assignment, CostMatrix, MorphGroup, PairingMethod, SoftBioWeights};
pub use retrieval::{search_exhaustive, search_multi_stage, search_two_stage, SearchConfig, SearchResult};
pub use sample::{Attributes, Gallery, Probe, SampleVector, SubjectId};
