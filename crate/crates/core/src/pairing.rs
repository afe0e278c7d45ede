//! Selection of subjects to fuse together.
//!
//! Pairing is posed as a linear assignment problem over an N x N cost
//! matrix whose diagonal is forbidden, solved with the Hungarian algorithm.
//! The optimal bijection is then turned into disjoint pairs, and for
//! capacities 4 and 8 the whole procedure is repeated over the fused pairs.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::modality::{Comparator, Fuser};
use crate::sample::{Attributes, Gallery, SampleVector, SubjectId};

/// Stand-in for an infinite cost: the largest finite `f64`.
pub const SENTINEL: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    /// Builds a matrix from row-major off-diagonal costs; diagonal entries of
    /// `costs` are overwritten with [`SENTINEL`].
    pub fn new(n: usize, mut costs: Vec<f64>) -> Result<Self> {
        if costs.len() != n * n {
            return Err(invalid(format!("{} entries for a {n}x{n} matrix", costs.len())));
        }
        for i in 0..n {
            for j in 0..n {
                let c = &mut costs[i * n + j];
                if i == j {
                    *c = SENTINEL;
                } else if !c.is_finite() || *c < 0.0 || *c == SENTINEL {
                    return Err(invalid(format!("cost ({i},{j}) = {c} must be finite and non-negative")));
                }
            }
        }
        Ok(CostMatrix { n, costs })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let costs = (0..n * n)
            .map(|k| if k / n == k % n { SENTINEL } else { f(k / n, k % n) })
            .collect();
        CostMatrix::new(n, costs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.costs[i * self.n..(i + 1) * self.n]
    }

    /// Symmetrized cost of putting `a` and `b` in one group.
    pub fn pair_cost(&self, a: usize, b: usize) -> f64 {
        0.5 * (self.get(a, b) + self.get(b, a))
    }
}

/// Pairwise comparator scores between `samples`.
pub fn similarity_cost_matrix<C: Comparator + ?Sized>(
    samples: &[SampleVector],
    comparator: &C,
) -> Result<CostMatrix> {
    let n = samples.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if i == j { Ok(SENTINEL) } else { comparator.compare(&samples[i], &samples[j]) })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    CostMatrix::new(n, rows.concat())
}

pub fn build_similarity_cost_matrix<C: Comparator + ?Sized>(
    gallery: &Gallery,
    comparator: &C,
) -> Result<CostMatrix> {
    similarity_cost_matrix(gallery.references(), comparator)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftBioWeights {
    pub sex: f64,
    pub age: f64,
    pub skin: f64,
}

impl Default for SoftBioWeights {
    fn default() -> Self {
        SoftBioWeights { sex: 1.0, age: 1.0, skin: 1.0 }
    }
}

impl SoftBioWeights {
    pub fn cost(&self, a: &Attributes, b: &Attributes) -> f64 {
        let sex = if a.sex != b.sex { self.sex } else { 0.0 };
        let skin = if a.skin_tone != b.skin_tone { self.skin } else { 0.0 };
        let age = self.age * (a.age_bin as f64 - b.age_bin as f64).abs();
        sex + age + skin
    }
}

pub fn softbio_cost_matrix(attributes: &[Attributes], weights: &SoftBioWeights) -> Result<CostMatrix> {
    if let Some(i) = attributes.iter().position(|a| !a.is_complete()) {
        return Err(invalid(format!("item {i} lacks soft-biometric attributes")));
    }
    CostMatrix::from_fn(attributes.len(), |i, j| weights.cost(&attributes[i], &attributes[j]))
}

pub fn build_softbio_cost_matrix(gallery: &Gallery, weights: &SoftBioWeights) -> Result<CostMatrix> {
    let attrs: Vec<Attributes> = gallery.subjects().iter().map(|s| s.attributes).collect();
    softbio_cost_matrix(&attrs, weights)
}

/// A bijection of `0..n` onto itself with no fixed points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub mapping: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, c: &CostMatrix) -> f64 {
        self.mapping.iter().enumerate().map(|(s, &t)| c.get(s, t)).sum()
    }
}

/// Minimum-cost assignment via the Hungarian (Kuhn-Munkres) algorithm in its
/// O(n^3) shortest-augmenting-path form with row/column potentials.
/// Sentinel entries are treated as forbidden edges rather than large
/// numbers, so the potentials never absorb `f64::MAX`.
pub fn solve_assignment(c: &CostMatrix) -> Result<Assignment> {
    let n = c.n();
    if n < 2 {
        return Err(Error::Infeasible(format!("no derangement of {n} element(s)")));
    }
    // 1-based indexing; column 0 is a virtual start node.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = matched_row[col0];
            let costs = c.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cost = costs[j - 1];
                if cost != SENTINEL {
                    let cur = cost - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = col0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            if col1 == 0 {
                return Err(Error::Infeasible(format!("row {} has no admissible column", i0 - 1)));
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched_row[col0] = matched_row[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        mapping[matched_row[j] - 1] = j - 1;
    }
    if let Some(s) = (0..n).find(|&s| mapping[s] == s) {
        return Err(Error::Infeasible(format!("item {s} could only be mapped to itself")));
    }
    Ok(Assignment { mapping })
}

/// Turns a bijection into disjoint groups of at most two items.
///
/// Mutual pairs (2-cycles) are kept as they are. Items on longer cycles are
/// paired greedily by ascending pair cost, then improved by exchanging
/// partners between any two pairs (and with the odd item out, if any) until
/// no exchange lowers the total. An odd leftover yields one singleton.
pub fn assignment_to_groups(f: &Assignment, c: &CostMatrix) -> Vec<Vec<usize>> {
    let n = f.mapping.len();
    let mut groups = Vec::new();
    let mut leftover = Vec::new();
    for a in 0..n {
        let b = f.mapping[a];
        if f.mapping[b] == a && a != b {
            if a < b {
                groups.push(vec![a, b]);
            }
        } else {
            leftover.push(a);
        }
    }
    groups.extend(pair_leftover(&leftover, c));
    groups
}

fn pair_leftover(items: &[usize], c: &CostMatrix) -> Vec<Vec<usize>> {
    let mut edges = Vec::with_capacity(items.len() * items.len().saturating_sub(1) / 2);
    for (x, &a) in items.iter().enumerate() {
        for &b in &items[x + 1..] {
            edges.push((c.pair_cost(a, b), a, b));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let max = items.iter().copied().max().map_or(0, |m| m + 1);
    let mut taken = vec![false; max];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (_, a, b) in edges {
        if !taken[a] && !taken[b] {
            taken[a] = true;
            taken[b] = true;
            pairs.push((a, b));
        }
    }
    let mut single = items.iter().copied().find(|&a| !taken[a]);

    let pc = |a: usize, b: usize| c.pair_cost(a, b);
    let mut improved = true;
    while improved {
        improved = false;
        for p in 0..pairs.len() {
            for q in p + 1..pairs.len() {
                let ((a, b), (x, y)) = (pairs[p], pairs[q]);
                let now = pc(a, b) + pc(x, y);
                let alt1 = pc(a, x) + pc(b, y);
                let alt2 = pc(a, y) + pc(b, x);
                if alt1 < now && alt1 <= alt2 {
                    pairs[p] = (a, x);
                    pairs[q] = (b, y);
                    improved = true;
                } else if alt2 < now {
                    pairs[p] = (a, y);
                    pairs[q] = (b, x);
                    improved = true;
                }
            }
            if let Some(s) = single {
                let (a, b) = pairs[p];
                let now = pc(a, b);
                if pc(a, s) < now && pc(a, s) <= pc(s, b) {
                    pairs[p] = (a, s);
                    single = Some(b);
                    improved = true;
                } else if pc(s, b) < now {
                    pairs[p] = (s, b);
                    single = Some(a);
                    improved = true;
                }
            }
        }
    }
    let mut out: Vec<Vec<usize>> = pairs
        .into_iter()
        .map(|(a, b)| if a < b { vec![a, b] } else { vec![b, a] })
        .collect();
    out.extend(single.map(|s| vec![s]));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum PairingMethod {
    Random { seed: u64 },
    SoftBiometric { weights: SoftBioWeights },
    SimilarityScore,
}

impl PairingMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PairingMethod::Random { .. } => "random",
            PairingMethod::SoftBiometric { .. } => "softbio",
            PairingMethod::SimilarityScore => "similarity",
        }
    }

    /// Stable textual identity, embedded in index files.
    pub fn fingerprint(&self) -> String {
        match self {
            PairingMethod::Random { seed } => format!("random:{seed}"),
            PairingMethod::SoftBiometric { weights: w } => {
                format!("softbio:{:?},{:?},{:?}", w.sex, w.age, w.skin)
            }
            PairingMethod::SimilarityScore => "similarity".to_string(),
        }
    }

    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "random" => Ok(PairingMethod::Random { seed }),
            "softbio" | "soft-biometric" => Ok(PairingMethod::SoftBiometric { weights: SoftBioWeights::default() }),
            "similarity" | "similarity-score" => Ok(PairingMethod::SimilarityScore),
            other => Err(invalid(format!("unknown pairing method {other:?}"))),
        }
    }
}

/// Disjoint set of subjects fused into one morph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MorphGroup {
    pub members: Vec<SubjectId>,
}

/// Output of iterated pairing. `rounds[r][g]` lists the indices of the items
/// of round `r - 1` merged into group `g` (round 0 indexes subjects).
/// Groups within a round are ordered by smallest member id, as are the
/// children inside each group.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingHierarchy {
    pub rounds: Vec<Vec<Vec<usize>>>,
    pub members: Vec<Vec<Vec<SubjectId>>>,
}

impl PairingHierarchy {
    pub fn groups(&self, round: usize) -> Vec<MorphGroup> {
        self.members[round].iter().map(|m| MorphGroup { members: m.clone() }).collect()
    }

    pub fn last(&self) -> Vec<MorphGroup> {
        self.groups(self.members.len() - 1)
    }
}

pub fn rounds_for_capacity(capacity: usize) -> Result<usize> {
    match capacity {
        2 => Ok(1),
        4 => Ok(2),
        8 => Ok(3),
        other => Err(invalid(format!("morph capacity must be 2, 4 or 8, got {other}"))),
    }
}

/// Majority sex and skin tone (ties to the first member's value among the
/// tied categories) and rounded mean age bin.
pub fn group_profile(members: &[Attributes]) -> Attributes {
    fn majority(values: &[u8]) -> u8 {
        let count = |v: u8| values.iter().filter(|&&x| x == v).count();
        let best = values.iter().map(|&v| count(v)).max().unwrap_or(0);
        values.iter().copied().find(|&v| count(v) == best).unwrap_or(0)
    }
    let sexes: Vec<u8> = members.iter().map(|a| a.sex).collect();
    let skins: Vec<u8> = members.iter().map(|a| a.skin_tone).collect();
    let age = members.iter().map(|a| a.age_bin as f64).sum::<f64>() / members.len() as f64;
    Attributes { sex: majority(&sexes), age_bin: age.round() as u8, skin_tone: majority(&skins) }
}

fn random_groups(m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    order.chunks(2).map(|c| c.to_vec()).collect()
}

fn optimal_groups(c: &CostMatrix) -> Result<Vec<Vec<usize>>> {
    if c.n() < 2 {
        return Ok((0..c.n()).map(|i| vec![i]).collect());
    }
    let f = solve_assignment(c)?;
    Ok(assignment_to_groups(&f, c))
}

/// Runs the pairing procedure up to `capacity`, keeping every round.
pub fn pair_hierarchy<C: Comparator + ?Sized, F: Fuser + ?Sized>(
    gallery: &Gallery,
    method: &PairingMethod,
    capacity: usize,
    comparator: &C,
    fuser: &F,
) -> Result<PairingHierarchy> {
    let n_rounds = rounds_for_capacity(capacity)?;
    let mut rng = match method {
        PairingMethod::Random { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    // Members of the current items, and their fused samples when the method
    // needs them.
    let mut items: Vec<Vec<SubjectId>> = gallery.subjects().iter().map(|s| vec![s.id]).collect();
    let mut samples: Vec<SampleVector> = Vec::new();
    let mut rounds = Vec::with_capacity(n_rounds);
    let mut members = Vec::with_capacity(n_rounds);
    for round in 0..n_rounds {
        let raw = match method {
            PairingMethod::Random { .. } => random_groups(items.len(), rng.as_mut().unwrap()),
            PairingMethod::SoftBiometric { weights } => {
                let profiles: Vec<Attributes> = items
                    .iter()
                    .map(|m| {
                        let attrs: Vec<Attributes> = m.iter().map(|&s| *gallery.attributes(s)).collect();
                        if attrs.iter().any(|a| !a.is_complete()) {
                            Err(invalid("soft-biometric pairing needs complete attributes"))
                        } else {
                            Ok(group_profile(&attrs))
                        }
                    })
                    .collect::<Result<_>>()?;
                optimal_groups(&softbio_cost_matrix(&profiles, weights)?)?
            }
            PairingMethod::SimilarityScore => {
                let current: &[SampleVector] = if round == 0 { gallery.references() } else { &samples };
                optimal_groups(&similarity_cost_matrix(current, comparator)?)?
            }
        };
        // Canonical order: children by smallest member, groups likewise.
        let mut groups: Vec<Vec<usize>> = raw
            .into_iter()
            .map(|mut g| {
                g.sort_by_key(|&i| items[i][0]);
                g
            })
            .collect();
        groups.sort_by_key(|g| items[g[0]][0]);
        let next: Vec<Vec<SubjectId>> = groups
            .iter()
            .map(|g| {
                let mut m: Vec<SubjectId> = g.iter().flat_map(|&i| items[i].iter().copied()).collect();
                m.sort();
                m
            })
            .collect();
        if matches!(method, PairingMethod::SimilarityScore) && round + 1 < n_rounds {
            let prev: &[SampleVector] = if round == 0 { gallery.references() } else { &samples };
            let fused = groups
                .par_iter()
                .map(|g| {
                    let parents: Vec<&SampleVector> = g.iter().map(|&i| &prev[i]).collect();
                    fuser.fuse(&parents)
                })
                .collect::<Result<Vec<_>>>()?;
            samples = fused;
        }
        items = next.clone();
        rounds.push(groups);
        members.push(next);
    }
    Ok(PairingHierarchy { rounds, members })
}

/// Groups of (up to) `capacity` subjects partitioning the gallery.
pub fn pair_subjects<C: Comparator + ?Sized, F: Fuser + ?Sized>(
    gallery: &Gallery,
    method: &PairingMethod,
    capacity: usize,
    comparator: &C,
    fuser: &F,
) -> Result<Vec<MorphGroup>> {
    Ok(pair_hierarchy(gallery, method, capacity, comparator, fuser)?.last())
}

/// Writes `group_id,capacity,member_ids` rows, members separated by `;`.
pub fn write_groups_csv<W: Write>(groups: &[MorphGroup], capacity: usize, w: &mut W) -> Result<()> {
    writeln!(w, "group_id,capacity,member_ids")?;
    let mut sorted: Vec<&MorphGroup> = groups.iter().collect();
    sorted.sort_by_key(|g| g.members.iter().min().copied());
    for (i, g) in sorted.iter().enumerate() {
        let ids: Vec<String> = g.members.iter().map(|m| m.to_string()).collect();
        writeln!(w, "{i},{capacity},{}", ids.join(";"))?;
    }
    Ok(())
}
