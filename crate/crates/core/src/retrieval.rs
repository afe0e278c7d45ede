//! Identification search: exhaustive baseline, two-stage and multi-stage
//! cascaded shortlist filtering, with exact comparison counting.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::index::CascadeIndex;
use crate::modality::Comparator;
use crate::sample::{SampleVector, SubjectId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// One shortlist size per morph layer, roots first.
    pub shortlist_sizes: Vec<usize>,
    pub open_set_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision", content = "subject")]
pub enum Decision {
    Accept(SubjectId),
    Reject,
}

/// What happened at one stage, for `--trace` output. Node ids are offsets
/// within the stage's layer; on the reference stage they are subject ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub layer: String,
    pub compared: Vec<u32>,
    pub scores: Vec<f64>,
    pub retained: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Final-stage candidates, ascending score, ties to the smaller id.
    pub ranked: Vec<(SubjectId, f64)>,
    pub comparisons_per_stage: Vec<usize>,
    pub total_comparisons: usize,
    pub decision: Option<Decision>,
    pub trace: Option<Vec<StageTrace>>,
}

impl SearchResult {
    pub fn candidates(&self) -> Vec<SubjectId> {
        self.ranked.iter().map(|(s, _)| *s).collect()
    }

    pub fn rank_of(&self, subject: SubjectId) -> Option<usize> {
        self.ranked.iter().position(|(s, _)| *s == subject).map(|p| p + 1)
    }
}

fn ranked_by_score(mut scored: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored
}

fn score_all<'a, C: Comparator + ?Sized>(
    probe: &SampleVector,
    ids: impl Iterator<Item = u32>,
    sample: impl Fn(u32) -> &'a SampleVector,
    comparator: &C,
) -> Result<Vec<(u32, f64)>> {
    ids.map(|id| Ok((id, comparator.compare(probe, sample(id))?))).collect()
}

struct Tracer(Option<Vec<StageTrace>>);

impl Tracer {
    fn record(&mut self, layer: String, scored: &[(u32, f64)], retained: &[(u32, f64)]) {
        if let Some(t) = self.0.as_mut() {
            t.push(StageTrace {
                stage: t.len() + 1,
                layer,
                compared: scored.iter().map(|s| s.0).collect(),
                scores: scored.iter().map(|s| s.1).collect(),
                retained: retained.iter().map(|s| s.0).collect(),
            });
        }
    }
}

fn finish(
    ranked: Vec<(u32, f64)>,
    comparisons_per_stage: Vec<usize>,
    threshold: Option<f64>,
    tracer: Tracer,
) -> SearchResult {
    let ranked: Vec<(SubjectId, f64)> = ranked.into_iter().map(|(i, s)| (SubjectId(i), s)).collect();
    let mut result = SearchResult {
        ranked,
        total_comparisons: comparisons_per_stage.iter().sum(),
        comparisons_per_stage,
        decision: None,
        trace: tracer.0,
    };
    if let Some(t) = threshold {
        result.decision = Some(decide_open_set(&result, t));
    }
    result
}

/// Compares the probe against every reference.
pub fn search_exhaustive<C: Comparator + ?Sized>(
    probe: &SampleVector,
    references: &[SampleVector],
    comparator: &C,
) -> Result<SearchResult> {
    let scored = score_all(probe, 0..references.len() as u32, |i| &references[i as usize], comparator)?;
    let n = scored.len();
    let ranked = ranked_by_score(scored);
    Ok(finish(ranked, vec![n], None, Tracer(None)))
}

/// Stage 1 against the roots, then the references of the `k` best roots.
/// Intermediate morph layers, if any, are skipped.
pub fn search_two_stage<C: Comparator + ?Sized>(
    probe: &SampleVector,
    index: &CascadeIndex,
    k: usize,
    comparator: &C,
) -> Result<SearchResult> {
    two_stage(probe, index, k, None, comparator, false)
}

pub fn search_two_stage_traced<C: Comparator + ?Sized>(
    probe: &SampleVector,
    index: &CascadeIndex,
    k: usize,
    threshold: Option<f64>,
    comparator: &C,
) -> Result<SearchResult> {
    two_stage(probe, index, k, threshold, comparator, true)
}

fn two_stage<C: Comparator + ?Sized>(
    probe: &SampleVector,
    index: &CascadeIndex,
    k: usize,
    threshold: Option<f64>,
    comparator: &C,
    trace: bool,
) -> Result<SearchResult> {
    let roots = index.roots();
    if k == 0 || k > roots.len() {
        return Err(invalid(format!("shortlist size {k} outside 1..={}", roots.len())));
    }
    let mut tracer = Tracer(trace.then(Vec::new));
    let scored = score_all(probe, 0..roots.len() as u32, |i| &roots[i as usize].fused, comparator)?;
    let ranked = ranked_by_score(scored.clone());
    let retained = &ranked[..k];
    tracer.record(format!("morph-{}", index.n1), &scored, retained);
    let subjects = retained.iter().flat_map(|&(i, _)| roots[i as usize].members.iter().map(|m| m.0));
    let final_scored = score_all(probe, subjects, |s| &index.references[s as usize], comparator)?;
    let final_ranked = ranked_by_score(final_scored.clone());
    tracer.record("reference".into(), &final_scored, &final_ranked);
    let counts = vec![scored.len(), final_scored.len()];
    Ok(finish(final_ranked, counts, threshold, tracer))
}

/// Successive shortlist filtering through every morph layer, ending at the
/// references of the surviving 2-morphs. A stage retains at most the
/// candidates it compared, so `k` above the children of the previous
/// shortlist keeps them all.
pub fn search_multi_stage<C: Comparator + ?Sized>(
    probe: &SampleVector,
    index: &CascadeIndex,
    config: &SearchConfig,
    comparator: &C,
) -> Result<SearchResult> {
    multi_stage(probe, index, config, comparator, false)
}

pub fn search_multi_stage_traced<C: Comparator + ?Sized>(
    probe: &SampleVector,
    index: &CascadeIndex,
    config: &SearchConfig,
    comparator: &C,
) -> Result<SearchResult> {
    multi_stage(probe, index, config, comparator, true)
}

fn multi_stage<C: Comparator + ?Sized>(
    probe: &SampleVector,
    index: &CascadeIndex,
    config: &SearchConfig,
    comparator: &C,
    trace: bool,
) -> Result<SearchResult> {
    let ks = &config.shortlist_sizes;
    if ks.len() != index.layers.len() {
        return Err(invalid(format!(
            "{} shortlist sizes for a cascade with {} levels (expected {})",
            ks.len(),
            index.level_count(),
            index.level_count() - 1
        )));
    }
    for (c, (&k, layer)) in ks.iter().zip(&index.layers).enumerate() {
        if k == 0 || k > layer.len() {
            return Err(invalid(format!("shortlist size {k} at level {} outside 1..={}", c + 1, layer.len())));
        }
    }
    let mut tracer = Tracer(trace.then(Vec::new));
    let mut counts = Vec::with_capacity(ks.len() + 1);
    let mut candidates: Vec<u32> = (0..index.layers[0].len() as u32).collect();
    let mut retained: Vec<(u32, f64)> = Vec::new();
    for (c, layer) in index.layers.iter().enumerate() {
        let scored = score_all(probe, candidates.iter().copied(), |i| &layer[i as usize].fused, comparator)?;
        counts.push(scored.len());
        let mut ranked = ranked_by_score(scored.clone());
        ranked.truncate(ks[c]);
        tracer.record(format!("morph-{}", index.layer_capacity(c)), &scored, &ranked);
        candidates = ranked.iter().flat_map(|&(i, _)| layer[i as usize].children.iter().map(|&ch| ch as u32)).collect();
        retained = ranked;
    }
    let last = index.layers.last().expect("validated non-empty");
    let subjects = retained.iter().flat_map(|&(i, _)| last[i as usize].members.iter().map(|m| m.0));
    let final_scored = score_all(probe, subjects, |s| &index.references[s as usize], comparator)?;
    counts.push(final_scored.len());
    let final_ranked = ranked_by_score(final_scored.clone());
    tracer.record("reference".into(), &final_scored, &final_ranked);
    Ok(finish(final_ranked, counts, config.open_set_threshold, tracer))
}

/// Accepts the rank-1 identity iff its score is within the threshold.
pub fn decide_open_set(result: &SearchResult, threshold: f64) -> Decision {
    match result.ranked.first() {
        Some(&(id, score)) if score <= threshold => Decision::Accept(id),
        _ => Decision::Reject,
    }
}

/// Two-stage comparison count, `N/n + k*n`; `ceil(N/n)` when n does not
/// divide N (full groups assumed).
pub fn predicted_workload_two_stage(n_subjects: usize, capacity: usize, k: usize) -> usize {
    n_subjects.div_ceil(capacity) + k * capacity
}

/// Multi-stage comparison count, `N/n1 + sum(2*k)` over every stage after the
/// roots, the reference stage included (full groups assumed).
pub fn predicted_workload_multi_stage(n_subjects: usize, n1: usize, ks: &[usize]) -> usize {
    n_subjects.div_ceil(n1) + ks.iter().map(|k| 2 * k).sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::build_index;
    use crate::modality::{generate_gallery, Euclidean, MeanFuser, SyntheticModelParams};
    use crate::pairing::PairingMethod;
    use crate::sample::Gallery;

    fn gallery(n: usize) -> Gallery {
        generate_gallery(&SyntheticModelParams {
            n_subjects: n,
            dimension: 32,
            probes_per_subject: 2,
            unenrolled_fraction: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    fn index(g: &Gallery, n1: usize) -> CascadeIndex {
        build_index(g, &PairingMethod::SimilarityScore, n1, &Euclidean, &MeanFuser).unwrap()
    }

    #[test]
    fn exhaustive_counts_and_identity() {
        let g = gallery(64);
        let r = search_exhaustive(&g.references()[5], g.references(), &Euclidean).unwrap();
        assert_eq!(r.total_comparisons, 64);
        assert_eq!(r.ranked[0], (SubjectId(5), 0.0));
        assert!(r.ranked.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn predicted_values() {
        assert_eq!(predicted_workload_two_stage(1024, 2, 16), 544);
        assert_eq!(predicted_workload_two_stage(1024, 4, 22), 344);
        assert_eq!(predicted_workload_multi_stage(1024, 8, &[12, 12, 12]), 200);
        assert_eq!(predicted_workload_multi_stage(1024, 4, &[32, 32]), 384);
    }

    #[test]
    fn two_stage_k_out_of_range() {
        let g = gallery(16);
        let idx = index(&g, 2);
        let p = &g.probes()[0].sample;
        assert!(search_two_stage(p, &idx, 0, &Euclidean).is_err());
        assert!(search_two_stage(p, &idx, 9, &Euclidean).is_err());
        assert!(search_two_stage(p, &idx, 8, &Euclidean).is_ok());
    }

    #[test]
    fn multi_stage_level_mismatch() {
        let g = gallery(16);
        let idx = index(&g, 4);
        let cfg = SearchConfig { shortlist_sizes: vec![2], open_set_threshold: None };
        assert!(search_multi_stage(&g.probes()[0].sample, &idx, &cfg, &Euclidean).is_err());
    }

    #[test]
    fn full_shortlist_matches_exhaustive_rank1() {
        let g = gallery(64);
        let idx = index(&g, 2);
        for p in g.probes() {
            let ex = search_exhaustive(&p.sample, g.references(), &Euclidean).unwrap();
            let ts = search_two_stage(&p.sample, &idx, 32, &Euclidean).unwrap();
            assert_eq!(ts.ranked[0], ex.ranked[0]);
        }
    }

    #[test]
    fn multi_stage_full_counts() {
        let g = gallery(64);
        let idx = index(&g, 8);
        let cfg = SearchConfig { shortlist_sizes: vec![8, 16, 32], open_set_threshold: None };
        let r = search_multi_stage(&g.probes()[0].sample, &idx, &cfg, &Euclidean).unwrap();
        assert_eq!(r.comparisons_per_stage, vec![8, 16, 32, 64]);
        assert_eq!(r.total_comparisons, 120);
    }

    #[test]
    fn open_set_decision() {
        let g = gallery(16);
        let r = search_exhaustive(&g.references()[3], g.references(), &Euclidean).unwrap();
        assert_eq!(decide_open_set(&r, 0.1), Decision::Accept(SubjectId(3)));
        assert_eq!(decide_open_set(&r, -1.0), Decision::Reject);
    }

    #[test]
    fn trace_has_one_record_per_stage() {
        let g = gallery(64);
        let idx = index(&g, 4);
        let cfg = SearchConfig { shortlist_sizes: vec![3, 4], open_set_threshold: Some(1.0) };
        let r = search_multi_stage_traced(&g.probes()[0].sample, &idx, &cfg, &Euclidean).unwrap();
        let t = r.trace.unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].retained.len(), 3);
        assert_eq!(t[1].compared.len(), 6);
        assert_eq!(t[2].layer, "reference");
        assert!(r.decision.is_some());
    }
}
