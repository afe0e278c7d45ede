//! Evaluation measures: hit rate, CMC / rank-1, FNIR-FPIR trade-off, EER,
//! FNIR at fixed FPIR, decidability, and the 1-Wasserstein distance used
//! for the morph-balance check.
//!
//! All rates use empirical step functions over the observed scores; no
//! smoothing or interpolation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::modality::{Comparator, Fuser};
use crate::sample::{Gallery, SubjectId};

/// Mated and non-mated dissimilarity scores. A mated entry of `+inf` marks
/// a transaction that can never be accepted (the true subject was lost).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub mated: Vec<f64>,
    pub nonmated: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub threshold: f64,
    pub fnir: f64,
    pub fpir: f64,
}

/// (true subject, final candidate list) of one closed-set transaction.
pub type Trial = (SubjectId, Vec<SubjectId>);

pub fn hit_rate(trials: &[Trial]) -> Result<f64> {
    if trials.is_empty() {
        return Err(invalid("hit rate of zero trials"));
    }
    let hits = trials.iter().filter(|(truth, cands)| cands.contains(truth)).count();
    Ok(hits as f64 / trials.len() as f64)
}

/// `cmc[r - 1]` is the fraction of trials with the truth at rank `<= r`.
/// Rankings are ordered best first; the curve spans the longest ranking.
pub fn cmc_curve(rankings: &[Trial]) -> Result<Vec<f64>> {
    if rankings.is_empty() {
        return Err(invalid("CMC of zero rankings"));
    }
    let len = rankings.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    let mut at_rank = vec![0usize; len];
    for (truth, ranking) in rankings {
        if let Some(p) = ranking.iter().position(|s| s == truth) {
            at_rank[p] += 1;
        }
    }
    let total = rankings.len() as f64;
    let mut acc = 0usize;
    Ok(at_rank
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / total
        })
        .collect())
}

pub fn rank1(rankings: &[Trial]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(invalid("rank-1 rate of zero rankings"));
    }
    let hits = rankings.iter().filter(|(t, r)| r.first() == Some(t)).count();
    Ok(hits as f64 / rankings.len() as f64)
}

fn check_nonempty(scores: &ScoreSet) -> Result<()> {
    if scores.mated.is_empty() || scores.nonmated.is_empty() {
        return Err(invalid("mated and non-mated score lists must both be non-empty"));
    }
    if scores.mated.iter().chain(&scores.nonmated).any(|s| s.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// FNIR(t) = share of mated scores above t; FPIR(t) = share of non-mated
/// scores at or below t; one point per distinct finite observed score.
pub fn fnir_fpir_sweep(scores: &ScoreSet) -> Result<Vec<TradeoffPoint>> {
    check_nonempty(scores)?;
    let mated = sorted(&scores.mated);
    let nonmated = sorted(&scores.nonmated);
    let mut thresholds: Vec<f64> = mated.iter().chain(&nonmated).copied().filter(|s| s.is_finite()).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nm, nn) = (mated.len() as f64, nonmated.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let mated_le = mated.partition_point(|&s| s <= t);
            let nonmated_le = nonmated.partition_point(|&s| s <= t);
            TradeoffPoint {
                threshold: t,
                fnir: (mated.len() - mated_le) as f64 / nm,
                fpir: nonmated_le as f64 / nn,
            }
        })
        .collect())
}

/// Operating point where |FNIR - FPIR| is smallest (first such threshold).
pub fn eer_point(sweep: &[TradeoffPoint]) -> Option<TradeoffPoint> {
    let mut best: Option<TradeoffPoint> = None;
    for p in sweep {
        let gap = (p.fnir - p.fpir).abs();
        if best.is_none_or(|b| gap < (b.fnir - b.fpir).abs()) {
            best = Some(*p);
        }
    }
    best
}

/// Equal error rate: midpoint of FNIR and FPIR at the crossing threshold.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let sweep = fnir_fpir_sweep(scores)?;
    let p = eer_point(&sweep).ok_or_else(|| Error::UndefinedMeasure("no finite scores".into()))?;
    Ok(0.5 * (p.fnir + p.fpir))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnirAtFpir {
    pub fnir: f64,
    pub fpir: f64,
    pub threshold: f64,
    /// Fewer than `1/target` non-mated scores: the target lies below the
    /// resolution of the data and the value comes from the coarser grid.
    pub resolution_limited: bool,
}

/// Smallest FNIR among thresholds whose FPIR does not exceed `target`.
/// With no such threshold everything is rejected (FNIR 1, threshold -inf).
pub fn fnir_at_fpir(scores: &ScoreSet, target: f64) -> Result<FnirAtFpir> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(invalid(format!("FPIR target {target} outside (0, 1]")));
    }
    let sweep = fnir_fpir_sweep(scores)?;
    let resolution_limited = (scores.nonmated.len() as f64) < (1.0 / target).ceil();
    let mut out = FnirAtFpir { fnir: 1.0, fpir: 0.0, threshold: f64::NEG_INFINITY, resolution_limited };
    for p in sweep.iter().filter(|p| p.fpir <= target) {
        if p.fnir < out.fnir {
            out.fnir = p.fnir;
            out.fpir = p.fpir;
            out.threshold = p.threshold;
        }
    }
    Ok(out)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Decidability d' = |mu_m - mu_n| / sqrt((var_m + var_n) / 2) with unbiased
/// variances. Non-finite scores (lost transactions) are left out.
pub fn decidability(scores: &ScoreSet) -> Result<f64> {
    let mated: Vec<f64> = scores.mated.iter().copied().filter(|s| s.is_finite()).collect();
    let nonmated: Vec<f64> = scores.nonmated.iter().copied().filter(|s| s.is_finite()).collect();
    if mated.len() < 2 || nonmated.len() < 2 {
        return Err(invalid("decidability needs at least two finite scores per class"));
    }
    let (mm, vm) = mean_var(&mated);
    let (mn, vn) = mean_var(&nonmated);
    let pooled = ((vm + vn) / 2.0).sqrt();
    if pooled == 0.0 {
        return Err(Error::UndefinedMeasure("zero pooled variance".into()));
    }
    Ok((mm - mn).abs() / pooled)
}

/// Exact 1-Wasserstein distance between two empirical distributions,
/// computed as the integral of |F_a - F_b| over the merged sample points.
pub fn wasserstein_cdf(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("Wasserstein distance of an empty sample"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("Wasserstein distance needs finite samples"));
    }
    let a = sorted(a);
    let b = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let gap = (i as f64 / na - j as f64 / nb).abs();
        total += gap * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphBalance {
    /// Scores of first-position contributors' probes against their morph.
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub distance: f64,
}

/// Morph-balance check: subjects are shuffled and paired, each pair's
/// references are fused, and probes of both contributors are scored against
/// the morph. Each pair contributes the same number of probes per side.
pub fn morph_balance<C: Comparator + ?Sized, F: Fuser + ?Sized>(
    gallery: &Gallery,
    fuser: &F,
    comparator: &C,
    seed: u64,
) -> Result<MorphBalance> {
    let by_subject = gallery.probes_by_subject();
    let mut eligible: Vec<usize> = (0..gallery.len()).filter(|&s| !by_subject[s].is_empty()).collect();
    if eligible.len() < 2 {
        return Err(invalid("morph balance needs at least two subjects with probes"));
    }
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut first = Vec::new();
    let mut second = Vec::new();
    for pair in eligible.chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        let morph = fuser.fuse(&[&gallery.references()[a], &gallery.references()[b]])?;
        let m = by_subject[a].len().min(by_subject[b].len());
        for p in &by_subject[a][..m] {
            first.push(comparator.compare(p, &morph)?);
        }
        for p in &by_subject[b][..m] {
            second.push(comparator.compare(p, &morph)?);
        }
    }
    let distance = wasserstein_cdf(&first, &second)?;
    Ok(MorphBalance { first, second, distance })
}

pub fn write_cmc_csv<W: Write>(cmc: &[f64], w: &mut W) -> Result<()> {
    writeln!(w, "rank,rate")?;
    for (r, v) in cmc.iter().enumerate() {
        writeln!(w, "{},{v}", r + 1)?;
    }
    Ok(())
}

pub fn write_tradeoff_csv<W: Write>(sweep: &[TradeoffPoint], w: &mut W) -> Result<()> {
    writeln!(w, "threshold,fnir,fpir")?;
    for p in sweep {
        writeln!(w, "{},{},{}", p.threshold, p.fnir, p.fpir)?;
    }
    Ok(())
}

/// Histogram of `scores` over `bins` equal-width bins spanning their range.
pub fn write_histogram_csv<W: Write>(scores: &[f64], bins: usize, w: &mut W) -> Result<()> {
    writeln!(w, "bin_center,count")?;
    let finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Ok(());
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for s in finite {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        writeln!(w, "{},{c}", lo + (i as f64 + 0.5) * width)?;
    }
    Ok(())
}
