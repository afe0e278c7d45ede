//! Experiment orchestration: baseline evaluation, parameter sweeps over
//! morph capacity, pairing method and shortlist sizes, workload decision
//! spaces, and report files.
//!
//! Configuration is a TOML file:
//!
//! ```toml
//! output_dir = "out"
//! seed = 7
//! folds = 10                 # random-pairing repetitions
//! threads = 4                # optional worker pool size
//! mode = "two-stage"         # or "multi-stage"
//! capacities = [2, 4, 8]
//! pairings = ["random", "softbio", "similarity"]
//! open_set_thresholds = [0.9, 1.0]
//!
//! [gallery.synthetic]        # or: [gallery] path = "gallery.bin"
//! n_subjects = 1024
//! dimension = 128
//!
//! [shortlists]               # per capacity; tuples in multi-stage mode
//! 2 = [1, 2, 4, 8]
//! 4 = [1, 2, 4]
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::index::{build_index, CascadeIndex};
use crate::io::{load_samples, SampleFormat};
use crate::metrics::{
    cmc_curve, decidability, eer, fnir_at_fpir, fnir_fpir_sweep, hit_rate, rank1, write_cmc_csv,
    write_tradeoff_csv, ScoreSet, TradeoffPoint, Trial,
};
use crate::modality::{generate_gallery, Comparator, Euclidean, Fuser, MeanFuser, SyntheticModelParams};
use crate::pairing::{rounds_for_capacity, PairingMethod, SoftBioWeights};
use crate::retrieval::{
    predicted_workload_multi_stage, predicted_workload_two_stage, search_exhaustive, search_multi_stage,
    search_two_stage, SearchConfig, SearchResult,
};
use crate::sample::{Gallery, Probe};

pub const HR_LEVELS: [f64; 4] = [0.95, 0.99, 0.995, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TwoStage,
    MultiStage,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::TwoStage => "two-stage",
            Mode::MultiStage => "multi-stage",
        }
    }
}

/// A shortlist size (two-stage) or one size per morph level (multi-stage).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shortlist {
    Single(usize),
    Levels(Vec<usize>),
}

impl Shortlist {
    pub fn sizes(&self) -> Vec<usize> {
        match self {
            Shortlist::Single(k) => vec![*k],
            Shortlist::Levels(ks) => ks.clone(),
        }
    }

    pub fn label(&self) -> String {
        self.sizes().iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryConfig {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticModelParams>,
}

impl GalleryConfig {
    pub fn resolve(&self) -> Result<Gallery> {
        match (&self.path, &self.synthetic) {
            (Some(p), None) => load_samples(p, SampleFormat::from_path(p)),
            (None, Some(params)) => generate_gallery(params),
            (None, None) => generate_gallery(&SyntheticModelParams::default()),
            (Some(_), Some(_)) => Err(Error::Config("gallery: give either `path` or `synthetic`, not both".into())),
        }
    }
}

fn default_folds() -> usize {
    10
}

fn default_fpir() -> f64 {
    0.001
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub gallery: GalleryConfig,
    pub mode: Mode,
    pub capacities: Vec<usize>,
    pub pairings: Vec<String>,
    #[serde(default)]
    pub softbio_weights: SoftBioWeights,
    /// Keyed by capacity.
    pub shortlists: BTreeMap<String, Vec<Shortlist>>,
    #[serde(default)]
    pub open_set_thresholds: Vec<f64>,
    #[serde(default = "default_fpir")]
    pub fpir_target: f64,
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        if let Some(p) = cfg.gallery.path.as_mut() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentConfig::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.folds == 0 {
            return cfg_err("folds must be at least 1".into());
        }
        if self.capacities.is_empty() || self.pairings.is_empty() {
            return cfg_err("capacities and pairings must be non-empty".into());
        }
        for p in &self.pairings {
            PairingMethod::parse(p, 0).map_err(|e| Error::Config(e.to_string()))?;
        }
        for &c in &self.capacities {
            let levels = rounds_for_capacity(c).map_err(|e| Error::Config(e.to_string()))?;
            let grid = self.shortlist_grid(c)?;
            if grid.is_empty() {
                return cfg_err(format!("empty shortlist grid for capacity {c}"));
            }
            for s in grid {
                let sizes = s.sizes();
                let want = match self.mode {
                    Mode::TwoStage => 1,
                    Mode::MultiStage => levels,
                };
                if sizes.len() != want || sizes.contains(&0) {
                    return cfg_err(format!(
                        "capacity {c}: shortlist {:?} must list {want} positive size(s) in {} mode",
                        sizes,
                        self.mode.name()
                    ));
                }
            }
        }
        if !(self.fpir_target > 0.0 && self.fpir_target <= 1.0) {
            return cfg_err("fpir_target must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn shortlist_grid(&self, capacity: usize) -> Result<&[Shortlist]> {
        self.shortlists
            .get(&capacity.to_string())
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("no shortlist grid for capacity {capacity}")))
    }

    fn method(&self, name: &str, fold: usize) -> Result<PairingMethod> {
        Ok(match PairingMethod::parse(name, self.seed.wrapping_add(fold as u64))? {
            PairingMethod::SoftBiometric { .. } => PairingMethod::SoftBiometric { weights: self.softbio_weights },
            m => m,
        })
    }

    fn folds_for(&self, pairing: &str) -> usize {
        if pairing == "random" {
            self.folds
        } else {
            1
        }
    }
}

/// Metrics of one evaluation pass (one index, one shortlist setting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub mean_comparisons: f64,
    pub workload_pct: f64,
    pub hit_rate: f64,
    pub rank1: f64,
    pub eer: Option<f64>,
    pub fnir_at_fpir: Option<f64>,
    pub dprime: Option<f64>,
    pub operating_points: Vec<TradeoffPoint>,
}

/// Open-set scores from final-stage rankings: an enrolled probe contributes
/// its rank-1 score when rank 1 is the true subject (else `+inf`, never
/// accepted); an unenrolled probe contributes its rank-1 score.
pub fn open_set_scores(probes: &[&Probe], results: &[SearchResult]) -> ScoreSet {
    let mut s = ScoreSet::default();
    for (p, r) in probes.iter().zip(results) {
        let top = r.ranked.first();
        if p.enrolled {
            s.mated.push(match top {
                Some(&(id, score)) if id == p.owner => score,
                _ => f64::INFINITY,
            });
        } else {
            s.nonmated.push(top.map_or(f64::INFINITY, |t| t.1));
        }
    }
    s
}

fn rates_at(scores: &ScoreSet, t: f64) -> TradeoffPoint {
    let frac = |v: &[f64], f: &dyn Fn(f64) -> bool| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().filter(|&&x| f(x)).count() as f64 / v.len() as f64
        }
    };
    TradeoffPoint {
        threshold: t,
        fnir: frac(&scores.mated, &|x| x > t),
        fpir: frac(&scores.nonmated, &|x| x <= t),
    }
}

pub fn evaluate(
    probes: &[&Probe],
    results: &[SearchResult],
    n_subjects: usize,
    fpir_target: f64,
    thresholds: &[f64],
) -> Result<CellMetrics> {
    let trials: Vec<Trial> = probes
        .iter()
        .zip(results)
        .filter(|(p, _)| p.enrolled)
        .map(|(p, r)| (p.owner, r.candidates()))
        .collect();
    let scores = open_set_scores(probes, results);
    let open = !scores.mated.is_empty() && !scores.nonmated.is_empty();
    let mean_comparisons =
        results.iter().map(|r| r.total_comparisons as f64).sum::<f64>() / results.len().max(1) as f64;
    Ok(CellMetrics {
        mean_comparisons,
        workload_pct: mean_comparisons / n_subjects as f64 * 100.0,
        hit_rate: hit_rate(&trials)?,
        rank1: rank1(&trials)?,
        eer: if open { eer(&scores).ok() } else { None },
        fnir_at_fpir: if open { fnir_at_fpir(&scores, fpir_target).ok().map(|f| f.fnir) } else { None },
        dprime: decidability(&scores).ok(),
        operating_points: thresholds.iter().map(|&t| rates_at(&scores, t)).collect(),
    })
}

fn search_all<F>(probes: &[&Probe], f: F) -> Result<Vec<SearchResult>>
where
    F: Fn(&Probe) -> Result<SearchResult> + Sync,
{
    probes.par_iter().map(|p| f(p)).collect()
}

/// Mean and 95% confidence half-width (Student t, folds - 1 dof).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
}

impl Stat {
    pub fn from_folds(values: &[Option<f64>]) -> Stat {
        if values.is_empty() || values.iter().any(|v| v.is_none()) {
            return Stat { mean: None, ci95: None };
        }
        let v: Vec<f64> = values.iter().map(|x| x.unwrap()).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if v.len() < 2 {
            return Stat { mean: Some(mean), ci95: None };
        }
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let t = StudentsT::new(0.0, 1.0, n - 1.0).map(|d| d.inverse_cdf(0.975)).unwrap_or(f64::NAN);
        Stat { mean: Some(mean), ci95: Some(t * sd / n.sqrt()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    pub capacity: usize,
    pub pairing: String,
    pub shortlist: String,
    pub folds: usize,
    pub workload_abs: Stat,
    pub workload_pct: Stat,
    pub hit_rate: Stat,
    pub rank1: Stat,
    pub eer: Stat,
    pub fnir_at_fpir: Stat,
    pub dprime: Stat,
    pub operating_points: Vec<TradeoffPoint>,
}

impl ReportRow {
    fn from_folds(mode: &str, capacity: usize, pairing: &str, shortlist: String, folds: &[CellMetrics]) -> Self {
        let col = |f: &dyn Fn(&CellMetrics) -> Option<f64>| Stat::from_folds(&folds.iter().map(f).collect::<Vec<_>>());
        let n_points = folds.first().map_or(0, |f| f.operating_points.len());
        let operating_points = (0..n_points)
            .map(|i| {
                let m = folds.len() as f64;
                TradeoffPoint {
                    threshold: folds[0].operating_points[i].threshold,
                    fnir: folds.iter().map(|f| f.operating_points[i].fnir).sum::<f64>() / m,
                    fpir: folds.iter().map(|f| f.operating_points[i].fpir).sum::<f64>() / m,
                }
            })
            .collect();
        ReportRow {
            mode: mode.to_string(),
            capacity,
            pairing: pairing.to_string(),
            shortlist,
            folds: folds.len(),
            workload_abs: col(&|f| Some(f.mean_comparisons)),
            workload_pct: col(&|f| Some(f.workload_pct)),
            hit_rate: col(&|f| Some(f.hit_rate)),
            rank1: col(&|f| Some(f.rank1)),
            eer: col(&|f| f.eer),
            fnir_at_fpir: col(&|f| f.fnir_at_fpir),
            dprime: col(&|f| f.dprime),
            operating_points,
        }
    }
}

pub const REPORT_HEADER: &str = "mode,capacity,pairing,shortlist,folds,workload_abs,workload_pct,workload_pct_ci95,\
hr,hr_ci95,rr1,rr1_ci95,eer,eer_ci95,fnir_at_fpir,fnir_at_fpir_ci95,dprime,dprime_ci95";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => String::new(),
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{REPORT_HEADER}").unwrap();
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{}",
            r.mode,
            r.capacity,
            r.pairing,
            r.shortlist,
            r.folds,
            fmt_opt(r.workload_abs.mean)
        )
        .unwrap();
        for s in [&r.workload_pct, &r.hit_rate, &r.rank1, &r.eer, &r.fnir_at_fpir, &r.dprime] {
            write!(out, ",{},{}", fmt_opt(s.mean), fmt_opt(s.ci95)).unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub row: ReportRow,
    pub cmc: Vec<f64>,
    pub tradeoff: Vec<TradeoffPoint>,
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Exhaustive search over every probe of `gallery`.
pub fn baseline<C: Comparator + ?Sized>(
    gallery: &Gallery,
    comparator: &C,
    fpir_target: f64,
    thresholds: &[f64],
) -> Result<BaselineReport> {
    let probes: Vec<&Probe> = gallery.probes().iter().collect();
    let results = search_all(&probes, |p| search_exhaustive(&p.sample, gallery.references(), comparator))?;
    let metrics = evaluate(&probes, &results, gallery.len(), fpir_target, thresholds)?;
    let trials: Vec<Trial> = probes
        .iter()
        .zip(&results)
        .filter(|(p, _)| p.enrolled)
        .map(|(p, r)| (p.owner, r.candidates()))
        .collect();
    let scores = open_set_scores(&probes, &results);
    let tradeoff = fnir_fpir_sweep(&scores).unwrap_or_default();
    Ok(BaselineReport {
        row: ReportRow::from_folds("baseline", 1, "none", "all".into(), &[metrics]),
        cmc: cmc_curve(&trials)?,
        tradeoff,
    })
}

pub fn run_baseline(config: &ExperimentConfig) -> Result<BaselineReport> {
    let gallery = config.gallery.resolve()?;
    with_pool(config.threads, || baseline(&gallery, &Euclidean, config.fpir_target, &config.open_set_thresholds))?
}

/// Minimal-workload shortlist reaching a hit-rate level within one
/// (capacity, pairing) family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrLevelSummary {
    pub mode: String,
    pub capacity: usize,
    pub pairing: String,
    pub hr_level: f64,
    pub shortlist: Option<String>,
    pub workload_pct: Option<f64>,
    pub workload_pct_ci95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub fold_rows: Vec<ReportRow>,
    pub hr_levels: Vec<HrLevelSummary>,
    pub baseline: Option<BaselineReport>,
    /// Stage-1 CMC per family: share of probes whose true subject's root
    /// ranks within the first r roots (mean over folds).
    pub family_cmc: BTreeMap<String, Vec<f64>>,
    /// Open-set trade-off per family at the largest shortlist of the grid.
    pub family_tradeoff: BTreeMap<String, Vec<TradeoffPoint>>,
}

pub fn family_key(capacity: usize, pairing: &str) -> String {
    format!("n{capacity}_{pairing}")
}

fn root_rank_cmc<C: Comparator + ?Sized>(index: &CascadeIndex, probes: &[&Probe], comparator: &C) -> Result<Vec<f64>> {
    let roots = index.roots();
    let owner_root: Vec<usize> = {
        let mut v = vec![0usize; index.n_subjects()];
        for (i, r) in roots.iter().enumerate() {
            for m in &r.members {
                v[m.index()] = i;
            }
        }
        v
    };
    let trials: Vec<(usize, Vec<usize>)> = probes
        .par_iter()
        .filter(|p| p.enrolled)
        .map(|p| {
            let mut scored = roots
                .iter()
                .enumerate()
                .map(|(i, r)| Ok((i, comparator.compare(&p.sample, &r.fused)?)))
                .collect::<Result<Vec<_>>>()?;
            scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            Ok((owner_root[p.owner.index()], scored.into_iter().map(|s| s.0).collect()))
        })
        .collect::<Result<_>>()?;
    let as_subjects: Vec<Trial> = trials
        .into_iter()
        .map(|(t, r)| {
            (crate::sample::SubjectId(t as u32), r.into_iter().map(|i| crate::sample::SubjectId(i as u32)).collect())
        })
        .collect();
    cmc_curve(&as_subjects)
}

/// Evaluates one index over every shortlist setting of a grid.
pub fn evaluate_index<C: Comparator + ?Sized>(
    index: &CascadeIndex,
    probes: &[&Probe],
    mode: Mode,
    grid: &[Shortlist],
    comparator: &C,
    fpir_target: f64,
    thresholds: &[f64],
) -> Result<Vec<(CellMetrics, Vec<SearchResult>)>> {
    grid.iter()
        .map(|s| {
            let results = match mode {
                Mode::TwoStage => {
                    let k = s.sizes()[0];
                    search_all(probes, |p| search_two_stage(&p.sample, index, k, comparator))?
                }
                Mode::MultiStage => {
                    let cfg = SearchConfig { shortlist_sizes: s.sizes(), open_set_threshold: None };
                    search_all(probes, |p| search_multi_stage(&p.sample, index, &cfg, comparator))?
                }
            };
            let m = evaluate(probes, &results, index.n_subjects(), fpir_target, thresholds)?;
            Ok((m, results))
        })
        .collect()
}

/// Runs the full grid with the synthetic comparator and fuser.
pub fn run_sweep(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let gallery = config.gallery.resolve()?;
    with_pool(config.threads, || sweep(config, &gallery, &Euclidean, &MeanFuser))?
}

pub fn sweep<C: Comparator + ?Sized, F: Fuser + ?Sized>(
    config: &ExperimentConfig,
    gallery: &Gallery,
    comparator: &C,
    fuser: &F,
) -> Result<ExperimentReport> {
    let probes: Vec<&Probe> = gallery.probes().iter().collect();
    let mut rows = Vec::new();
    let mut fold_rows = Vec::new();
    let mut hr_levels = Vec::new();
    let mut family_cmc = BTreeMap::new();
    let mut family_tradeoff = BTreeMap::new();
    let mode = config.mode.name();
    for &capacity in &config.capacities {
        let grid = config.shortlist_grid(capacity)?;
        for pairing in &config.pairings {
            let folds = config.folds_for(pairing);
            // per_k[j][f]: metrics of shortlist j in fold f
            let mut per_k: Vec<Vec<CellMetrics>> = vec![Vec::with_capacity(folds); grid.len()];
            let mut cmcs: Vec<Vec<f64>> = Vec::with_capacity(folds);
            for fold in 0..folds {
                let method = config.method(pairing, fold)?;
                info!("capacity {capacity}, {pairing} pairing, fold {fold}: building index");
                let index = build_index(gallery, &method, capacity, comparator, fuser)?;
                cmcs.push(root_rank_cmc(&index, &probes, comparator)?);
                let cells = evaluate_index(
                    &index,
                    &probes,
                    config.mode,
                    grid,
                    comparator,
                    config.fpir_target,
                    &config.open_set_thresholds,
                )?;
                let last = cells.len() - 1;
                for (j, (m, results)) in cells.into_iter().enumerate() {
                    if fold == 0 && j == last {
                        let tradeoff = fnir_fpir_sweep(&open_set_scores(&probes, &results)).unwrap_or_default();
                        family_tradeoff.insert(family_key(capacity, pairing), tradeoff);
                    }
                    let mut row = ReportRow::from_folds(mode, capacity, pairing, grid[j].label(), std::slice::from_ref(&m));
                    row.folds = fold;
                    fold_rows.push(row);
                    per_k[j].push(m);
                }
            }
            let len = cmcs.iter().map(|c| c.len()).max().unwrap_or(0);
            let mean_cmc = (0..len)
                .map(|r| cmcs.iter().map(|c| c.get(r).copied().unwrap_or(1.0)).sum::<f64>() / cmcs.len() as f64)
                .collect();
            family_cmc.insert(family_key(capacity, pairing), mean_cmc);
            let family: Vec<ReportRow> = grid
                .iter()
                .zip(&per_k)
                .map(|(s, m)| ReportRow::from_folds(mode, capacity, pairing, s.label(), m))
                .collect();
            hr_levels.extend(summarize_hr_levels(&family));
            rows.extend(family);
        }
    }
    Ok(ExperimentReport { rows, fold_rows, hr_levels, baseline: None, family_cmc, family_tradeoff })
}

/// For each hit-rate level, the grid entry with the lowest workload whose
/// (mean) hit rate reaches it.
pub fn summarize_hr_levels(family: &[ReportRow]) -> Vec<HrLevelSummary> {
    let Some(first) = family.first() else { return Vec::new() };
    HR_LEVELS
        .iter()
        .map(|&level| {
            let best = family
                .iter()
                .enumerate()
                .filter(|(_, r)| r.hit_rate.mean.is_some_and(|h| h >= level))
                .min_by(|a, b| {
                    let wa = a.1.workload_pct.mean.unwrap_or(f64::INFINITY);
                    let wb = b.1.workload_pct.mean.unwrap_or(f64::INFINITY);
                    wa.total_cmp(&wb).then(a.0.cmp(&b.0))
                });
            match best {
                Some((i, r)) => {
                    if i == 0 && family.len() > 1 {
                        warn!(
                            "n={} {}: HR {level} already met at the smallest grid shortlist {}; the grid may be too coarse",
                            r.capacity, r.pairing, r.shortlist
                        );
                    }
                    HrLevelSummary {
                        mode: r.mode.clone(),
                        capacity: r.capacity,
                        pairing: r.pairing.clone(),
                        hr_level: level,
                        shortlist: Some(r.shortlist.clone()),
                        workload_pct: r.workload_pct.mean,
                        workload_pct_ci95: r.workload_pct.ci95,
                    }
                }
                None => {
                    warn!(
                        "n={} {}: HR {level} not reached on the shortlist grid; extend it",
                        first.capacity, first.pairing
                    );
                    HrLevelSummary {
                        mode: first.mode.clone(),
                        capacity: first.capacity,
                        pairing: first.pairing.clone(),
                        hr_level: level,
                        shortlist: None,
                        workload_pct: None,
                        workload_pct_ci95: None,
                    }
                }
            }
        })
        .collect()
}

fn fold_csv(rows: &[ReportRow]) -> String {
    // Same layout as the report; the `folds` column carries the fold number.
    report_csv(rows).replacen("folds,", "fold,", 1)
}

/// Writes `report.csv`, `folds.csv`, `summary.json` and the per-family
/// `cmc_<cfg>.csv` / `det_<cfg>.csv` curves into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report_csv(&report.rows))?;
    fs::write(dir.join("folds.csv"), fold_csv(&report.fold_rows))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        hr_levels: &'a [HrLevelSummary],
        rows: &'a [ReportRow],
        baseline: Option<&'a ReportRow>,
    }
    let summary = Summary {
        hr_levels: &report.hr_levels,
        rows: &report.rows,
        baseline: report.baseline.as_ref().map(|b| &b.row),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), json)?;
    for (key, cmc) in &report.family_cmc {
        let mut buf = Vec::new();
        write_cmc_csv(cmc, &mut buf)?;
        fs::write(dir.join(format!("cmc_{key}.csv")), buf)?;
    }
    for (key, sweep) in &report.family_tradeoff {
        let mut buf = Vec::new();
        write_tradeoff_csv(sweep, &mut buf)?;
        fs::write(dir.join(format!("det_{key}.csv")), buf)?;
    }
    if let Some(b) = &report.baseline {
        write_baseline_curves(b, dir)?;
    }
    Ok(())
}

pub fn write_baseline_curves(b: &BaselineReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_cmc_csv(&b.cmc, &mut buf)?;
    fs::write(dir.join("cmc_baseline.csv"), buf)?;
    let mut buf = Vec::new();
    write_tradeoff_csv(&b.tradeoff, &mut buf)?;
    fs::write(dir.join("det_baseline.csv"), buf)?;
    Ok(())
}

/// One point of the predicted-workload decision space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSpaceRow {
    pub capacity: usize,
    pub shortlist: Vec<usize>,
    /// Shortlist sizes relative to N.
    pub fractions: Vec<f64>,
    /// Predicted comparisons relative to the exhaustive baseline (1.0).
    pub workload_fraction: f64,
}

/// Tabulates predicted workload over shortlist fractions. Two-stage mode
/// covers every (capacity, k/N); multi-stage mode every tuple of per-level
/// fractions, keeping only configurations at or below the baseline.
pub fn emit_decision_space(n: usize, mode: Mode, capacities: &[usize], fractions: &[f64]) -> Result<Vec<DecisionSpaceRow>> {
    let to_k = |f: f64| (f * n as f64).round() as usize;
    let mut rows = Vec::new();
    for &cap in capacities {
        let levels = rounds_for_capacity(cap)?;
        match mode {
            Mode::TwoStage => {
                for &f in fractions {
                    let k = to_k(f);
                    rows.push(DecisionSpaceRow {
                        capacity: cap,
                        shortlist: vec![k],
                        fractions: vec![f],
                        workload_fraction: predicted_workload_two_stage(n, cap, k) as f64 / n as f64,
                    });
                }
            }
            Mode::MultiStage => {
                let mut idx = vec![0usize; levels];
                'outer: loop {
                    let fr: Vec<f64> = idx.iter().map(|&i| fractions[i]).collect();
                    let ks: Vec<usize> = fr.iter().map(|&f| to_k(f)).collect();
                    let w = predicted_workload_multi_stage(n, cap, &ks) as f64 / n as f64;
                    if w <= 1.0 {
                        rows.push(DecisionSpaceRow { capacity: cap, shortlist: ks, fractions: fr, workload_fraction: w });
                    }
                    for d in (0..levels).rev() {
                        idx[d] += 1;
                        if idx[d] < fractions.len() {
                            continue 'outer;
                        }
                        idx[d] = 0;
                    }
                    break;
                }
            }
        }
    }
    Ok(rows)
}

pub fn decision_space_csv(rows: &[DecisionSpaceRow]) -> String {
    let mut out = String::from("capacity,shortlist,fractions,workload_fraction\n");
    for r in rows {
        let ks: Vec<String> = r.shortlist.iter().map(|k| k.to_string()).collect();
        let fs: Vec<String> = r.fractions.iter().map(|f| format!("{f:.6}")).collect();
        writeln!(out, "{},{},{},{:.6}", r.capacity, ks.join(";"), fs.join(";"), r.workload_fraction).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(text, Path::new("/tmp"))
    }

    const SMALL: &str = r#"
        seed = 3
        folds = 3
        mode = "two-stage"
        capacities = [2, 4]
        pairings = ["random", "similarity"]
        open_set_thresholds = [0.9]
        [gallery.synthetic]
        n_subjects = 64
        dimension = 32
        [shortlists]
        2 = [1, 2, 32]
        4 = [1, 16]
    "#;

    #[test]
    fn parses_and_validates() {
        let c = config(SMALL).unwrap();
        assert_eq!(c.folds, 3);
        assert_eq!(c.output_dir, Path::new("/tmp/out"));
        assert_eq!(c.shortlist_grid(4).unwrap(), &[Shortlist::Single(1), Shortlist::Single(16)]);
        assert!(config(&SMALL.replace("folds = 3", "folds = 0")).is_err());
        assert!(config(&SMALL.replace("\"similarity\"", "\"psychic\"")).is_err());
        assert!(config(&SMALL.replace("capacities = [2, 4]", "capacities = [2, 8]")).is_err());
        assert!(config(&SMALL.replace("mode = \"two-stage\"", "mode = \"multi-stage\"")).is_err());
    }

    #[test]
    fn sweep_rows_and_ci_columns() {
        let c = config(SMALL).unwrap();
        let report = run_sweep(&c).unwrap();
        assert_eq!(report.rows.len(), 3 + 2 + 3 + 2);
        assert_eq!(report.fold_rows.len(), 3 * 5 + 5);
        for r in &report.rows {
            assert_eq!(r.workload_pct.ci95.is_some(), r.pairing == "random", "{r:?}");
        }
        // Full shortlist: no pre-selection loss.
        let full = report.rows.iter().find(|r| r.capacity == 2 && r.shortlist == "32").unwrap();
        assert_eq!(full.hit_rate.mean, Some(1.0));
    }

    #[test]
    fn stat_confidence_interval() {
        let s = Stat::from_folds(&[Some(1.0), Some(2.0), Some(3.0)]);
        assert_eq!(s.mean, Some(2.0));
        // t_{0.975, 2} = 4.302653; sd = 1.
        assert!((s.ci95.unwrap() - 4.302653 / 3f64.sqrt()).abs() < 1e-5);
        assert_eq!(Stat::from_folds(&[Some(1.0)]).ci95, None);
        assert_eq!(Stat::from_folds(&[Some(1.0), None]).mean, None);
    }

    #[test]
    fn decision_space_two_stage_is_linear() {
        let fr: Vec<f64> = (0..=50).map(|i| i as f64 / 100.0).collect();
        let rows = emit_decision_space(1024, Mode::TwoStage, &[2], &fr).unwrap();
        assert_eq!(rows.first().unwrap().workload_fraction, 0.5);
        assert_eq!(rows.last().unwrap().workload_fraction, 1.5);
        for w in rows.windows(2) {
            assert!(w[1].workload_fraction >= w[0].workload_fraction);
        }
    }

    #[test]
    fn decision_space_multi_stage_below_baseline() {
        let fr: Vec<f64> = (0..=10).map(|i| i as f64 / 20.0).collect();
        let rows = emit_decision_space(1024, Mode::MultiStage, &[4, 8], &fr).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.workload_fraction <= 1.0));
        assert!(rows.iter().any(|r| r.capacity == 8 && r.shortlist.len() == 3));
    }

    #[test]
    fn hr_summary_picks_minimal_workload() {
        let c = config(SMALL).unwrap();
        let report = run_sweep(&c).unwrap();
        let s: Vec<&HrLevelSummary> =
            report.hr_levels.iter().filter(|h| h.capacity == 2 && h.pairing == "similarity").collect();
        assert_eq!(s.len(), 4);
        for w in s.windows(2) {
            if let (Some(a), Some(b)) = (w[0].workload_pct, w[1].workload_pct) {
                assert!(b >= a);
            }
        }
    }
}
