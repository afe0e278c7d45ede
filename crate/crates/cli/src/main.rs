use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use morphidx::harness::{
    decision_space_csv, emit_decision_space, report_csv, run_baseline, run_sweep, write_baseline_curves,
    write_report, ExperimentConfig, Mode,
};
use morphidx::index::{load_index, save_index};
use morphidx::io::{load_samples, save_samples, Precision, SampleFormat};
use morphidx::metrics::morph_balance;
use morphidx::pairing::write_groups_csv;
use morphidx::retrieval::{search_multi_stage_traced, search_two_stage_traced};
use morphidx::{
    build_index, generate_gallery, pair_subjects, validate_index, Euclidean, MeanFuser, PairingMethod,
    SearchConfig, SyntheticModelParams,
};

#[derive(Parser)]
#[command(name = "morphidx", version, about = "Morph-based cascade indexing for biometric identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TwoStage,
    MultiStage,
}

#[derive(clap::Args)]
struct MethodArgs {
    /// random, softbio or similarity
    #[arg(long, default_value = "similarity")]
    method: String,
    /// Morph capacity: 2, 4 or 8
    #[arg(long, default_value_t = 2)]
    capacity: usize,
    /// Seed for random pairing
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gallery with probes.
    Generate {
        #[arg(long, default_value_t = 1024)]
        subjects: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 2)]
        probes_per_subject: usize,
        #[arg(long, default_value_t = 0.1)]
        unenrolled_fraction: f64,
        #[arg(long, default_value = "f64")]
        precision: PrecisionArg,
        /// .csv for text, anything else for binary
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair subjects into morph groups and write them as CSV.
    Pair {
        #[arg(long)]
        gallery: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a cascade index and save it.
    BuildIndex {
        #[arg(long)]
        gallery: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long, default_value = "f64")]
        precision: PrecisionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check structural invariants of a saved index.
    ValidateIndex {
        #[arg(long)]
        index: PathBuf,
        /// Also check that the index was built from this gallery
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// Search one probe through an index.
    Search {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Position of the probe in the gallery's probe list
        #[arg(long)]
        probe_id: usize,
        /// Two-stage shortlist size
        #[arg(long, conflicts_with = "ks")]
        k: Option<usize>,
        /// Multi-stage shortlist sizes, roots first
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Print one JSON line per stage before the result
        #[arg(long)]
        trace: bool,
    },
    /// Score probes against 2-morphs of shuffled subject pairs.
    BalanceCheck {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exhaustive-search metrics for the configured gallery.
    Baseline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured parameter sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the configured output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate predicted workload over shortlist fractions.
    DecisionSpace {
        #[arg(long, default_value_t = 1024)]
        subjects: usize,
        #[arg(long, default_value = "two-stage")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        capacities: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        max_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn method(args: &MethodArgs) -> morphidx::Result<PairingMethod> {
    PairingMethod::parse(&args.method, args.seed)
}

fn load(path: &Path) -> morphidx::Result<morphidx::Gallery> {
    load_samples(path, SampleFormat::from_path(path))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { subjects, dim, seed, sigma, probes_per_subject, unenrolled_fraction, precision, out } => {
            let params = SyntheticModelParams {
                n_subjects: subjects,
                dimension: dim,
                noise_sigma: sigma,
                probes_per_subject,
                unenrolled_fraction,
                ..SyntheticModelParams::default()
            }
            .with_seed(seed);
            let gallery = generate_gallery(&params)?;
            let format = match SampleFormat::from_path(&out) {
                SampleFormat::Binary(_) => SampleFormat::Binary(precision.into()),
                f => f,
            };
            save_samples(&gallery, &out, format)?;
            info!("wrote {} subjects and {} probes to {}", gallery.len(), gallery.probes().len(), out.display());
        }
        Command::Pair { gallery, method: m, out } => {
            let g = load(&gallery)?;
            let groups = pair_subjects(&g, &method(&m)?, m.capacity, &Euclidean, &MeanFuser)?;
            let mut buf = Vec::new();
            write_groups_csv(&groups, m.capacity, &mut buf)?;
            fs::write(&out, buf).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::BuildIndex { gallery, method: m, precision, out } => {
            let g = load(&gallery)?;
            let index = build_index(&g, &method(&m)?, m.capacity, &Euclidean, &MeanFuser)?;
            save_index(&index, &out, precision.into())?;
            info!("index with layers {:?} written to {}", index.layer_sizes(), out.display());
        }
        Command::ValidateIndex { index, gallery } => {
            let idx = load_index(&index)?;
            if let Some(p) = gallery {
                idx.check_compatible(&load(&p)?, None)?;
            }
            let report = validate_index(&idx);
            println!("{}", json!({ "passed": report.passed(), "violations": report.violations }));
            if !report.passed() {
                bail!("index failed validation with {} violation(s)", report.violations.len());
            }
        }
        Command::Search { gallery, index, probe_id, k, ks, threshold, trace } => {
            let g = load(&gallery)?;
            let idx = load_index(&index)?;
            idx.check_compatible(&g, None)?;
            let Some(probe) = g.probes().get(probe_id) else {
                bail!("probe {probe_id} out of range (gallery has {} probes)", g.probes().len());
            };
            let result = match (k, ks) {
                (Some(k), None) => search_two_stage_traced(&probe.sample, &idx, k, threshold, &Euclidean)?,
                (None, Some(ks)) => {
                    let cfg = SearchConfig { shortlist_sizes: ks, open_set_threshold: threshold };
                    search_multi_stage_traced(&probe.sample, &idx, &cfg, &Euclidean)?
                }
                _ => bail!("give exactly one of --k or --ks"),
            };
            if trace {
                for stage in result.trace.iter().flatten() {
                    println!("{}", serde_json::to_string(stage)?);
                }
            }
            let ranked: Vec<_> = result.ranked.iter().map(|(s, d)| json!({ "subject": s.0, "score": d })).collect();
            println!(
                "{}",
                json!({
                    "probe": probe_id,
                    "owner": probe.owner.0,
                    "enrolled": probe.enrolled,
                    "comparisons_per_stage": result.comparisons_per_stage,
                    "total_comparisons": result.total_comparisons,
                    "decision": result.decision,
                    "ranked": ranked,
                })
            );
        }
        Command::BalanceCheck { gallery, seed } => {
            let g = load(&gallery)?;
            let b = morph_balance(&g, &MeanFuser, &Euclidean, seed)?;
            println!("{}", json!({ "wasserstein": b.distance, "first": b.first.len(), "second": b.second.len() }));
        }
        Command::Baseline { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let b = run_baseline(&cfg)?;
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("baseline.csv"), report_csv(std::slice::from_ref(&b.row)))?;
            write_baseline_curves(&b, &cfg.output_dir)?;
            println!("{}", serde_json::to_string(&b.row)?);
        }
        Command::Sweep { config, threads, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if threads.is_some() {
                cfg.threads = threads;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let mut report = run_sweep(&cfg)?;
            report.baseline = Some(run_baseline(&cfg)?);
            write_report(&report, &cfg.output_dir)?;
            info!("{} report rows written to {}", report.rows.len(), cfg.output_dir.display());
        }
        Command::DecisionSpace { subjects, mode, capacities, steps, max_fraction, out } => {
            if steps == 0 || !(max_fraction > 0.0) {
                bail!("steps and max-fraction must be positive");
            }
            let fractions: Vec<f64> = (0..=steps).map(|i| max_fraction * i as f64 / steps as f64).collect();
            let mode = match mode {
                ModeArg::TwoStage => Mode::TwoStage,
                ModeArg::MultiStage => Mode::MultiStage,
            };
            let rows = emit_decision_space(subjects, mode, &capacities, &fractions)?;
            fs::write(&out, decision_space_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<morphidx::Error>().map_or("error", |m| m.kind());
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
