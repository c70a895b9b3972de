//! `sfsm`: generate synthetic inspection sequences, run the initialization
//! pipeline, benchmark variants and render summary tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sfsm_core::eval::{
    render_table, run_benchmark, write_rows_csv, write_timings_csv, BenchConfig, BenchmarkSummary,
};
use sfsm_core::pipeline::{format_solution, run_pipeline, PipelineConfig, ResolvedPipeline, SuccessThresholds, Variant};
use sfsm_core::synth::{generate_benchmark_set, read_truth, write_truth, SceneConfig};
use sfsm_core::tracks::{read_tracks, write_tracks};

const VERSION: &str = env!("SFSM_VERSION");
const MANIFEST: &str = "manifest.json";
const SUMMARY: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "sfsm", version = VERSION, about = "Small-motion monocular initialization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic sequences with ground truth.
    Generate(GenerateArgs),
    /// Run the pipeline on one track file.
    Run(RunArgs),
    /// Run variants over a generated dataset.
    Bench(BenchArgs),
    /// Render a benchmark summary as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// TOML file with `n_sequences`, `master_seed` and a `[scene]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Master seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sequences; overrides the file.
    #[arg(long, short = 'n')]
    n_sequences: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    tracks: PathBuf,
    /// Pipeline TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// RANSAC seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Directory written by `generate`.
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated variant names; all variants by default.
    #[arg(long)]
    variant: Option<String>,
    /// RANSAC seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Success thresholds `ATE,ARE_DEG,DEPTH`.
    #[arg(long)]
    thresholds: Option<String>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Pipeline repeats per sequence for the timing table.
    #[arg(long, default_value_t = 3)]
    timing_repeats: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    summary: PathBuf,
}

/// Failure with its process exit code.
#[derive(Debug)]
enum CliError {
    /// Bad arguments, configuration, input files or IO.
    Usage(String),
    /// The pipeline ran but did not produce a converged solution.
    Pipeline(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn with_path<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateConfig {
    n_sequences: usize,
    master_seed: u64,
    scene: SceneConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_sequences: 1,
            master_seed: 42,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    index: usize,
    seed: u64,
    tracks: String,
    truth: String,
    parallax_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: String,
    config: GenerateConfig,
    sequences: Vec<ManifestEntry>,
}

/// Benchmark summary file: provenance plus the aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryFile {
    version: String,
    configs: Vec<ResolvedPipeline>,
    summary: BenchmarkSummary,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(with_path(path))?;
    toml::from_str(&text).map_err(with_path(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(with_path(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(with_path(path))
}

fn parse_thresholds(s: &str) -> Result<SuccessThresholds, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("--thresholds: {e}")))?;
    match v[..] {
        [translation, rotation_deg, depth] => Ok(SuccessThresholds {
            translation,
            rotation_deg,
            depth,
        }),
        _ => Err(usage("--thresholds expects ATE,ARE_DEG,DEPTH")),
    }
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    Variant::parse(s.trim()).ok_or_else(|| {
        let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        usage(format!("unknown variant '{}'; valid variants: {}", s.trim(), valid.join(", ")))
    })
}

/// Defaults, then the config file, then flags.
fn pipeline_config(
    file: Option<&Path>,
    variant: Variant,
    seed: Option<u64>,
    thresholds: Option<&str>,
) -> Result<ResolvedPipeline, CliError> {
    let mut cfg: PipelineConfig = match file {
        Some(p) => read_toml(p)?,
        None => PipelineConfig::default(),
    };
    cfg.variant = variant;
    if let Some(s) = seed {
        cfg.step1.rng_seed = s;
    }
    if let Some(t) = thresholds {
        cfg.thresholds = parse_thresholds(t)?;
    }
    cfg.resolve().map_err(|e| usage(format!("invalid pipeline config: {e}")))
}

fn provenance(configs: &[ResolvedPipeline]) -> Result<Vec<String>, CliError> {
    let mut lines = vec![format!("version {VERSION}")];
    for c in configs {
        lines.push(format!("config {}", serde_json::to_string(c).map_err(usage)?));
    }
    Ok(lines)
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut cfg: GenerateConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => GenerateConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = args.n_sequences {
        cfg.n_sequences = n;
    }
    let set = generate_benchmark_set(&cfg.scene, cfg.n_sequences, cfg.master_seed).map_err(usage)?;
    create_dir(&args.out)?;
    let mut sequences = Vec::with_capacity(set.len());
    for (i, (mut tracks, truth)) in set.into_iter().enumerate() {
        let tracks_name = format!("seq_{i:04}.tracks");
        let truth_name = format!("seq_{i:04}.truth");
        tracks.generator = Some(format!("sfsm {VERSION}"));
        let path = args.out.join(&tracks_name);
        write_tracks(&tracks, &path).map_err(with_path(&path))?;
        let path = args.out.join(&truth_name);
        write_truth(&truth, &path).map_err(with_path(&path))?;
        sequences.push(ManifestEntry {
            index: i,
            seed: truth.seed,
            tracks: tracks_name,
            truth: truth_name,
            parallax_deg: truth.parallax_deg,
        });
    }
    let manifest = Manifest {
        version: VERSION.into(),
        config: cfg,
        sequences,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(usage)?;
    write_file(&args.out.join(MANIFEST), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let variant = args.variant.as_deref().map(parse_variant).transpose()?.unwrap_or_default();
    let cfg = pipeline_config(args.config.as_deref(), variant, args.seed, args.thresholds.as_deref())?;
    let tracks = read_tracks(&args.tracks).map_err(with_path(&args.tracks))?;
    let run = run_pipeline(&tracks, &cfg);
    write_file(&args.out, format_solution(&run, &tracks, &provenance(std::slice::from_ref(&cfg))?))?;
    if let Some(f) = &run.failure {
        return Err(CliError::Pipeline(f.to_string()));
    }
    if !run.converged() {
        let (s2, s3) = (run.step2.as_ref(), run.solution.as_ref());
        let stage = match s2 {
            Some(s) if !s.report.termination.converged() => format!("step2: not converged ({})", s.report.termination),
            _ => format!("step3: not converged ({})", s3.map(|s| s.report.termination.to_string()).unwrap_or_default()),
        };
        return Err(CliError::Pipeline(stage));
    }
    if let Some(sol) = &run.solution {
        println!(
            "converged: {} landmarks, final RMS {:.3e} px",
            sol.landmarks.len(),
            sol.final_rms_px
        );
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<(sfsm_core::tracks::FeatureTracks, sfsm_core::synth::SceneTruth)>, CliError> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(usage(format!("{}: no {MANIFEST} found", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(with_path(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(with_path(&path))?;
    if manifest.sequences.is_empty() {
        return Err(usage(format!("{}: manifest lists no sequences", path.display())));
    }
    manifest
        .sequences
        .iter()
        .map(|e| {
            let tp = dir.join(&e.tracks);
            let gp = dir.join(&e.truth);
            let tracks = read_tracks(&tp).map_err(with_path(&tp))?;
            let truth = read_truth(&gp).map_err(with_path(&gp))?;
            Ok((tracks, truth))
        })
        .collect()
}

fn csv_with_provenance(header: &[String], body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::new();
    for h in header {
        out.extend_from_slice(format!("# {h}\n").as_bytes());
    }
    out.extend(body);
    out
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let variants: Vec<Variant> = match &args.variant {
        Some(s) => s.split(',').map(parse_variant).collect::<Result<_, _>>()?,
        None => Variant::ALL.to_vec(),
    };
    let configs = variants
        .iter()
        .map(|&v| pipeline_config(args.config.as_deref(), v, args.seed, args.thresholds.as_deref()))
        .collect::<Result<Vec<_>, _>>()?;
    if args.jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let sequences = load_dataset(&args.dataset)?;
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(usage)?;
    let bench = BenchConfig {
        timing_repeats: args.timing_repeats,
    };
    let result = pool
        .install(|| run_benchmark(&sequences, &configs, &bench))
        .map_err(usage)?;

    create_dir(&args.out)?;
    for cfg in &configs {
        let mut body = Vec::new();
        write_rows_csv(result.rows_for(cfg.variant), &mut body).map_err(usage)?;
        let header = provenance(std::slice::from_ref(cfg))?;
        write_file(&args.out.join(format!("{}.csv", cfg.variant)), csv_with_provenance(&header, body))?;
    }
    let mut body = Vec::new();
    write_timings_csv(&result.timings, &mut body).map_err(usage)?;
    write_file(&args.out.join("timings.csv"), csv_with_provenance(&provenance(&configs)?, body))?;
    let file = SummaryFile {
        version: VERSION.into(),
        configs,
        summary: result.summary,
    };
    write_file(
        &args.out.join(SUMMARY),
        serde_json::to_string_pretty(&file).map_err(usage)?,
    )?;
    print!("{}", render_table(&file.summary));
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.summary).map_err(with_path(&args.summary))?;
    let file: SummaryFile = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: not a benchmark summary: {e}", args.summary.display())))?;
    println!("version: {}", file.version);
    print!("{}", render_table(&file.summary));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Pipeline(m) => eprintln!("{m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
