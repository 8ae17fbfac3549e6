//! `fes-stack`: synthetic episode generation, stacker training and suite
//! evaluation from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fes_core::episode::MANIFEST_FILE;
use fes_core::kernel::write_kernel_csv;
use fes_core::rng::derive_seed;
use fes_core::synth::ShapeStats;
use fes_core::{
    evaluate_suite, expand_confes, load_episode, sample_episode, save_episode, AblationMode, DomainProfile,
    EpisodeBundle, EvalReport, Kernel, LambdaGrid, Method, MethodSpec, StackerConfig, SuiteConfig,
    TrainedStacker,
};
use rayon::prelude::*;

#[derive(Parser, Debug)]
#[command(name = "fes-stack", version, about = "Feature extractor stacking over snapshot logits")]
struct Cli {
    /// Worker threads for episode-level and grid-search parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic episode bundles.
    Synth(SynthArgs),
    /// Train one stacker on one episode and write it as JSON.
    Train(TrainArgs),
    /// Label the query set of an episode with a trained stacker.
    Predict(PredictArgs),
    /// Evaluate methods over a cached episode list.
    Evaluate(EvaluateArgs),
    /// Run every ablation mode for one method.
    Ablate(AblateArgs),
    /// Write kernel heatmap CSVs.
    ExportKernel(ExportArgs),
    /// Paired t-tests and rank statistics from an evaluation report.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Clone)]
struct SeedArg {
    /// Root seed; every random stream is derived from it.
    #[arg(long, env = "FES_STACK_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct StackerArgs {
    /// Ridge strength for FES and ConFES.
    #[arg(long, default_value_t = 1e-2)]
    ridge: f64,
    /// ConFES convolution size.
    #[arg(long, default_value_t = 9)]
    conv_size: usize,
    /// ConFES stride.
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Comma-separated ReFES strengths, used for both penalty terms.
    #[arg(long, value_delimiter = ',', default_values_t = LambdaGrid::default().pool1)]
    lambda_pool: Vec<f64>,
}

impl StackerArgs {
    fn config(&self, method: Method) -> anyhow::Result<StackerConfig> {
        let grid = LambdaGrid::new(self.lambda_pool.clone(), self.lambda_pool.clone())?;
        Ok(StackerConfig {
            ridge: self.ridge,
            conv_size: self.conv_size,
            stride: self.stride,
            grid,
            ..StackerConfig::for_method(method)
        })
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Domain profile JSON (one profile or an array). Defaults to a single
    /// built-in profile.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Episodes per profile.
    #[arg(long, default_value_t = 600)]
    count: u64,
    /// Extractors K.
    #[arg(long, default_value_t = 8)]
    extractors: usize,
    /// Snapshots per extractor J.
    #[arg(long, default_value_t = 41)]
    snapshots: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Root directory; episodes land in `<out>/<domain>/<episode_id>`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    episode: PathBuf,
    #[arg(long, default_value = "fes")]
    method: Method,
    #[arg(long, default_value = "full")]
    ablation: AblationMode,
    #[command(flatten)]
    stacker: StackerArgs,
    /// Output kernel JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Kernel JSON written by `train`.
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long)]
    episode: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Glob matching episode directories.
    #[arg(long)]
    episodes: String,
    /// Methods to compare, comma-separated.
    #[arg(long, value_delimiter = ',', default_values = ["fes", "confes", "refes"])]
    method: Vec<Method>,
    #[arg(long, default_value = "full")]
    ablation: AblationMode,
    #[command(flatten)]
    stacker: StackerArgs,
    /// JSON object mapping group names to domain lists.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    episodes: String,
    #[arg(long, default_value = "fes")]
    method: Method,
    #[command(flatten)]
    stacker: StackerArgs,
    #[command(flatten)]
    seed: SeedArg,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    kernel: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// `report.json` written by `evaluate` or `ablate`.
    #[arg(long)]
    report: PathBuf,
    /// Output directory for `pairwise.csv`, `ranks.csv` and `cd.json`.
    #[arg(long)]
    out: PathBuf,
}

/// Bad flags or inputs that the user has to fix; mapped to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|cause| {
        cause.is::<UsageError>() || cause.downcast_ref::<fes_core::Error>().is_some_and(|e| e.is_config())
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a, cli.jobs),
        Command::Ablate(a) => ablate(a, cli.jobs),
        Command::ExportKernel(a) => export_kernel(a),
        Command::Compare(a) => compare(a),
    }
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let profiles = match &args.profile {
        Some(path) => DomainProfile::from_json_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => vec![DomainProfile::example("synthetic")],
    };
    if profiles.is_empty() {
        return Err(usage("profile file contains no profiles"));
    }
    for p in &profiles {
        p.validate(args.extractors, args.snapshots)?;
    }

    let mut table = Vec::new();
    for (pi, profile) in profiles.iter().enumerate() {
        let profile_seed = derive_seed(args.seed.seed, pi as u64);
        let bundles: Vec<EpisodeBundle> = (0..args.count)
            .into_par_iter()
            .map(|i| {
                let bundle = sample_episode(profile, args.extractors, args.snapshots, derive_seed(profile_seed, i))?;
                let dir = args.out.join(&bundle.domain_name).join(&bundle.episode_id);
                save_episode(&bundle, &dir)?;
                Ok(bundle)
            })
            .collect::<fes_core::Result<_>>()?;
        log::info!("wrote {} episodes for {}", bundles.len(), profile.name);
        table.push((profile.name.clone(), ShapeStats::from_bundles(&bundles)));
    }

    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{:<16} {:>8} {:>22} {:>22} {:>22}",
        "domain", "episodes", "support min/mean/max", "way min/mean/max", "shot min/mean/max"
    )?;
    let triple = |v: [f64; 3]| format!("{:.0}/{:.1}/{:.0}", v[0], v[1], v[2]);
    let shot = |v: [f64; 3]| format!("{:.1}/{:.1}/{:.1}", v[0], v[1], v[2]);
    for (name, s) in &table {
        writeln!(
            out,
            "{:<16} {:>8} {:>22} {:>22} {:>22}",
            name,
            s.episodes,
            triple(s.support_size),
            triple(s.class_count),
            shot(s.mean_shot)
        )?;
    }
    Ok(())
}

fn load(dir: &Path) -> anyhow::Result<EpisodeBundle> {
    load_episode(dir).with_context(|| format!("loading episode {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let config = args.stacker.config(args.method)?;
    let bundle = load(&args.episode)?;
    config.validate(bundle.n_snapshots())?;
    let stacker = fes_core::train_stacker(&bundle, &config, args.ablation)
        .map_err(|e| e.in_episode(&bundle.episode_id))?;
    log::info!(
        "{}: {} iterations, loss {:.6}, omission {:.3}",
        bundle.episode_id,
        stacker.iterations,
        stacker.final_loss,
        stacker.omission_rate
    );
    write_json(&args.out, &stacker)
}

fn read_stacker(path: &Path) -> anyhow::Result<TrainedStacker> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{} is not a kernel file: {e}", path.display())))
}

fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let stacker = read_stacker(&args.kernel)?;
    let bundle = load(&args.episode)?;
    let (labels, probs) = stacker
        .predict(&bundle.query_logits)
        .map_err(|e| e.in_episode(&bundle.episode_id))?;
    let mut w = csv::Writer::from_path(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let mut header = vec!["instance".to_string(), "true_label".into(), "predicted".into(), "probability".into()];
    header.extend((0..probs.ncols()).map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for (i, (&label, row)) in labels.iter().zip(probs.outer_iter()).enumerate() {
        let mut rec = vec![
            i.to_string(),
            bundle.query_labels[i].to_string(),
            label.to_string(),
            row[label as usize].to_string(),
        ];
        rec.extend(row.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let correct = labels.iter().zip(&bundle.query_labels).filter(|(a, b)| a == b).count();
    log::info!("{}: accuracy {:.4}", bundle.episode_id, correct as f64 / labels.len() as f64);
    Ok(())
}

/// Episode directories matched by `pattern`, sorted so the list is stable.
fn episode_list(pattern: &str) -> anyhow::Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| usage(format!("bad --episodes pattern {pattern:?}: {e}")))?;
    let mut dirs = Vec::new();
    for p in paths {
        let p = p?;
        if p.join(MANIFEST_FILE).is_file() {
            dirs.push(p);
        } else if p.file_name().is_some_and(|n| n == MANIFEST_FILE) {
            dirs.push(p.parent().map(Path::to_path_buf).unwrap_or_default());
        }
    }
    dirs.sort();
    dirs.dedup();
    if dirs.is_empty() {
        return Err(usage(format!("--episodes {pattern:?} matched no episode directories")));
    }
    Ok(dirs)
}

fn check_against_first(episodes: &[PathBuf], methods: &[MethodSpec]) -> anyhow::Result<()> {
    let first = load(&episodes[0])?;
    for m in methods {
        m.config
            .validate(first.n_snapshots())
            .with_context(|| format!("method {}", m.name))?;
    }
    Ok(())
}

fn run_suite(episodes: &[PathBuf], methods: &[MethodSpec], suite: &SuiteConfig, out: &Path) -> anyhow::Result<()> {
    check_against_first(episodes, methods)?;
    log::info!("evaluating {} methods on {} episodes", methods.len(), episodes.len());
    let report = evaluate_suite(episodes, methods, suite)?;
    report.write_dir(out)?;
    report.write_summary(io::stdout().lock())?;
    Ok(())
}

fn read_groups(path: &Path) -> anyhow::Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: expected {{group: [domains]}}: {e}", path.display())))
}

fn evaluate(args: EvaluateArgs, jobs: Option<usize>) -> anyhow::Result<()> {
    let episodes = episode_list(&args.episodes)?;
    let methods = args
        .method
        .iter()
        .map(|&m| Ok(MethodSpec::new(args.stacker.config(m)?, args.ablation)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let suite = SuiteConfig {
        jobs,
        seed: args.seed.seed,
        groups: args.groups.as_deref().map(read_groups).transpose()?.unwrap_or_default(),
    };
    run_suite(&episodes, &methods, &suite, &args.out)
}

fn ablate(args: AblateArgs, jobs: Option<usize>) -> anyhow::Result<()> {
    let episodes = episode_list(&args.episodes)?;
    let config = args.stacker.config(args.method)?;
    let methods: Vec<MethodSpec> = AblationMode::ALL
        .iter()
        .map(|&mode| MethodSpec::new(config.clone(), mode))
        .collect();
    let suite = SuiteConfig {
        jobs,
        seed: args.seed.seed,
        ..SuiteConfig::default()
    };
    run_suite(&episodes, &methods, &suite, &args.out)
}

fn export_kernel(args: ExportArgs) -> anyhow::Result<()> {
    let stacker = read_stacker(&args.kernel)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let write = |name: &str, m: &ndarray::Array2<f64>| -> anyhow::Result<()> {
        let path = args.out.join(name);
        let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        write_kernel_csv(m, io::BufWriter::new(file))?;
        Ok(())
    };
    match &stacker.kernel {
        Kernel::Flat(_) => write("effective.csv", &stacker.effective)?,
        Kernel::Conv(k) => {
            write("depthwise.csv", &k.depthwise.mapv(|v| v.max(0.0)))?;
            write("global.csv", &k.global.mapv(|v| v.max(0.0)))?;
            write("expanded.csv", &expand_confes(k))?;
        }
    }
    Ok(())
}

fn compare(args: CompareArgs) -> anyhow::Result<()> {
    let report = EvalReport::from_json_file(&args.report)?;
    if report.methods.len() < 2 {
        return Err(usage("comparison needs a report with at least two methods"));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("pairwise.csv"), report.pairwise_csv()?)?;
    fs::write(args.out.join("ranks.csv"), report.ranks_csv()?)?;
    let cd: BTreeMap<&str, _> = report
        .groups
        .iter()
        .map(|g| (g.name.as_str(), &g.ranks))
        .collect();
    write_json(&args.out.join("cd.json"), &cd)?;

    let mut out = io::stdout().lock();
    for d in &report.domains {
        for p in &d.pairwise {
            let verdict = if p.test.p < 0.05 { "significant" } else { "n.s." };
            writeln!(
                out,
                "{:<16} {} vs {}: diff {:+.4}, p = {:.3e} ({verdict})",
                d.domain, p.a, p.b, p.test.mean_diff, p.test.p
            )?;
        }
    }
    for g in &report.groups {
        let Some(r) = &g.ranks else {
            writeln!(out, "group {}: too few episodes for rank statistics", g.name)?;
            continue;
        };
        let ranks: Vec<String> = report
            .methods
            .iter()
            .zip(&r.mean_ranks)
            .map(|(m, rank)| format!("{m} {rank:.3}"))
            .collect();
        writeln!(out, "group {}: CD {:.4}; mean ranks {}", g.name, r.critical_difference, ranks.join(", "))?;
    }
    Ok(())
}
