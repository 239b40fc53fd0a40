//! Command-line entry point: `train`, `eval`, `diagnose`, `verify-theory`,
//! `gen-data`.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage,
//! config, data or bundle errors, 3 training divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::diagnostics::{export_embeddings, linear_probe_error, proxy_a_distance};
use crate::error::{Error, Result};
use crate::nn::{read_bundle, write_bundle, ModelBundle};
use crate::scp::{activation_frequency_pooled, write_frequency_csv};
use crate::synth::{self, Benchmark, PresetScale, Reshape};
use crate::theory;
use crate::trainer::{
    self, accuracy, features, pool_domains, pooled_features, write_metrics, GrlMode, Inference,
    TrainConfig,
};

pub const SEED_ENV: &str = "DMDA_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "dmda",
    version,
    about = "Micro-level distribution alignment on synthetic multi-domain data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, bundles and the benchmark manifest.
    Train(TrainArgs),
    /// Report per-domain accuracy of a saved bundle.
    Eval(EvalArgs),
    /// Write A-distance, probe, activation-frequency and embedding reports.
    Diagnose(DiagnoseArgs),
    /// Check the optimal-discriminator identity on random discrete sets.
    VerifyTheory(VerifyArgs),
    /// Write a preset benchmark as CSV plus its manifest.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Preset name or path to a CSV file.
    #[arg(long)]
    pub benchmark: String,
    /// Samples per domain for presets.
    #[arg(long, default_value_t = PresetScale::default().samples_per_domain)]
    pub samples: usize,
    /// Classes for presets.
    #[arg(long, default_value_t = PresetScale::default().classes)]
    pub classes: usize,
    /// Image layout of CSV rows, `HxWxC`.
    #[arg(long, value_parser = parse_shape, default_value = "8x8x3")]
    pub shape: Reshape,
    /// Target domain id for CSV input; defaults to the highest id.
    #[arg(long)]
    pub target: Option<usize>,
}

/// Config fields settable from the command line; each wins over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub m: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub batch_size_per_domain: Option<usize>,
    /// Falls back to the config file, then to the DMDA_SEED variable, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated fractions of the total steps.
    #[arg(long, value_delimiter = ',')]
    pub lr_decay_points: Option<Vec<f64>>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long, value_parser = parse_grl_mode)]
    pub grl_mode: Option<GrlMode>,
    #[arg(long)]
    pub use_mask: Option<bool>,
    #[arg(long)]
    pub mask_warmup_steps: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[arg(long)]
    pub conv_channels: Option<usize>,
    #[arg(long)]
    pub feature_channels: Option<usize>,
    #[arg(long)]
    pub approx_hidden: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; fields left out keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Config the bundle was trained with; sets the inference mask.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub instances: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random candidate discriminators per instance.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    /// Write the JSON-lines report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_shape(s: &str) -> std::result::Result<Reshape, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("'{s}': {e}"))?;
    match dims[..] {
        [height, width, channels] if height * width * channels > 0 => Ok(Reshape {
            height,
            width,
            channels,
        }),
        _ => Err(format!("'{s}' is not a positive HxWxC shape")),
    }
}

fn parse_grl_mode(s: &str) -> std::result::Result<GrlMode, String> {
    match s {
        "single-pass" => Ok(GrlMode::SinglePass),
        "alternating" => Ok(GrlMode::Alternating),
        _ => Err(format!("'{s}' is not one of single-pass, alternating")),
    }
}

impl Overrides {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { c.$f = v.clone(); })*};
        }
        set!(
            alpha,
            beta,
            m,
            learning_rate,
            momentum,
            weight_decay,
            total_steps,
            batch_size_per_domain,
            seed,
            lr_decay_points,
            lr_decay_factor,
            grl_mode,
            use_mask,
            mask_warmup_steps,
            dropout_rate,
            snapshot_every,
            conv_channels,
            feature_channels,
            approx_hidden,
            kernel_size
        );
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Defaults, then the file, then `DMDA_SEED` if the file sets no seed, then
/// the flags.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    let mut file_seed = false;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config = TrainConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        file_seed = toml::from_str::<toml::Table>(&text).is_ok_and(|t| t.contains_key("seed"));
    }
    if !file_seed {
        if let Some(s) = env_seed()? {
            config.seed = s;
        }
    }
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

pub fn load_benchmark(data: &DataArgs, seed: u64) -> Result<Benchmark> {
    if synth::PRESETS.contains(&data.benchmark.as_str()) {
        let scale = PresetScale {
            samples_per_domain: data.samples,
            classes: data.classes,
        };
        return synth::build_benchmark_scaled(&data.benchmark, seed, scale);
    }
    let path = Path::new(&data.benchmark);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "'{}' is neither a preset ({}) nor an existing file",
            data.benchmark,
            synth::PRESETS.join(", ")
        )));
    }
    synth::load_tabular(path, data.shape, data.target)
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(
        path,
        &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"),
    )
}

fn check_compatible(bundle: &ModelBundle, benchmark: &Benchmark) -> Result<()> {
    let a = &bundle.arch;
    let want = (a.input_height, a.input_width, a.input_channels, a.classes);
    let got = (
        benchmark.height,
        benchmark.width,
        benchmark.channels,
        benchmark.classes,
    );
    if want != got {
        return Err(Error::shape(
            "bundle",
            format!("bundle expects (H, W, C, classes) = {want:?}, benchmark has {got:?}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DomainAccuracy {
    domain: usize,
    role: &'static str,
    samples: usize,
    accuracy: f64,
}

fn domain_accuracies(
    bundle: &ModelBundle,
    benchmark: &Benchmark,
    mode: Inference,
) -> Result<Vec<DomainAccuracy>> {
    benchmark
        .domains()
        .enumerate()
        .map(|(i, d)| {
            Ok(DomainAccuracy {
                domain: d.id,
                role: if i < benchmark.sources.len() {
                    "source"
                } else {
                    "target"
                },
                samples: d.len(),
                accuracy: accuracy(bundle, d, mode)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    steps: usize,
    best_step: usize,
    best_val_acc: f64,
    target_acc_best: f64,
    target_acc_final: f64,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = resolve_config(args.config.as_deref(), &args.overrides)?;
    let benchmark = load_benchmark(&args.data, config.seed)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("config.toml"), &config.to_toml())?;
    synth::write_manifest(&benchmark, &args.out.join("manifest.toml"))?;
    let outcome = trainer::train_with_progress(&config, &benchmark, |m| {
        if let Some(v) = m.val_acc {
            log::info!("step {} loss {:.4} val_acc {v:.4}", m.step, m.loss_total);
        }
    })?;
    write_metrics(&outcome.metrics, &args.out.join("metrics.jsonl"))?;
    write_bundle(&outcome.final_bundle, &args.out.join("final.bundle"))?;
    write_bundle(outcome.best_bundle(), &args.out.join("best.bundle"))?;
    let best = &outcome.snapshots[outcome.best];
    let summary = TrainSummary {
        steps: config.total_steps,
        best_step: best.step,
        best_val_acc: best.val_acc,
        target_acc_best: accuracy(&best.bundle, &benchmark.target, outcome.inference)?,
        target_acc_final: accuracy(&outcome.final_bundle, &benchmark.target, outcome.inference)?,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "target accuracy: {:.4} (best snapshot, step {}), {:.4} (final)",
        summary.target_acc_best, summary.best_step, summary.target_acc_final
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let config = resolve_config(args.config.as_deref(), &args.overrides)?;
    let benchmark = load_benchmark(&args.data, config.seed)?;
    let bundle = read_bundle(&args.bundle)?;
    check_compatible(&bundle, &benchmark)?;
    let report = domain_accuracies(&bundle, &benchmark, Inference::from(&config))?;
    emit(&(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))
}

#[derive(Debug, Serialize)]
struct ADistanceReport {
    a_distance: f64,
    sigma: f64,
    source_samples: usize,
    target_samples: usize,
    masked: bool,
}

#[derive(Debug, Serialize)]
struct ProbeReport {
    source_error: f64,
    target_error: f64,
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let config = resolve_config(args.config.as_deref(), &args.overrides)?;
    let benchmark = load_benchmark(&args.data, config.seed)?;
    let bundle = read_bundle(&args.bundle)?;
    check_compatible(&bundle, &benchmark)?;
    let mode = Inference::from(&config);
    let source = pool_domains(&benchmark.sources)?;
    let target = &benchmark.target;
    create_dir(&args.out)?;

    let (fs, ft) = (
        features(&bundle, &source.inputs, mode)?,
        features(&bundle, &target.inputs, mode)?,
    );
    let a = proxy_a_distance(&fs, &ft, config.seed)?;
    write_json(
        &args.out.join("a_distance.json"),
        &ADistanceReport {
            a_distance: a.a_distance,
            sigma: a.sigma,
            source_samples: source.len(),
            target_samples: target.len(),
            masked: mode.masked,
        },
    )?;
    write_json(
        &args.out.join("probe.json"),
        &ProbeReport {
            source_error: linear_probe_error(&fs, &source.labels, config.seed)?,
            target_error: linear_probe_error(&ft, &target.labels, config.seed)?,
        },
    )?;

    let (gs, gt) = (
        pooled_features(&bundle, &source.inputs)?,
        pooled_features(&bundle, &target.inputs)?,
    );
    write_frequency_csv(
        &activation_frequency_pooled(&gs)?,
        &activation_frequency_pooled(&gt)?,
        &args.out.join("activation_frequency.csv"),
    )?;

    let all: Vec<_> = benchmark.domains().cloned().collect();
    let pooled = pool_domains(&all)?;
    let domains: Vec<usize> = benchmark
        .domains()
        .flat_map(|d| std::iter::repeat_n(d.id, d.len()))
        .collect();
    export_embeddings(
        &features(&bundle, &pooled.inputs, mode)?,
        &pooled.labels,
        &domains,
        &args.out.join("embeddings.tsv"),
    )?;
    println!("proxy A-distance (sources vs target): {:.4}", a.a_distance);
    Ok(())
}

/// Returns whether every instance passed.
fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let records = theory::verify_random(args.instances as usize, args.seed, args.trials as usize)?;
    let report = theory::report_jsonl(&records);
    match &args.out {
        Some(path) => write_text(path, &report)?,
        None => emit(&report)?,
    }
    let failed: Vec<_> = records.iter().filter(|r| !r.pass).collect();
    for r in &failed {
        eprintln!("instance {} (seed {}) failed", r.instance, r.seed);
    }
    eprintln!(
        "{}/{} instances passed",
        records.len() - failed.len(),
        records.len()
    );
    Ok(failed.is_empty())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let benchmark = load_benchmark(&args.data, seed)?;
    create_dir(&args.out)?;
    synth::write_tabular(&benchmark, &args.out.join("data.csv"))?;
    synth::write_manifest(&benchmark, &args.out.join("manifest.toml"))?;
    println!(
        "{}: {} source domains, target {}, {} samples",
        benchmark.name,
        benchmark.sources.len(),
        benchmark.target.id,
        benchmark.domains().map(|d| d.len()).sum::<usize>()
    );
    Ok(())
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 3,
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::BadMagic
        | Error::BundleFormat(_)
        | Error::ShapeMismatch { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Io { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Diagnose(a) => cmd_diagnose(a).map(|_| true),
        Command::VerifyTheory(a) => cmd_verify(a),
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        assert_eq!(
            parse_shape("4x2x1").unwrap(),
            Reshape {
                height: 4,
                width: 2,
                channels: 1
            }
        );
        assert!(parse_shape("4x2").is_err());
        assert!(parse_shape("0x2x1").is_err());
    }

    #[test]
    fn flags_win_over_defaults() {
        let o = Overrides {
            alpha: Some(0.0),
            lr_decay_points: Some(vec![0.5]),
            grl_mode: Some(GrlMode::Alternating),
            ..Overrides::default()
        };
        let c = resolve_config(None, &o).unwrap();
        assert_eq!(
            (c.alpha, c.lr_decay_points.clone(), c.grl_mode),
            (0.0, vec![0.5], GrlMode::Alternating)
        );
        let bad = Overrides {
            m: Some(1.0),
            ..Overrides::default()
        };
        assert!(matches!(resolve_config(None, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::BadMagic), 2);
        assert_eq!(exit_code(&Error::Diverged { step: 1, loss: 1e9 }), 3);
        assert_eq!(exit_code(&Error::NonFinite { op: "x" }), 1);
    }
}
