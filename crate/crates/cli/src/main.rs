//! `cma`: validate feature stores, train single episodes, and run the
//! episodic protocol, ablations and domain-shift evaluations.
//!
//! Exit status: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cma_core::checkpoint::{load_model, save_model};
use cma_core::cmaf::{manifest_path, read_manifest, read_store};
use cma_core::config::{load_config, RunConfig};
use cma_core::datastore::{augment_with_labels, sample_episode, StoreManifest};
use cma_core::harness::{
    parse_reports, reports_to_csv, run_ablation, run_domain_shift, run_protocol, summary_rows,
    ProtocolConfig, ProtocolReport,
};
use cma_core::optim::{evaluate_accuracy, initialize, train_episode, TrainConfig};
use cma_core::{ErrorClass, FeatureStore, Variant};

#[derive(Parser, Debug)]
#[command(name = "cma", version, about = "Cross-modal augmentation for few-shot multimodal classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a CMAF feature store (and its manifest sidecar, if any)
    Validate {
        store: PathBuf,
    },
    /// Train on one sampled episode and save the model
    Train {
        #[arg(long)]
        store: PathBuf,
        /// Training examples per class
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// full, -cross, -meta, -img or -txt
        #[arg(long, default_value = "full", allow_hyphen_values = true)]
        variant: String,
        /// TOML file with training and model options
        #[arg(long)]
        config: Option<PathBuf>,
        /// Add one label-embedding record per class to the train split
        #[arg(long)]
        label_augment: bool,
        /// Where to write the model checkpoint
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a saved model on every record of a store
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Shot sweep over repeated seeds with trimmed-mean reporting
    Protocol {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "full", allow_hyphen_values = true)]
        variant: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// The protocol once per variant, on identical seeds
    Ablate {
        #[arg(long)]
        store: PathBuf,
        /// Comma-separated variant tags
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_value = "full,-cross,-meta,-img,-txt"
        )]
        variants: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train on episodes from one store, test on all of another
    Shift {
        #[arg(long)]
        train_store: PathBuf,
        #[arg(long)]
        test_store: PathBuf,
        #[arg(long, default_value = "full", allow_hyphen_values = true)]
        variant: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Summary table of a protocol, ablation or shift report
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Output file; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Comma-separated shots per class
    #[arg(long, value_delimiter = ',', default_value = "2,8,16,32")]
    shots: Vec<usize>,
    /// Number of seeds per shot
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Seeds are base-seed, base-seed + 1, ...
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// TOML file with training and model options
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parallel (shot, seed) cells; results do not depend on it
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Add one label-embedding record per class to every train split
    #[arg(long)]
    label_augment: bool,
    /// Report JSON file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cma_core::Error>() {
            return match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            };
        }
    }
    2
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Validate { store } => validate(&store),
        Command::Train {
            store,
            shots,
            seed,
            variant,
            config,
            label_augment,
            out,
        } => train(&store, shots, seed, &variant, config.as_deref(), label_augment, &out),
        Command::Eval { model, store } => eval(&model, &store),
        Command::Protocol { store, variant, run } => {
            let variant: Variant = variant.parse()?;
            let data = load_store(&store)?;
            let cfg = protocol_config(&run, variant, &store)?;
            let report = run_protocol(&data, &cfg)?;
            log_timings(&report);
            emit(&report.to_json()?, run.out.as_deref())
        }
        Command::Ablate {
            store,
            variants,
            run,
        } => {
            let variants = variants
                .iter()
                .map(|v| v.parse())
                .collect::<cma_core::Result<Vec<Variant>>>()?;
            let data = load_store(&store)?;
            let cfg = protocol_config(&run, Variant::Full, &store)?;
            let ablation = run_ablation(&data, &variants, &cfg)?;
            ablation.reports.iter().for_each(log_timings);
            emit(&ablation.to_json()?, run.out.as_deref())
        }
        Command::Shift {
            train_store,
            test_store,
            variant,
            run,
        } => {
            let variant: Variant = variant.parse()?;
            let train = load_store(&train_store)?;
            let test = load_store(&test_store)?;
            let cfg = protocol_config(&run, variant, &train_store)?;
            let report = run_domain_shift(&train, &test, &cfg)?;
            log_timings(&report);
            emit(&report.to_json()?, run.out.as_deref())
        }
        Command::Report { input, format, out } => {
            let text = std::fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let reports = parse_reports(&text)
                .with_context(|| format!("parsing report {}", input.display()))?;
            let rendered = match format {
                Format::Csv => reports_to_csv(&reports),
                Format::Json => serde_json::to_string_pretty(&summary_rows(&reports))? + "\n",
            };
            emit(&rendered, out.as_deref())
        }
    }
}

fn load_store(path: &Path) -> anyhow::Result<FeatureStore> {
    read_store(path).with_context(|| format!("reading store {}", path.display()))
}

fn load_run_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn label_features(store_path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let sidecar = manifest_path(store_path);
    let manifest = read_manifest(&sidecar)?;
    match manifest.and_then(|m| m.label_features) {
        Some(f) => Ok(f),
        None => bail!(cma_core::Error::InvalidInput(format!(
            "label augmentation needs label_features in {}",
            sidecar.display()
        ))),
    }
}

fn protocol_config(run: &RunArgs, variant: Variant, store: &Path) -> anyhow::Result<ProtocolConfig> {
    let RunConfig { train, model } = load_run_config(run.config.as_deref())?;
    Ok(ProtocolConfig {
        shots: run.shots.clone(),
        num_seeds: run.seeds,
        base_seed: run.base_seed,
        variant,
        train,
        model,
        label_features: if run.label_augment {
            Some(label_features(store)?)
        } else {
            None
        },
        jobs: run.jobs.max(1),
    })
}

fn log_timings(report: &ProtocolReport) {
    for (shot, elapsed) in &report.timings {
        eprintln!(
            "{} shot {shot}: {} cells, {:.3} s of training",
            report.config.variant,
            report.config.num_seeds,
            elapsed.as_secs_f64()
        );
    }
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn validate(path: &Path) -> anyhow::Result<()> {
    let store = load_store(path)?;
    let described = StoreManifest::describe(&store);
    if let Some(manifest) = read_manifest(&manifest_path(path))? {
        if manifest.dimension != described.dimension || manifest.class_counts != described.class_counts {
            bail!(cma_core::Error::InvalidInput(format!(
                "manifest says d={} with {} real / {} fake, store has d={} with {} real / {} fake",
                manifest.dimension,
                manifest.class_counts.real,
                manifest.class_counts.fake,
                described.dimension,
                described.class_counts.real,
                described.class_counts.fake
            )));
        }
        if let Some(features) = &manifest.label_features {
            if features.len() != 2 || features.iter().any(|f| f.len() != store.dimension()) {
                bail!(cma_core::Error::Dimension(format!(
                    "manifest label_features must be 2 vectors of width {}",
                    store.dimension()
                )));
            }
        }
    }
    println!(
        "ok {}: source {}, d={}, {} records ({} real, {} fake)",
        path.display(),
        store.source_name(),
        store.dimension(),
        store.len(),
        described.class_counts.real,
        described.class_counts.fake
    );
    Ok(())
}

fn train(
    store_path: &Path,
    shots: usize,
    seed: u64,
    variant: &str,
    config: Option<&Path>,
    label_augment: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let variant: Variant = variant.parse()?;
    let RunConfig { train, model } = load_run_config(config)?;
    let store = load_store(store_path)?;
    let started = Instant::now();
    let episode = sample_episode(&store, shots, seed, train.use_validation)?;
    let labels = if label_augment {
        Some(label_features(store_path)?)
    } else {
        None
    };
    let episode = augment_with_labels(episode, labels.as_deref(), store.dimension())?;
    let resolved = episode.resolve(&store)?;
    let initial = initialize(train.init, store.dimension(), variant, model, seed)?;
    let cfg = TrainConfig {
        init_seed: seed,
        ..train
    };
    let (trained, history) = train_episode(&resolved, initial, &cfg)?;
    save_model(&trained, out).with_context(|| format!("writing model {}", out.display()))?;
    let test = if resolved.test.is_empty() {
        "n/a".to_string()
    } else {
        format!("{:.4}", evaluate_accuracy(&trained, &resolved.test)?)
    };
    println!(
        "{variant} {shots}-shot seed {seed}: {} epochs, best epoch {}, test accuracy {test} on {} records",
        history.epochs_ran(),
        history.best_epoch,
        resolved.test.len()
    );
    eprintln!("trained in {:.3} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn eval(model_path: &Path, store_path: &Path) -> anyhow::Result<()> {
    let model = load_model(model_path).with_context(|| format!("reading model {}", model_path.display()))?;
    let store = load_store(store_path)?;
    if model.dim() != store.dimension() {
        bail!(cma_core::Error::Dimension(format!(
            "model dimension {} does not match store dimension {}",
            model.dim(),
            store.dimension()
        )));
    }
    let records: Vec<_> = store.records().iter().collect();
    let acc = evaluate_accuracy(&model, &records)?;
    println!("{} accuracy {acc:.4} on {} records", model.variant(), records.len());
    Ok(())
}
