use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use psdn_core::data::{write_matrix, Dataset};
use psdn_core::eval::{self, EvalOptions};
use psdn_core::psdn::Variant;
use psdn_core::synthgen::{generate_dataset, GeneratorConfig, MANIFEST_FILE};
use psdn_core::training::{train, Checkpoint, TrainConfig};
use psdn_core::Error;

const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Parser)]
#[command(name = "psdn", version, about = "Accent conversion with pseudo-Siamese disentanglement on synthetic speech features")]
struct Cli {
    /// Worker threads for data generation, augmentation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest file or dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        no_augment: bool,
    },
    /// Convert every utterance of a dataset to the target accent.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every evaluation surrogate and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train an accent probe on the frozen content representation.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Psdn,
    GrlOnly,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Psdn => Variant::Psdn,
            VariantArg::GrlOnly => Variant::GrlOnlyBaseline,
        }
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 1, message }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn echo_config<T: Serialize>(dir: &Path, config: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(config).expect("configs serialize");
    log::info!("resolved configuration:\n{text}");
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.into(), source: e }))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, text + "\n").map_err(|e| Failure::from(Error::Io { path, source: e }))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    Ok(Dataset::load(&manifest)?)
}

fn load_checkpoint(dir: &Path, dataset: &Dataset) -> Result<Checkpoint, Failure> {
    let ckpt = Checkpoint::load(dir)?;
    if ckpt.dataset_digest != dataset.digest() {
        log::warn!("checkpoint was trained on dataset {}, evaluating on {}", ckpt.dataset_digest, dataset.digest());
    }
    Ok(ckpt)
}

#[derive(Serialize)]
struct ConvertedEntry {
    id: String,
    path: String,
    frames: usize,
}

#[derive(Serialize)]
struct ConvertIndex {
    checkpoint_step: usize,
    variant: String,
    dataset_digest: String,
    outputs: Vec<ConvertedEntry>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot configure workers: {e}")))?;
    }
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut config: GeneratorConfig = read_config(config.as_deref())?;
            if let Some(seed) = seed {
                config.master_seed = seed;
            }
            config.validate()?;
            echo_config(&out, &config)?;
            let manifest = generate_dataset(&config, &config.counts, &out)?;
            log::info!("wrote {} utterances, digest {}", manifest.entries.len(), manifest.generator_config_digest);
        }
        Command::Train { config, data, out, variant, no_augment } => {
            let mut config: TrainConfig = read_config(config.as_deref())?;
            if let Some(v) = variant {
                config.variant = v.into();
            }
            if no_augment {
                config.augmentation = false;
            }
            config.validate()?;
            let dataset = load_dataset(&data)?;
            echo_config(&out, &config)?;
            let outcome = train(&config, &dataset, Some(&out))?;
            if let Some(last) = outcome.curve.last() {
                log::info!("finished at step {} with total loss {:.5}", last.step, last.parts.total);
            }
        }
        Command::Convert { checkpoint, data, out } => {
            let dataset = load_dataset(&data)?;
            let ckpt = load_checkpoint(&checkpoint, &dataset)?;
            echo_config(&out, &ckpt.config)?;
            let mut outputs = Vec::with_capacity(dataset.utterances.len());
            for utt in &dataset.utterances {
                let mel = ckpt.model.convert(utt)?;
                let rel = format!("{}.converted.psdn", utt.id);
                write_matrix(&out.join(&rel), &mel)?;
                outputs.push(ConvertedEntry {
                    id: utt.id.clone(),
                    path: rel,
                    frames: mel.rows(),
                });
            }
            let index = ConvertIndex {
                checkpoint_step: ckpt.step,
                variant: ckpt.model.variant.name().into(),
                dataset_digest: dataset.digest().into(),
                outputs,
            };
            eval::write_report(&out.join("index.json"), &index)?;
            log::info!("converted {} utterances", index.outputs.len());
        }
        Command::Eval { checkpoint, data, report } => {
            let dataset = load_dataset(&data)?;
            let ckpt = load_checkpoint(&checkpoint, &dataset)?;
            let opts = EvalOptions::default();
            log::info!("evaluation options: {}", serde_json::to_string(&opts).expect("options serialize"));
            let reference = eval::reference_classifier(&dataset, &opts)?;
            let r = eval::evaluate(&ckpt.model, ckpt.step, &dataset, &reference, &opts)?;
            eval::write_report(&report, &r)?;
            log::info!(
                "win rate {:.3}, accentedness {:.3}, probe {:.3}, timbre gain error {:.3}",
                r.conversion_win_rate,
                r.accentedness_rate,
                r.probe_accent_accuracy_on_content,
                r.timbre_gain_error
            );
        }
        Command::Probe { checkpoint, data, report } => {
            let dataset = load_dataset(&data)?;
            let ckpt = load_checkpoint(&checkpoint, &dataset)?;
            let opts = EvalOptions::default();
            let r = eval::probe_report(&ckpt.model, ckpt.step, &dataset, &opts)?;
            eval::write_report(&report, &r)?;
            log::info!("probe accuracy {:.3} (chance {:.3})", r.probe_accent_accuracy_on_content, r.probe_chance_level);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PSDN_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
