use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use taonet_core::eval::MetricReport;
use taonet_core::ingest::{
    generate_synthetic, parse_pcap, split_dataset, tokenize_packet, write_dataset, Dataset, LabelSpace, Split, SplitRatios,
    SyntheticSpec,
};
use taonet_core::pipeline::{
    self, calibrate_models, evaluate_predictions, load_run_dataset, read_predictions, run_label_space, train_models,
    BackendKind, ModeOutcome, RoutingMode, RunConfig, Session, TrainedModels,
};
use taonet_core::sps::SpsMode;

#[derive(Parser)]
#[command(name = "taonet", version, about = "Two-stage encrypted traffic classifier")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    routing_mode: Option<RoutingMode>,
    #[arg(long, global = true)]
    sps_mode: Option<SpsMode>,
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Dataset JSONL (default: generated synthetic corpus).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Print the effective configuration with provenance tags and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the shipped synthetic corpus as dataset JSONL.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
        /// Generator spec JSON (default: shipped spec).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Tokenize labeled captures into dataset JSONL.
    IngestPcap {
        /// `LABEL=PATH`, repeatable.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        /// Labels held out of training; repeatable.
        #[arg(long = "ood")]
        ood: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Packets per capture.
        #[arg(long)]
        limit: Option<usize>,
        /// Train, valid and test shares of the ID samples.
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.2,0.2")]
        ratios: Vec<f64>,
    },
    /// Train both stages and fit the residual subspace.
    Train,
    /// Fit the score normalizers of a trained run.
    Calibrate(RunDir),
    /// Classify the test split with a calibrated run.
    Classify(RunDir),
    /// Score a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Report directory (default: next to the predictions).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adaptive, all-id and all-llm routing over shared models.
    Ablate,
    /// Detector AUROC of a calibrated run.
    Auroc {
        #[command(flatten)]
        run: RunDir,
        #[arg(long, default_value = "valid")]
        split: String,
    },
    /// Train, calibrate, classify and evaluate in one go.
    Run {
        /// Repeat with seeds seed, seed+1, ... and aggregate.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Strict, complete and extended prompts over shared models.
    SpsCompare,
}

#[derive(Args)]
struct RunDir {
    /// Run directory (default: derived from the config under --out-dir).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl RunDir {
    fn resolve(&self, config: &RunConfig, out_dir: &Path) -> PathBuf {
        self.run_dir.clone().unwrap_or_else(|| out_dir.join(config.run_dir_name()))
    }
}

fn effective_config(g: &Global) -> Result<RunConfig> {
    let mut config = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(m) = g.routing_mode {
        config.routing_mode = m;
    }
    if let Some(m) = g.sps_mode {
        config.sps_mode = m;
    }
    if let Some(b) = g.backend {
        config.backend = b;
    }
    if let Some(d) = &g.dataset {
        config.dataset = Some(d.clone());
    }
    config.validate()?;
    Ok(config)
}

fn print_report(name: &str, r: &MetricReport) {
    println!(
        "{name}: macro_precision={:.6} recall={:.6} macro_f1={:.6} micro_f1={:.6} n={}",
        r.macro_precision, r.recall, r.macro_f1, r.micro_f1, r.total
    );
}

fn print_outcome(o: &ModeOutcome) {
    print_report(&format!("{} [{}, {}]", o.dir.display(), o.routing_mode, o.sps_mode.as_str()), &o.report);
}

fn ingest_pcaps(config: &RunConfig, inputs: &[String], ood: &[String], limit: Option<usize>, ratios: &[f64]) -> Result<Dataset> {
    let [train, valid, test] = ratios else { bail!("--ratios takes three values") };
    let mut samples = Vec::new();
    let mut id_labels: Vec<String> = Vec::new();
    let mut ood_labels: Vec<String> = Vec::new();
    for input in inputs {
        let (label, path) = input.split_once('=').with_context(|| format!("{input:?} is not LABEL=PATH"))?;
        let capture = parse_pcap(path, limit).with_context(|| format!("reading {path}"))?;
        if capture.skipped > 0 {
            eprintln!("{path}: skipped {} unparsable packets", capture.skipped);
        }
        let target = if ood.iter().any(|o| o == label) { &mut ood_labels } else { &mut id_labels };
        if !target.iter().any(|l| l == label) {
            target.push(label.to_string());
        }
        for (i, record) in capture.records.iter().enumerate() {
            let mut s = tokenize_packet(format!("{label}-{}-{i:06}", samples.len()), record, config.seq_len);
            s.label = Some(label.to_string());
            samples.push(s);
        }
    }
    let unlabeled = Dataset { samples, label_space: LabelSpace::new(id_labels, ood_labels), ..Dataset::default() };
    let ratios = SplitRatios { train: *train, valid: *valid, test: *test };
    Ok(split_dataset(&unlabeled, ratios, config.seed)?)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = effective_config(&cli.global)?;
    if cli.global.print_config {
        println!("{}", serde_json::to_string_pretty(&config.provenance_json())?);
        return Ok(());
    }
    let out_dir = &cli.global.out_dir;
    match cli.command {
        Command::GenSynthetic { out, per_class, spec } => {
            let spec = match spec {
                Some(path) => SyntheticSpec::from_json(&std::fs::read_to_string(&path)?)?,
                None => SyntheticSpec::shipped(),
            };
            let ds = generate_synthetic(&spec, per_class.unwrap_or(config.synthetic_per_class), config.synthetic_seed)?;
            write_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::IngestPcap { inputs, ood, out, limit, ratios } => {
            let ds = ingest_pcaps(&config, &inputs, &ood, limit, &ratios)?;
            write_dataset(&ds, &out)?;
            let counts: Vec<String> = Split::ALL.iter().map(|&s| format!("{s:?}={}", ds.split_len(s))).collect();
            println!("wrote {} samples to {} ({})", ds.samples.len(), out.display(), counts.join(" "));
        }
        Command::Train => {
            let dataset = load_run_dataset(&config)?;
            let (models, reports) = train_models(&config, &dataset)?;
            let session = Session { space: run_label_space(&config, &dataset), templates: pipeline::load_templates(&config)?, config, dataset, models, train_reports: reports };
            let dir = out_dir.join(session.config.run_dir_name());
            session.write_artifacts(&dir)?;
            println!("trained {}", dir.display());
        }
        Command::Calibrate(run) => {
            let dir = run.resolve(&config, out_dir);
            let mut models = TrainedModels::load(&dir.join("checkpoints"))?;
            let dataset = load_run_dataset(&config)?;
            calibrate_models(&mut models, &config, &dataset)?;
            models.save(&dir.join("checkpoints"))?;
            let s = models.detector.scoring.expect("calibrated");
            println!(
                "calibrated {}: residual [{:.6}, {:.6}] smoothness [{:.6}, {:.6}]",
                dir.display(),
                s.residual.low,
                s.residual.high,
                s.smoothness.low,
                s.smoothness.high
            );
        }
        Command::Classify(run) => {
            let dir = run.resolve(&config, out_dir);
            let models = TrainedModels::load(&dir.join("checkpoints"))?;
            let session = Session::with_models(config, models)?;
            print_outcome(&session.classify_test(session.config.routing_mode, session.config.sps_mode, &dir)?);
        }
        Command::Evaluate { predictions, out } => {
            let records = read_predictions(&predictions)?;
            let dataset = load_run_dataset(&config)?;
            let (report, matrix) = evaluate_predictions(&records, &run_label_space(&config, &dataset))?;
            let dir = out.unwrap_or_else(|| predictions.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            taonet_core::eval::emit_report(&report, &matrix, &dir)?;
            print_report(&dir.display().to_string(), &report);
        }
        Command::Ablate => {
            for o in pipeline::run_ablation(&config, out_dir)? {
                print_outcome(&o);
            }
        }
        Command::Auroc { run, split } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "valid" => Split::Valid,
                "test" => Split::Test,
                other => bail!("unknown split {other:?}"),
            };
            let dir = run.resolve(&config, out_dir);
            let session = Session::with_models(config, TrainedModels::load(&dir.join("checkpoints"))?)?;
            let samples: Vec<_> = session.dataset.split(split).collect();
            let value = pipeline::detector_auroc(&session.models.detector, &samples, &session.space)?;
            println!("auroc {split:?}: {value:.6}");
        }
        Command::Run { repeat } => {
            if repeat <= 1 {
                print_outcome(&pipeline::run_pipeline(&config, out_dir)?);
            } else {
                for o in pipeline::run_repeated(&config, out_dir, repeat)? {
                    print_outcome(&o);
                }
            }
        }
        Command::SpsCompare => {
            for o in pipeline::run_sps_comparison(&config, out_dir)? {
                print_outcome(&o);
            }
        }
    }
    Ok(())
}
