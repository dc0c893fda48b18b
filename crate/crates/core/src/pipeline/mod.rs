//! End-to-end orchestration: training both stages, calibration, routed batch
//! classification, evaluation, ablation and the run directory layout.
//!
//! A run directory holds `config.json`, `checkpoints/`, `prompts.jsonl` (LLM
//! audit), `predictions.jsonl`, `metrics.csv`, `confusion.csv`,
//! `confusion.txt` and `summary.json`.

mod auroc;
mod config;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

pub use auroc::{auroc, detector_auroc};
pub use config::{BackendKind, Provenance, RoutingMode, RunConfig};

use crate::classifier::{self, ClassifierHead, LabelScore};
use crate::detector::{DetectorBundle, ScoreBreakdown};
use crate::eval::{compute_metrics, confusion, emit_report, ConfusionMatrix, MetricReport};
use crate::ingest::{generate_synthetic, load_dataset, Dataset, LabelSpace, Split, SyntheticSpec, TrafficSample};
use crate::llm::{classify_ood, AuditLog, Backend, Gateway, KeywordTable, RemoteConfig};
use crate::nn::{train_classifier, train_feature_extractor, EncoderParams, TrainReport};
use crate::sps::{SpsMode, StrictSource, TemplateSet};

pub const SHIPPED_KEYWORD_TABLE: &str = include_str!("../../resources/keyword_table.json");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("AUROC needs both ID and OOD samples")]
    SingleClassInput,
}

/// Wraps any error with the stage it came from.
pub fn at<E: Display>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

impl Route {
    pub fn as_str(&self) -> &'static str {
        match self {
            Route::Id => "ID",
            Route::Ood => "OOD",
        }
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: Option<String>,
    /// Stage-one decision, whatever the routing mode.
    pub route: Route,
    pub label: String,
    /// Which branch produced `label`: `classifier` or `llm`.
    pub labeled_by: String,
    pub scores: ScoreBreakdown,
    /// Softmax over the ID labels when the classifier labeled the sample.
    pub distribution: Option<Vec<LabelScore>>,
    /// Raw LLM answer before canonicalization.
    pub llm_text: Option<String>,
}

/// Both trained networks plus the fitted detector.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub detector: DetectorBundle,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
}

impl TrainedModels {
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        classifier::save(&dir.join("classifier.ckpt"), &self.encoder, &self.head).map_err(at("checkpoint"))?;
        self.detector.save(&dir.join("detector.ckpt")).map_err(at("checkpoint"))
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let (encoder, head) = classifier::load(&dir.join("classifier.ckpt")).map_err(at("checkpoint"))?;
        let detector = DetectorBundle::load(&dir.join("detector.ckpt"), Some(encoder.clone())).map_err(at("checkpoint"))?;
        Ok(Self { detector, encoder, head })
    }
}

/// Loads the configured dataset or generates the shipped synthetic corpus.
pub fn load_run_dataset(config: &RunConfig) -> Result<Dataset, PipelineError> {
    let dataset = match &config.dataset {
        Some(path) => load_dataset(path).map_err(at("ingest"))?,
        None => generate_synthetic(&SyntheticSpec::shipped(), config.synthetic_per_class, config.synthetic_seed)
            .map_err(at("ingest"))?,
    };
    if let Some(len) = dataset.seq_len() {
        if len != config.seq_len {
            return Err(PipelineError::Config(format!("dataset sequences have length {len}, config says {}", config.seq_len)));
        }
    }
    Ok(dataset)
}

/// Trains both networks and fits the residual subspace; calibration is separate.
pub fn train_models(config: &RunConfig, dataset: &Dataset) -> Result<(TrainedModels, Vec<TrainReport>), PipelineError> {
    config.validate()?;
    let (lstm, lstm_report) =
        train_feature_extractor(dataset, config.d, config.d, &config.detector_train()).map_err(at("train feature extractor"))?;
    let (encoder, head, enc_report) =
        train_classifier(dataset, config.encoder_config(), &config.classifier_train()).map_err(at("train classifier"))?;
    let id_train: Vec<&TrafficSample> = dataset.id_samples(Split::Train).collect();
    let detector = DetectorBundle::fit(lstm, encoder.clone(), &id_train, config.gamma).map_err(at("fit subspace"))?;
    Ok((TrainedModels { detector, encoder, head }, vec![lstm_report, enc_report]))
}

/// Fits the score normalizers on the ID validation samples.
pub fn calibrate_models(models: &mut TrainedModels, config: &RunConfig, dataset: &Dataset) -> Result<(), PipelineError> {
    let id_valid: Vec<&TrafficSample> = dataset.id_samples(Split::Valid).collect();
    models.detector.calibrate(&id_valid, config.alpha, config.delta).map_err(at("calibrate"))?;
    Ok(())
}

pub fn load_templates(config: &RunConfig) -> Result<TemplateSet, PipelineError> {
    match &config.templates {
        Some(dir) => TemplateSet::from_dir(dir).map_err(at("templates")),
        None => Ok(TemplateSet::shipped()),
    }
}

/// The dataset's label space plus the synthetic corpus's cross-dataset labels
/// when the corpus is synthetic.
pub fn run_label_space(config: &RunConfig, dataset: &Dataset) -> LabelSpace {
    let mut space = dataset.label_space.clone();
    if space.extended_labels.is_empty() && config.dataset.is_none() {
        space.extended_labels = SyntheticSpec::shipped().extended_labels;
    }
    space
}

/// Gateway for the configured backend; the oracle knows every gold label of `dataset`.
pub fn build_gateway(config: &RunConfig, dataset: &Dataset, audit: Option<&Path>) -> Result<Gateway, PipelineError> {
    let backend = match config.backend {
        BackendKind::MockOracle => Backend::MockOracle(
            dataset.samples.iter().filter_map(|s| Some((s.id.clone(), s.label.clone()?))).collect::<BTreeMap<_, _>>(),
        ),
        BackendKind::MockKeyword => {
            let text = match &config.keyword_table {
                Some(path) => std::fs::read_to_string(path).map_err(at("keyword table"))?,
                None => SHIPPED_KEYWORD_TABLE.to_string(),
            };
            Backend::MockKeyword(serde_json::from_str::<KeywordTable>(&text).map_err(at("keyword table"))?)
        }
        BackendKind::Remote => Backend::Remote(RemoteConfig::from_env()),
    };
    let secrets = match &backend {
        Backend::Remote(cfg) => cfg.api_key.iter().cloned().collect(),
        _ => Vec::new(),
    };
    let mut gateway = Gateway::new(backend)
        .map_err(at("llm gateway"))?
        .with_in_flight_cap(config.in_flight)
        .with_sampling(config.temperature, config.top_p);
    if let Some(path) = audit {
        gateway = gateway.with_audit(AuditLog::open(path, secrets).map_err(at("llm audit"))?);
    }
    Ok(gateway)
}

/// What the OOD branch needs besides the models.
pub struct LlmContext<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub space: &'a LabelSpace,
    pub sps_mode: SpsMode,
}

/// Stage one, then the branch selected by `mode`.
pub fn classify_one(
    models: &TrainedModels,
    llm: &LlmContext<'_>,
    sample: &TrafficSample,
    mode: RoutingMode,
) -> Result<PredictionRecord, PipelineError> {
    let scores = models.detector.detect(sample).map_err(at("detect"))?;
    let route = if scores.is_ood { Route::Ood } else { Route::Id };
    let use_llm = match mode {
        RoutingMode::Adaptive => route == Route::Ood,
        RoutingMode::AllId => false,
        RoutingMode::AllLlm => true,
    };
    let mut record = PredictionRecord {
        id: sample.id.clone(),
        gold: sample.label.clone(),
        route,
        label: String::new(),
        labeled_by: String::new(),
        scores,
        distribution: None,
        llm_text: None,
    };
    if use_llm {
        let (source, flag) = match (mode, route) {
            (RoutingMode::AllLlm, Route::Id) => (StrictSource::Id, Some("ID")),
            (RoutingMode::AllLlm, Route::Ood) => (StrictSource::Ood, Some("OOD")),
            _ => (StrictSource::Ood, None),
        };
        let p = classify_ood(llm.gateway, llm.templates, sample, llm.sps_mode, llm.space, source, flag)
            .map_err(at("llm"))?;
        record.label = p.label;
        record.labeled_by = "llm".into();
        record.llm_text = Some(p.raw_text);
    } else {
        let dist = classifier::predict_distribution(&models.encoder, &models.head, sample).map_err(at("classify"))?;
        let mut best = 0;
        for (i, s) in dist.iter().enumerate() {
            if s.probability > dist[best].probability {
                best = i;
            }
        }
        record.label = dist[best].label.clone();
        record.labeled_by = "classifier".into();
        record.distribution = Some(dist);
    }
    Ok(record)
}

/// Classifies every sample with up to `workers` threads and returns the
/// records sorted by sample id.
pub fn classify_batch(
    models: &TrainedModels,
    llm: &LlmContext<'_>,
    samples: &[&TrafficSample],
    mode: RoutingMode,
    workers: usize,
) -> Result<Vec<PredictionRecord>, PipelineError> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<PredictionRecord, PipelineError>>>> =
        Mutex::new((0..samples.len()).map(|_| None).collect());
    let workers = workers.clamp(1, samples.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= samples.len() {
                    break;
                }
                let result = classify_one(models, llm, samples[i], mode);
                slots.lock().expect("no worker panics holding the lock")[i] = Some(result);
            });
        }
    });
    let mut records = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<Vec<_>, _>>()?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

/// Confusion matrix and metrics over records that carry a gold label; the
/// axis follows ID, OOD, then extended label order.
pub fn evaluate_predictions(
    records: &[PredictionRecord],
    space: &LabelSpace,
) -> Result<(MetricReport, ConfusionMatrix), PipelineError> {
    let (gold, pred): (Vec<String>, Vec<String>) =
        records.iter().filter_map(|r| Some((r.gold.clone()?, r.label.clone()))).unzip();
    let order: Vec<String> =
        space.id_labels.iter().chain(&space.ood_labels).chain(&space.extended_labels).cloned().collect();
    let matrix = confusion(&gold, &pred, &order).map_err(at("evaluate"))?;
    let report = compute_metrics(&matrix).map_err(at("evaluate"))?;
    Ok((report, matrix))
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path).map_err(at("write predictions"))?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(at("write predictions"))?;
        w.write_all(b"\n").map_err(at("write predictions"))?;
    }
    w.flush().map_err(at("write predictions"))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, PipelineError> {
    let file = File::open(path).map_err(at("read predictions"))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(at("read predictions"))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(at("read predictions"))?);
        }
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(at("write json"))?;
    text.push('\n');
    std::fs::write(path, text).map_err(at("write json"))
}

/// Loaded data, trained and calibrated models, templates: everything shared
/// between the routing and SPS variants of one configuration.
pub struct Session {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub space: LabelSpace,
    pub templates: TemplateSet,
    pub models: TrainedModels,
    pub train_reports: Vec<TrainReport>,
}

/// Outcome of classifying and scoring the test split once.
#[derive(Debug, Clone)]
pub struct ModeOutcome {
    pub dir: PathBuf,
    pub routing_mode: RoutingMode,
    pub sps_mode: SpsMode,
    pub report: MetricReport,
    pub matrix: ConfusionMatrix,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, Serialize)]
struct Summary {
    routing_mode: RoutingMode,
    sps_mode: SpsMode,
    backend: BackendKind,
    seed: u64,
    test_samples: usize,
    routed_ood: usize,
    detector_auroc_valid: Option<f64>,
    detector_auroc_test: Option<f64>,
    macro_precision: f64,
    recall: f64,
    macro_f1: f64,
    micro_f1: f64,
}

impl Session {
    /// Validates the config, loads the data, trains and calibrates.
    pub fn prepare(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let dataset = load_run_dataset(&config)?;
        let space = run_label_space(&config, &dataset);
        let templates = load_templates(&config)?;
        info!(samples = dataset.samples.len(), "dataset ready");
        let (mut models, train_reports) = train_models(&config, &dataset)?;
        calibrate_models(&mut models, &config, &dataset)?;
        Ok(Self { config, dataset, space, templates, models, train_reports })
    }

    /// Uses already trained models, e.g. loaded from checkpoints.
    pub fn with_models(config: RunConfig, models: TrainedModels) -> Result<Self, PipelineError> {
        config.validate()?;
        let dataset = load_run_dataset(&config)?;
        let space = run_label_space(&config, &dataset);
        let templates = load_templates(&config)?;
        Ok(Self { config, dataset, space, templates, models, train_reports: Vec::new() })
    }

    pub fn test_samples(&self) -> Vec<&TrafficSample> {
        self.dataset.split(Split::Test).collect()
    }

    pub fn auroc(&self, split: Split) -> Option<f64> {
        let samples: Vec<&TrafficSample> = self.dataset.split(split).collect();
        detector_auroc(&self.models.detector, &samples, &self.space).ok()
    }

    /// Writes config, checkpoints and training curves into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(at("run dir"))?;
        write_json(&dir.join("config.json"), &self.config)?;
        self.models.save(&dir.join("checkpoints"))?;
        if !self.train_reports.is_empty() {
            write_json(&dir.join("train_report.json"), &self.train_reports)?;
        }
        Ok(())
    }

    /// Classifies the test split under the given modes and writes the
    /// predictions, audit log and reports into `dir`.
    pub fn classify_test(&self, routing_mode: RoutingMode, sps_mode: SpsMode, dir: &Path) -> Result<ModeOutcome, PipelineError> {
        std::fs::create_dir_all(dir).map_err(at("run dir"))?;
        let audit = dir.join("prompts.jsonl");
        if audit.exists() {
            std::fs::remove_file(&audit).map_err(at("run dir"))?;
        }
        let gateway = build_gateway(&self.config, &self.dataset, Some(&audit))?;
        let llm = LlmContext { gateway: &gateway, templates: &self.templates, space: &self.space, sps_mode };
        let predictions = classify_batch(&self.models, &llm, &self.test_samples(), routing_mode, self.config.in_flight)?;
        write_predictions(&predictions, &dir.join("predictions.jsonl"))?;
        let (report, matrix) = evaluate_predictions(&predictions, &self.space)?;
        emit_report(&report, &matrix, dir).map_err(at("report"))?;
        let summary = Summary {
            routing_mode,
            sps_mode,
            backend: self.config.backend,
            seed: self.config.seed,
            test_samples: predictions.len(),
            routed_ood: predictions.iter().filter(|p| p.route == Route::Ood).count(),
            detector_auroc_valid: self.auroc(Split::Valid),
            detector_auroc_test: self.auroc(Split::Test),
            macro_precision: report.macro_precision,
            recall: report.recall,
            macro_f1: report.macro_f1,
            micro_f1: report.micro_f1,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        info!(%routing_mode, sps = sps_mode.as_str(), macro_f1 = report.macro_f1, "test split scored");
        Ok(ModeOutcome { dir: dir.to_path_buf(), routing_mode, sps_mode, report, matrix, predictions })
    }
}

/// Full workflow for one config: train, calibrate, classify the test split,
/// evaluate. Artifacts land in `<out_root>/run-<hash>-s<seed>/`.
pub fn run_pipeline(config: &RunConfig, out_root: &Path) -> Result<ModeOutcome, PipelineError> {
    let session = Session::prepare(config.clone())?;
    let dir = out_root.join(config.run_dir_name());
    session.write_artifacts(&dir)?;
    session.classify_test(config.routing_mode, config.sps_mode, &dir)
}

/// Runs each variant on one shared session and writes `<name>/` subdirectories
/// plus a comparison table `comparison.csv`.
fn compare<K: Display>(
    session: &Session,
    dir: &Path,
    variants: &[(K, RoutingMode, SpsMode)],
    key: &str,
) -> Result<Vec<ModeOutcome>, PipelineError> {
    let mut outcomes = Vec::new();
    let mut table = csv::Writer::from_path(dir.join("comparison.csv")).map_err(at("report"))?;
    table.write_record([key, "macro_precision", "recall", "macro_f1", "micro_f1"]).map_err(at("report"))?;
    for (name, routing, sps) in variants {
        let name = name.to_string();
        let out = session.classify_test(*routing, *sps, &dir.join(&name))?;
        let r = &out.report;
        let cells = [r.macro_precision, r.recall, r.macro_f1, r.micro_f1].map(|x| format!("{x:.6}"));
        table.write_record(std::iter::once(name.as_str()).chain(cells.iter().map(String::as_str))).map_err(at("report"))?;
        outcomes.push(out);
    }
    table.flush().map_err(at("report"))?;
    Ok(outcomes)
}

/// Adaptive, AllId and AllLlm over the same trained components and test split.
pub fn run_ablation(config: &RunConfig, out_root: &Path) -> Result<Vec<ModeOutcome>, PipelineError> {
    let session = Session::prepare(config.clone())?;
    let dir = out_root.join(config.run_dir_name());
    session.write_artifacts(&dir)?;
    ablate_session(&session, &dir)
}

pub fn ablate_session(session: &Session, dir: &Path) -> Result<Vec<ModeOutcome>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(at("run dir"))?;
    let variants: Vec<_> = RoutingMode::ALL.iter().map(|&m| (m, m, session.config.sps_mode)).collect();
    compare(session, dir, &variants, "routing_mode")
}

/// The three SPS modes under the configured routing mode.
pub fn run_sps_comparison(config: &RunConfig, out_root: &Path) -> Result<Vec<ModeOutcome>, PipelineError> {
    let session = Session::prepare(config.clone())?;
    let dir = out_root.join(config.run_dir_name());
    session.write_artifacts(&dir)?;
    sps_compare_session(&session, &dir)
}

pub fn sps_compare_session(session: &Session, dir: &Path) -> Result<Vec<ModeOutcome>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(at("run dir"))?;
    let variants: Vec<_> = SpsMode::ALL.iter().map(|&m| (m.as_str(), session.config.routing_mode, m)).collect();
    compare(session, dir, &variants, "sps_mode")
}

/// Seeds `seed..seed + runs`; each run gets its own directory, the aggregate
/// goes to `<out_root>/aggregate-<hash>.csv`.
pub fn run_repeated(config: &RunConfig, out_root: &Path, runs: usize) -> Result<Vec<ModeOutcome>, PipelineError> {
    let outcomes = (0..runs as u64)
        .map(|i| run_pipeline(&RunConfig { seed: config.seed + i, ..config.clone() }, out_root))
        .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<MetricReport> = outcomes
        .iter()
        .zip(config.seed..)
        .map(|(o, seed)| MetricReport { seed: Some(seed), ..o.report.clone() })
        .collect();
    if let Some(agg) = crate::eval::aggregate_runs(&reports) {
        let path = out_root.join(format!("aggregate-{}.csv", config.config_hash()));
        let mut w = csv::Writer::from_path(path).map_err(at("report"))?;
        w.write_record(["metric", "mean", "std", "runs"]).map_err(at("report"))?;
        for (name, m) in [
            ("macro_precision", agg.macro_precision),
            ("recall", agg.recall),
            ("macro_f1", agg.macro_f1),
            ("micro_f1", agg.micro_f1),
        ] {
            w.write_record([name.to_string(), format!("{:.6}", m.mean), format!("{:.6}", m.std), agg.runs.to_string()])
                .map_err(at("report"))?;
        }
        w.flush().map_err(at("report"))?;
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests;
