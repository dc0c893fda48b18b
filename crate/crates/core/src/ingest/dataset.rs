//! Dataset JSONL format: one `{"id", "tokens", "label", "split"}` object per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, IngestError, LabelSpace, Origin, Split, TrafficSample, PAD_TOKEN};

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    tokens: Vec<i64>,
    label: Option<String>,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<Origin>,
}

#[derive(Serialize)]
struct LineOut<'a> {
    id: &'a str,
    tokens: &'a [u16],
    label: Option<&'a str>,
    split: Split,
    origin: Origin,
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &dataset.samples {
        let split = dataset.split_of(s).ok_or_else(|| IngestError::SchemaViolation {
            line: 0,
            message: format!("sample {:?} has no split assignment", s.id),
        })?;
        let line = LineOut { id: &s.id, tokens: &s.tokens, label: s.label.as_deref(), split, origin: s.origin };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset, inferring the label space: labels seen in the train split
/// are ID, every other label is OOD, both in order of first appearance.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, IngestError> {
    load_dataset_with_labels(path, None)
}

pub fn load_dataset_with_labels(
    path: impl AsRef<Path>,
    label_space: Option<LabelSpace>,
) -> Result<Dataset, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IngestError::FileNotFound(path.display().to_string()),
        _ => IngestError::Io(e),
    })?;
    parse_lines(BufReader::new(file), label_space)
}

pub(crate) fn parse_lines(reader: impl BufRead, label_space: Option<LabelSpace>) -> Result<Dataset, IngestError> {
    let mut samples = Vec::new();
    let mut assignments = BTreeMap::new();
    let mut seq_len = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let violation = |message: String| IngestError::SchemaViolation { line: lineno, message };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| violation(e.to_string()))?;
        if value.get("label").is_none() {
            return Err(violation("missing field `label`".into()));
        }
        let parsed: Line = serde_json::from_value(value).map_err(|e| violation(e.to_string()))?;
        let split = match parsed.split.as_str() {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            other => return Err(violation(format!("unknown split {other:?}"))),
        };
        let mut tokens = Vec::with_capacity(parsed.tokens.len());
        for t in parsed.tokens {
            if !(0..=i64::from(PAD_TOKEN)).contains(&t) {
                return Err(violation(format!("token value {t} outside [0, 256]")));
            }
            tokens.push(t as u16);
        }
        if tokens.is_empty() {
            return Err(violation("empty token sequence".into()));
        }
        match seq_len {
            None => seq_len = Some(tokens.len()),
            Some(j) if j != tokens.len() => {
                return Err(violation(format!("sequence length {} differs from {j}", tokens.len())))
            }
            _ => {}
        }
        if assignments.insert(parsed.id.clone(), split).is_some() {
            return Err(violation(format!("duplicate id {:?}", parsed.id)));
        }
        samples.push(TrafficSample {
            id: parsed.id,
            tokens,
            label: parsed.label,
            origin: parsed.origin.unwrap_or(Origin::Jsonl),
        });
    }

    let label_space = match label_space {
        Some(ls) => ls,
        None => infer_label_space(&samples, &assignments),
    };
    label_space.validate().map_err(|message| IngestError::SchemaViolation { line: 0, message })?;
    Ok(Dataset { samples, label_space, assignments })
}

fn infer_label_space(samples: &[TrafficSample], assignments: &BTreeMap<String, Split>) -> LabelSpace {
    let mut id_labels: Vec<String> = Vec::new();
    let mut ood_labels: Vec<String> = Vec::new();
    for s in samples {
        if let (Some(l), Some(Split::Train)) = (&s.label, assignments.get(&s.id)) {
            if !id_labels.contains(l) {
                id_labels.push(l.clone());
            }
        }
    }
    for s in samples {
        if let Some(l) = &s.label {
            if !id_labels.contains(l) && !ood_labels.contains(l) {
                ood_labels.push(l.clone());
            }
        }
    }
    LabelSpace::new(id_labels, ood_labels)
}
