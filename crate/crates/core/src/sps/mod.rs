//! Prompt construction for the generative branch: candidate label sets per
//! mode, packet feature digests, template rendering and mapping of free-form
//! answers back onto candidate labels.

pub mod canonical;
pub mod digest;
pub mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::LabelSpace;

pub use canonical::{canonicalize_label, normalize_label, UNMAPPED};
pub use digest::{build_digest, digest_for_sample, FeatureDigest};
pub use template::{render_prompt, PromptBundle, TemplateSet};

#[derive(Debug, Error)]
pub enum SpsError {
    #[error("mode {mode:?} has no candidate labels: {reason}")]
    MissingLabels { mode: SpsMode, reason: String },
    #[error("template {name} is invalid: {reason}")]
    InvalidTemplate { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Nested prompt modes; each widens the candidate set of the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpsMode {
    Strict,
    Complete,
    Extended,
}

impl SpsMode {
    pub const ALL: [SpsMode; 3] = [SpsMode::Strict, SpsMode::Complete, SpsMode::Extended];

    pub fn as_str(&self) -> &'static str {
        match self {
            SpsMode::Strict => "strict",
            SpsMode::Complete => "complete",
            SpsMode::Extended => "extended",
        }
    }
}

impl std::str::FromStr for SpsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(SpsMode::Strict),
            "complete" => Ok(SpsMode::Complete),
            "extended" => Ok(SpsMode::Extended),
            other => Err(format!("unknown SPS mode {other:?} (expected strict, complete or extended)")),
        }
    }
}

/// Which label set Strict mode offers as candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrictSource {
    #[default]
    Ood,
    Id,
}

fn push_unique(out: &mut Vec<String>, labels: &[String]) {
    for l in labels {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
}

/// Ordered candidates for `mode`: Strict is one configured set, Complete adds
/// ID and OOD together, Extended appends the cross-dataset labels.
pub fn candidate_labels(mode: SpsMode, space: &LabelSpace, strict_source: StrictSource) -> Result<Vec<String>, SpsError> {
    let mut out = Vec::new();
    match mode {
        SpsMode::Strict => match strict_source {
            StrictSource::Ood => push_unique(&mut out, &space.ood_labels),
            StrictSource::Id => push_unique(&mut out, &space.id_labels),
        },
        SpsMode::Complete => {
            push_unique(&mut out, &space.id_labels);
            push_unique(&mut out, &space.ood_labels);
        }
        SpsMode::Extended => {
            if space.extended_labels.is_empty() {
                return Err(SpsError::MissingLabels { mode, reason: "no extended labels configured".into() });
            }
            push_unique(&mut out, &space.id_labels);
            push_unique(&mut out, &space.ood_labels);
            push_unique(&mut out, &space.extended_labels);
        }
    }
    if out.is_empty() {
        let reason = match (mode, strict_source) {
            (SpsMode::Strict, StrictSource::Ood) => "the OOD label set is empty",
            (SpsMode::Strict, StrictSource::Id) => "the ID label set is empty",
            _ => "the label space is empty",
        };
        return Err(SpsError::MissingLabels { mode, reason: reason.into() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chnapp() -> LabelSpace {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        LabelSpace {
            id_labels: s(&["QQMail", "QQMusic", "Youku", "TaoBao"]),
            ood_labels: s(&["WeChat", "Weibo"]),
            extended_labels: s(&["Gmail", "Facebook", "Skype", "YouTube"]),
        }
    }

    #[test]
    fn complete_lists_id_then_ood() {
        assert_eq!(
            candidate_labels(SpsMode::Complete, &chnapp(), StrictSource::Ood).unwrap(),
            ["QQMail", "QQMusic", "Youku", "TaoBao", "WeChat", "Weibo"]
        );
    }

    #[test]
    fn strict_sources() {
        assert_eq!(candidate_labels(SpsMode::Strict, &chnapp(), StrictSource::Ood).unwrap(), ["WeChat", "Weibo"]);
        assert_eq!(candidate_labels(SpsMode::Strict, &chnapp(), StrictSource::Id).unwrap().len(), 4);
        let mut space = chnapp();
        space.ood_labels.clear();
        assert!(matches!(
            candidate_labels(SpsMode::Strict, &space, StrictSource::Ood),
            Err(SpsError::MissingLabels { mode: SpsMode::Strict, .. })
        ));
    }

    #[test]
    fn extended_needs_extra_labels() {
        let ext = candidate_labels(SpsMode::Extended, &chnapp(), StrictSource::Ood).unwrap();
        assert_eq!(&ext[6..], ["Gmail", "Facebook", "Skype", "YouTube"]);
        let mut space = chnapp();
        space.extended_labels.clear();
        assert!(matches!(candidate_labels(SpsMode::Extended, &space, StrictSource::Ood), Err(SpsError::MissingLabels { .. })));
    }

    #[test]
    fn extended_deduplicates_overlap() {
        let mut space = chnapp();
        space.extended_labels.push("WeChat".into());
        let ext = candidate_labels(SpsMode::Extended, &space, StrictSource::Ood).unwrap();
        assert_eq!(ext.iter().filter(|l| *l == "WeChat").count(), 1);
    }

    #[test]
    fn mode_parsing() {
        for m in SpsMode::ALL {
            assert_eq!(m.as_str().parse::<SpsMode>().unwrap(), m);
        }
        assert!("loose".parse::<SpsMode>().is_err());
    }
}
