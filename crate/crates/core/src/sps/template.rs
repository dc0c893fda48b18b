//! Versioned prompt templates with `{labels}` and `{digest}` slots.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::digest::FeatureDigest;
use super::{candidate_labels, SpsError, SpsMode, StrictSource};
use crate::ingest::LabelSpace;

pub const LABELS_SLOT: &str = "{labels}";
pub const DIGEST_SLOT: &str = "{digest}";

const SHIPPED_STRICT: &str = include_str!("../../resources/templates/strict.txt");
const SHIPPED_COMPLETE: &str = include_str!("../../resources/templates/complete.txt");
const SHIPPED_EXTENDED: &str = include_str!("../../resources/templates/extended.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub strict: String,
    pub complete: String,
    pub extended: String,
}

impl TemplateSet {
    pub fn shipped() -> Self {
        Self { strict: SHIPPED_STRICT.into(), complete: SHIPPED_COMPLETE.into(), extended: SHIPPED_EXTENDED.into() }
    }

    /// Reads `strict.txt`, `complete.txt` and `extended.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, SpsError> {
        let read = |name: &str| -> Result<String, SpsError> {
            let text = std::fs::read_to_string(dir.join(format!("{name}.txt")))?;
            Ok(text.strip_suffix('\n').unwrap_or(&text).to_string())
        };
        let set = Self { strict: read("strict")?, complete: read("complete")?, extended: read("extended")? };
        set.validate()?;
        Ok(set)
    }

    pub fn get(&self, mode: SpsMode) -> &str {
        match mode {
            SpsMode::Strict => &self.strict,
            SpsMode::Complete => &self.complete,
            SpsMode::Extended => &self.extended,
        }
    }

    /// Every template must carry each slot exactly once.
    pub fn validate(&self) -> Result<(), SpsError> {
        for mode in SpsMode::ALL {
            let text = self.get(mode);
            for slot in [LABELS_SLOT, DIGEST_SLOT] {
                let count = text.matches(slot).count();
                if count != 1 {
                    return Err(SpsError::InvalidTemplate {
                        name: mode.as_str().into(),
                        reason: format!("slot {slot} appears {count} times"),
                    });
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over all three templates, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for mode in SpsMode::ALL {
            h.update(mode.as_str().as_bytes());
            h.update([0]);
            h.update(self.get(mode).as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::shipped()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub mode: SpsMode,
    pub candidates: Vec<String>,
    pub digest: FeatureDigest,
    pub rendered_text: String,
}

/// Fills the mode's template with the candidate list and the rendered digest.
pub fn render_prompt(
    templates: &TemplateSet,
    mode: SpsMode,
    space: &LabelSpace,
    strict_source: StrictSource,
    digest: &FeatureDigest,
) -> Result<PromptBundle, SpsError> {
    let candidates = candidate_labels(mode, space, strict_source)?;
    let rendered_text = templates
        .get(mode)
        .replacen(LABELS_SLOT, &candidates.join(", "), 1)
        .replacen(DIGEST_SLOT, &digest.render(), 1);
    Ok(PromptBundle { mode, candidates, digest: digest.clone(), rendered_text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Origin, TrafficSample};
    use crate::sps::digest_for_sample;

    fn space() -> LabelSpace {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        LabelSpace {
            id_labels: s(&["QQMail", "QQMusic", "Youku", "TaoBao"]),
            ood_labels: s(&["WeChat", "Weibo"]),
            extended_labels: s(&["Gmail", "Facebook", "Skype", "YouTube"]),
        }
    }

    fn digest() -> FeatureDigest {
        digest_for_sample(&TrafficSample { id: "x".into(), tokens: vec![0x47, 0x45, 0x54], label: None, origin: Origin::Synthetic })
    }

    #[test]
    fn shipped_templates_are_valid() {
        TemplateSet::shipped().validate().unwrap();
        assert_eq!(TemplateSet::shipped().content_hash().len(), 64);
    }

    #[test]
    fn strict_with_id_candidates() {
        let b = render_prompt(&TemplateSet::shipped(), SpsMode::Strict, &space(), StrictSource::Id, &digest()).unwrap();
        assert!(b.rendered_text.starts_with(
            "Classify this encrypted network traffic packet into one of these known application categories: QQMail, QQMusic, Youku, TaoBao."
        ));
        assert!(b.rendered_text.ends_with("Your output should be exactly one application name without any additional explanation."));
    }

    #[test]
    fn extended_lists_cross_dataset_labels() {
        let b = render_prompt(&TemplateSet::shipped(), SpsMode::Extended, &space(), StrictSource::Ood, &digest()).unwrap();
        assert!(b.rendered_text.contains("Gmail, Facebook, Skype, YouTube"));
        assert!(b.rendered_text.ends_with("Provide exactly one application name as output."));
        for label in &b.candidates {
            assert_eq!(b.rendered_text.matches(&format!("{label},")).count() + b.rendered_text.matches(&format!("{label}.")).count(), 1);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = TemplateSet::shipped();
        for mode in SpsMode::ALL {
            let a = render_prompt(&t, mode, &space(), StrictSource::Ood, &digest()).unwrap();
            let b = render_prompt(&t, mode, &space(), StrictSource::Ood, &digest()).unwrap();
            assert_eq!(a.rendered_text, b.rendered_text);
        }
    }

    #[test]
    fn overrides_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        for mode in SpsMode::ALL {
            std::fs::write(dir.path().join(format!("{}.txt", mode.as_str())), "Pick from {labels}.\n{digest}\n").unwrap();
        }
        let t = TemplateSet::from_dir(dir.path()).unwrap();
        assert_eq!(t.strict, "Pick from {labels}.\n{digest}");
        assert_ne!(t.content_hash(), TemplateSet::shipped().content_hash());
        std::fs::write(dir.path().join("complete.txt"), "no slots").unwrap();
        assert!(matches!(TemplateSet::from_dir(dir.path()), Err(SpsError::InvalidTemplate { .. })));
    }
}
