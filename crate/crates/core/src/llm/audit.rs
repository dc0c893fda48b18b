//! JSONL record of every generation call, with credentials redacted.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use super::GenerationRequest;

pub const REDACTED: &str = "[REDACTED]";

#[derive(Debug, Serialize)]
pub struct AuditEntry<'a> {
    pub request_id: &'a str,
    pub backend: &'a str,
    pub endpoint: Option<String>,
    pub authorization: Option<String>,
    pub request: &'a GenerationRequest,
    pub response: Option<&'a str>,
    pub error: Option<String>,
    pub attempts: u32,
}

pub struct AuditLog {
    out: Mutex<BufWriter<File>>,
    secrets: Vec<String>,
}

impl AuditLog {
    /// Appends to `path`; any of `secrets` is masked wherever it appears.
    pub fn open(path: &Path, secrets: Vec<String>) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let secrets = secrets.into_iter().filter(|s| !s.is_empty()).collect();
        Ok(Self { out: Mutex::new(BufWriter::new(file)), secrets })
    }

    pub fn record(&self, entry: &AuditEntry<'_>) -> std::io::Result<()> {
        let mut line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
        for s in &self.secrets {
            line = line.replace(s.as_str(), REDACTED);
        }
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(out, "{line}")?;
        out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secrets_never_reach_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let log = AuditLog::open(&path, vec!["sk-123".into()]).unwrap();
        let req = GenerationRequest::new("prompt mentioning sk-123", "s1");
        log.record(&AuditEntry {
            request_id: "s1",
            backend: "remote",
            endpoint: Some("http://x/chat/completions".into()),
            authorization: Some(format!("Bearer {REDACTED}")),
            request: &req,
            response: Some("WeChat"),
            error: None,
            attempts: 1,
        })
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("sk-123"));
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["response"], "WeChat");
        assert_eq!(v["authorization"], "Bearer [REDACTED]");
    }
}
