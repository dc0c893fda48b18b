//! Structured packet summary injected into prompts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ingest::packet::tcp_flag_names;
use crate::ingest::{PacketRecord, TrafficSample};

/// Bytes shown in the hex preview.
pub const PREVIEW_BYTES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDigest {
    pub ip_version: Option<u8>,
    pub transport: Option<String>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub tcp_flags: Vec<String>,
    pub window: Option<u16>,
    pub total_length: Option<usize>,
    pub payload_length: Option<usize>,
    pub fragmented: Option<bool>,
    /// Shannon entropy of the non-pad bytes, bits per byte.
    pub entropy: f64,
    /// Share of non-pad bytes in `0x20..=0x7E`.
    pub printable_fraction: f64,
    pub hex_preview: String,
    /// Stage-one decision, present when prompts are built for every sample.
    pub detector_route: Option<String>,
}

fn entropy(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for &b in bytes {
        hist[usize::from(b)] += 1;
    }
    let n = bytes.len() as f64;
    let h: f64 = hist.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.log2()
    }).sum();
    h.max(0.0)
}

/// Digest of one packet; header fields come from `record` when available.
pub fn build_digest(record: Option<&PacketRecord>, sample: &TrafficSample) -> FeatureDigest {
    let bytes: Vec<u8> = sample.byte_tokens().collect();
    let printable = bytes.iter().filter(|b| (0x20..=0x7e).contains(*b)).count();
    let header = record.map(|r| &r.header);
    FeatureDigest {
        ip_version: header.map(|h| h.ip_version),
        transport: header.map(|h| h.transport.as_str().to_string()),
        src_port: header.and_then(|h| h.src_port),
        dst_port: header.and_then(|h| h.dst_port),
        tcp_flags: header
            .and_then(|h| h.tcp_flags)
            .map(|f| tcp_flag_names(f).into_iter().map(String::from).collect())
            .unwrap_or_default(),
        window: header.and_then(|h| h.tcp_window),
        total_length: header.map(|h| h.total_length),
        payload_length: header.map(|h| h.payload_length),
        fragmented: header.map(|h| h.fragmented),
        entropy: entropy(&bytes),
        printable_fraction: if bytes.is_empty() { 0.0 } else { printable as f64 / bytes.len() as f64 },
        hex_preview: hex::encode(&bytes[..bytes.len().min(PREVIEW_BYTES)]),
        detector_route: None,
    }
}

/// Digest with headers re-parsed from the sample's own bytes.
pub fn digest_for_sample(sample: &TrafficSample) -> FeatureDigest {
    let record = sample.to_record().ok();
    build_digest(record.as_ref(), sample)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "unknown".to_string(), |x| x.to_string())
}

impl FeatureDigest {
    /// Fixed-order `key:value` lines.
    pub fn render(&self) -> String {
        let flags = if self.tcp_flags.is_empty() { "none".to_string() } else { self.tcp_flags.join(",") };
        let mut out = String::new();
        let _ = writeln!(out, "ip_version:{}", opt(self.ip_version));
        let _ = writeln!(out, "transport:{}", opt(self.transport.as_deref()));
        let _ = writeln!(out, "src_port:{}", opt(self.src_port));
        let _ = writeln!(out, "dst_port:{}", opt(self.dst_port));
        let _ = writeln!(out, "tcp_flags:{flags}");
        let _ = writeln!(out, "window:{}", opt(self.window));
        let _ = writeln!(out, "total_length:{}", opt(self.total_length));
        let _ = writeln!(out, "payload_length:{}", opt(self.payload_length));
        let _ = writeln!(out, "fragmented:{}", opt(self.fragmented));
        let _ = writeln!(out, "entropy:{:.3}", self.entropy);
        let _ = writeln!(out, "printable_fraction:{:.3}", self.printable_fraction);
        let _ = write!(out, "hex_preview:{}", self.hex_preview);
        if let Some(route) = &self.detector_route {
            let _ = write!(out, "\ndetector_route:{route}");
        }
        out
    }
}
