//! Classic libpcap reader (microsecond and nanosecond variants, either byte order).

use std::path::Path;

use tracing::debug;

use super::packet::{LinkType, PacketRecord};
use super::IngestError;

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

/// Records decoded from a capture plus the number of packets that were skipped.
#[derive(Debug, Clone, Default)]
pub struct ParsedCapture {
    pub records: Vec<PacketRecord>,
    pub skipped: usize,
}

pub fn parse_pcap(path: impl AsRef<Path>, limit: Option<usize>) -> Result<ParsedCapture, IngestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IngestError::FileNotFound(path.display().to_string()),
        _ => IngestError::Io(e),
    })?;
    parse_pcap_bytes(&bytes, limit)
}

pub fn parse_pcap_bytes(bytes: &[u8], limit: Option<usize>) -> Result<ParsedCapture, IngestError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(IngestError::MalformedCapture("truncated global header".into()));
    }
    let raw_magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let (big_endian, nanos) = match (u32::from_le_bytes(raw_magic), u32::from_be_bytes(raw_magic)) {
        (MAGIC_MICROS, _) => (false, false),
        (MAGIC_NANOS, _) => (false, true),
        (_, MAGIC_MICROS) => (true, false),
        (_, MAGIC_NANOS) => (true, true),
        _ => {
            return Err(IngestError::MalformedCapture(format!(
                "bad magic number {:#010x}",
                u32::from_be_bytes(raw_magic)
            )))
        }
    };
    let read_u32 = |at: usize| {
        let b = [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
        if big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    };
    let network = read_u32(20);
    let link_type = LinkType::from_pcap(network)
        .ok_or_else(|| IngestError::MalformedCapture(format!("unsupported link type {network}")))?;

    let mut out = ParsedCapture::default();
    let mut offset = GLOBAL_HEADER_LEN;
    while offset + RECORD_HEADER_LEN <= bytes.len() {
        if limit.is_some_and(|l| out.records.len() >= l) {
            break;
        }
        let ts_sec = read_u32(offset);
        let ts_frac = read_u32(offset + 4);
        let incl_len = read_u32(offset + 8) as usize;
        offset += RECORD_HEADER_LEN;
        if offset + incl_len > bytes.len() {
            // truncated trailing record
            out.skipped += 1;
            break;
        }
        let frame = bytes[offset..offset + incl_len].to_vec();
        offset += incl_len;
        let divisor = if nanos { 1e9 } else { 1e6 };
        let timestamp = f64::from(ts_sec) + f64::from(ts_frac) / divisor;
        match PacketRecord::from_frame(timestamp, link_type, frame) {
            Ok(rec) => out.records.push(rec),
            Err(e) => {
                debug!("skipping packet at offset {offset}: {e}");
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

/// Serializes frames into a little-endian microsecond capture. Used for fixtures.
pub fn write_pcap_bytes(link_type: LinkType, frames: &[(f64, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&65535u32.to_le_bytes());
    let network: u32 = match link_type {
        LinkType::Ethernet => 1,
        LinkType::RawIp => 101,
    };
    out.extend_from_slice(&network.to_le_bytes());
    for (ts, frame) in frames {
        let secs = ts.trunc() as u32;
        let micros = ((ts - ts.trunc()) * 1e6).round() as u32;
        out.extend_from_slice(&secs.to_le_bytes());
        out.extend_from_slice(&micros.to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(frame);
    }
    out
}
