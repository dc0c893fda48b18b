use super::packet::{PacketRecord, Transport};
use super::{Origin, TrafficSample, PAD_TOKEN};

/// Returns the IP-layer bytes with addresses and checksums zeroed.
pub fn anonymize(record: &PacketRecord) -> Vec<u8> {
    let mut bytes = record.ip_bytes().to_vec();
    let h = &record.header;
    let mut zero = |range: std::ops::Range<usize>| {
        let end = range.end.min(bytes.len());
        if range.start < end {
            bytes[range.start..end].fill(0);
        }
    };
    match h.ip_version {
        4 => {
            zero(10..12);
            zero(12..20);
        }
        6 => zero(8..40),
        _ => {}
    }
    let t = h.transport_offset;
    match h.transport {
        Transport::Tcp => zero(t + 16..t + 18),
        Transport::Udp => zero(t + 6..t + 8),
        Transport::Other => {}
    }
    bytes
}

/// Byte-level tokens for the first `j` anonymized IP-layer bytes, right-padded
/// with [`PAD_TOKEN`].
pub fn tokenize_packet(id: impl Into<String>, record: &PacketRecord, j: usize) -> TrafficSample {
    assert!(j >= 1, "sequence length must be positive");
    let bytes = anonymize(record);
    let mut tokens: Vec<u16> = bytes.iter().take(j).map(|&b| u16::from(b)).collect();
    tokens.resize(j, PAD_TOKEN);
    TrafficSample { id: id.into(), tokens, label: None, origin: Origin::Pcap }
}
