//! Packet records and IP/transport header decoding.

use serde::{Deserialize, Serialize};

use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkType {
    Ethernet,
    RawIp,
}

impl LinkType {
    pub fn from_pcap(code: u32) -> Option<Self> {
        match code {
            1 => Some(LinkType::Ethernet),
            101 => Some(LinkType::RawIp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
    Other,
}

impl Transport {
    pub fn as_str(&self) -> &'static str {
        match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
            Transport::Other => "other",
        }
    }
}

/// Decoded network- and transport-layer summary of one packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderSummary {
    pub ip_version: u8,
    pub ip_header_len: usize,
    pub total_length: usize,
    pub ttl: u8,
    pub transport: Transport,
    /// More-fragments set or non-zero fragment offset (IPv4 only).
    pub fragmented: bool,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub tcp_flags: Option<u8>,
    pub tcp_window: Option<u16>,
    /// Offset of the transport header relative to the start of the IP header.
    pub transport_offset: usize,
    pub transport_header_len: usize,
    pub payload_length: usize,
}

/// One captured packet, link layer retained in `raw_bytes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub timestamp: f64,
    pub link_type: LinkType,
    pub raw_bytes: Vec<u8>,
    /// Offset of the IP header inside `raw_bytes`.
    pub ip_offset: usize,
    pub header: HeaderSummary,
}

impl PacketRecord {
    /// Builds a record from a frame, locating and decoding the IP header.
    pub fn from_frame(timestamp: f64, link_type: LinkType, raw_bytes: Vec<u8>) -> Result<Self, IngestError> {
        let ip_offset = match link_type {
            LinkType::RawIp => 0,
            LinkType::Ethernet => ethernet_payload_offset(&raw_bytes)?,
        };
        let header = parse_ip(&raw_bytes[ip_offset..])?;
        Ok(Self { timestamp, link_type, raw_bytes, ip_offset, header })
    }

    /// Builds a record from bytes that begin at the IP header.
    pub fn from_ip_bytes(timestamp: f64, bytes: Vec<u8>) -> Result<Self, IngestError> {
        Self::from_frame(timestamp, LinkType::RawIp, bytes)
    }

    pub fn ip_bytes(&self) -> &[u8] {
        &self.raw_bytes[self.ip_offset..]
    }
}

fn ethernet_payload_offset(frame: &[u8]) -> Result<usize, IngestError> {
    let mut offset = 12;
    loop {
        if frame.len() < offset + 2 {
            return Err(IngestError::UnparseablePacket("truncated ethernet header".into()));
        }
        let ethertype = u16::from_be_bytes([frame[offset], frame[offset + 1]]);
        match ethertype {
            // 802.1Q / 802.1ad tags
            0x8100 | 0x88A8 => offset += 4,
            0x0800 | 0x86DD => return Ok(offset + 2),
            other => {
                return Err(IngestError::UnparseablePacket(format!("unsupported ethertype {other:#06x}")))
            }
        }
    }
}

/// Decodes the IP header (and TCP/UDP header when present) from bytes that
/// start at the IP header. The capture may be truncated past the headers.
pub fn parse_ip(bytes: &[u8]) -> Result<HeaderSummary, IngestError> {
    let bad = |msg: &str| IngestError::UnparseablePacket(msg.to_string());
    let first = *bytes.first().ok_or_else(|| bad("empty packet"))?;
    let version = first >> 4;
    let (ip_header_len, total_length, ttl, proto, fragmented) = match version {
        4 => {
            if bytes.len() < 20 {
                return Err(bad("truncated IPv4 header"));
            }
            let ihl = usize::from(first & 0x0F) * 4;
            if ihl < 20 || bytes.len() < ihl {
                return Err(bad("invalid IPv4 header length"));
            }
            let total = usize::from(u16::from_be_bytes([bytes[2], bytes[3]]));
            let frag = u16::from_be_bytes([bytes[6], bytes[7]]);
            let fragmented = frag & 0x2000 != 0 || frag & 0x1FFF != 0;
            (ihl, total, bytes[8], bytes[9], fragmented)
        }
        6 => {
            if bytes.len() < 40 {
                return Err(bad("truncated IPv6 header"));
            }
            let payload = usize::from(u16::from_be_bytes([bytes[4], bytes[5]]));
            (40, payload + 40, bytes[7], bytes[6], false)
        }
        _ => return Err(bad("unknown IP version")),
    };
    if total_length < ip_header_len {
        return Err(bad("total length shorter than IP header"));
    }

    let transport = match proto {
        6 => Transport::Tcp,
        17 => Transport::Udp,
        _ => Transport::Other,
    };
    let t = ip_header_len;
    let mut summary = HeaderSummary {
        ip_version: version,
        ip_header_len,
        total_length,
        ttl,
        transport,
        fragmented,
        src_port: None,
        dst_port: None,
        tcp_flags: None,
        tcp_window: None,
        transport_offset: t,
        transport_header_len: 0,
        payload_length: total_length - ip_header_len,
    };
    match transport {
        Transport::Tcp => {
            if bytes.len() < t + 20 {
                return Err(bad("truncated TCP header"));
            }
            let data_offset = usize::from(bytes[t + 12] >> 4) * 4;
            if data_offset < 20 || total_length < ip_header_len + data_offset {
                return Err(bad("invalid TCP data offset"));
            }
            summary.src_port = Some(u16::from_be_bytes([bytes[t], bytes[t + 1]]));
            summary.dst_port = Some(u16::from_be_bytes([bytes[t + 2], bytes[t + 3]]));
            summary.tcp_flags = Some(bytes[t + 13]);
            summary.tcp_window = Some(u16::from_be_bytes([bytes[t + 14], bytes[t + 15]]));
            summary.transport_header_len = data_offset;
            summary.payload_length = total_length - ip_header_len - data_offset;
        }
        Transport::Udp => {
            if bytes.len() < t + 8 {
                return Err(bad("truncated UDP header"));
            }
            if total_length < ip_header_len + 8 {
                return Err(bad("total length shorter than UDP header"));
            }
            summary.src_port = Some(u16::from_be_bytes([bytes[t], bytes[t + 1]]));
            summary.dst_port = Some(u16::from_be_bytes([bytes[t + 2], bytes[t + 3]]));
            summary.transport_header_len = 8;
            summary.payload_length = total_length - ip_header_len - 8;
        }
        Transport::Other => {}
    }
    Ok(summary)
}

/// Bit names for the TCP flag byte, lowest bit first.
pub const TCP_FLAG_NAMES: [&str; 8] = ["FIN", "SYN", "RST", "PSH", "ACK", "URG", "ECE", "CWR"];

pub fn tcp_flag_names(flags: u8) -> Vec<&'static str> {
    TCP_FLAG_NAMES
        .iter()
        .enumerate()
        .filter(|(bit, _)| flags & (1 << bit) != 0)
        .map(|(_, name)| *name)
        .collect()
}

/// Serializes an IPv4 + TCP/UDP packet. Checksums are left zero.
#[derive(Debug, Clone)]
pub struct Ipv4PacketBuilder {
    pub src: [u8; 4],
    pub dst: [u8; 4],
    pub ttl: u8,
    pub transport: Transport,
    pub src_port: u16,
    pub dst_port: u16,
    pub tcp_flags: u8,
    pub tcp_window: u16,
    pub seq: u32,
    pub ack: u32,
    pub identification: u16,
}

impl Default for Ipv4PacketBuilder {
    fn default() -> Self {
        Self {
            src: [10, 0, 0, 1],
            dst: [10, 0, 0, 2],
            ttl: 64,
            transport: Transport::Tcp,
            src_port: 50000,
            dst_port: 443,
            tcp_flags: 0x18,
            tcp_window: 65535,
            seq: 0,
            ack: 0,
            identification: 0,
        }
    }
}

impl Ipv4PacketBuilder {
    pub fn build(&self, payload: &[u8]) -> Vec<u8> {
        let transport_len = match self.transport {
            Transport::Tcp => 20,
            Transport::Udp => 8,
            Transport::Other => 0,
        };
        let total = 20 + transport_len + payload.len();
        let mut out = Vec::with_capacity(total);
        out.push(0x45);
        out.push(0);
        out.extend_from_slice(&(total as u16).to_be_bytes());
        out.extend_from_slice(&self.identification.to_be_bytes());
        out.extend_from_slice(&0x4000u16.to_be_bytes()); // DF
        out.push(self.ttl);
        out.push(match self.transport {
            Transport::Tcp => 6,
            Transport::Udp => 17,
            Transport::Other => 47,
        });
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.src);
        out.extend_from_slice(&self.dst);
        match self.transport {
            Transport::Tcp => {
                out.extend_from_slice(&self.src_port.to_be_bytes());
                out.extend_from_slice(&self.dst_port.to_be_bytes());
                out.extend_from_slice(&self.seq.to_be_bytes());
                out.extend_from_slice(&self.ack.to_be_bytes());
                out.push(0x50);
                out.push(self.tcp_flags);
                out.extend_from_slice(&self.tcp_window.to_be_bytes());
                out.extend_from_slice(&[0, 0, 0, 0]);
            }
            Transport::Udp => {
                out.extend_from_slice(&self.src_port.to_be_bytes());
                out.extend_from_slice(&self.dst_port.to_be_bytes());
                out.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
                out.extend_from_slice(&[0, 0]);
            }
            Transport::Other => {}
        }
        out.extend_from_slice(payload);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_output_parses_back() {
        let b = Ipv4PacketBuilder { tcp_flags: 0x12, tcp_window: 1024, ..Default::default() };
        let bytes = b.build(&[1, 2, 3, 4, 5]);
        let h = parse_ip(&bytes).unwrap();
        assert_eq!(h.ip_version, 4);
        assert_eq!(h.total_length, 45);
        assert_eq!(h.transport, Transport::Tcp);
        assert_eq!(h.tcp_flags, Some(0x12));
        assert_eq!(h.tcp_window, Some(1024));
        assert_eq!(h.payload_length, 5);
        assert_eq!(tcp_flag_names(0x12), vec!["SYN", "ACK"]);
    }

    #[test]
    fn udp_has_no_tcp_fields() {
        let b = Ipv4PacketBuilder { transport: Transport::Udp, dst_port: 53, ..Default::default() };
        let h = parse_ip(&b.build(&[0; 12])).unwrap();
        assert_eq!(h.transport, Transport::Udp);
        assert_eq!(h.tcp_flags, None);
        assert_eq!(h.tcp_window, None);
        assert_eq!(h.dst_port, Some(53));
        assert_eq!(h.payload_length, 12);
    }

    #[test]
    fn rejects_short_total_length() {
        let mut bytes = Ipv4PacketBuilder::default().build(&[]);
        bytes[2] = 0;
        bytes[3] = 10;
        assert!(parse_ip(&bytes).is_err());
    }

    #[test]
    fn ipv6_header() {
        let mut bytes = vec![0u8; 40 + 8];
        bytes[0] = 0x60;
        bytes[4..6].copy_from_slice(&8u16.to_be_bytes());
        bytes[6] = 17;
        bytes[7] = 33;
        let h = parse_ip(&bytes).unwrap();
        assert_eq!(h.ip_version, 6);
        assert_eq!(h.total_length, 48);
        assert_eq!(h.ttl, 33);
        assert_eq!(h.payload_length, 0);
    }

    #[test]
    fn vlan_tagged_ethernet() {
        let ip = Ipv4PacketBuilder::default().build(&[9; 4]);
        let mut frame = vec![0u8; 12];
        frame.extend_from_slice(&[0x81, 0x00, 0x00, 0x05, 0x08, 0x00]);
        frame.extend_from_slice(&ip);
        let rec = PacketRecord::from_frame(0.0, LinkType::Ethernet, frame).unwrap();
        assert_eq!(rec.ip_offset, 18);
        assert_eq!(rec.ip_bytes(), &ip[..]);
    }
}
