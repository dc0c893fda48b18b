//! Seeded synthetic traffic corpora with ID and OOD application classes.
//!
//! Each class is described by a header template (transport, ports, TTL, TCP
//! flags and window), a payload byte-value distribution given as weighted byte
//! ranges, an optional fixed payload prefix and a uniform payload-length range.
//! Packets are serialized as real IPv4 datagrams and tokenized through the same
//! path as captured traffic.
//!
//! ID classes are split across train/valid/test by `id_ratios`. The evaluation
//! splits are then topped up with OOD samples so that each holds ID and OOD at
//! 7:3 by count (OOD share floored). OOD samples never enter train; generated
//! OOD samples beyond what the mix needs are dropped.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::packet::{Ipv4PacketBuilder, PacketRecord, Transport};
use super::split::{partition_counts, SplitRatios};
use super::tokenize::tokenize_packet;
use super::{Dataset, IngestError, LabelSpace, Origin, Split, TrafficSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ByteRange {
    pub lo: u8,
    pub hi: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderTemplate {
    pub transport: Transport,
    pub dst_port: u16,
    /// Inclusive source-port range.
    pub src_port: [u16; 2],
    /// Inclusive TTL range.
    pub ttl: [u8; 2],
    /// TCP flag bytes to choose from uniformly (ignored for UDP).
    #[serde(default)]
    pub tcp_flags: Vec<u8>,
    /// Inclusive TCP window range.
    #[serde(default = "default_window")]
    pub window: [u16; 2],
}

fn default_window() -> [u16; 2] {
    [65535, 65535]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: String,
    pub role: ClassRole,
    pub header: HeaderTemplate,
    /// Hex bytes emitted at the start of every payload.
    #[serde(default)]
    pub payload_prefix: String,
    pub payload: Vec<ByteRange>,
    /// Inclusive payload length range in bytes (prefix included).
    pub payload_len: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    #[serde(default = "default_ratios")]
    pub id_ratios: [f64; 3],
    #[serde(default)]
    pub extended_labels: Vec<String>,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_seq_len() -> usize {
    super::DEFAULT_SEQ_LEN
}

/// The shipped five-class corpus description (3 ID, 2 OOD).
pub const SHIPPED_SPEC: &str = include_str!("../../resources/synthetic_spec.json");

impl SyntheticSpec {
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_SPEC).expect("shipped synthetic spec parses")
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        serde_json::from_str(text).map_err(|e| IngestError::InvalidSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let invalid = |m: String| Err(IngestError::InvalidSpec(m));
        if self.classes.is_empty() {
            return invalid("empty class list".into());
        }
        let n_id = self.classes.iter().filter(|c| c.role == ClassRole::Id).count();
        let n_ood = self.classes.len() - n_id;
        if n_id < 2 || n_ood < 1 {
            return invalid(format!("need at least 2 ID and 1 OOD classes, got {n_id} and {n_ood}"));
        }
        if self.seq_len == 0 {
            return invalid("seq_len must be positive".into());
        }
        let mut seen = Vec::new();
        for c in &self.classes {
            if seen.contains(&&c.label) {
                return invalid(format!("duplicate class label {:?}", c.label));
            }
            seen.push(&c.label);
            let total: f64 = c.payload.iter().map(|r| r.weight).sum();
            if c.payload.is_empty()
                || c.payload.iter().any(|r| r.lo > r.hi || !(r.weight >= 0.0) || !r.weight.is_finite())
                || total <= 0.0
            {
                return invalid(format!("degenerate payload distribution for {:?}", c.label));
            }
            let prefix = hex::decode(&c.payload_prefix)
                .map_err(|e| IngestError::InvalidSpec(format!("bad payload_prefix for {:?}: {e}", c.label)))?;
            let [lo, hi] = c.payload_len;
            if lo > hi || hi > 1400 || lo < prefix.len() {
                return invalid(format!("degenerate payload length range for {:?}", c.label));
            }
            let h = &c.header;
            if h.src_port[0] > h.src_port[1] || h.ttl[0] > h.ttl[1] || h.window[0] > h.window[1] {
                return invalid(format!("inverted header range for {:?}", c.label));
            }
            if h.transport == Transport::Tcp && h.tcp_flags.is_empty() {
                return invalid(format!("TCP class {:?} lists no flag choices", c.label));
            }
        }
        let [a, b, c] = self.id_ratios;
        SplitRatios { train: a, valid: b, test: c }.validate().map_err(|e| IngestError::InvalidSpec(e.to_string()))
    }

    pub fn label_space(&self) -> LabelSpace {
        let pick = |role| self.classes.iter().filter(|c| c.role == role).map(|c| c.label.clone()).collect();
        LabelSpace::new(pick(ClassRole::Id), pick(ClassRole::Ood)).with_extended(self.extended_labels.clone())
    }
}

/// OOD count for an evaluation split of `total` samples at ID:OOD = 7:3.
pub fn ood_share(total: usize) -> usize {
    total * 3 / 10
}

/// Largest evaluation split size whose ID share (`total - ood_share`) is
/// exactly `id_count`. 70 ID samples give a split of 100.
pub fn eval_size_for_id(id_count: usize) -> usize {
    let mut n = id_count;
    while n - ood_share(n) < id_count {
        n += 1;
    }
    while n + 1 - ood_share(n + 1) == id_count {
        n += 1;
    }
    n
}

fn sample_payload(class: &ClassSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut payload = hex::decode(&class.payload_prefix).unwrap_or_default();
    let len = rng.gen_range(class.payload_len[0]..=class.payload_len[1]);
    let total: f64 = class.payload.iter().map(|r| r.weight).sum();
    while payload.len() < len {
        let mut pick = rng.gen::<f64>() * total;
        let mut range = &class.payload[class.payload.len() - 1];
        for r in &class.payload {
            if pick < r.weight {
                range = r;
                break;
            }
            pick -= r.weight;
        }
        payload.push(rng.gen_range(range.lo..=range.hi));
    }
    payload
}

fn sample_packet(class: &ClassSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let h = &class.header;
    let builder = Ipv4PacketBuilder {
        src: rng.gen(),
        dst: rng.gen(),
        ttl: rng.gen_range(h.ttl[0]..=h.ttl[1]),
        transport: h.transport,
        src_port: rng.gen_range(h.src_port[0]..=h.src_port[1]),
        dst_port: h.dst_port,
        tcp_flags: if h.tcp_flags.is_empty() { 0 } else { h.tcp_flags[rng.gen_range(0..h.tcp_flags.len())] },
        tcp_window: rng.gen_range(h.window[0]..=h.window[1]),
        seq: rng.gen(),
        ack: rng.gen(),
        identification: rng.gen(),
    };
    builder.build(&sample_payload(class, rng))
}

pub fn generate_synthetic(spec: &SyntheticSpec, n_per_class: usize, seed: u64) -> Result<Dataset, IngestError> {
    spec.validate()?;
    let [train_r, valid_r, test_r] = spec.id_ratios;
    let ratios = SplitRatios { train: train_r, valid: valid_r, test: test_r };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut counter = 0usize;
    let mut generated: Vec<(usize, Vec<TrafficSample>)> = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        let mut samples = Vec::with_capacity(n_per_class);
        for _ in 0..n_per_class {
            let bytes = sample_packet(class, &mut rng);
            let record = PacketRecord::from_ip_bytes(0.0, bytes).expect("generated packet parses");
            let mut s = tokenize_packet(format!("syn-{counter:06}"), &record, spec.seq_len);
            counter += 1;
            s.label = Some(class.label.clone());
            s.origin = Origin::Synthetic;
            samples.push(s);
        }
        generated.push((ci, samples));
    }

    let mut assignments = BTreeMap::new();
    let mut eval_id = [0usize; 2];
    for (ci, samples) in &generated {
        let class = &spec.classes[*ci];
        if class.role != ClassRole::Id {
            continue;
        }
        let [train, valid, _] = partition_counts(&class.label, samples.len(), &ratios)?;
        for (pos, s) in samples.iter().enumerate() {
            let split = if pos < train {
                Split::Train
            } else if pos < train + valid {
                eval_id[0] += 1;
                Split::Valid
            } else {
                eval_id[1] += 1;
                Split::Test
            };
            assignments.insert(s.id.clone(), split);
        }
    }

    // OOD quotas, filled round-robin across OOD classes: valid first, then test.
    let ood_pools: Vec<&Vec<TrafficSample>> = generated
        .iter()
        .filter(|(ci, _)| spec.classes[*ci].role == ClassRole::Ood)
        .map(|(_, s)| s)
        .collect();
    let mut cursors = vec![0usize; ood_pools.len()];
    let mut next_pool = 0usize;
    for (split, id_count) in [(Split::Valid, eval_id[0]), (Split::Test, eval_id[1])] {
        let quota = eval_size_for_id(id_count) - id_count;
        for _ in 0..quota {
            let mut tried = 0;
            while cursors[next_pool] >= ood_pools[next_pool].len() {
                next_pool = (next_pool + 1) % ood_pools.len();
                tried += 1;
                if tried > ood_pools.len() {
                    return Err(IngestError::InvalidSpec(format!(
                        "{n_per_class} samples per OOD class cannot fill the 7:3 evaluation mix"
                    )));
                }
            }
            let s = &ood_pools[next_pool][cursors[next_pool]];
            cursors[next_pool] += 1;
            assignments.insert(s.id.clone(), split);
            next_pool = (next_pool + 1) % ood_pools.len();
        }
    }

    let samples = generated
        .into_iter()
        .flat_map(|(_, s)| s)
        .filter(|s| assignments.contains_key(&s.id))
        .collect();
    Ok(Dataset { samples, label_space: spec.label_space(), assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_sizes() {
        assert_eq!(ood_share(100), 30);
        assert_eq!(eval_size_for_id(70), 100);
        assert_eq!(eval_size_for_id(300), 428);
        for id in 1..500 {
            let n = eval_size_for_id(id);
            assert_eq!(n - ood_share(n), id);
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::shipped();
        let a = generate_synthetic(&spec, 20, 7).unwrap();
        let b = generate_synthetic(&spec, 20, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 20, 8).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn train_is_id_only_and_mix_is_seven_to_three() {
        let spec = SyntheticSpec::shipped();
        let ds = generate_synthetic(&spec, 100, 42).unwrap();
        assert_eq!(ds.ood_samples(Split::Train).count(), 0);
        for split in [Split::Valid, Split::Test] {
            let n = ds.split_len(split);
            assert_eq!(ds.ood_samples(split).count(), ood_share(n));
            assert_eq!(ds.id_samples(split).count(), n - ood_share(n));
        }
        assert!(ds.samples.iter().all(|s| s.tokens.len() == spec.seq_len));
    }

    #[test]
    fn test_split_of_one_hundred() {
        // two ID classes with 35 test samples each -> 70 ID + 30 OOD
        let mut spec = SyntheticSpec::shipped();
        let dropped = spec.classes[2].label.clone();
        spec.classes.retain(|c| c.label != dropped);
        spec.id_ratios = [0.3, 0.35, 0.35];
        let ds = generate_synthetic(&spec, 100, 1).unwrap();
        assert_eq!(ds.split_len(Split::Test), 100);
        assert_eq!(ds.id_samples(Split::Test).count(), 70);
        assert_eq!(ds.ood_samples(Split::Test).count(), 30);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SyntheticSpec::shipped();
        spec.classes.clear();
        assert!(matches!(generate_synthetic(&spec, 10, 0), Err(IngestError::InvalidSpec(_))));

        let mut spec = SyntheticSpec::shipped();
        spec.classes[0].payload = vec![ByteRange { lo: 0, hi: 10, weight: 0.0 }];
        assert!(matches!(generate_synthetic(&spec, 10, 0), Err(IngestError::InvalidSpec(_))));

        let mut spec = SyntheticSpec::shipped();
        spec.classes.retain(|c| c.role == ClassRole::Id);
        assert!(matches!(generate_synthetic(&spec, 10, 0), Err(IngestError::InvalidSpec(_))));
    }

    #[test]
    fn samples_reparse_as_packets() {
        let ds = generate_synthetic(&SyntheticSpec::shipped(), 5, 3).unwrap();
        for s in &ds.samples {
            let rec = s.to_record().unwrap();
            assert_eq!(rec.header.ip_version, 4);
        }
    }
}
