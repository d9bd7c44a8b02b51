//! Event records and run metrics.
//!
//! The event log is JSON Lines. Every line is one object with an `ev` field
//! naming the record type and a `t` field holding virtual milliseconds;
//! the remaining fields are those of the matching [`Record`] variant. Tags,
//! digests and keys are lowercase hex. The last line of a metrics file is a
//! `summary` record.

use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Short hex prefix, enough to tell keys and tags apart in logs.
pub fn short(bytes: &[u8]) -> String {
    hex(&bytes[..8.min(bytes.len())])
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Record {
    Setup {
        t: u64,
        clients: usize,
        l1: Vec<u16>,
        l2: Vec<u16>,
        l3: Vec<u16>,
        xor: String,
        flagged: Vec<u16>,
    },
    Sent {
        t: u64,
        client: u32,
        peer: String,
        msg_id: u64,
        counter: u64,
        attempt: u32,
        tag: String,
        measured: bool,
    },
    Posted {
        t: u64,
        client: u32,
        msg_id: u64,
        counter: u64,
        node: u16,
        ordinal: u64,
        latency_ms: u64,
    },
    Delivered {
        t: u64,
        client: u32,
        peer: String,
        counter: u64,
        duplicate: bool,
    },
    Acked {
        t: u64,
        client: u32,
        msg_id: u64,
        rtt_ms: u64,
    },
    Resent {
        t: u64,
        client: u32,
        msg_id: u64,
        reason: String,
    },
    GaveUp {
        t: u64,
        client: u32,
        msg_id: u64,
    },
    Retrieved {
        t: u64,
        client: u32,
        purpose: String,
        node: u16,
    },
    RetrievalFailed {
        t: u64,
        client: u32,
        purpose: String,
        reason: String,
    },
    IntegrityFailure {
        t: u64,
        client: u32,
        counter: u64,
        reason: String,
    },
    Handshake {
        t: u64,
        client: u32,
        peer: String,
        stage: String,
    },
    ClientReport {
        t: u64,
        client: u32,
        l1: u16,
    },
    L1Reject {
        t: u64,
        node: u16,
        reason: String,
    },
    L1Flush {
        t: u64,
        node: u16,
        l2: u16,
        container: String,
        entries: usize,
    },
    L2Ingest {
        t: u64,
        node: u16,
        l1: u16,
        accepted: usize,
        dropped: usize,
    },
    L2Drop {
        t: u64,
        node: u16,
        cause: String,
    },
    L2Round {
        t: u64,
        node: u16,
        round: u64,
        active: Vec<u16>,
        buckets: usize,
    },
    L2Failover {
        t: u64,
        node: u16,
        round: u64,
        target: u16,
    },
    L3Reject {
        t: u64,
        node: u16,
        reason: String,
    },
    L3Step {
        t: u64,
        node: u16,
        step: u64,
        published: usize,
        held: usize,
    },
    Fault {
        t: u64,
        node: u16,
        kind: String,
        tag: String,
    },
    Audit {
        t: u64,
        kind: String,
        filer: String,
        verdict: String,
        blamed: Option<u16>,
        tag: Option<String>,
    },
    LinkDrop {
        t: u64,
        from: String,
        to: String,
        kind: String,
        cause: String,
    },
    Replay {
        t: u64,
        client: u32,
        l1: u16,
    },
    Inject {
        t: u64,
        client: u32,
        kind: String,
    },
    NodeState {
        t: u64,
        node: u16,
        state: String,
    },
    Summary(Box<Summary>),
}

/// Mean, spread and order statistics of one sample.
#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(sample: &[f64]) -> Self {
        if sample.is_empty() {
            return Self::default();
        }
        let n = sample.len();
        let mean = sample.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| sorted[((n - 1) as f64 * p).round() as usize];
        Self {
            n,
            mean,
            variance,
            min: sorted[0],
            p50: q(0.5),
            p99: q(0.99),
            max: sorted[n - 1],
        }
    }

    pub fn of_u64(sample: &[u64]) -> Self {
        Self::of(&sample.iter().map(|&x| x as f64).collect::<Vec<_>>())
    }
}

/// One audit as the harness saw it.
#[derive(Clone, Debug, Serialize)]
pub struct AuditRecord {
    pub at_ms: u64,
    pub kind: &'static str,
    pub filer: String,
    pub verdict: String,
    pub blamed: Option<u16>,
    /// Tag of the message the evidence is about, when the harness can tell.
    #[serde(skip)]
    pub subject: Option<[u8; 32]>,
}

/// One deliberate deviation by a controlled node.
#[derive(Clone, Debug, Serialize)]
pub struct FaultRecord {
    pub at_ms: u64,
    pub node: u16,
    pub kind: String,
    #[serde(skip)]
    pub tag: [u8; 32],
    /// The altered message came from a client, not from dummy traffic.
    pub client_message: bool,
}

/// Raw measurements of one run.
#[derive(Clone, Debug, Default)]
pub struct Metrics {
    pub measured_sent: u64,
    pub measured_delivered: u64,
    pub measured_acked: u64,
    pub measured_gave_up: u64,
    pub background_sent: u64,
    pub deliveries: u64,
    pub duplicate_deliveries: u64,
    pub cross_deliveries: u64,
    pub resends: BTreeMap<String, u64>,
    /// Submit-to-publish latency of first attempts of measured messages.
    pub submit_to_publish_ms: Vec<u64>,
    /// Repository dwell of real messages, in milliseconds and in steps.
    pub dwell_ms: Vec<u64>,
    pub dwell_steps: Vec<u64>,
    pub retrievals: BTreeMap<String, u64>,
    pub retrieval_failures: BTreeMap<String, u64>,
    pub integrity_failures: u64,
    pub l1_rejects: BTreeMap<String, u64>,
    pub l2_drops: BTreeMap<String, u64>,
    pub l3_rejects: BTreeMap<String, u64>,
    pub failovers: u64,
    pub audits: Vec<AuditRecord>,
    pub faults: Vec<FaultRecord>,
    pub link_drops: u64,
    pub replays_injected: u64,
    pub garbage_injected: u64,
    pub handshakes_started: u64,
    pub handshakes_accepted: u64,
    pub handshakes_completed: u64,
    pub frames: BTreeMap<String, u64>,
    pub frame_bytes: BTreeMap<String, u64>,
    /// Real messages inside the network each time a real message was
    /// published: an upper bound on the sender anonymity set.
    pub in_mix_at_publish: Vec<u64>,
    /// Board rows seen per tag, for exactly-once checks.
    pub postings: BTreeMap<[u8; 32], u32>,
}

#[derive(Clone, Debug, Serialize, Default)]
pub struct Summary {
    pub virtual_ms: u64,
    pub measured_sent: u64,
    pub measured_delivered: u64,
    pub measured_acked: u64,
    pub measured_gave_up: u64,
    pub background_sent: u64,
    pub deliveries: u64,
    pub duplicate_deliveries: u64,
    pub cross_deliveries: u64,
    pub resends: BTreeMap<String, u64>,
    pub submit_to_publish_ms: Stats,
    pub dwell_ms: Stats,
    pub dwell_steps: Stats,
    pub retrievals: BTreeMap<String, u64>,
    pub retrieval_failures: BTreeMap<String, u64>,
    pub integrity_failures: u64,
    pub l1_rejects: BTreeMap<String, u64>,
    pub l2_drops: BTreeMap<String, u64>,
    pub l3_rejects: BTreeMap<String, u64>,
    pub failovers: u64,
    pub audits: usize,
    pub verdicts: BTreeMap<String, u64>,
    pub faults: usize,
    pub link_drops: u64,
    pub replays_injected: u64,
    pub garbage_injected: u64,
    pub handshakes_completed: u64,
    pub frames: BTreeMap<String, u64>,
    pub frame_bytes: BTreeMap<String, u64>,
    pub sender_set: Stats,
    pub conservation: Vec<String>,
    pub event_log_sha256: String,
}

impl Metrics {
    pub fn bump(map: &mut BTreeMap<String, u64>, key: &str) {
        *map.entry(key.to_string()).or_insert(0) += 1;
    }

    pub fn summary(&self, virtual_ms: u64) -> Summary {
        let mut verdicts = BTreeMap::new();
        for a in &self.audits {
            Self::bump(&mut verdicts, &a.verdict);
        }
        Summary {
            virtual_ms,
            measured_sent: self.measured_sent,
            measured_delivered: self.measured_delivered,
            measured_acked: self.measured_acked,
            measured_gave_up: self.measured_gave_up,
            background_sent: self.background_sent,
            deliveries: self.deliveries,
            duplicate_deliveries: self.duplicate_deliveries,
            cross_deliveries: self.cross_deliveries,
            resends: self.resends.clone(),
            submit_to_publish_ms: Stats::of_u64(&self.submit_to_publish_ms),
            dwell_ms: Stats::of_u64(&self.dwell_ms),
            dwell_steps: Stats::of_u64(&self.dwell_steps),
            retrievals: self.retrievals.clone(),
            retrieval_failures: self.retrieval_failures.clone(),
            integrity_failures: self.integrity_failures,
            l1_rejects: self.l1_rejects.clone(),
            l2_drops: self.l2_drops.clone(),
            l3_rejects: self.l3_rejects.clone(),
            failovers: self.failovers,
            audits: self.audits.len(),
            verdicts,
            faults: self.faults.len(),
            link_drops: self.link_drops,
            replays_injected: self.replays_injected,
            garbage_injected: self.garbage_injected,
            handshakes_completed: self.handshakes_completed,
            frames: self.frames.clone(),
            frame_bytes: self.frame_bytes.clone(),
            sender_set: Stats::of_u64(&self.in_mix_at_publish),
            conservation: Vec::new(),
            event_log_sha256: String::new(),
        }
    }
}

/// Event log kept in memory and hashed incrementally.
pub struct EventLog {
    keep: bool,
    lines: Vec<String>,
    hasher: sha2::Sha256,
    count: u64,
}

impl EventLog {
    pub fn new(keep: bool) -> Self {
        use sha2::Digest;
        Self {
            keep,
            lines: Vec::new(),
            hasher: sha2::Sha256::new(),
            count: 0,
        }
    }

    pub fn push(&mut self, r: Record) {
        use sha2::Digest;
        let line = serde_json::to_string(&r).expect("records serialize");
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if self.keep {
            self.lines.push(line);
        }
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn digest(&self) -> [u8; 32] {
        use sha2::Digest;
        self.hasher.clone().finalize().into()
    }

    /// Writes the kept lines followed by the summary.
    pub fn write_jsonl<W: Write>(&self, out: &mut W, summary: &Summary) -> std::io::Result<()> {
        for l in &self.lines {
            writeln!(out, "{l}")?;
        }
        let s = serde_json::to_string(&Record::Summary(Box::new(summary.clone())))
            .expect("summary serializes");
        writeln!(out, "{s}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_match_hand_computation() {
        let s = Stats::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.variance - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 4.0);
        assert_eq!(Stats::of(&[]).n, 0);
    }

    #[test]
    fn records_are_tagged_json() {
        let r = Record::GaveUp {
            t: 5,
            client: 2,
            msg_id: 9,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"ev":"gave_up","t":5,"client":2,"msg_id":9}"#
        );
    }

    #[test]
    fn log_digest_depends_on_every_line() {
        let mut a = EventLog::new(false);
        let mut b = EventLog::new(true);
        a.push(Record::GaveUp {
            t: 1,
            client: 0,
            msg_id: 1,
        });
        b.push(Record::GaveUp {
            t: 1,
            client: 0,
            msg_id: 2,
        });
        assert_ne!(a.digest(), b.digest());
        assert_eq!(b.lines().len(), 1);
        assert!(a.lines().is_empty());
    }
}
