use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommKind {
    RouterScoreExchange,
    ExpertShardDistribution,
}

/// One simulated all-gather of routing scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub kind: CommKind,
    pub index: u64,
    pub bytes_per_node: u64,
    pub nodes: u32,
}

/// Bytes per score (16-bit floats on the wire).
pub const SCORE_BYTES: u64 = 2;

/// Per-node bytes of exchanging `experts` scores for every sequence in
/// `tokens` tokens of `seq_len`-token sequences: one send and one receive of
/// each score. Integer division rounds down. A single node exchanges with
/// itself, which costs nothing.
pub fn score_exchange_bytes(tokens: u64, seq_len: u64, experts: u64) -> u64 {
    if experts <= 1 {
        0
    } else {
        2 * SCORE_BYTES * tokens * experts / seq_len
    }
}

impl CommEvent {
    pub fn score_exchange(kind: CommKind, index: u64, sequences: usize, seq_len: usize, experts: usize) -> Self {
        let tokens = (sequences * seq_len) as u64;
        Self {
            kind,
            index,
            bytes_per_node: score_exchange_bytes(tokens, seq_len as u64, experts as u64),
            nodes: experts as u32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTotals {
    pub events: u64,
    pub bytes_per_node: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommReport {
    pub events: u64,
    pub bytes_per_node: u64,
    pub router_score_exchange: KindTotals,
    pub expert_shard_distribution: KindTotals,
    pub log: Vec<CommEvent>,
}

pub fn ledger_report(events: &[CommEvent]) -> CommReport {
    let mut r = CommReport::default();
    for ev in events {
        r.events += 1;
        r.bytes_per_node += ev.bytes_per_node;
        let t = match ev.kind {
            CommKind::RouterScoreExchange => &mut r.router_score_exchange,
            CommKind::ExpertShardDistribution => &mut r.expert_shard_distribution,
        };
        t.events += 1;
        t.bytes_per_node += ev.bytes_per_node;
    }
    r.log = events.to_vec();
    r
}
