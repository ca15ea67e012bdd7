use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{balanced_assignments, balanced_capacities, random_assignments, score_matrix, AssignmentTable, ScoreMatrix};
use crate::corpus::{ChunkCursor, Dataset};
use crate::error::{Error, Result};
use crate::lm::{
    read_checkpoint, run_steps, write_checkpoint, AdamWConfig, BatchSampler, CurvePoint, LoopConfig, LossKind,
    ModelConfig, ModelParams, OptimizerState, ScheduleConfig,
};
use crate::mixture::{CommEvent, CommKind};
use crate::seed;

/// `E` small language models sharing one configuration, each scoring how well
/// a prefix fits its data segment.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterEnsemble {
    pub routers: Vec<ModelParams<f32>>,
    pub optimizers: Vec<OptimizerState<f32>>,
    pub prefix: usize,
    pub round: usize,
    pub chunks_used: u64,
    pub trained: bool,
}

impl RouterEnsemble {
    /// Router `e` is initialized from a seed derived from `(seed, e)`.
    pub fn new(config: ModelConfig, experts: usize, prefix: usize, seed: u64) -> Result<Self> {
        if experts == 0 {
            return Err(Error::invalid("at least one router is required"));
        }
        if prefix < 2 || prefix > config.context {
            return Err(Error::invalid(format!("prefix length {prefix} outside [2, {}]", config.context)));
        }
        let routers = (0..experts)
            .map(|e| ModelParams::init(config, seed::derive(seed, &[e as u64])))
            .collect::<Result<Vec<_>>>()?;
        let optimizers = routers.iter().map(OptimizerState::new).collect();
        Ok(Self { routers, optimizers, prefix, round: 0, chunks_used: 0, trained: false })
    }

    /// Wraps already-trained routers.
    pub fn from_routers(routers: Vec<ModelParams<f32>>, prefix: usize) -> Result<Self> {
        let first = routers.first().ok_or_else(|| Error::invalid("at least one router is required"))?.config;
        if routers.iter().any(|r| r.config != first) {
            return Err(Error::invalid("all routers must share one configuration"));
        }
        if prefix < 2 || prefix > first.context {
            return Err(Error::invalid(format!("prefix length {prefix} outside [2, {}]", first.context)));
        }
        let optimizers = routers.iter().map(OptimizerState::new).collect();
        Ok(Self { routers, optimizers, prefix, round: 0, chunks_used: 0, trained: true })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.routers[0].config
    }

    pub fn len(&self) -> usize {
        self.routers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routers.is_empty()
    }

    /// Writes `router_<e>.pmck` for every router into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (e, r) in self.routers.iter().enumerate() {
            write_checkpoint(&dir.join(format!("router_{e}.pmck")), r)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, experts: usize, prefix: usize) -> Result<Self> {
        let routers = (0..experts)
            .map(|e| read_checkpoint(&dir.join(format!("router_{e}.pmck"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_routers(routers, prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    pub rounds: usize,
    pub chunk: usize,
    pub steps: usize,
    pub batch: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl RouterTrainConfig {
    /// Converts a token-count view of router training into rounds and steps:
    /// scores are exchanged every `tokens_per_exchange` tokens per router and
    /// each router consumes `total_steps * batch` sequences overall.
    pub fn from_token_budget(
        tokens_per_exchange: u64,
        total_steps: u64,
        batch: usize,
        seq_len: usize,
        schedule: ScheduleConfig,
        seed: u64,
    ) -> Result<Self> {
        let per_step = (batch * seq_len) as u64;
        if per_step == 0 || tokens_per_exchange < per_step {
            return Err(Error::invalid("exchange interval shorter than one batch"));
        }
        let steps = (tokens_per_exchange / per_step) as usize;
        let rounds = (total_steps * per_step).div_ceil(tokens_per_exchange) as usize;
        let chunk = (tokens_per_exchange / seq_len as u64) as usize;
        Ok(Self { rounds: rounds.max(1), chunk, steps, batch, schedule, seed })
    }

    pub fn validate(&self, experts: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("at least one round is required"));
        }
        if self.chunk < experts {
            return Err(Error::invalid(format!("chunk of {} cannot cover {experts} routers", self.chunk)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.schedule.validate()
    }
}

/// What happened in one EM round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Dataset indices the routers trained on and the partition used.
    pub trained_chunk: Vec<usize>,
    pub trained_assignment: AssignmentTable,
    /// Mean per-token prefix loss of each router over the round.
    pub router_loss: Vec<f64>,
    pub curves: Vec<Vec<CurvePoint>>,
    /// The fresh chunk scored at the end of the round and its balanced assignment.
    pub scored_chunk: Vec<usize>,
    pub scores: ScoreMatrix,
    pub scored_assignment: AssignmentTable,
    /// Mean entropy (nats) of the softmax over each scored row: how decisively
    /// the routers separate the chunk.
    pub routing_entropy: f64,
    pub comm: CommEvent,
}

/// Mean over rows of the entropy of `softmax(row)`.
pub fn routing_entropy(scores: &ScoreMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..scores.rows {
        let row = scores.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let h: f64 = row
            .iter()
            .map(|s| {
                let p = (s - max).exp() / z;
                if p > 0.0 { -p * p.ln() } else { 0.0 }
            })
            .sum();
        total += h;
    }
    total / scores.rows as f64
}

/// Alternates router training and re-partitioning. Round 0 trains on a random
/// partition of the first chunk; every round ends by scoring a fresh chunk
/// with the updated routers and balancing it into the next partition.
/// `on_round` runs after each round, e.g. to checkpoint.
pub fn train_routers(
    data: &Dataset,
    cursor: &mut ChunkCursor,
    ensemble: &mut RouterEnsemble,
    cfg: &RouterTrainConfig,
    mut on_round: impl FnMut(&RoundReport, &RouterEnsemble) -> Result<()>,
) -> Result<Vec<RoundReport>> {
    let e = ensemble.len();
    cfg.validate(e)?;
    let m = ensemble.prefix;
    let loop_cfg = LoopConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        schedule: cfg.schedule,
        loss: LossKind::Prefix(m),
        adamw: AdamWConfig::default(),
    };

    let first = cursor.next_chunk(cfg.chunk)?;
    ensemble.chunks_used += 1;
    let mut chunk = first.indices;
    let mut assignment = random_assignments(chunk.len(), e, seed::derive(cfg.seed, &[u64::MAX]))?;
    let mut reports = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let members = assignment.members();
        let mut router_loss = Vec::with_capacity(e);
        let mut curves = Vec::with_capacity(e);
        for (x, rows) in members.iter().enumerate() {
            let pool: Vec<usize> = rows.iter().map(|&r| chunk[r]).collect();
            let mut sampler = BatchSampler::new(pool, seed::derive(cfg.seed, &[round as u64, x as u64]))?;
            let curve = run_steps(
                &mut ensemble.routers[x],
                &mut ensemble.optimizers[x],
                data,
                &mut sampler,
                &loop_cfg,
                |_| {},
            )?;
            let mean = if curve.is_empty() {
                f64::NAN
            } else {
                curve.iter().map(|p| p.loss).sum::<f64>() / curve.len() as f64 / (m - 1) as f64
            };
            router_loss.push(mean);
            curves.push(curve);
        }

        let next = cursor.next_chunk(cfg.chunk)?;
        ensemble.chunks_used += 1;
        let seqs: Vec<&[u32]> = next.indices.iter().map(|&i| data.ids(i)).collect();
        let scores = score_matrix(ensemble, &seqs, m)?;
        let next_assignment = balanced_assignments(&scores, &balanced_capacities(next.indices.len(), e)?)?;
        let comm = CommEvent::score_exchange(CommKind::RouterScoreExchange, round as u64, next.indices.len(), data.seq_len, e);
        ensemble.round = round + 1;
        ensemble.trained = true;

        let report = RoundReport {
            round,
            trained_chunk: std::mem::replace(&mut chunk, next.indices.clone()),
            trained_assignment: std::mem::replace(&mut assignment, next_assignment.clone()),
            router_loss,
            curves,
            scored_chunk: next.indices,
            routing_entropy: routing_entropy(&scores),
            scores,
            scored_assignment: next_assignment,
            comm,
        };
        on_round(&report, ensemble)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Normalized mutual information `2 I(a; b) / (H(a) + H(b))` between two
/// labelings; 0 when either labeling is constant.
pub fn normalized_mutual_information(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("labelings must be non-empty and of equal length"));
    }
    let ka = *a.iter().max().unwrap() as usize + 1;
    let kb = *b.iter().max().unwrap() as usize + 1;
    let mut joint = vec![0.0f64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * kb + y as usize] += 1.0;
    }
    let n = a.len() as f64;
    let pa: Vec<f64> = (0..ka).map(|i| joint[i * kb..(i + 1) * kb].iter().sum::<f64>() / n).collect();
    let pb: Vec<f64> = (0..kb).map(|j| (0..ka).map(|i| joint[i * kb + j]).sum::<f64>() / n).collect();
    let entropy = |p: &[f64]| -> f64 { p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum() };
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let p = joint[i * kb + j] / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}
