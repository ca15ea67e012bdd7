use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CommEvent, CommKind};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::lm::{
    run_steps, AdamWConfig, BatchSampler, CurvePoint, LoopConfig, LossKind, ModelConfig, ModelParams, OptimizerState,
    ScheduleConfig,
};
use crate::routing::{balanced_assignments, score_matrix, RouterEnsemble};
use crate::seed;
use crate::tensorfile::{expect_magic, read_u32, read_u64, write_u32, write_u64};

const SHARD_MAGIC: &[u8; 4] = b"PIDX";
const SHARD_VERSION: u32 = 1;

/// Dataset indices routed to one expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub expert: usize,
    pub indices: Vec<usize>,
    pub tokens: u64,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `{magic "PIDX", version u32, expert u32, tokens u64, count u64}` then `u64` per index.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SHARD_MAGIC)?;
        write_u32(&mut w, SHARD_VERSION)?;
        write_u32(&mut w, self.expert as u32)?;
        write_u64(&mut w, self.tokens)?;
        write_u64(&mut w, self.indices.len() as u64)?;
        for &i in &self.indices {
            write_u64(&mut w, i as u64)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        expect_magic(&mut r, SHARD_MAGIC)?;
        let version = read_u32(&mut r)?;
        if version != SHARD_VERSION {
            return Err(Error::Format(format!("unsupported shard version {version}")));
        }
        let expert = read_u32(&mut r)? as usize;
        let tokens = read_u64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let indices = (0..n).map(|_| read_u64(&mut r).map(|i| i as usize)).collect::<Result<Vec<_>>>()?;
        Ok(Self { expert, indices, tokens })
    }
}

/// Scores every sequence's prefix with the trained routers and splits the
/// dataset by one balanced assignment over the whole set. Shard members stay
/// in dataset order.
pub fn shard_dataset(ensemble: &RouterEnsemble, data: &Dataset, capacities: &[usize]) -> Result<(Vec<Shard>, CommEvent)> {
    if !ensemble.trained {
        return Err(Error::Precondition("routers have not been trained".into()));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot shard an empty dataset"));
    }
    let e = ensemble.len();
    let seqs: Vec<&[u32]> = data.sequences.iter().map(|s| s.ids.as_slice()).collect();
    let scores = score_matrix(ensemble, &seqs, ensemble.prefix)?;
    let table = balanced_assignments(&scores, capacities)?;
    let shards = table
        .members()
        .into_iter()
        .enumerate()
        .map(|(expert, indices)| Shard { expert, tokens: (indices.len() * data.seq_len) as u64, indices })
        .collect();
    let comm = CommEvent::score_exchange(CommKind::ExpertShardDistribution, 0, data.len(), data.seq_len, e);
    Ok((shards, comm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl ExpertTrainConfig {
    pub fn tokens(&self, seq_len: usize) -> u64 {
        (self.steps * self.batch * seq_len) as u64
    }
}

/// Trains one model from its seed on the given dataset indices with the
/// full-sequence loss. Shares no state with any other training run.
pub fn train_on_indices(
    indices: &[usize],
    data: &Dataset,
    model: ModelConfig,
    cfg: &ExpertTrainConfig,
    on_step: impl FnMut(&CurvePoint),
) -> Result<(ModelParams<f32>, Vec<CurvePoint>)> {
    if indices.is_empty() {
        return Err(Error::Precondition("cannot train on an empty shard".into()));
    }
    if model.context < data.seq_len {
        return Err(Error::invalid(format!("model context {} below sequence length {}", model.context, data.seq_len)));
    }
    let mut params = ModelParams::init(model, cfg.seed)?;
    if cfg.steps == 0 {
        return Ok((params, Vec::new()));
    }
    cfg.schedule.validate()?;
    let mut opt = OptimizerState::new(&params);
    let mut sampler = BatchSampler::new(indices.to_vec(), seed::derive(cfg.seed, &[1]))?;
    let loop_cfg = LoopConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        schedule: cfg.schedule,
        loss: LossKind::Full,
        adamw: AdamWConfig::default(),
    };
    let curve = run_steps(&mut params, &mut opt, data, &mut sampler, &loop_cfg, on_step)?;
    Ok((params, curve))
}

pub fn train_expert(
    shard: &Shard,
    data: &Dataset,
    model: ModelConfig,
    cfg: &ExpertTrainConfig,
    on_step: impl FnMut(&CurvePoint),
) -> Result<(ModelParams<f32>, Vec<CurvePoint>)> {
    train_on_indices(&shard.indices, data, model, cfg, on_step)
}

/// The dense baseline: the expert recipe on the whole dataset. Callers give
/// it `E` times the per-expert step count so token budgets match.
pub fn train_dense(
    data: &Dataset,
    model: ModelConfig,
    cfg: &ExpertTrainConfig,
    on_step: impl FnMut(&CurvePoint),
) -> Result<(ModelParams<f32>, Vec<CurvePoint>)> {
    let all: Vec<usize> = (0..data.len()).collect();
    train_on_indices(&all, data, model, cfg, on_step)
}
