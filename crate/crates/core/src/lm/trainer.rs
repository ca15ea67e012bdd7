use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train_step, AdamWConfig, LossKind, ModelParams, OptimizerState, ScheduleConfig};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Loss and learning rate recorded at one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Draws fixed-size batches from a pool of dataset indices, reshuffling the
/// pool with a fresh seeded permutation every pass.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("cannot sample batches from an empty pool"));
        }
        let mut s = Self { pool, order: Vec::new(), pos: 0, pass: 0, seed };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(self.seed, &[self.pass])));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.pass += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Settings shared by every training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub steps: usize,
    pub batch: usize,
    pub schedule: ScheduleConfig,
    pub loss: LossKind,
    pub adamw: AdamWConfig,
}

/// Runs `cfg.steps` optimizer steps on batches drawn from `sampler`. The
/// schedule is indexed by the optimizer's global step count.
pub fn run_steps(
    params: &mut ModelParams<f32>,
    opt: &mut OptimizerState<f32>,
    data: &Dataset,
    sampler: &mut BatchSampler,
    cfg: &LoopConfig,
    mut on_step: impl FnMut(&CurvePoint),
) -> Result<Vec<CurvePoint>> {
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch);
        let batch: Vec<&[u32]> = idx.iter().map(|&i| data.ids(i)).collect();
        let lr = cfg.schedule.lr_at(opt.step);
        let step = opt.step;
        let stats = train_step(params, opt, &batch, lr, cfg.loss, &cfg.adamw)?;
        let point = CurvePoint { step, loss: stats.loss, lr };
        on_step(&point);
        curve.push(point);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_pool_each_pass() {
        let mut s = BatchSampler::new(vec![3, 5, 7, 9, 11], 1).unwrap();
        let mut first: Vec<usize> = s.next_batch(5);
        first.sort_unstable();
        assert_eq!(first, vec![3, 5, 7, 9, 11]);
        assert_eq!(s.next_batch(12).len(), 12);
        assert!(BatchSampler::new(vec![], 1).is_err());
    }

    #[test]
    fn sampler_is_deterministic() {
        let draw = |seed| BatchSampler::new((0..20).collect(), seed).unwrap().next_batch(30);
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }
}
