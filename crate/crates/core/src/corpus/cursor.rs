use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkOrder {
    Sequential,
    /// A fresh seeded permutation of the dataset every epoch.
    Shuffled { seed: u64 },
}

/// `N` dataset indices handed out by one `next_chunk` call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub index: u64,
    pub epoch: u64,
    pub indices: Vec<usize>,
}

/// Single-owner cursor streaming chunks over a dataset of `len` sequences.
#[derive(Debug, Clone)]
pub struct ChunkCursor {
    len: usize,
    order: ChunkOrder,
    wrap: bool,
    perm: Vec<usize>,
    pos: usize,
    epoch: u64,
    chunks: u64,
}

impl ChunkCursor {
    pub fn new(len: usize, order: ChunkOrder, wrap: bool) -> Self {
        let mut c = Self { len, order, wrap, perm: Vec::new(), pos: 0, epoch: 0, chunks: 0 };
        c.perm = c.permutation(0);
        c
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.len).collect();
        if let ChunkOrder::Shuffled { seed } = self.order {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            p.shuffle(&mut rng);
        }
        p
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn chunks_served(&self) -> u64 {
        self.chunks
    }

    /// Next `n` indices. With wrapping, a chunk that crosses an epoch boundary
    /// continues into the next epoch's order, skipping indices already in the chunk.
    pub fn next_chunk(&mut self, n: usize) -> Result<Chunk> {
        if n == 0 {
            return Err(Error::invalid("chunk size must be positive"));
        }
        if n > self.len {
            return Err(Error::invalid(format!("chunk of {n} exceeds dataset of {} sequences", self.len)));
        }
        if !self.wrap && self.len - self.pos < n {
            return Err(Error::EndOfData { epoch: self.epoch });
        }
        let mut indices = Vec::with_capacity(n);
        while indices.len() < n {
            if self.pos == self.len {
                self.epoch += 1;
                self.perm = self.permutation(self.epoch);
                self.pos = 0;
            }
            let next = self.perm[self.pos];
            self.pos += 1;
            if !indices.contains(&next) {
                indices.push(next);
            }
        }
        let chunk = Chunk { index: self.chunks, epoch: self.epoch, indices };
        self.chunks += 1;
        Ok(chunk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_wrap_and_exhaustion() {
        let mut c = ChunkCursor::new(10, ChunkOrder::Sequential, true);
        assert_eq!(c.next_chunk(4).unwrap().indices, vec![0, 1, 2, 3]);
        assert_eq!(c.next_chunk(4).unwrap().indices, vec![4, 5, 6, 7]);
        let third = c.next_chunk(4).unwrap();
        assert_eq!(third.indices, vec![8, 9, 0, 1]);
        assert_eq!(third.epoch, 1);
        assert_eq!(third.index, 2);

        let mut strict = ChunkCursor::new(10, ChunkOrder::Sequential, false);
        strict.next_chunk(4).unwrap();
        strict.next_chunk(4).unwrap();
        assert!(matches!(strict.next_chunk(4), Err(Error::EndOfData { epoch: 0 })));
        assert!(strict.next_chunk(0).is_err());
    }

    #[test]
    fn shuffled_is_deterministic_and_duplicate_free() {
        let run = || {
            let mut c = ChunkCursor::new(7, ChunkOrder::Shuffled { seed: 3 }, true);
            (0..10).map(|_| c.next_chunk(5).unwrap().indices).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        for chunk in &a {
            let mut s = chunk.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 5);
        }
        assert_ne!(a[0], vec![0, 1, 2, 3, 4]);
        assert!(ChunkCursor::new(3, ChunkOrder::Sequential, true).next_chunk(4).is_err());
    }
}
