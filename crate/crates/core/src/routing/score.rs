use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::RouterEnsemble;
use crate::error::{Error, Result};
use crate::tensorfile::{expect_magic, read_u32, read_u64, write_u32, write_u64};

const MAGIC: &[u8; 4] = b"PSCR";
/// Sequences scored per forward pass.
const SCORE_BATCH: usize = 64;

/// `rows × experts` prefix log-likelihoods, row-major. Higher is better.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub experts: usize,
    pub prefix: usize,
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, experts: usize, prefix: usize, scores: Vec<f64>) -> Result<Self> {
        if rows == 0 || experts == 0 {
            return Err(Error::invalid("score matrix needs at least one row and one expert"));
        }
        if scores.len() != rows * experts {
            return Err(Error::invalid(format!("{} scores for a {rows}x{experts} matrix", scores.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(Self { rows, experts, prefix, scores })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.experts..(i + 1) * self.experts]
    }

    pub fn get(&self, i: usize, e: usize) -> f64 {
        self.scores[i * self.experts + e]
    }

    /// Hard routing decision of every row.
    pub fn routes(&self) -> Vec<u32> {
        (0..self.rows).map(|i| route(self.row(i)).expect("non-empty row") as u32).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&mut BufReader::new(File::open(path)?))
    }

    /// `{magic "PSCR", N u64, E u32, M u32}` then row-major `f32` scores.
    /// Scores are narrowed to 32 bits on disk.
    pub fn encode(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u64(w, self.rows as u64)?;
        write_u32(w, self.experts as u32)?;
        write_u32(w, self.prefix as u32)?;
        for &s in &self.scores {
            w.write_all(&(s as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let rows = read_u64(r)? as usize;
        let experts = read_u32(r)? as usize;
        let prefix = read_u32(r)? as usize;
        let mut raw = vec![0u8; rows * experts * 4];
        r.read_exact(&mut raw)?;
        let scores = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Self::new(rows, experts, prefix, scores).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn route(row: &[f64]) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::invalid("cannot route over an empty score row"));
    }
    let mut best = 0;
    for (e, &s) in row.iter().enumerate().skip(1) {
        if s > row[best] {
            best = e;
        }
    }
    Ok(best)
}

/// Entry `(i, e)` is the log-likelihood router `e` assigns to the first `m`
/// tokens of sequence `i`.
pub fn score_matrix(ensemble: &RouterEnsemble, sequences: &[&[u32]], m: usize) -> Result<ScoreMatrix> {
    let s = ensemble.config().context;
    if m < 2 || m > s {
        return Err(Error::invalid(format!("prefix length {m} outside [2, {s}]")));
    }
    if let Some(short) = sequences.iter().find(|q| q.len() < m) {
        return Err(Error::invalid(format!("sequence of length {} shorter than prefix {m}", short.len())));
    }
    let e = ensemble.len();
    let mut scores = vec![0.0; sequences.len() * e];
    for (b, group) in sequences.chunks(SCORE_BATCH).enumerate() {
        let prefixes: Vec<&[u32]> = group.iter().map(|q| &q[..m]).collect();
        for (x, router) in ensemble.routers.iter().enumerate() {
            for (j, nll) in router.batch_nll(&prefixes)?.into_iter().enumerate() {
                scores[(b * SCORE_BATCH + j) * e + x] = -nll;
            }
        }
    }
    ScoreMatrix::new(sequences.len(), e, m, scores)
}
