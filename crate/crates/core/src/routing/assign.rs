use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ScoreMatrix;
use crate::error::{Error, Result};
use crate::tensorfile::{expect_magic, read_u32, read_u64, write_u32, write_u64};

const MAGIC: &[u8; 4] = b"PASN";
const VERSION: u32 = 1;

/// One expert index per sequence plus the per-expert capacities it was built under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentTable {
    pub assignment: Vec<u32>,
    pub capacities: Vec<usize>,
}

impl AssignmentTable {
    pub fn experts(&self) -> usize {
        self.capacities.len()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.experts()];
        for &a in &self.assignment {
            c[a as usize] += 1;
        }
        c
    }

    /// Positions (row indices) assigned to each expert, in row order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.experts()];
        for (i, &a) in self.assignment.iter().enumerate() {
            m[a as usize].push(i);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.experts();
        if e == 0 {
            return Err(Error::Precondition("assignment table without experts".into()));
        }
        if let Some(bad) = self.assignment.iter().find(|&&a| a as usize >= e) {
            return Err(Error::Precondition(format!("expert index {bad} out of range for {e} experts")));
        }
        for (x, (&c, &cap)) in self.counts().iter().zip(&self.capacities).enumerate() {
            if c > cap {
                return Err(Error::Precondition(format!("expert {x} holds {c} sequences over capacity {cap}")));
            }
        }
        Ok(())
    }

    /// Sum of each row's score at its assigned expert.
    pub fn total_score(&self, scores: &ScoreMatrix) -> f64 {
        self.assignment.iter().enumerate().map(|(i, &a)| scores.get(i, a as usize)).sum()
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

    /// `{magic "PASN", version u32, N u64, E u32, capacity u64 * E}` then `u32` per sequence.
    pub fn encode(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_u64(w, self.len() as u64)?;
        write_u32(w, self.experts() as u32)?;
        for &c in &self.capacities {
            write_u64(w, c as u64)?;
        }
        for &a in &self.assignment {
            write_u32(w, a)?;
        }
        Ok(())
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported assignment version {version}")));
        }
        let n = read_u64(r)? as usize;
        let e = read_u32(r)? as usize;
        let capacities = (0..e).map(|_| read_u64(r).map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let assignment = (0..n).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let t = Self { assignment, capacities };
        t.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(t)
    }
}

/// `⌈n/e⌉` for the first `n mod e` experts and `⌊n/e⌋` for the rest.
pub fn balanced_capacities(n: usize, e: usize) -> Result<Vec<usize>> {
    if e == 0 {
        return Err(Error::invalid("expert count must be positive"));
    }
    Ok((0..e).map(|x| n / e + usize::from(x < n % e)).collect())
}

fn check_feasible(scores: &ScoreMatrix, capacities: &[usize]) -> Result<()> {
    if capacities.len() != scores.experts {
        return Err(Error::invalid(format!(
            "{} capacities for {} experts",
            capacities.len(),
            scores.experts
        )));
    }
    let total: usize = capacities.iter().sum();
    if total < scores.rows {
        return Err(Error::invalid(format!("capacities sum to {total}, fewer than {} sequences", scores.rows)));
    }
    Ok(())
}

fn greedy(scores: &ScoreMatrix, capacities: &[usize], order: impl Iterator<Item = usize>) -> AssignmentTable {
    let mut left = capacities.to_vec();
    let mut assignment = vec![0u32; scores.rows];
    for i in order {
        let row = scores.row(i);
        let mut best = usize::MAX;
        for (e, &s) in row.iter().enumerate() {
            if left[e] > 0 && (best == usize::MAX || s > row[best]) {
                best = e;
            }
        }
        left[best] -= 1;
        assignment[i] = best as u32;
    }
    AssignmentTable { assignment, capacities: capacities.to_vec() }
}

/// Rows in order; each takes its best expert with capacity left.
pub fn naive_assignments(scores: &ScoreMatrix, capacities: &[usize]) -> Result<AssignmentTable> {
    check_feasible(scores, capacities)?;
    Ok(greedy(scores, capacities, 0..scores.rows))
}

/// Order in which the balanced procedure visits rows: descending row maximum,
/// stable by row index on ties.
pub fn balanced_order(scores: &ScoreMatrix) -> Vec<usize> {
    let maxes: Vec<f64> = (0..scores.rows).map(|i| scores.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut order: Vec<usize> = (0..scores.rows).collect();
    order.sort_by(|&a, &b| maxes[b].total_cmp(&maxes[a]));
    order
}

/// Greedy assignment visiting the most confident rows first.
pub fn balanced_assignments(scores: &ScoreMatrix, capacities: &[usize]) -> Result<AssignmentTable> {
    check_feasible(scores, capacities)?;
    Ok(greedy(scores, capacities, balanced_order(scores).into_iter()))
}

/// Seeded uniform permutation split into `e` contiguous parts of balanced sizes.
pub fn random_assignments(n: usize, e: usize, seed: u64) -> Result<AssignmentTable> {
    if e == 0 {
        return Err(Error::invalid("expert count must be positive"));
    }
    if n < e {
        return Err(Error::invalid(format!("{n} sequences cannot cover {e} experts")));
    }
    let capacities = balanced_capacities(n, e)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0u32; n];
    let mut pos = 0;
    for (x, &c) in capacities.iter().enumerate() {
        for &i in &perm[pos..pos + c] {
            assignment[i] = x as u32;
        }
        pos += c;
    }
    Ok(AssignmentTable { assignment, capacities })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ScoreMatrix {
        ScoreMatrix::new(3, 3, 2, vec![-3.0, -3.1, -3.2, -1.0, -9.0, -9.5, -2.0, -2.1, -8.0]).unwrap()
    }

    #[test]
    fn capacity_rule() {
        assert_eq!(balanced_capacities(10, 3).unwrap(), vec![4, 3, 3]);
        assert_eq!(balanced_capacities(9, 3).unwrap(), vec![3, 3, 3]);
        assert_eq!(balanced_capacities(2, 4).unwrap(), vec![1, 1, 0, 0]);
        assert!(balanced_capacities(5, 0).is_err());
    }

    #[test]
    fn worked_example() {
        let s = worked();
        let caps = [1, 1, 1];
        let naive = naive_assignments(&s, &caps).unwrap();
        assert_eq!(naive.assignment, vec![0, 1, 2]);
        assert_eq!(naive.total_score(&s), -20.0);
        assert_eq!(balanced_order(&s), vec![1, 2, 0]);
        let bal = balanced_assignments(&s, &caps).unwrap();
        assert_eq!(bal.assignment, vec![2, 0, 1]);
        assert!((bal.total_score(&s) + 6.3).abs() < 1e-12);
    }

    #[test]
    fn infeasible_capacities_rejected() {
        let s = worked();
        assert!(naive_assignments(&s, &[1, 1, 0]).is_err());
        assert!(balanced_assignments(&s, &[3, 3]).is_err());
    }

    #[test]
    fn random_partition_sizes() {
        assert_eq!(random_assignments(9, 3, 1).unwrap().counts(), vec![3, 3, 3]);
        assert_eq!(random_assignments(10, 3, 1).unwrap().counts(), vec![4, 3, 3]);
        assert_eq!(random_assignments(10, 3, 7).unwrap(), random_assignments(10, 3, 7).unwrap());
        assert!(random_assignments(10, 0, 1).is_err());
        assert!(random_assignments(2, 3, 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let t = random_assignments(11, 4, 3).unwrap();
        let mut buf = Vec::new();
        t.encode(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PASN");
        assert_eq!(AssignmentTable::decode(&mut buf.as_slice()).unwrap(), t);
    }
}
