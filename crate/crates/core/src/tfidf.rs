//! Baseline router: TF-IDF over prefix token ids, truncated SVD projection
//! and balanced k-means, routing by nearest centroid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{matmul, MatRef};
use crate::routing::{balanced_assignments, balanced_capacities, AssignmentTable, ScoreMatrix};
use crate::tensorfile::{expect_magic, read_section, read_u32, read_u64, write_section, write_u32, write_u64, NamedTensor};

const MAGIC: &[u8; 4] = b"PTFI";
const VERSION: u32 = 1;
pub const DEFAULT_COMPONENTS: usize = 64;
pub const MAX_KMEANS_ITERS: usize = 100;
const SVD_TOL: f64 = 1e-6;
const SVD_MAX_ITERS: usize = 2_000;

/// Document frequency of every token id over a corpus of prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub df: Vec<u64>,
    pub docs: u64,
}

impl TfidfModel {
    pub fn fit(prefixes: &[&[u32]], vocab: usize) -> Result<Self> {
        let mut df = vec![0u64; vocab];
        let mut seen = vec![u64::MAX; vocab];
        for (d, p) in prefixes.iter().enumerate() {
            for &t in p.iter() {
                let t = t as usize;
                if t >= vocab {
                    return Err(Error::invalid(format!("token {t} outside vocabulary of {vocab}")));
                }
                if seen[t] != d as u64 {
                    seen[t] = d as u64;
                    df[t] += 1;
                }
            }
        }
        Ok(Self { df, docs: prefixes.len() as u64 })
    }

    pub fn vocab(&self) -> usize {
        self.df.len()
    }

    /// `ln((1 + D) / (1 + df))`.
    pub fn idf(&self, t: usize) -> f64 {
        ((1 + self.docs) as f64 / (1 + self.df[t]) as f64).ln()
    }

    /// Sparse `(token, weight)` pairs sorted by token, weight `tf * (idf + 1)`,
    /// L2-normalized unless every weight is zero. Out-of-vocabulary ids are ignored.
    pub fn encode(&self, prefix: &[u32]) -> Vec<(u32, f64)> {
        let mut counts: Vec<(u32, f64)> = Vec::new();
        let mut ids: Vec<u32> = prefix.iter().copied().filter(|&t| (t as usize) < self.vocab()).collect();
        ids.sort_unstable();
        for t in ids {
            match counts.last_mut() {
                Some((last, c)) if *last == t => *c += 1.0,
                _ => counts.push((t, 1.0)),
            }
        }
        for (t, w) in counts.iter_mut() {
            *w *= self.idf(*t as usize) + 1.0;
        }
        let norm = counts.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|(_, w)| *w /= norm);
        }
        counts
    }

    pub fn encode_dense(&self, prefix: &[u32]) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab()];
        for (t, w) in self.encode(prefix) {
            v[t as usize] = w;
        }
        v
    }
}

/// Top-`k` right singular vectors as a `V × k` row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdProjection {
    pub dim: usize,
    pub k: usize,
    pub components: Vec<f64>,
    pub singular_values: Vec<f64>,
}

impl SvdProjection {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        matmul(MatRef::new(x, 1, self.dim), MatRef::new(&self.components, self.dim, self.k), 0.0, &mut out);
        out
    }

    pub fn project_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.k];
        matmul(MatRef::new(x, rows, self.dim), MatRef::new(&self.components, self.dim, self.k), 0.0, &mut out);
        out
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric `n × n` matrix. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns.
pub(crate) fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        let scale: f64 = (0..n).map(|i| a[i * n + i].powi(2)).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (c, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + c] = v[r * n + i];
        }
    }
    (values, vectors)
}

/// Orthonormalizes the columns of a `rows × cols` matrix in place (modified
/// Gram-Schmidt); a collapsed column is replaced by a fresh unit vector.
fn orthonormalize(q: &mut [f64], rows: usize, cols: usize) {
    for c in 0..cols {
        for _pass in 0..2 {
            for p in 0..c {
                let dot: f64 = (0..rows).map(|r| q[r * cols + c] * q[r * cols + p]).sum();
                for r in 0..rows {
                    q[r * cols + c] -= dot * q[r * cols + p];
                }
            }
        }
        let norm = (0..rows).map(|r| q[r * cols + c].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            (0..rows).for_each(|r| q[r * cols + c] /= norm);
        } else {
            // Pick the first basis vector that survives projection.
            for b in 0..rows {
                let mut e: Vec<f64> = (0..rows).map(|r| f64::from(r == b)).collect();
                for p in 0..c {
                    let dot = q[b * cols + p];
                    for r in 0..rows {
                        e[r] -= dot * q[r * cols + p];
                    }
                }
                let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    (0..rows).for_each(|r| q[r * cols + c] = e[r] / n);
                    break;
                }
            }
        }
    }
}

/// Top-`k` singular triplets of the `rows × dim` matrix `x` by orthogonal
/// subspace iteration on `xᵀx` with Rayleigh-Ritz extraction. Stops once
/// every singular value changes by less than 1e-6 relative between iterations.
pub fn truncated_svd(x: &[f64], rows: usize, dim: usize, k: usize, seed: u64) -> Result<SvdProjection> {
    if x.len() != rows * dim {
        return Err(Error::invalid(format!("{} values for a {rows}x{dim} matrix", x.len())));
    }
    if k == 0 || k > rows.min(dim) {
        return Err(Error::invalid(format!("k = {k} outside [1, {}]", rows.min(dim))));
    }
    let p = (k + 8).min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..dim * p).map(|_| rng.gen::<f64>() - 0.5).collect();
    orthonormalize(&mut q, dim, p);
    let mut xq = vec![0.0; rows * p];
    let mut z = vec![0.0; dim * p];
    let mut prev = vec![f64::INFINITY; k];
    let mut values = vec![0.0; p];
    let mut basis = q.clone();
    for _ in 0..SVD_MAX_ITERS {
        matmul(MatRef::new(x, rows, dim), MatRef::new(&q, dim, p), 0.0, &mut xq);
        // Rayleigh-Ritz on the current subspace: (XQ)ᵀ(XQ) = Qᵀ XᵀX Q.
        let mut small = vec![0.0; p * p];
        matmul(MatRef::new(&xq, rows, p).t(), MatRef::new(&xq, rows, p), 0.0, &mut small);
        let (vals, vecs) = symmetric_eigen(small, p);
        values = vals;
        basis = vec![0.0; dim * p];
        matmul(MatRef::new(&q, dim, p), MatRef::new(&vecs, p, p), 0.0, &mut basis);
        let sv: Vec<f64> = values[..k].iter().map(|v| v.max(0.0).sqrt()).collect();
        let converged = sv.iter().zip(&prev).all(|(s, o)| (s - o).abs() <= SVD_TOL * s.max(1e-300));
        prev = sv;
        if converged {
            break;
        }
        matmul(MatRef::new(x, rows, dim).t(), MatRef::new(&xq, rows, p), 0.0, &mut z);
        q.copy_from_slice(&z);
        orthonormalize(&mut q, dim, p);
    }
    let mut components = vec![0.0; dim * k];
    for r in 0..dim {
        components[r * k..(r + 1) * k].copy_from_slice(&basis[r * p..r * p + k]);
    }
    Ok(SvdProjection { dim, k, components, singular_values: values[..k].iter().map(|v| v.max(0.0).sqrt()).collect() })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub dim: usize,
    /// `E × dim` row-major.
    pub centroids: Vec<f64>,
    pub assignment: AssignmentTable,
    /// Within-cluster sum of squares after every accepted iteration.
    pub wcss: Vec<f64>,
    pub iterations: usize,
}

fn wcss(points: &[f64], dim: usize, centroids: &[f64], assignment: &[u32]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(&points[i * dim..(i + 1) * dim], &centroids[a as usize * dim..(a as usize + 1) * dim]))
        .sum()
}

fn means(points: &[f64], dim: usize, assignment: &[u32], old: &[f64]) -> Vec<f64> {
    let e = old.len() / dim;
    let mut sums = vec![0.0; e * dim];
    let mut counts = vec![0usize; e];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a as usize] += 1;
        for d in 0..dim {
            sums[a as usize * dim + d] += points[i * dim + d];
        }
    }
    for c in 0..e {
        if counts[c] == 0 {
            sums[c * dim..(c + 1) * dim].copy_from_slice(&old[c * dim..(c + 1) * dim]);
        } else {
            sums[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s /= counts[c] as f64);
        }
    }
    sums
}

fn distance_scores(points: &[f64], dim: usize, centroids: &[f64]) -> Result<ScoreMatrix> {
    let n = points.len() / dim;
    let e = centroids.len() / dim;
    let mut s = Vec::with_capacity(n * e);
    for i in 0..n {
        for c in 0..e {
            s.push(-sq_dist(&points[i * dim..(i + 1) * dim], &centroids[c * dim..(c + 1) * dim]));
        }
    }
    ScoreMatrix::new(n, e, 0, s)
}

/// Lloyd iterations whose assignment step is the capacity-balanced greedy
/// procedure on negative squared distances. An iteration is accepted only if
/// it does not raise the within-cluster sum of squares.
pub fn balanced_kmeans(points: &[f64], dim: usize, e: usize, capacities: &[usize], seed: u64) -> Result<KMeansResult> {
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return Err(Error::invalid("balanced k-means needs a non-empty point set"));
    }
    let n = points.len() / dim;
    if e == 0 || n < e {
        return Err(Error::invalid(format!("{n} points cannot form {e} clusters")));
    }
    // Seeded farthest-point initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(&points[i * dim..(i + 1) * dim], &points[chosen[0] * dim..(chosen[0] + 1) * dim])).collect();
    while chosen.len() < e {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(&points[i * dim..(i + 1) * dim], &points[best * dim..(best + 1) * dim]));
        }
    }
    let mut centroids: Vec<f64> = chosen.iter().flat_map(|&c| points[c * dim..(c + 1) * dim].to_vec()).collect();

    let mut table = balanced_assignments(&distance_scores(points, dim, &centroids)?, capacities)?;
    centroids = means(points, dim, &table.assignment, &centroids);
    let mut history = vec![wcss(points, dim, &centroids, &table.assignment)];
    let mut iterations = 1;
    while iterations < MAX_KMEANS_ITERS {
        let next = balanced_assignments(&distance_scores(points, dim, &centroids)?, capacities)?;
        if next.assignment == table.assignment {
            break;
        }
        let next_centroids = means(points, dim, &next.assignment, &centroids);
        let cost = wcss(points, dim, &next_centroids, &next.assignment);
        if cost > *history.last().unwrap() {
            break;
        }
        table = next;
        centroids = next_centroids;
        history.push(cost);
        iterations += 1;
    }
    Ok(KMeansResult { dim, centroids, assignment: table, wcss: history, iterations })
}

/// Index of the nearest centroid by squared distance; lowest index on ties.
pub fn nearest_centroid(point: &[f64], centroids: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// A fitted baseline routing pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfRouter {
    pub prefix: usize,
    pub model: TfidfModel,
    pub projection: SvdProjection,
    pub centroids: Vec<f64>,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl TfidfRouter {
    /// Fits the pipeline on the `prefix`-token prefixes of `seqs` and returns
    /// it with the balanced training partition.
    pub fn fit(seqs: &[&[u32]], vocab: usize, experts: usize, prefix: usize, k: usize, seed: u64) -> Result<(Self, AssignmentTable)> {
        if seqs.iter().any(|s| s.len() < prefix) || prefix == 0 {
            return Err(Error::invalid(format!("prefix length {prefix} does not fit every sequence")));
        }
        let prefixes: Vec<&[u32]> = seqs.iter().map(|s| &s[..prefix]).collect();
        let model = TfidfModel::fit(&prefixes, vocab)?;
        let x: Vec<f64> = prefixes.iter().flat_map(|p| model.encode_dense(p)).collect();
        let k = k.min(seqs.len()).min(vocab);
        let mut projection = truncated_svd(&x, seqs.len(), vocab, k, seed)?;
        // Stored parameters are kept at 32-bit precision so checkpoints reload exactly.
        round_f32(&mut projection.components);
        round_f32(&mut projection.singular_values);
        let points = projection.project_rows(&x, seqs.len());
        let km = balanced_kmeans(&points, k, experts, &balanced_capacities(seqs.len(), experts)?, seed)?;
        let mut centroids = km.centroids;
        round_f32(&mut centroids);
        Ok((Self { prefix, model, projection, centroids }, km.assignment))
    }

    pub fn experts(&self) -> usize {
        self.centroids.len() / self.projection.k
    }

    /// Encodes the first `m` tokens, projects and returns the nearest centroid.
    pub fn route(&self, seq: &[u32], m: usize) -> usize {
        let m = m.min(seq.len());
        let z = self.projection.project(&self.model.encode_dense(&seq[..m]));
        nearest_centroid(&z, &self.centroids, self.projection.k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        write_u32(&mut w, self.prefix as u32)?;
        write_u64(&mut w, self.model.docs)?;
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let df: Vec<f32> = self.model.df.iter().map(|&d| d as f32).collect();
        write_section(
            &mut w,
            &[
                NamedTensor::new("df", vec![self.model.vocab()], df),
                NamedTensor::new("projection", vec![self.projection.dim, self.projection.k], f(&self.projection.components)),
                NamedTensor::new("singular_values", vec![self.projection.k], f(&self.projection.singular_values)),
                NamedTensor::new("centroids", vec![self.experts(), self.projection.k], f(&self.centroids)),
            ],
        )?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        expect_magic(&mut r, MAGIC)?;
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported baseline version {version}")));
        }
        let prefix = read_u32(&mut r)? as usize;
        let docs = read_u64(&mut r)?;
        let t = read_section(&mut r)?;
        let names: Vec<&str> = t.iter().map(|x| x.name.as_str()).collect();
        if names != ["df", "projection", "singular_values", "centroids"] || t[1].dims.len() != 2 {
            return Err(Error::Format(format!("unexpected baseline tensors {names:?}")));
        }
        let g = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        Ok(Self {
            prefix,
            model: TfidfModel { df: t[0].data.iter().map(|&d| d as u64).collect(), docs },
            projection: SvdProjection {
                dim: t[1].dims[0],
                k: t[1].dims[1],
                components: g(&t[1].data),
                singular_values: g(&t[2].data),
            },
            centroids: g(&t[3].data),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_token_has_max_idf() {
        let m = TfidfModel::fit(&[&[1, 2], &[2, 3]], 5).unwrap();
        assert_eq!(m.df, vec![0, 1, 2, 1, 0]);
        assert!((m.idf(4) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn repeated_token_is_one_hot() {
        let m = TfidfModel::fit(&[&[1, 1, 1], &[2, 3, 3]], 5).unwrap();
        assert_eq!(m.encode(&[1, 1, 1, 1]), vec![(1, 1.0)]);
        assert!(m.encode(&[]).is_empty());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = vec![2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let (vals, _) = symmetric_eigen(a, 3);
        for (v, w) in vals.iter().zip([5.0, 3.0, 1.0]) {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_reconstructs() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7];
        let x: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let p = truncated_svd(&x, 4, 3, 1, 1).unwrap();
        let z = p.project_rows(&x, 4);
        for r in 0..4 {
            for c in 0..3 {
                assert!((z[r] * p.components[c] - x[r * 3 + c]).abs() < 1e-6);
            }
        }
        assert!(truncated_svd(&x, 4, 3, 4, 1).is_err());
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = [0.0, 0.0, 2.0, 4.0, 4.0, 2.0];
        let r = balanced_kmeans(&pts, 2, 1, &[3], 0).unwrap();
        assert!((r.centroids[0] - 2.0).abs() < 1e-12 && (r.centroids[1] - 2.0).abs() < 1e-12);
        assert!(balanced_kmeans(&[], 2, 1, &[0], 0).is_err());
    }

    #[test]
    fn distinct_points_are_a_fixed_point() {
        let pts = [0.0, 0.0, 5.0, 5.0, -3.0, 7.0];
        let r = balanced_kmeans(&pts, 2, 3, &[1, 1, 1], 4).unwrap();
        assert_eq!(*r.wcss.last().unwrap(), 0.0);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn nearest_centroid_ties_go_low() {
        let c = [0.0, 0.0, 2.0, 0.0];
        assert_eq!(nearest_centroid(&[1.0, 0.0], &c, 2), 0);
        assert_eq!(nearest_centroid(&[2.0, 0.0], &c, 2), 1);
    }
}
