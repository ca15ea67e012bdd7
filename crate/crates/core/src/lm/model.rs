//! Forward pass, exact log-likelihoods and reverse-mode gradients of the
//! decoder-only transformer (pre-RMSNorm, rotary attention, GELU feedforward,
//! no biases, untied embeddings).

use super::params::{BlockOffsets, Layout, ModelParams};
use super::real::{gemm, matmul, MatRef, Real};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Per-position next-token log-probabilities of one sequence; row `s` is the
/// distribution over the token at position `s + 1`.
#[derive(Debug, Clone)]
pub struct LogProbs<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Real> LogProbs<T> {
    pub fn row(&self, s: usize) -> &[T] {
        &self.data[s * self.vocab..(s + 1) * self.vocab]
    }
}

struct BlockCache<T> {
    attn_xhat: Vec<T>,
    attn_rinv: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ffn_xhat: Vec<T>,
    ffn_rinv: Vec<T>,
    h2: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
    act_tanh: Vec<T>,
}

/// Activations kept from the forward pass for backpropagation.
pub(crate) struct Trace<T> {
    batch: usize,
    len: usize,
    ids: Vec<u32>,
    blocks: Vec<BlockCache<T>>,
    final_xhat: Vec<T>,
    final_rinv: Vec<T>,
    final_h: Vec<T>,
    pub(crate) logprobs: Vec<T>,
}

impl<T> Trace<T> {
    fn target(&self, b: usize, t: usize) -> usize {
        self.ids[b * self.len + t + 1] as usize
    }
}

struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Real> Rope<T> {
    fn new(len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates every head of every row in place; `inverse` applies the transpose.
    fn apply(&self, x: &mut [T], len: usize, hidden: usize, inverse: bool) {
        let head_dim = 2 * self.half;
        for (i, row) in x.chunks_exact_mut(hidden).enumerate() {
            let pos = i % len;
            let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
            let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
            for head in row.chunks_exact_mut(head_dim) {
                for j in 0..self.half {
                    let (a, b) = (head[2 * j], head[2 * j + 1]);
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    head[2 * j] = a * c - b * s;
                    head[2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
}

fn rms_norm<T: Real>(x: &[T], gain: &[T], xhat: &mut [T], rinv: &mut [T], y: &mut [T]) {
    let h = gain.len();
    let eps = T::lit(NORM_EPS);
    let inv_h = T::one() / T::from_usize(h).unwrap();
    for (((xr, xh), yr), ri) in x
        .chunks_exact(h)
        .zip(xhat.chunks_exact_mut(h))
        .zip(y.chunks_exact_mut(h))
        .zip(rinv.iter_mut())
    {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_h;
        let inv = T::one() / (ms + eps).sqrt();
        *ri = inv;
        for ((o, &xv), (yv, &g)) in xh.iter_mut().zip(xr).zip(yr.iter_mut().zip(gain)) {
            *o = xv * inv;
            *yv = *o * g;
        }
    }
}

/// Accumulates the gain gradient and adds the input gradient into `dx`.
fn rms_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rinv: &[T],
    gain: &[T],
    dgain: &mut [T],
    dx: &mut [T],
) {
    let h = gain.len();
    let inv_h = T::one() / T::from_usize(h).unwrap();
    let mut dxhat = vec![T::zero(); h];
    for (((dyr, xh), &ri), dxr) in dy
        .chunks_exact(h)
        .zip(xhat.chunks_exact(h))
        .zip(rinv)
        .zip(dx.chunks_exact_mut(h))
    {
        let mut dot = T::zero();
        for j in 0..h {
            dgain[j] += dyr[j] * xh[j];
            dxhat[j] = dyr[j] * gain[j];
            dot += dxhat[j] * xh[j];
        }
        let mean = dot * inv_h;
        for j in 0..h {
            dxr[j] += ri * (dxhat[j] - xh[j] * mean);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU (tanh form) over a buffer. Writes the activation and keeps the tanh
/// term for the backward pass; tanh goes through one exponential so the loop
/// vectorizes.
fn gelu_forward<T: Real>(pre: &[T], act: &mut [T], tanh: &mut [T]) {
    let (c, k, two) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(2.0));
    for (t, &x) in tanh.iter_mut().zip(pre) {
        *t = two * c * (x + k * x * x * x);
    }
    T::exp_in_place(tanh);
    let half = T::lit(0.5);
    for ((a, t), &x) in act.iter_mut().zip(tanh.iter_mut()).zip(pre) {
        *t = T::one() - two / (*t + T::one());
        *a = half * x * (T::one() + *t);
    }
}

fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

fn log_softmax_rows<T: Real>(data: &mut [T], width: usize) {
    let mut buf = vec![T::zero(); width];
    for row in data.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            *b = v - max;
        }
        T::exp_in_place(&mut buf);
        let lse = max + buf.iter().copied().sum::<T>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
}

impl<T: Real> ModelParams<T> {
    fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.data[offset..offset + len]
    }

    fn check_batch(&self, batch: &[&[u32]]) -> Result<usize> {
        let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let len = first.len();
        if len < 2 || len > self.config.context {
            return Err(Error::invalid(format!(
                "sequence length {len} outside [2, {}]",
                self.config.context
            )));
        }
        for seq in batch {
            if seq.len() != len {
                return Err(Error::invalid("sequences in a batch must share one length"));
            }
            self.check_ids(seq)?;
        }
        Ok(len)
    }

    pub(crate) fn trace(&self, batch: &[&[u32]]) -> Result<Trace<T>> {
        let len = self.check_batch(batch)?;
        let cfg = &self.config;
        let layout = Layout::new(cfg);
        let (h, f, v, heads) = (cfg.hidden, cfg.ff, cfg.vocab, cfg.heads);
        let dh = cfg.head_dim();
        let nb = batch.len();
        let n = nb * len;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let rope = Rope::<T>::new(len, dh, cfg.rope_base);

        let ids: Vec<u32> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let mut x = vec![T::zero(); n * h];
        let embed = self.slice(layout.embed, v * h);
        for (row, &id) in x.chunks_exact_mut(h).zip(&ids) {
            row.copy_from_slice(&embed[id as usize * h..(id as usize + 1) * h]);
        }

        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut scores = vec![T::zero(); len * len];
        for off in &layout.blocks {
            let BlockOffsets { attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down } = *off;
            let mut attn_xhat = vec![T::zero(); n * h];
            let mut attn_rinv = vec![T::zero(); n];
            let mut h1 = vec![T::zero(); n * h];
            rms_norm(&x, self.slice(attn_norm, h), &mut attn_xhat, &mut attn_rinv, &mut h1);

            let h1m = MatRef::new(&h1, n, h);
            let mut q = vec![T::zero(); n * h];
            let mut k = vec![T::zero(); n * h];
            let mut vv = vec![T::zero(); n * h];
            matmul(h1m, MatRef::new(self.slice(wq, h * h), h, h), T::zero(), &mut q);
            matmul(h1m, MatRef::new(self.slice(wk, h * h), h, h), T::zero(), &mut k);
            matmul(h1m, MatRef::new(self.slice(wv, h * h), h, h), T::zero(), &mut vv);
            rope.apply(&mut q, len, h, false);
            rope.apply(&mut k, len, h, false);

            let mut probs = vec![T::zero(); nb * heads * len * len];
            let mut att = vec![T::zero(); n * h];
            for b in 0..nb {
                for a in 0..heads {
                    let base = b * len * h + a * dh;
                    let qv = MatRef::strided(&q[base..], len, dh, h, 1);
                    let kv = MatRef::strided(&k[base..], len, dh, h, 1);
                    gemm(qv, kv.t(), T::zero(), &mut scores, len, len, len, 1);
                    let p = &mut probs[(b * heads + a) * len * len..][..len * len];
                    for i in 0..len {
                        let row = &scores[i * len..(i + 1) * len];
                        let prow = &mut p[i * len..(i + 1) * len];
                        let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                        for (pj, &rj) in prow[..=i].iter_mut().zip(&row[..=i]) {
                            *pj = (rj - max) * scale;
                        }
                        T::exp_in_place(&mut prow[..=i]);
                        let sum: T = prow[..=i].iter().copied().sum();
                        let inv = T::one() / sum;
                        prow[..=i].iter_mut().for_each(|e| *e *= inv);
                    }
                    let vview = MatRef::strided(&vv[base..], len, dh, h, 1);
                    gemm(MatRef::new(p, len, len), vview, T::zero(), &mut att[base..], len, dh, h, 1);
                }
            }
            matmul(MatRef::new(&att, n, h), MatRef::new(self.slice(wo, h * h), h, h), T::one(), &mut x);

            let mut ffn_xhat = vec![T::zero(); n * h];
            let mut ffn_rinv = vec![T::zero(); n];
            let mut h2 = vec![T::zero(); n * h];
            rms_norm(&x, self.slice(ffn_norm, h), &mut ffn_xhat, &mut ffn_rinv, &mut h2);
            let mut pre_act = vec![T::zero(); n * f];
            matmul(MatRef::new(&h2, n, h), MatRef::new(self.slice(w_up, h * f), h, f), T::zero(), &mut pre_act);
            let mut act = vec![T::zero(); n * f];
            let mut act_tanh = vec![T::zero(); n * f];
            gelu_forward(&pre_act, &mut act, &mut act_tanh);
            matmul(MatRef::new(&act, n, f), MatRef::new(self.slice(w_down, f * h), f, h), T::one(), &mut x);

            blocks.push(BlockCache {
                attn_xhat,
                attn_rinv,
                h1,
                q,
                k,
                v: vv,
                probs,
                att,
                ffn_xhat,
                ffn_rinv,
                h2,
                pre_act,
                act,
                act_tanh,
            });
        }

        let mut final_xhat = vec![T::zero(); n * h];
        let mut final_rinv = vec![T::zero(); n];
        let mut final_h = vec![T::zero(); n * h];
        rms_norm(&x, self.slice(layout.final_norm, h), &mut final_xhat, &mut final_rinv, &mut final_h);
        let mut logprobs = vec![T::zero(); n * v];
        matmul(MatRef::new(&final_h, n, h), MatRef::new(self.slice(layout.head, h * v), h, v), T::zero(), &mut logprobs);
        log_softmax_rows(&mut logprobs, v);

        Ok(Trace { batch: nb, len, ids, blocks, final_xhat, final_rinv, final_h, logprobs })
    }

    /// Next-token log-probabilities for positions `0..len-1` of one sequence.
    pub fn forward(&self, seq: &[u32]) -> Result<LogProbs<T>> {
        let trace = self.trace(&[seq])?;
        let v = self.config.vocab;
        let rows = trace.len - 1;
        let mut data = trace.logprobs;
        data.truncate(rows * v);
        Ok(LogProbs { rows, vocab: v, data })
    }

    /// Total negative log-likelihood of each sequence in the batch, summed in 64-bit.
    pub fn batch_nll(&self, batch: &[&[u32]]) -> Result<Vec<f64>> {
        let trace = self.trace(batch)?;
        Ok(sequence_nll(&trace, self.config.vocab))
    }

    pub fn nll(&self, seq: &[u32]) -> Result<f64> {
        Ok(self.batch_nll(&[seq])?[0])
    }

    /// NLL of the first `m` tokens only. Causal attention makes truncation exact.
    pub fn prefix_nll(&self, seq: &[u32], m: usize) -> Result<f64> {
        if m < 2 || m > seq.len() {
            return Err(Error::invalid(format!("prefix length {m} outside [2, {}]", seq.len())));
        }
        self.nll(&seq[..m])
    }

    /// Mean per-sequence NLL over the batch and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[&[u32]]) -> Result<(f64, Vec<T>)> {
        let trace = self.trace(batch)?;
        let nll = sequence_nll(&trace, self.config.vocab);
        let loss = nll.iter().sum::<f64>() / batch.len() as f64;
        let grad = self.backward(&trace);
        Ok((loss, grad))
    }

    fn backward(&self, tr: &Trace<T>) -> Vec<T> {
        let cfg = &self.config;
        let layout = Layout::new(cfg);
        let (h, f, v, heads) = (cfg.hidden, cfg.ff, cfg.vocab, cfg.heads);
        let dh = cfg.head_dim();
        let (nb, len) = (tr.batch, tr.len);
        let n = nb * len;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let rope = Rope::<T>::new(len, dh, cfg.rope_base);
        let mut grad = vec![T::zero(); self.data.len()];

        // d loss / d logits = (softmax - onehot) / batch on every scored row.
        let inv_b = T::one() / T::from_usize(nb).unwrap();
        let mut dlogits = vec![T::zero(); n * v];
        for b in 0..nb {
            for t in 0..len - 1 {
                let r = b * len + t;
                let lp = &tr.logprobs[r * v..(r + 1) * v];
                let d = &mut dlogits[r * v..(r + 1) * v];
                d.copy_from_slice(lp);
                T::exp_in_place(d);
                d.iter_mut().for_each(|x| *x *= inv_b);
                d[tr.target(b, t)] -= inv_b;
            }
        }

        matmul(
            MatRef::new(&tr.final_h, n, h).t(),
            MatRef::new(&dlogits, n, v),
            T::one(),
            &mut grad[layout.head..layout.head + h * v],
        );
        let mut dfinal = vec![T::zero(); n * h];
        matmul(
            MatRef::new(&dlogits, n, v),
            MatRef::new(self.slice(layout.head, h * v), h, v).t(),
            T::zero(),
            &mut dfinal,
        );
        drop(dlogits);
        let mut dx = vec![T::zero(); n * h];
        rms_norm_backward(
            &dfinal,
            &tr.final_xhat,
            &tr.final_rinv,
            self.slice(layout.final_norm, h),
            &mut grad[layout.final_norm..layout.final_norm + h],
            &mut dx,
        );

        let mut dscore = vec![T::zero(); len * len];
        for (off, c) in layout.blocks.iter().zip(&tr.blocks).rev() {
            // feedforward
            matmul(MatRef::new(&c.act, n, f).t(), MatRef::new(&dx, n, h), T::one(), &mut grad[off.w_down..off.w_down + f * h]);
            let mut dact = vec![T::zero(); n * f];
            matmul(MatRef::new(&dx, n, h), MatRef::new(self.slice(off.w_down, f * h), f, h).t(), T::zero(), &mut dact);
            for ((d, &u), &t) in dact.iter_mut().zip(&c.pre_act).zip(&c.act_tanh) {
                *d *= gelu_grad(u, t);
            }
            matmul(MatRef::new(&c.h2, n, h).t(), MatRef::new(&dact, n, f), T::one(), &mut grad[off.w_up..off.w_up + h * f]);
            let mut dh2 = vec![T::zero(); n * h];
            matmul(MatRef::new(&dact, n, f), MatRef::new(self.slice(off.w_up, h * f), h, f).t(), T::zero(), &mut dh2);
            drop(dact);
            rms_norm_backward(
                &dh2,
                &c.ffn_xhat,
                &c.ffn_rinv,
                self.slice(off.ffn_norm, h),
                &mut grad[off.ffn_norm..off.ffn_norm + h],
                &mut dx,
            );

            // attention
            matmul(MatRef::new(&c.att, n, h).t(), MatRef::new(&dx, n, h), T::one(), &mut grad[off.wo..off.wo + h * h]);
            let mut datt = vec![T::zero(); n * h];
            matmul(MatRef::new(&dx, n, h), MatRef::new(self.slice(off.wo, h * h), h, h).t(), T::zero(), &mut datt);
            let mut dq = vec![T::zero(); n * h];
            let mut dk = vec![T::zero(); n * h];
            let mut dv = vec![T::zero(); n * h];
            for b in 0..nb {
                for a in 0..heads {
                    let base = b * len * h + a * dh;
                    let p = &c.probs[(b * heads + a) * len * len..][..len * len];
                    let pm = MatRef::new(p, len, len);
                    let dout = MatRef::strided(&datt[base..], len, dh, h, 1);
                    let vview = MatRef::strided(&c.v[base..], len, dh, h, 1);
                    gemm(pm.t(), dout, T::zero(), &mut dv[base..], len, dh, h, 1);
                    gemm(dout, vview.t(), T::zero(), &mut dscore, len, len, len, 1);
                    for i in 0..len {
                        let prow = &p[i * len..(i + 1) * len];
                        let drow = &mut dscore[i * len..(i + 1) * len];
                        let dot: T = (0..=i).map(|j| prow[j] * drow[j]).sum();
                        for j in 0..=i {
                            drow[j] = prow[j] * (drow[j] - dot) * scale;
                        }
                        drow[i + 1..].iter_mut().for_each(|d| *d = T::zero());
                    }
                    let ds = MatRef::new(&dscore, len, len);
                    let qv = MatRef::strided(&c.q[base..], len, dh, h, 1);
                    let kv = MatRef::strided(&c.k[base..], len, dh, h, 1);
                    gemm(ds, kv, T::zero(), &mut dq[base..], len, dh, h, 1);
                    gemm(ds.t(), qv, T::zero(), &mut dk[base..], len, dh, h, 1);
                }
            }
            drop(datt);
            rope.apply(&mut dq, len, h, true);
            rope.apply(&mut dk, len, h, true);
            let h1t = MatRef::new(&c.h1, n, h).t();
            matmul(h1t, MatRef::new(&dq, n, h), T::one(), &mut grad[off.wq..off.wq + h * h]);
            matmul(h1t, MatRef::new(&dk, n, h), T::one(), &mut grad[off.wk..off.wk + h * h]);
            matmul(h1t, MatRef::new(&dv, n, h), T::one(), &mut grad[off.wv..off.wv + h * h]);
            let mut dh1 = vec![T::zero(); n * h];
            matmul(MatRef::new(&dq, n, h), MatRef::new(self.slice(off.wq, h * h), h, h).t(), T::zero(), &mut dh1);
            matmul(MatRef::new(&dk, n, h), MatRef::new(self.slice(off.wk, h * h), h, h).t(), T::one(), &mut dh1);
            matmul(MatRef::new(&dv, n, h), MatRef::new(self.slice(off.wv, h * h), h, h).t(), T::one(), &mut dh1);
            rms_norm_backward(
                &dh1,
                &c.attn_xhat,
                &c.attn_rinv,
                self.slice(off.attn_norm, h),
                &mut grad[off.attn_norm..off.attn_norm + h],
                &mut dx,
            );
        }

        let gemb = &mut grad[layout.embed..layout.embed + v * h];
        for (row, &id) in dx.chunks_exact(h).zip(&tr.ids) {
            let dst = &mut gemb[id as usize * h..(id as usize + 1) * h];
            for (d, &g) in dst.iter_mut().zip(row) {
                *d += g;
            }
        }
        grad
    }
}

fn sequence_nll<T: Real>(tr: &Trace<T>, vocab: usize) -> Vec<f64> {
    (0..tr.batch)
        .map(|b| {
            (0..tr.len - 1)
                .map(|t| {
                    let r = b * tr.len + t;
                    -tr.logprobs[r * vocab + tr.target(b, t)].to_f64().unwrap()
                })
                .sum()
        })
        .collect()
}
