//! Held-out perplexity for dense and routed mixture models, per-expert
//! segment reports and inference prefix-length sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::ModelParams;
use crate::routing::{score_matrix, RouterEnsemble};

const EVAL_BATCH: usize = 32;

/// Total NLL of every sequence, in input order.
pub fn sequence_nlls(params: &ModelParams<f32>, seqs: &[&[u32]]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for group in seqs.chunks(EVAL_BATCH) {
        out.extend(params.batch_nll(group)?);
    }
    Ok(out)
}

fn predicted_tokens(seqs: &[&[u32]]) -> u64 {
    seqs.iter().map(|s| s.len().saturating_sub(1) as u64).sum()
}

/// `exp(total nll / predicted tokens)`, natural log, 64-bit accumulation.
pub fn perplexity(params: &ModelParams<f32>, seqs: &[&[u32]]) -> Result<f64> {
    let tokens = predicted_tokens(seqs);
    if tokens == 0 {
        return Err(Error::invalid("no predicted tokens to evaluate"));
    }
    Ok((sequence_nlls(params, seqs)?.iter().sum::<f64>() / tokens as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub expert: usize,
    pub sequences: usize,
    pub tokens: u64,
    pub share: f64,
    /// `None` when no test sequence was routed here.
    pub perplexity: Option<f64>,
    /// The dense baseline on the same routed sequences, when requested.
    pub dense_perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prefix: usize,
    pub perplexity: f64,
    pub tokens: u64,
    pub segments: Vec<SegmentReport>,
    pub routes: Vec<u32>,
}

impl EvalReport {
    pub fn shares(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.share).collect()
    }
}

fn build_report(prefix: usize, seqs: &[&[u32]], routes: Vec<u32>, nll: &[f64], experts: usize) -> EvalReport {
    let n = seqs.len();
    let mut seg_nll = vec![0.0f64; experts];
    let mut seg_tokens = vec![0u64; experts];
    let mut seg_count = vec![0usize; experts];
    for ((&r, q), &l) in routes.iter().zip(seqs).zip(nll) {
        seg_nll[r as usize] += l;
        seg_tokens[r as usize] += q.len() as u64 - 1;
        seg_count[r as usize] += 1;
    }
    let tokens: u64 = seg_tokens.iter().sum();
    let segments = (0..experts)
        .map(|e| SegmentReport {
            expert: e,
            sequences: seg_count[e],
            tokens: seg_tokens[e],
            share: seg_count[e] as f64 / n as f64,
            perplexity: (seg_tokens[e] > 0).then(|| (seg_nll[e] / seg_tokens[e] as f64).exp()),
            dense_perplexity: None,
        })
        .collect();
    EvalReport { prefix, perplexity: (nll.iter().sum::<f64>() / tokens as f64).exp(), tokens, segments, routes }
}

fn check_inputs(ensemble: &RouterEnsemble, experts: &[ModelParams<f32>], seqs: &[&[u32]]) -> Result<()> {
    if experts.len() != ensemble.len() {
        return Err(Error::invalid(format!("{} experts for {} routers", experts.len(), ensemble.len())));
    }
    if seqs.is_empty() || predicted_tokens(seqs) == 0 {
        return Err(Error::invalid("no test sequences to evaluate"));
    }
    Ok(())
}

/// Routes each sequence by its `m`-token prefix with no capacity limits and
/// scores the whole sequence under the chosen expert.
pub fn mixture_perplexity(
    ensemble: &RouterEnsemble,
    experts: &[ModelParams<f32>],
    seqs: &[&[u32]],
    m: usize,
) -> Result<EvalReport> {
    check_inputs(ensemble, experts, seqs)?;
    routed_report(experts, seqs, score_matrix(ensemble, seqs, m)?.routes(), m)
}

/// Scores each sequence under the expert given by `routes`, from any router.
pub fn routed_report(experts: &[ModelParams<f32>], seqs: &[&[u32]], routes: Vec<u32>, m: usize) -> Result<EvalReport> {
    if routes.len() != seqs.len() {
        return Err(Error::invalid(format!("{} routes for {} sequences", routes.len(), seqs.len())));
    }
    if seqs.is_empty() || predicted_tokens(seqs) == 0 {
        return Err(Error::invalid("no test sequences to evaluate"));
    }
    if let Some(&r) = routes.iter().find(|&&r| r as usize >= experts.len()) {
        return Err(Error::invalid(format!("route {r} with {} experts", experts.len())));
    }
    let mut nll = vec![0.0; seqs.len()];
    for (e, expert) in experts.iter().enumerate() {
        let idx: Vec<usize> = (0..seqs.len()).filter(|&i| routes[i] as usize == e).collect();
        let group: Vec<&[u32]> = idx.iter().map(|&i| seqs[i]).collect();
        for (&i, l) in idx.iter().zip(sequence_nlls(expert, &group)?) {
            nll[i] = l;
        }
    }
    Ok(build_report(m, seqs, routes, &nll, experts.len()))
}

/// Adds the dense model's perplexity on each routed segment.
pub fn attach_dense(report: &mut EvalReport, dense: &ModelParams<f32>, seqs: &[&[u32]]) -> Result<()> {
    let nll = sequence_nlls(dense, seqs)?;
    for seg in &mut report.segments {
        let mut total = 0.0;
        for (i, &r) in report.routes.iter().enumerate() {
            if r as usize == seg.expert {
                total += nll[i];
            }
        }
        seg.dense_perplexity = (seg.tokens > 0).then(|| (total / seg.tokens as f64).exp());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub train_prefix: usize,
    pub points: Vec<(usize, f64)>,
    pub reports: Vec<EvalReport>,
}

impl SweepReport {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["train_prefix", "prefix", "ppl"]).map_err(csv_err)?;
        for &(m, ppl) in &self.points {
            out.write_record([self.train_prefix.to_string(), m.to_string(), format!("{ppl:.6}")]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One mixture evaluation per inference prefix length. Expert likelihoods are
/// computed once and reused across prefixes.
pub fn prefix_sweep(
    ensemble: &RouterEnsemble,
    experts: &[ModelParams<f32>],
    seqs: &[&[u32]],
    prefixes: &[usize],
    train_prefix: usize,
) -> Result<SweepReport> {
    check_inputs(ensemble, experts, seqs)?;
    if prefixes.is_empty() {
        return Err(Error::invalid("no prefix lengths given"));
    }
    if prefixes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("prefix lengths must be strictly increasing"));
    }
    let table: Vec<Vec<f64>> = experts.iter().map(|p| sequence_nlls(p, seqs)).collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(prefixes.len());
    let mut reports = Vec::with_capacity(prefixes.len());
    for &m in prefixes {
        let routes = score_matrix(ensemble, seqs, m)?.routes();
        let nll: Vec<f64> = routes.iter().enumerate().map(|(i, &r)| table[r as usize][i]).collect();
        let report = build_report(m, seqs, routes, &nll, experts.len());
        points.push((m, report.perplexity));
        reports.push(report);
    }
    Ok(SweepReport { train_prefix, points, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn model(seed: u64) -> ModelParams<f32> {
        ModelParams::init(ModelConfig::new(1, 8, 2, 17, 6), seed).unwrap()
    }

    fn seqs() -> Vec<Vec<u32>> {
        (0..9).map(|i| (0..6).map(|t| (i * 7 + t * 3) % 17).collect()).collect()
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let p = ModelParams::<f32>::zeros(ModelConfig::new(1, 8, 2, 17, 6)).unwrap();
        let s = seqs();
        let refs: Vec<&[u32]> = s.iter().map(|v| v.as_slice()).collect();
        assert!((perplexity(&p, &refs).unwrap() - 17.0).abs() < 1e-5);
        assert!(perplexity(&p, &[]).is_err());
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let s = seqs();
        let refs: Vec<&[u32]> = s.iter().map(|v| v.as_slice()).collect();
        let ens = RouterEnsemble::from_routers(vec![model(1), model(2), model(3)], 3).unwrap();
        let expert = model(7);
        let r = mixture_perplexity(&ens, &[expert.clone(), expert.clone(), expert.clone()], &refs, 3).unwrap();
        assert_eq!(r.perplexity, perplexity(&expert, &refs).unwrap());
        assert!((r.shares().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(r.segments.iter().map(|s| s.tokens).sum::<u64>(), 9 * 5);
        assert!(mixture_perplexity(&ens, &[expert], &refs, 3).is_err());
    }

    #[test]
    fn sweep_validates_and_matches_single_eval() {
        let s = seqs();
        let refs: Vec<&[u32]> = s.iter().map(|v| v.as_slice()).collect();
        let ens = RouterEnsemble::from_routers(vec![model(1), model(2)], 4).unwrap();
        let experts = [model(5), model(6)];
        let sweep = prefix_sweep(&ens, &experts, &refs, &[4], 4).unwrap();
        let single = mixture_perplexity(&ens, &experts, &refs, 4).unwrap();
        assert_eq!(sweep.points[0].1, single.perplexity);
        assert!(prefix_sweep(&ens, &experts, &refs, &[4, 4], 4).is_err());
        assert!(prefix_sweep(&ens, &experts, &refs, &[5, 3], 4).is_err());
    }
}
