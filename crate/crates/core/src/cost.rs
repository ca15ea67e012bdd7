//! Closed-form training/inference FLOPs and communication volumes for dense
//! models and prefix-routed mixtures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::score_exchange_bytes;

/// Transformer shape and batch used for FLOPs accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: u64,
    pub hidden: u64,
    pub heads: u64,
    pub seq_len: u64,
    pub batch: u64,
    pub vocab: u64,
    pub ff: u64,
}

impl ArchSpec {
    /// Feedforward width defaults to four times the hidden size.
    pub fn new(layers: u64, hidden: u64, heads: u64, seq_len: u64, batch: u64, vocab: u64) -> Self {
        Self { layers, hidden, heads, seq_len, batch, vocab, ff: 4 * hidden }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.layers, self.hidden, self.heads, self.seq_len, self.batch, self.vocab, self.ff];
        if f.iter().any(|&v| v == 0) {
            return Err(Error::invalid(format!("every architecture field must be at least 1: {self:?}")));
        }
        Ok(())
    }

    fn with_batch(self, batch: u64) -> Self {
        Self { batch, ..self }
    }

    fn with_seq_len(self, seq_len: u64) -> Self {
        Self { seq_len, ..self }
    }
}

/// Per-component FLOPs of one forward pass plus derived totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub embedding: f64,
    /// Q, K and V projections over all layers.
    pub attention_projections: f64,
    /// `QKᵀ` and attention-weighted values over all layers.
    pub attention_scores: f64,
    pub attention_output: f64,
    pub feedforward: f64,
    /// Vocabulary projection plus softmax.
    pub output: f64,
    /// Attention plus feedforward of a single layer.
    pub per_layer: f64,
    pub forward: f64,
    pub train_step: f64,
    pub total: f64,
}

impl FlopsReport {
    pub fn component_sum(&self) -> f64 {
        self.embedding
            + self.attention_projections
            + self.attention_scores
            + self.attention_output
            + self.feedforward
            + self.output
    }
}

/// Forward-pass components. `batched` selects whether the non-embedding
/// terms scale with the batch; the embedding term always does.
fn forward_components(a: &ArchSpec, batched: bool) -> FlopsReport {
    let f = |v: u64| v as f64;
    let (l, h, s, v, d) = (f(a.layers), f(a.hidden), f(a.seq_len), f(a.vocab), f(a.ff));
    let b = f(a.batch);
    let bb = if batched { b } else { 1.0 };
    let proj = 6.0 * bb * s * h * h;
    let scores = 4.0 * bb * s * s * h;
    let out_proj = 2.0 * bb * s * h * h;
    let ffn = 4.0 * bb * s * h * d;
    let mut r = FlopsReport {
        embedding: b * s * h,
        attention_projections: l * proj,
        attention_scores: l * scores,
        attention_output: l * out_proj,
        feedforward: l * ffn,
        output: 2.0 * bb * s * h * v + 3.0 * bb * s * v,
        per_layer: proj + scores + out_proj + ffn,
        ..Default::default()
    };
    r.forward = r.component_sum();
    r
}

/// Training cost: three forward passes' worth per step, times `steps`.
pub fn dense_train_flops(arch: &ArchSpec, steps: u64) -> FlopsReport {
    let mut r = forward_components(arch, true);
    r.train_step = 3.0 * r.forward;
    r.total = r.train_step * steps as f64;
    r
}

/// Inference cost of one forward pass. The default form scales only the
/// embedding term by the batch; `strict` scales every term.
pub fn dense_inference_flops(arch: &ArchSpec, strict: bool) -> FlopsReport {
    let mut r = forward_components(arch, strict);
    r.total = r.forward;
    r
}

/// Step budgets of a paired mixture/dense experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub dense_steps: u64,
    pub expert_steps: u64,
    pub router_steps: u64,
    pub experts: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MixtureFlops {
    pub router_training: f64,
    pub router_sharding: f64,
    pub expert_training: f64,
    pub expert_sharding: f64,
    pub total: f64,
    /// Everything beyond training the experts themselves.
    pub overhead: f64,
}

/// Forward cost of one router on one `prefix`-token sequence.
fn router_prefix_forward(router: &ArchSpec, prefix: u64) -> f64 {
    if prefix == 0 {
        return 0.0;
    }
    forward_components(&router.with_batch(1).with_seq_len(prefix), true).forward
}

/// Four-part mixture training cost: router training, scoring router data,
/// expert training and scoring expert data, each for all `E` models.
/// Router batch comes from `router.batch`, expert batch from `expert.batch`.
pub fn mixture_train_flops(expert: &ArchSpec, router: &ArchSpec, prefix: u64, budget: &BudgetSpec) -> MixtureFlops {
    let e = budget.experts as f64;
    let router_training = dense_train_flops(router, budget.router_steps).total * e;
    let per_seq = router_prefix_forward(router, prefix);
    let router_sharding = (budget.router_steps * router.batch) as f64 * e * per_seq * e;
    let expert_training = dense_train_flops(expert, budget.expert_steps).total * e;
    let expert_sharding = (budget.expert_steps * expert.batch) as f64 * e * per_seq * e;
    let total = router_training + router_sharding + expert_training + expert_sharding;
    MixtureFlops { router_training, router_sharding, expert_training, expert_sharding, total, overhead: total - expert_training }
}

/// Extra inference cost of routing one sequence: `E` routers on a `prefix`-token prefix.
pub fn mixture_inference_overhead(router: &ArchSpec, prefix: u64, experts: u64) -> f64 {
    router_prefix_forward(router, prefix) * experts as f64
}

/// Inputs of the communication model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommModelInput {
    /// Training tokens per router between score exchanges.
    pub tokens_between_exchanges: u64,
    /// Message size in bytes.
    pub message_bytes: u64,
    /// Model size in parameters.
    pub model_params: u64,
    pub score_bytes: u64,
    pub gradient_bytes: u64,
}

impl Default for CommModelInput {
    fn default() -> Self {
        Self {
            tokens_between_exchanges: 45_000_000,
            message_bytes: (1 << 31) - 1,
            model_params: 1_300_000_000,
            score_bytes: 2,
            gradient_bytes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterCommReport {
    pub bytes_per_router_per_event: u64,
    pub events: u64,
    pub total_bytes_per_router: u64,
}

/// Score exchanges during router training. The event count is
/// `router_steps * S * B_r / T` rounded up, since a partial interval still
/// ends in an exchange.
pub fn router_comm(input: &CommModelInput, router_steps: u64, router_batch: u64, seq_len: u64, experts: u64) -> Result<RouterCommReport> {
    if input.tokens_between_exchanges == 0 || seq_len == 0 {
        return Err(Error::invalid("exchange interval and sequence length must be positive"));
    }
    let bytes = score_exchange_bytes(input.tokens_between_exchanges, seq_len, experts);
    let events = (router_steps * seq_len * router_batch).div_ceil(input.tokens_between_exchanges);
    Ok(RouterCommReport { bytes_per_router_per_event: bytes, events, total_bytes_per_router: bytes * events })
}

/// Bytes each node sends and receives per step under data-parallel gradient
/// all-reduce: `2 * W * gradient_bytes`.
pub fn ddp_comm(input: &CommModelInput) -> u64 {
    2 * input.model_params * input.gradient_bytes
}

/// Expert steps between shard refreshes when one `K`-byte message carries the
/// scores: `K / (2 B E)` rounded to the nearest step.
pub fn comm_interval(message_bytes: u64, batch: u64, experts: u64) -> Result<u64> {
    if batch == 0 || experts == 0 {
        return Err(Error::invalid("batch and expert count must be positive"));
    }
    Ok((message_bytes as f64 / (2 * batch * experts) as f64).round() as u64)
}

/// A Table-7-style row: one dense model and its matched mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub label: String,
    pub expert: ArchSpec,
    pub dense_batch: u64,
    pub budget: BudgetSpec,
    pub router: ArchSpec,
    pub prefix: u64,
    /// Published values: training in 1e19 FLOPs, inference in 1e12 FLOPs.
    pub reference_train: f64,
    pub reference_overhead: f64,
    pub reference_inference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostResult {
    pub label: String,
    pub dense_train: f64,
    pub mixture: MixtureFlops,
    pub inference: f64,
    pub inference_overhead: f64,
    pub train_error: f64,
    pub overhead_error: f64,
    pub inference_error: f64,
}

impl CostRow {
    pub fn evaluate(&self) -> CostResult {
        let dense = dense_train_flops(&self.expert.with_batch(self.dense_batch), self.budget.dense_steps).total;
        let mixture = mixture_train_flops(&self.expert, &self.router, self.prefix, &self.budget);
        let inference = dense_inference_flops(&self.expert.with_batch(1), false).total;
        let rel = |got: f64, want: f64| (got - want).abs() / want;
        CostResult {
            label: self.label.clone(),
            dense_train: dense,
            mixture,
            inference,
            inference_overhead: mixture_inference_overhead(&self.router, self.prefix, self.budget.experts),
            train_error: rel(dense / 1e19, self.reference_train),
            overhead_error: rel(mixture.overhead / 1e19, self.reference_overhead),
            inference_error: rel(inference / 1e12, self.reference_inference),
        }
    }
}

pub const REFERENCE_VOCAB: u64 = 32_000;
pub const REFERENCE_SEQ_LEN: u64 = 1024;

/// 24 layers, 1,024 hidden, 16 heads; expert batch 128.
pub fn arch_335m() -> ArchSpec {
    ArchSpec::new(24, 1024, 16, REFERENCE_SEQ_LEN, 128, REFERENCE_VOCAB)
}

/// 24 layers, 2,048 hidden, 16 heads; expert batch 128.
pub fn arch_1_3b() -> ArchSpec {
    ArchSpec::new(24, 2048, 16, REFERENCE_SEQ_LEN, 128, REFERENCE_VOCAB)
}

/// 12 layers, 96 hidden, 12 heads; batch 32.
pub fn arch_router_4_4m() -> ArchSpec {
    ArchSpec::new(12, 96, 12, REFERENCE_SEQ_LEN, 32, REFERENCE_VOCAB)
}

/// The seven published dense/mixture pairs.
pub fn table7_rows() -> Vec<CostRow> {
    let row = |label: &str, expert: ArchSpec, dense_batch, dense_steps, experts, expert_steps, t, o, i| CostRow {
        label: label.to_string(),
        expert,
        dense_batch,
        budget: BudgetSpec { dense_steps, expert_steps, router_steps: 128_000, experts },
        router: arch_router_4_4m(),
        prefix: 256,
        reference_train: t,
        reference_overhead: o,
        reference_inference: i,
    };
    vec![
        row("335M x4", arch_335m(), 512, 256_000, 4, 256_000, 31.02, 0.22, 0.79),
        row("335M x8", arch_335m(), 512, 512_000, 8, 256_000, 62.03, 0.75, 0.79),
        row("335M x16", arch_335m(), 512, 1_024_000, 16, 256_000, 124.06, 2.71, 0.79),
        row("335M x32", arch_335m(), 512, 2_048_000, 32, 256_000, 248.12, 10.28, 0.79),
        row("1.3B x4", arch_1_3b(), 512, 512_000, 4, 512_000, 221.33, 0.36, 2.81),
        row("1.3B x16", arch_1_3b(), 1024, 1_024_000, 16, 512_000, 885.32, 4.87, 2.81),
        row("1.3B x32", arch_1_3b(), 2048, 1_024_000, 32, 512_000, 1770.65, 18.94, 2.81),
    ]
}

/// Named presets for single dense computations: `(arch, steps)`.
pub fn preset(name: &str) -> Option<(ArchSpec, u64)> {
    match name {
        "335m-dense" => Some((arch_335m().with_batch(512), 256_000)),
        "1.3b-dense" => Some((arch_1_3b().with_batch(512), 512_000)),
        "router-4.4m" => Some((arch_router_4_4m(), 128_000)),
        _ => None,
    }
}

pub const PRESETS: [&str; 3] = ["335m-dense", "1.3b-dense", "router-4.4m"];

/// Writes the rows as CSV: label, dense training (1e19), overhead (1e19),
/// overhead percent, inference (1e12), inference overhead (1e12).
pub fn table7_csv(results: &[CostResult], w: &mut impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = crate::eval::csv_err;
    out.write_record(["model", "train_1e19", "overhead_1e19", "overhead_pct", "inference_1e12", "inference_overhead_1e12"]).map_err(err)?;
    for r in results {
        out.write_record([
            r.label.clone(),
            format!("{:.2}", r.dense_train / 1e19),
            format!("{:.2}", r.mixture.overhead / 1e19),
            format!("{:.2}", 100.0 * r.mixture.overhead / r.dense_train),
            format!("{:.2}", r.inference / 1e12),
            format!("{:.2}", r.inference_overhead / 1e12),
        ])
        .map_err(err)?;
    }
    out.flush()?;
    Ok(())
}
