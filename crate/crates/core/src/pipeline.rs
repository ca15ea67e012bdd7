//! End-to-end experiments over a run directory:
//!
//! ```text
//! data/{train,test}.pmix, data/labels.json
//! routers/round_<i>/router_<e>.pmck, routers/diagnostics.json
//! shards/shard_<e>.idx, shards/confusion.json
//! experts/expert_<e>.pmck
//! dense/dense.pmck
//! curves/<model>.csv, metrics.csv, ledger.json, eval.csv, eval.json
//! ```
//!
//! Every phase reads what earlier phases wrote, so phases can run as separate
//! processes. `variants/<name>/` holds alternative routers that share the
//! parent's data and dense baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{read_packed, synth_corpus, write_packed, ChunkCursor, Dataset, DomainSpec};
use crate::error::{Error, Result};
use crate::eval::{attach_dense, csv_err, perplexity, prefix_sweep, routed_report, EvalReport, SweepReport};
use crate::lm::{read_checkpoint, write_checkpoint, CurvePoint, ModelParams};
use crate::mixture::{ledger_report, shard_dataset, train_on_indices, CommEvent, CommKind, CommReport, ExpertTrainConfig, Shard};
use crate::routing::{
    balanced_capacities, normalized_mutual_information, train_routers, RouterEnsemble, RouterTrainConfig,
};
use crate::tfidf::TfidfRouter;

/// Paths of one run. A variant directory reads data and the dense model from its parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
    shared: Option<PathBuf>,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), shared: None }
    }

    pub fn variant(&self, name: &str) -> Self {
        Self { root: self.root.join("variants").join(name), shared: Some(self.base().to_path_buf()) }
    }

    fn base(&self) -> &Path {
        self.shared.as_deref().unwrap_or(&self.root)
    }

    pub fn train_data(&self) -> PathBuf {
        self.base().join("data/train.pmix")
    }
    pub fn test_data(&self) -> PathBuf {
        self.base().join("data/test.pmix")
    }
    pub fn labels(&self) -> PathBuf {
        self.base().join("data/labels.json")
    }
    pub fn dense(&self) -> PathBuf {
        self.base().join("dense/dense.pmck")
    }
    pub fn router_round(&self, round: usize) -> PathBuf {
        self.root.join(format!("routers/round_{round}"))
    }
    pub fn router_diagnostics(&self) -> PathBuf {
        self.root.join("routers/diagnostics.json")
    }
    pub fn tfidf(&self) -> PathBuf {
        self.root.join("routers/tfidf.ptfi")
    }
    pub fn shard(&self, e: usize) -> PathBuf {
        self.root.join(format!("shards/shard_{e}.idx"))
    }
    pub fn confusion(&self) -> PathBuf {
        self.root.join("shards/confusion.json")
    }
    pub fn expert(&self, e: usize) -> PathBuf {
        self.root.join(format!("experts/expert_{e}.pmck"))
    }
    pub fn curve(&self, model: &str) -> PathBuf {
        self.root.join(format!("curves/{model}.csv"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.json")
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.root.join("eval.csv")
    }
    pub fn eval_json(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn refs(data: &Dataset) -> Vec<&[u32]> {
    data.sequences.iter().map(|s| s.ids.as_slice()).collect()
}

/// Training and test corpora with their hidden domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub train_labels: Vec<u32>,
    pub test_labels: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct Labels {
    train: Vec<u32>,
    test: Vec<u32>,
}

/// Generates both corpora from one domain specification; the test split uses
/// its own sampling seed.
pub fn synth_split(cfg: &ExperimentConfig) -> Result<CorpusSplit> {
    let spec = DomainSpec::standard(cfg.domains, cfg.corpus_seed)?;
    let train = synth_corpus(&spec, cfg.train_sequences, cfg.seq_len, cfg.corpus_seed)?;
    let test = synth_corpus(&spec, cfg.test_sequences, cfg.seq_len, cfg.test_seed)?;
    Ok(CorpusSplit { train: train.dataset, test: test.dataset, train_labels: train.labels, test_labels: test.labels })
}

pub fn prepare_data(cfg: &ExperimentConfig, dir: &RunDir) -> Result<CorpusSplit> {
    let split = synth_split(cfg)?;
    ensure_parent(&dir.train_data())?;
    write_packed(&dir.train_data(), &split.train)?;
    write_packed(&dir.test_data(), &split.test)?;
    write_json(&dir.labels(), &Labels { train: split.train_labels.clone(), test: split.test_labels.clone() })?;
    Ok(split)
}

pub fn load_data(dir: &RunDir) -> Result<CorpusSplit> {
    let labels: Labels = read_json(&dir.labels())?;
    Ok(CorpusSplit {
        train: read_packed(&dir.train_data())?,
        test: read_packed(&dir.test_data())?,
        train_labels: labels.train,
        test_labels: labels.test,
    })
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "loss", "lr"]).map_err(csv_err)?;
    for p in curve {
        w.write_record([p.step.to_string(), p.loss.to_string(), p.lr.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Concatenates every per-model curve into `metrics.csv` in a fixed order:
/// routers, experts, dense.
pub fn rebuild_metrics(dir: &RunDir, experts: usize) -> Result<()> {
    let mut names: Vec<String> = (0..experts).map(|e| format!("router_{e}")).collect();
    names.extend((0..experts).map(|e| format!("expert_{e}")));
    names.push("dense".into());
    let mut out = csv::Writer::from_path(dir.metrics()).map_err(csv_err)?;
    out.write_record(["model", "step", "loss", "lr"]).map_err(csv_err)?;
    for name in names {
        let path = if name == "dense" { dir.base().join("curves/dense.csv") } else { dir.curve(&name) };
        if !path.exists() {
            continue;
        }
        let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            out.write_record([name.as_str(), &rec[0], &rec[1], &rec[2]]).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Replaces all ledger events of `kind` with `events`.
fn update_ledger(dir: &RunDir, kind: CommKind, events: &[CommEvent]) -> Result<CommReport> {
    let mut log: Vec<CommEvent> =
        if dir.ledger().exists() { read_json::<CommReport>(&dir.ledger())?.log } else { Vec::new() };
    log.retain(|e| e.kind != kind);
    log.extend_from_slice(events);
    log.sort_by_key(|e| (e.kind, e.index));
    let report = ledger_report(&log);
    write_json(&dir.ledger(), &report)?;
    Ok(report)
}

/// Router-shape override used by comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterShape {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub router_loss: Vec<f64>,
    pub routing_entropy: f64,
    /// Agreement between the partition trained on this round and the hidden domains.
    pub trained_nmi: f64,
    /// Agreement of the balanced assignment of the freshly scored chunk.
    pub scored_nmi: f64,
    pub comm_bytes_per_node: u64,
}

pub fn router_train_config(cfg: &ExperimentConfig) -> RouterTrainConfig {
    RouterTrainConfig {
        rounds: cfg.router_rounds,
        chunk: cfg.router_chunk,
        steps: cfg.router_steps,
        batch: cfg.router_batch,
        schedule: cfg.router_schedule(),
        seed: cfg.router_seed,
    }
}

/// Runs the alternating router training, checkpointing every round.
pub fn run_train_routers(cfg: &ExperimentConfig, dir: &RunDir, split: &CorpusSplit) -> Result<(RouterEnsemble, Vec<RoundSummary>)> {
    let mut ensemble = RouterEnsemble::new(cfg.router_model(), cfg.experts, cfg.prefix, cfg.router_seed)?;
    let mut cursor = ChunkCursor::new(split.train.len(), cfg.chunk_order(), true);
    let labels_of = |idx: &[usize]| idx.iter().map(|&i| split.train_labels[i]).collect::<Vec<u32>>();
    let mut summaries = Vec::new();
    let reports = train_routers(&split.train, &mut cursor, &mut ensemble, &router_train_config(cfg), |r, ens| {
        ens.save(&dir.router_round(r.round))?;
        let s = RoundSummary {
            round: r.round,
            router_loss: r.router_loss.clone(),
            routing_entropy: r.routing_entropy,
            trained_nmi: normalized_mutual_information(&r.trained_assignment.assignment, &labels_of(&r.trained_chunk))?,
            scored_nmi: normalized_mutual_information(&r.scored_assignment.assignment, &labels_of(&r.scored_chunk))?,
            comm_bytes_per_node: r.comm.bytes_per_node,
        };
        log::info!(
            "router round {}: loss {:?} entropy {:.4} nmi {:.3}",
            s.round,
            s.router_loss.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>(),
            s.routing_entropy,
            s.scored_nmi
        );
        summaries.push(s);
        Ok(())
    })?;
    for e in 0..cfg.experts {
        let curve: Vec<CurvePoint> = reports.iter().flat_map(|r| r.curves[e].iter().copied()).collect();
        write_curve(&dir.curve(&format!("router_{e}")), &curve)?;
    }
    write_json(&dir.router_diagnostics(), &summaries)?;
    let events: Vec<CommEvent> = reports.iter().map(|r| r.comm).collect();
    update_ledger(dir, CommKind::RouterScoreExchange, &events)?;
    rebuild_metrics(dir, cfg.experts)?;
    Ok((ensemble, summaries))
}

pub fn load_routers(cfg: &ExperimentConfig, dir: &RunDir) -> Result<RouterEnsemble> {
    RouterEnsemble::load(&dir.router_round(cfg.router_rounds - 1), cfg.experts, cfg.prefix)
}

/// `matrix[e][d]`: sequences of domain `d` in shard `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(groups: &[Vec<usize>], labels: &[u32], domains: usize) -> Self {
        let matrix = groups
            .iter()
            .map(|g| {
                let mut row = vec![0; domains];
                for &i in g {
                    row[labels[i] as usize] += 1;
                }
                row
            })
            .collect();
        Self { matrix }
    }

    /// Majority domain of every shard (lowest domain on ties).
    pub fn majorities(&self) -> Vec<usize> {
        self.matrix.iter().map(|row| (0..row.len()).fold(0, |b, d| if row[d] > row[b] { d } else { b })).collect()
    }

    /// Every shard has a strict majority domain and no two shards share one.
    pub fn diagonally_dominant(&self) -> bool {
        let maj = self.majorities();
        let mut seen = std::collections::BTreeSet::new();
        self.matrix.iter().zip(&maj).all(|(row, &m)| {
            let strict = row.iter().enumerate().all(|(d, &c)| d == m || c < row[m]);
            strict && seen.insert(m)
        })
    }
}

fn save_shards(dir: &RunDir, shards: &[Shard], events: &[CommEvent], labels: &[u32], domains: usize) -> Result<Confusion> {
    for s in shards {
        ensure_parent(&dir.shard(s.expert))?;
        s.write(&dir.shard(s.expert))?;
    }
    let groups: Vec<Vec<usize>> = shards.iter().map(|s| s.indices.clone()).collect();
    let confusion = Confusion::new(&groups, labels, domains);
    write_json(&dir.confusion(), &confusion)?;
    update_ledger(dir, CommKind::ExpertShardDistribution, events)?;
    Ok(confusion)
}

/// Scores and balances the whole training set with the final routers.
pub fn run_shard(cfg: &ExperimentConfig, dir: &RunDir, split: &CorpusSplit, ensemble: &RouterEnsemble) -> Result<(Vec<Shard>, Confusion)> {
    let caps = balanced_capacities(split.train.len(), cfg.experts)?;
    let (shards, event) = shard_dataset(ensemble, &split.train, &caps)?;
    let confusion = save_shards(dir, &shards, &[event], &split.train_labels, cfg.domains)?;
    log::info!("shards {:?}, confusion {:?}", shards.iter().map(|s| s.len()).collect::<Vec<_>>(), confusion.matrix);
    Ok((shards, confusion))
}

pub fn load_shards(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Vec<Shard>> {
    (0..cfg.experts).map(|e| Shard::read(&dir.shard(e))).collect()
}

pub fn expert_train_config(cfg: &ExperimentConfig) -> ExpertTrainConfig {
    ExpertTrainConfig {
        steps: cfg.expert_steps,
        batch: cfg.expert_batch,
        schedule: cfg.expert_schedule(cfg.expert_steps as u64),
        seed: cfg.expert_seed,
    }
}

pub fn dense_train_config(cfg: &ExperimentConfig) -> ExpertTrainConfig {
    let steps = cfg.dense_steps();
    ExpertTrainConfig { steps, batch: cfg.expert_batch, schedule: cfg.expert_schedule(steps as u64), seed: cfg.dense_seed }
}

fn progress(name: String, every: usize, total: usize) -> impl FnMut(&CurvePoint) {
    let mut recent = 0.0;
    let mut window = 0usize;
    let mut n = 0usize;
    move |p| {
        recent += p.loss;
        window += 1;
        n += 1;
        if every > 0 && (n % every == 0 || n == total) {
            log::info!("{name} step {n}/{total}: loss {:.4} lr {:.2e}", recent / window as f64, p.lr);
            recent = 0.0;
            window = 0;
        }
    }
}

pub fn run_train_expert(cfg: &ExperimentConfig, dir: &RunDir, split: &CorpusSplit, shard: &Shard) -> Result<ModelParams<f32>> {
    let tc = expert_train_config(cfg);
    let name = format!("expert_{}", shard.expert);
    let (params, curve) =
        train_on_indices(&shard.indices, &split.train, cfg.expert_model(), &tc, progress(name.clone(), cfg.log_every, tc.steps))?;
    ensure_parent(&dir.expert(shard.expert))?;
    write_checkpoint(&dir.expert(shard.expert), &params)?;
    write_curve(&dir.curve(&name), &curve)?;
    Ok(params)
}

/// Trains every expert, up to `cfg.workers` at a time. Experts share nothing,
/// so the result does not depend on scheduling.
pub fn run_train_all_experts(cfg: &ExperimentConfig, dir: &RunDir, split: &CorpusSplit, shards: &[Shard]) -> Result<Vec<ModelParams<f32>>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ModelParams<f32>>>>> = Mutex::new((0..shards.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(shards.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= shards.len() {
                    break;
                }
                let r = run_train_expert(cfg, dir, split, &shards[i]);
                results.lock().expect("result slot")[i] = Some(r);
            });
        }
    });
    let experts = results
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every expert ran"))
        .collect::<Result<Vec<_>>>()?;
    rebuild_metrics(dir, cfg.experts)?;
    Ok(experts)
}

pub fn load_experts(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Vec<ModelParams<f32>>> {
    (0..cfg.experts).map(|e| read_checkpoint(&dir.expert(e))).collect()
}

pub fn run_train_dense(cfg: &ExperimentConfig, dir: &RunDir, split: &CorpusSplit) -> Result<ModelParams<f32>> {
    let tc = dense_train_config(cfg);
    let all: Vec<usize> = (0..split.train.len()).collect();
    let (params, curve) = train_on_indices(&all, &split.train, cfg.expert_model(), &tc, progress("dense".into(), cfg.log_every, tc.steps))?;
    ensure_parent(&dir.dense())?;
    write_checkpoint(&dir.dense(), &params)?;
    write_curve(&dir.base().join("curves/dense.csv"), &curve)?;
    rebuild_metrics(dir, cfg.experts)?;
    Ok(params)
}

/// Everything the evaluation phase reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: String,
    pub dense_perplexity: f64,
    pub mixture: EvalReport,
    pub sweep: SweepReport,
    /// Routed test sequences per expert against hidden domains.
    pub test_confusion: Confusion,
}

impl EvalSummary {
    pub fn gap(&self) -> f64 {
        self.dense_perplexity - self.mixture.perplexity
    }
}

fn write_eval(dir: &RunDir, summary: &EvalSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.eval_csv()).map_err(csv_err)?;
    w.write_record(["variant", "prefix", "ppl", "shares"]).map_err(csv_err)?;
    let shares = |r: &EvalReport| r.shares().iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>().join(";");
    w.write_record(["dense", "", &format!("{:.6}", summary.dense_perplexity), "1.000000"]).map_err(csv_err)?;
    for r in &summary.sweep.reports {
        w.write_record([summary.variant.as_str(), &r.prefix.to_string(), &format!("{:.6}", r.perplexity), &shares(r)]).map_err(csv_err)?;
    }
    w.flush()?;
    write_json(&dir.eval_json(), summary)
}

fn sweep_prefixes(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut p = cfg.eval_prefixes.clone();
    p.push(cfg.prefix);
    p.sort_unstable();
    p.dedup();
    p
}

/// Held-out evaluation of the LM-routed mixture against the dense baseline.
pub fn run_eval(cfg: &ExperimentConfig, dir: &RunDir, split: &CorpusSplit, variant: &str) -> Result<EvalSummary> {
    let ensemble = load_routers(cfg, dir)?;
    let experts = load_experts(cfg, dir)?;
    let dense = read_checkpoint(&dir.dense())?;
    let test = refs(&split.test);
    let sweep = prefix_sweep(&ensemble, &experts, &test, &sweep_prefixes(cfg), cfg.prefix)?;
    let mut mixture = sweep.reports.iter().find(|r| r.prefix == cfg.prefix).expect("training prefix in sweep").clone();
    attach_dense(&mut mixture, &dense, &test)?;
    let summary = finish_eval(cfg, variant, perplexity(&dense, &test)?, mixture, sweep, &split.test_labels);
    write_eval(dir, &summary)?;
    log::info!("eval {variant}: dense {:.4} mixture {:.4}", summary.dense_perplexity, summary.mixture.perplexity);
    Ok(summary)
}

fn finish_eval(cfg: &ExperimentConfig, variant: &str, dense: f64, mixture: EvalReport, sweep: SweepReport, labels: &[u32]) -> EvalSummary {
    let mut groups = vec![Vec::new(); cfg.experts];
    for (i, &r) in mixture.routes.iter().enumerate() {
        groups[r as usize].push(i);
    }
    let test_confusion = Confusion::new(&groups, labels, cfg.domains);
    EvalSummary { variant: variant.to_string(), dense_perplexity: dense, mixture, sweep, test_confusion }
}

/// Whole pipeline: data, routers, shards, experts, dense, evaluation.
pub fn run_all(cfg: &ExperimentConfig, dir: &RunDir) -> Result<EvalSummary> {
    fs::create_dir_all(&dir.root)?;
    let split = prepare_data(cfg, dir)?;
    let (ensemble, _) = run_train_routers(cfg, dir, &split)?;
    let (shards, _) = run_shard(cfg, dir, &split, &ensemble)?;
    run_train_all_experts(cfg, dir, &split, &shards)?;
    run_train_dense(cfg, dir, &split)?;
    run_eval(cfg, dir, &split, "lm")
}

/// One router design in a comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouterVariant {
    Lm(RouterShape),
    Tfidf { components: usize },
}

impl RouterVariant {
    /// `lm:<layers>x<hidden>x<heads>` or `tfidf:<components>`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("router variant {text:?}: expected lm:LxHxA or tfidf:K"));
        let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
        match kind {
            "lm" => {
                let v: Vec<usize> = rest.split('x').map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                match v[..] {
                    [layers, hidden, heads] => Ok(Self::Lm(RouterShape { layers, hidden, heads })),
                    _ => Err(bad()),
                }
            }
            "tfidf" => Ok(Self::Tfidf { components: rest.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Lm(s) => format!("lm-{}x{}x{}", s.layers, s.hidden, s.heads),
            Self::Tfidf { components } => format!("tfidf-{components}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub perplexity: f64,
    pub dense_perplexity: f64,
    pub shares: Vec<f64>,
}

/// Routers, shards, experts and evaluation for one variant inside `base`,
/// whose data and dense baseline must already exist.
pub fn run_variant(cfg: &ExperimentConfig, base: &RunDir, split: &CorpusSplit, variant: &RouterVariant) -> Result<EvalSummary> {
    let dir = base.variant(&variant.name());
    fs::create_dir_all(&dir.root)?;
    match variant {
        RouterVariant::Lm(shape) => {
            let mut vcfg = cfg.clone();
            vcfg.router_layers = shape.layers;
            vcfg.router_hidden = shape.hidden;
            vcfg.router_heads = shape.heads;
            vcfg.validate()?;
            let (ensemble, _) = run_train_routers(&vcfg, &dir, split)?;
            let (shards, _) = run_shard(&vcfg, &dir, split, &ensemble)?;
            run_train_all_experts(&vcfg, &dir, split, &shards)?;
            run_eval(&vcfg, &dir, split, &variant.name())
        }
        RouterVariant::Tfidf { components } => {
            let train = refs(&split.train);
            let (router, table) =
                TfidfRouter::fit(&train, split.train.vocab, cfg.experts, cfg.prefix, *components, cfg.router_seed)?;
            ensure_parent(&dir.tfidf())?;
            router.save(&dir.tfidf())?;
            let shards: Vec<Shard> = table
                .members()
                .into_iter()
                .enumerate()
                .map(|(expert, indices)| Shard { expert, tokens: (indices.len() * split.train.seq_len) as u64, indices })
                .collect();
            save_shards(&dir, &shards, &[], &split.train_labels, cfg.domains)?;
            let experts = run_train_all_experts(cfg, &dir, split, &shards)?;
            let dense = read_checkpoint(&dir.dense())?;
            let test = refs(&split.test);
            let mut reports = Vec::new();
            for m in sweep_prefixes(cfg) {
                let routes: Vec<u32> = test.iter().map(|s| router.route(s, m) as u32).collect();
                reports.push(routed_report(&experts, &test, routes, m)?);
            }
            let mut mixture = reports.iter().find(|r| r.prefix == cfg.prefix).expect("training prefix").clone();
            attach_dense(&mut mixture, &dense, &test)?;
            let sweep = SweepReport { train_prefix: cfg.prefix, points: reports.iter().map(|r| (r.prefix, r.perplexity)).collect(), reports };
            let summary = finish_eval(cfg, &variant.name(), perplexity(&dense, &test)?, mixture, sweep, &split.test_labels);
            write_eval(&dir, &summary)?;
            Ok(summary)
        }
    }
}

/// Final perplexity of every variant under shared data, seeds and budgets.
pub fn compare_routers(cfg: &ExperimentConfig, base: &RunDir, split: &CorpusSplit, variants: &[RouterVariant]) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let s = run_variant(cfg, base, split, v)?;
        rows.push(ComparisonRow {
            variant: v.name(),
            perplexity: s.mixture.perplexity,
            dense_perplexity: s.dense_perplexity,
            shares: s.mixture.shares(),
        });
    }
    let mut w = csv::Writer::from_path(base.root.join("compare.csv")).map_err(csv_err)?;
    w.write_record(["variant", "ppl", "dense_ppl", "shares"]).map_err(csv_err)?;
    for r in &rows {
        let shares = r.shares.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>().join(";");
        w.write_record([r.variant.as_str(), &format!("{:.6}", r.perplexity), &format!("{:.6}", r.dense_perplexity), &shares])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Reproduction record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    /// The config in `key=value` form; feeding it back reproduces the run.
    pub config_text: String,
    pub version: String,
    pub artifacts: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Every command run in this directory so far, oldest first, this one last.
    pub history: Vec<ManifestStep>,
}

/// One command applied to a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub command: String,
    pub args: Vec<String>,
    pub config_text: String,
}

/// Every seed that influences a run.
pub fn seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    [
        ("corpus_seed", cfg.corpus_seed),
        ("test_seed", cfg.test_seed),
        ("router_seed", cfg.router_seed),
        ("expert_seed", cfg.expert_seed),
        ("dense_seed", cfg.dense_seed),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    /// Lists every file under the run directory, sorted, and extends the
    /// command history of any earlier manifest there.
    pub fn collect(command: &str, args: &[String], cfg: &ExperimentConfig, dir: &RunDir, started_unix: u64) -> Result<Self> {
        let mut artifacts = Vec::new();
        let mut stack = vec![dir.root.clone()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p != dir.manifest() {
                    artifacts.push(p.strip_prefix(&dir.root).unwrap_or(&p).to_path_buf());
                }
            }
        }
        artifacts.sort();
        let mut history = if dir.manifest().exists() { Self::read(&dir.manifest())?.history } else { Vec::new() };
        history.push(ManifestStep { command: command.to_string(), args: args.to_vec(), config_text: cfg.to_key_values() });
        Ok(Self {
            command: command.to_string(),
            args: args.to_vec(),
            config: cfg.clone(),
            seeds: seeds(cfg),
            config_text: cfg.to_key_values(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts,
            started_unix,
            finished_unix: unix_now(),
            history,
        })
    }

    pub fn write(&self, dir: &RunDir) -> Result<()> {
        write_json(&dir.manifest(), self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Artifacts listed but missing under `root`.
    pub fn missing(&self, root: &Path) -> Vec<PathBuf> {
        self.artifacts.iter().filter(|a| !root.join(a).exists()).cloned().collect()
    }
}
