//! `key=value` configuration files and the experiment configuration they describe.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::ChunkOrder;
use crate::error::{Error, Result};
use crate::lm::{ModelConfig, ScheduleConfig};

/// Splits `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are an error.
pub fn key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), ()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Every knob of one end-to-end run: corpus, routers, experts, dense baseline
/// and evaluation. Documented key by key in `docs/config.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    // corpus
    pub domains: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub seq_len: usize,
    pub corpus_seed: u64,
    pub test_seed: u64,
    // mixture
    pub experts: usize,
    pub prefix: usize,
    // routers
    pub router_layers: usize,
    pub router_hidden: usize,
    pub router_heads: usize,
    pub router_rounds: usize,
    pub router_chunk: usize,
    pub router_steps: usize,
    pub router_batch: usize,
    pub router_lr: f64,
    pub router_warmup: u64,
    pub router_seed: u64,
    pub chunk_shuffle: bool,
    // experts and dense
    pub expert_layers: usize,
    pub expert_hidden: usize,
    pub expert_heads: usize,
    pub expert_steps: usize,
    pub expert_batch: usize,
    pub expert_lr: f64,
    pub expert_warmup: u64,
    pub expert_lr_floor: f64,
    pub expert_seed: u64,
    pub dense_seed: u64,
    // baseline router
    pub tfidf_components: usize,
    // evaluation
    pub eval_prefixes: Vec<usize>,
    pub workers: usize,
    pub log_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            train_sequences: 40_000,
            test_sequences: 2_000,
            seq_len: 128,
            corpus_seed: 1,
            test_seed: 2,
            experts: 4,
            prefix: 32,
            router_layers: 2,
            router_hidden: 16,
            router_heads: 2,
            router_rounds: 8,
            router_chunk: 1_024,
            router_steps: 40,
            router_batch: 32,
            router_lr: 1e-3,
            router_warmup: 20,
            router_seed: 3,
            chunk_shuffle: true,
            expert_layers: 2,
            expert_hidden: 64,
            expert_heads: 4,
            expert_steps: 2_441,
            expert_batch: 16,
            expert_lr: 3e-3,
            expert_warmup: 100,
            expert_lr_floor: 3e-4,
            expert_seed: 4,
            dense_seed: 4,
            tfidf_components: 64,
            eval_prefixes: vec![4, 8, 16, 32],
            workers: 1,
            log_every: 50,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override. Unknown keys are a hard error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "domains" => self.domains = parse(key, value)?,
            "train_sequences" => self.train_sequences = parse(key, value)?,
            "test_sequences" => self.test_sequences = parse(key, value)?,
            "S" | "seq_len" => self.seq_len = parse(key, value)?,
            "corpus_seed" => self.corpus_seed = parse(key, value)?,
            "test_seed" => self.test_seed = parse(key, value)?,
            "E" | "experts" => self.experts = parse(key, value)?,
            "M" | "prefix" => self.prefix = parse(key, value)?,
            "router_layers" => self.router_layers = parse(key, value)?,
            "router_hidden" => self.router_hidden = parse(key, value)?,
            "router_heads" => self.router_heads = parse(key, value)?,
            "router_rounds" => self.router_rounds = parse(key, value)?,
            "router_chunk" => self.router_chunk = parse(key, value)?,
            "router_steps" => self.router_steps = parse(key, value)?,
            "router_batch" => self.router_batch = parse(key, value)?,
            "router_lr" => self.router_lr = parse(key, value)?,
            "router_warmup" => self.router_warmup = parse(key, value)?,
            "router_seed" => self.router_seed = parse(key, value)?,
            "chunk_shuffle" => self.chunk_shuffle = parse(key, value)?,
            "expert_layers" => self.expert_layers = parse(key, value)?,
            "expert_hidden" => self.expert_hidden = parse(key, value)?,
            "expert_heads" => self.expert_heads = parse(key, value)?,
            "expert_steps" => self.expert_steps = parse(key, value)?,
            "expert_batch" => self.expert_batch = parse(key, value)?,
            "expert_lr" => self.expert_lr = parse(key, value)?,
            "expert_warmup" => self.expert_warmup = parse(key, value)?,
            "expert_lr_floor" => self.expert_lr_floor = parse(key, value)?,
            "expert_seed" => self.expert_seed = parse(key, value)?,
            "dense_seed" => self.dense_seed = parse(key, value)?,
            "tfidf_components" => self.tfidf_components = parse(key, value)?,
            "eval_prefixes" => {
                self.eval_prefixes = value
                    .split(',')
                    .map(|p| parse::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "workers" => self.workers = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.experts == 0 {
            return fail("experts must be at least 1".into());
        }
        if self.prefix < 2 || self.prefix > self.seq_len {
            return fail(format!("prefix {} outside [2, {}]", self.prefix, self.seq_len));
        }
        if self.router_rounds == 0 {
            return fail("router_rounds must be at least 1".into());
        }
        if self.router_chunk < self.experts {
            return fail(format!("router_chunk {} smaller than expert count", self.router_chunk));
        }
        if self.router_chunk > self.train_sequences {
            return fail(format!("router_chunk {} exceeds the training set", self.router_chunk));
        }
        if self.router_batch == 0 || self.expert_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.expert_steps as u64 <= self.expert_warmup && self.expert_steps > 0 {
            return fail("expert_steps must exceed expert_warmup".into());
        }
        if self.eval_prefixes.iter().any(|&m| m < 2 || m > self.seq_len) {
            return fail("every eval prefix must lie in [2, S]".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        self.router_model().validate().map_err(|e| Error::Config(format!("router model: {e}")))?;
        self.expert_model().validate().map_err(|e| Error::Config(format!("expert model: {e}")))?;
        Ok(())
    }

    pub fn router_model(&self) -> ModelConfig {
        ModelConfig::new(self.router_layers, self.router_hidden, self.router_heads, crate::corpus::Vocabulary::BYTES.size, self.seq_len)
    }

    pub fn expert_model(&self) -> ModelConfig {
        ModelConfig::new(self.expert_layers, self.expert_hidden, self.expert_heads, crate::corpus::Vocabulary::BYTES.size, self.seq_len)
    }

    pub fn router_schedule(&self) -> ScheduleConfig {
        ScheduleConfig::warmup_constant(self.router_warmup, self.router_lr)
    }

    pub fn expert_schedule(&self, steps: u64) -> ScheduleConfig {
        ScheduleConfig::warmup_cosine(self.expert_warmup, self.expert_lr, steps.max(self.expert_warmup + 1), self.expert_lr_floor)
    }

    pub fn chunk_order(&self) -> ChunkOrder {
        if self.chunk_shuffle {
            ChunkOrder::Shuffled { seed: self.router_seed }
        } else {
            ChunkOrder::Sequential
        }
    }

    /// Tokens one expert consumes; the dense baseline consumes `experts` times this.
    pub fn expert_tokens(&self) -> u64 {
        (self.expert_steps * self.expert_batch * self.seq_len) as u64
    }

    pub fn dense_steps(&self) -> usize {
        self.expert_steps * self.experts
    }

    /// `key=value` rendering that parses back to the same config.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("domains", self.domains.to_string());
        kv("train_sequences", self.train_sequences.to_string());
        kv("test_sequences", self.test_sequences.to_string());
        kv("S", self.seq_len.to_string());
        kv("corpus_seed", self.corpus_seed.to_string());
        kv("test_seed", self.test_seed.to_string());
        kv("E", self.experts.to_string());
        kv("M", self.prefix.to_string());
        kv("router_layers", self.router_layers.to_string());
        kv("router_hidden", self.router_hidden.to_string());
        kv("router_heads", self.router_heads.to_string());
        kv("router_rounds", self.router_rounds.to_string());
        kv("router_chunk", self.router_chunk.to_string());
        kv("router_steps", self.router_steps.to_string());
        kv("router_batch", self.router_batch.to_string());
        kv("router_lr", format!("{:?}", self.router_lr));
        kv("router_warmup", self.router_warmup.to_string());
        kv("router_seed", self.router_seed.to_string());
        kv("chunk_shuffle", self.chunk_shuffle.to_string());
        kv("expert_layers", self.expert_layers.to_string());
        kv("expert_hidden", self.expert_hidden.to_string());
        kv("expert_heads", self.expert_heads.to_string());
        kv("expert_steps", self.expert_steps.to_string());
        kv("expert_batch", self.expert_batch.to_string());
        kv("expert_lr", format!("{:?}", self.expert_lr));
        kv("expert_warmup", self.expert_warmup.to_string());
        kv("expert_lr_floor", format!("{:?}", self.expert_lr_floor));
        kv("expert_seed", self.expert_seed.to_string());
        kv("dense_seed", self.dense_seed.to_string());
        kv("tfidf_components", self.tfidf_components.to_string());
        kv("eval_prefixes", self.eval_prefixes.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","));
        kv("workers", self.workers.to_string());
        kv("log_every", self.log_every.to_string());
        if let Some(dir) = &self.out_dir {
            kv("out_dir", dir.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_parsing() {
        let kv = key_values("a = 1\n# comment\n\nb=x # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x".into())]);
        assert!(key_values("a=1\na=2").is_err());
        assert!(key_values("novalue").is_err());
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let err = ExperimentConfig::parse("expertz=4").unwrap_err();
        assert!(err.to_string().contains("expertz"));
    }

    #[test]
    fn rendering_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("E", "2").unwrap();
        cfg.set("router_lr", "0.00125").unwrap();
        cfg.set("out_dir", "/tmp/run").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_catches_bad_prefix() {
        assert!(ExperimentConfig::parse("M=1").is_err());
        assert!(ExperimentConfig::parse("M=129").is_err());
        assert!(ExperimentConfig::parse("E=0").is_err());
    }

    #[test]
    fn budgets_are_matched() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.dense_steps() * cfg.expert_batch * cfg.seq_len, cfg.experts * cfg.expert_tokens() as usize);
    }
}
