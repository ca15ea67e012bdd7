//! Synthetic multi-domain corpora: every domain is an order-2 character
//! Markov process over its own alphabet. Alphabets share a common core and
//! differ in a block of domain-specific characters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Dataset, TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// Printable ASCII, the pool alphabets are drawn from.
const POOL_START: u8 = 32;
const POOL_END: u8 = 127;
const SHARED_CHARS: usize = 12;
const SPECIFIC_CHARS: usize = 20;
/// Dirichlet concentration of each transition row; small values give peaked,
/// learnable successor distributions.
const ROW_CONCENTRATION: f64 = 0.12;
/// Probability mass spread uniformly so every successor stays possible.
const ROW_SMOOTHING: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub table_seed: u64,
    pub alphabet: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domains: Vec<DomainParams>,
    pub proportions: Vec<f64>,
}

impl DomainSpec {
    /// `k` domains with equal proportions; domain `d` uses the shared core
    /// plus its own block of the printable range.
    pub fn standard(k: usize, seed: u64) -> Result<Self> {
        Self::with_proportions(vec![1.0 / k.max(1) as f64; k], seed)
    }

    pub fn with_proportions(proportions: Vec<f64>, seed: u64) -> Result<Self> {
        let k = proportions.len();
        if k == 0 {
            return Err(Error::invalid("at least one domain is required"));
        }
        let pool: Vec<u8> = (POOL_START..POOL_END).collect();
        let (shared, rest) = pool.split_at(SHARED_CHARS);
        let specific = SPECIFIC_CHARS.min(rest.len() / k);
        if specific == 0 {
            return Err(Error::invalid(format!("{k} domains do not fit the printable alphabet")));
        }
        let domains = (0..k)
            .map(|d| {
                let mut alphabet = shared.to_vec();
                alphabet.extend_from_slice(&rest[d * specific..(d + 1) * specific]);
                DomainParams { table_seed: seed.wrapping_mul(1_000_003).wrapping_add(d as u64), alphabet }
            })
            .collect();
        let spec = Self { domains, proportions };
        spec.validate()?;
        Ok(spec)
    }

    pub fn k(&self) -> usize {
        self.domains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::invalid("at least one domain is required"));
        }
        if self.proportions.len() != self.domains.len() {
            return Err(Error::invalid("one proportion per domain is required"));
        }
        if self.proportions.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid("proportions must be non-negative"));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("proportions sum to {sum}, not 1")));
        }
        if self.domains.iter().any(|d| d.alphabet.len() < 2) {
            return Err(Error::invalid("every domain needs at least two characters"));
        }
        Ok(())
    }
}

/// Parameters of a synthetic corpus file (`key=value` lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub domains: usize,
    pub proportions: Vec<f64>,
    pub seed: u64,
    pub sequences: usize,
    pub seq_len: usize,
}

impl SynthConfig {
    pub fn domain_spec(&self) -> Result<DomainSpec> {
        DomainSpec::with_proportions(self.proportions.clone(), self.seed)
    }

    /// Parses `domains`, `proportions` (comma list or `uniform`), `seed`,
    /// `sequences` and `S`. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut domains = None;
        let mut proportions: Option<String> = None;
        let mut seed = 0u64;
        let mut sequences = None;
        let mut seq_len = None;
        for (key, value) in crate::config::key_values(text)? {
            let num = |v: &str| -> Result<u64> {
                v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
            };
            match key.as_str() {
                "domains" => domains = Some(num(&value)? as usize),
                "proportions" => proportions = Some(value),
                "seed" => seed = num(&value)?,
                "sequences" => sequences = Some(num(&value)? as usize),
                "S" => seq_len = Some(num(&value)? as usize),
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        let domains = domains.ok_or_else(|| Error::Config("missing key \"domains\"".into()))?;
        let proportions = match proportions.as_deref() {
            None | Some("uniform") => vec![1.0 / domains as f64; domains],
            Some(list) => list
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad proportion {p:?}"))))
                .collect::<Result<Vec<_>>>()?,
        };
        if proportions.len() != domains {
            return Err(Error::Config(format!("{} proportions for {domains} domains", proportions.len())));
        }
        Ok(Self {
            domains,
            proportions,
            seed,
            sequences: sequences.ok_or_else(|| Error::Config("missing key \"sequences\"".into()))?,
            seq_len: seq_len.ok_or_else(|| Error::Config("missing key \"S\"".into()))?,
        })
    }
}

/// A generated dataset plus the hidden domain label of every sequence.
/// Labels are for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub labels: Vec<u32>,
}

struct MarkovChain {
    alphabet: Vec<u8>,
    /// Cumulative successor distribution for every (prev2, prev1) context.
    cdf: Vec<f64>,
}

impl MarkovChain {
    fn new(params: &DomainParams) -> Self {
        let m = params.alphabet.len();
        let mut rng = ChaCha8Rng::seed_from_u64(params.table_seed);
        let gamma = Gamma::new(ROW_CONCENTRATION, 1.0).expect("valid gamma");
        let mut cdf = Vec::with_capacity(m * m * m);
        for _ in 0..m * m {
            let w: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            for x in &w {
                let p = if total > 0.0 { x / total } else { 1.0 / m as f64 };
                acc += (1.0 - ROW_SMOOTHING) * p + ROW_SMOOTHING / m as f64;
                cdf.push(acc);
            }
        }
        Self { alphabet: params.alphabet.clone(), cdf }
    }

    fn generate(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let m = self.alphabet.len();
        let mut a = rng.gen_range(0..m);
        let mut b = rng.gen_range(0..m);
        let mut out = Vec::with_capacity(len);
        out.push(self.alphabet[a] as u32);
        if len > 1 {
            out.push(self.alphabet[b] as u32);
        }
        while out.len() < len {
            let row = &self.cdf[(a * m + b) * m..(a * m + b + 1) * m];
            let u = rng.gen::<f64>() * row[m - 1];
            let c = row.partition_point(|&x| x <= u).min(m - 1);
            out.push(self.alphabet[c] as u32);
            (a, b) = (b, c);
        }
        out
    }
}

/// Generates `total` sequences of length `seq_len`, each drawn entirely from
/// one domain chosen by the mixing proportions.
pub fn synth_corpus(spec: &DomainSpec, total: usize, seq_len: usize, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    if seq_len < 2 {
        return Err(Error::invalid("sequence length must be at least 2"));
    }
    let chains: Vec<MarkovChain> = spec.domains.iter().map(MarkovChain::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cum = Vec::with_capacity(spec.k());
    let mut acc = 0.0;
    for p in &spec.proportions {
        acc += p;
        cum.push(acc);
    }
    let mut sequences = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let u = rng.gen::<f64>() * acc;
        let d = cum.partition_point(|&x| x <= u).min(spec.k() - 1);
        sequences.push(TokenSequence { ids: chains[d].generate(seq_len, &mut rng), offset: (i * seq_len) as u64 });
        labels.push(d as u32);
    }
    Ok(SynthCorpus { dataset: Dataset::new(Vocabulary::BYTES.size, seq_len, sequences)?, labels })
}
