use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use super::real::Real;
use crate::error::{Error, Result};

/// Offsets of one transformer block's tensors inside the flat parameter buffer.
#[derive(Debug, Clone, Copy)]
pub struct BlockOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrices take weight decay; normalization gains do not.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Name, shape and position of every tensor, in canonical order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub entries: Vec<TensorEntry>,
    pub embed: usize,
    pub blocks: Vec<BlockOffsets>,
    pub final_norm: usize,
    pub head: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (h, f, v) = (cfg.hidden, cfg.ff, cfg.vocab);
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            entries.push(TensorEntry { name, shape, offset });
            offset
        };
        let embed = push("tok_embed".into(), vec![v, h]);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            blocks.push(BlockOffsets {
                attn_norm: push(p("attn_norm"), vec![h]),
                wq: push(p("wq"), vec![h, h]),
                wk: push(p("wk"), vec![h, h]),
                wv: push(p("wv"), vec![h, h]),
                wo: push(p("wo"), vec![h, h]),
                ffn_norm: push(p("ffn_norm"), vec![h]),
                w_up: push(p("w_up"), vec![h, f]),
                w_down: push(p("w_down"), vec![f, h]),
            });
        }
        let final_norm = push("final_norm".into(), vec![h]);
        let head = push("lm_head".into(), vec![h, v]);
        Self { entries, embed, blocks, final_norm, head, total }
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// All weights of one decoder-only language model, stored in a single flat
/// buffer in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub data: Vec<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let total = Layout::new(&config).total;
        Ok(Self { config, data: vec![T::zero(); total] })
    }

    /// Truncated normal (±2σ) with σ = 0.02; residual output projections are
    /// further scaled by 1/√(2L). Gains start at one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let layout = params.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        for entry in &layout.entries {
            let slice = &mut params.data[entry.offset..entry.offset + entry.len()];
            if !entry.is_matrix() {
                slice.iter_mut().for_each(|v| *v = T::one());
                continue;
            }
            let std = if entry.name.ends_with(".wo") || entry.name.ends_with(".w_down") {
                INIT_STD * residual_scale
            } else {
                INIT_STD
            };
            for v in slice.iter_mut() {
                let z = loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break z;
                    }
                };
                *v = T::lit(z * std);
            }
        }
        Ok(params)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let layout = self.layout();
        let e = layout.get(name)?;
        Some(&self.data[e.offset..e.offset + e.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let layout = self.layout();
        let e = layout.get(name)?;
        let (o, n) = (e.offset, e.len());
        Some(&mut self.data[o..o + n])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            data: self.data.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let v = self.config.vocab;
        match ids.iter().find(|&&t| t as usize >= v) {
            Some(t) => Err(Error::invalid(format!("token id {t} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }
}
