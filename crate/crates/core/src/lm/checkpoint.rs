//! `PMCK` checkpoints: magic, version, model config, then named tensors.
//! Optimizer state uses the same layout with a step counter after the config
//! and `first.*` / `second.*` tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::optim::OptimizerState;
use super::params::{Layout, ModelParams};
use crate::error::{Error, Result};
use crate::tensorfile::{
    expect_magic, read_f64, read_section, read_u32, read_u64, write_f64, write_section, write_u32,
    write_u64, NamedTensor,
};

const MAGIC: &[u8; 4] = b"PMCK";
const VERSION: u32 = 1;

fn write_header(w: &mut impl Write, c: &ModelConfig) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    for v in [c.layers, c.hidden, c.heads, c.ff, c.vocab, c.context] {
        write_u32(w, v as u32)?;
    }
    write_f64(w, c.rope_base)
}

fn read_header(r: &mut impl Read) -> Result<ModelConfig> {
    expect_magic(r, MAGIC)?;
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0usize; 6];
    for v in f.iter_mut() {
        *v = read_u32(r)? as usize;
    }
    let config = ModelConfig {
        layers: f[0],
        hidden: f[1],
        heads: f[2],
        ff: f[3],
        vocab: f[4],
        context: f[5],
        rope_base: read_f64(r)?,
    };
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    Ok(config)
}

fn to_tensors(layout: &Layout, data: &[f32], prefix: &str) -> Vec<NamedTensor> {
    layout
        .entries
        .iter()
        .map(|e| {
            NamedTensor::new(format!("{prefix}{}", e.name), e.shape.clone(), data[e.offset..e.offset + e.len()].to_vec())
        })
        .collect()
}

fn from_tensors(layout: &Layout, tensors: &[NamedTensor], prefix: &str) -> Result<Vec<f32>> {
    let mut data = vec![0.0f32; layout.total];
    if tensors.len() != layout.entries.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            layout.entries.len(),
            tensors.len()
        )));
    }
    for (e, t) in layout.entries.iter().zip(tensors) {
        let want = format!("{prefix}{}", e.name);
        if t.name != want || t.dims != e.shape {
            return Err(Error::Format(format!("tensor {} {:?} where {want} {:?} expected", t.name, t.dims, e.shape)));
        }
        data[e.offset..e.offset + e.len()].copy_from_slice(&t.data);
    }
    Ok(data)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &params.config)?;
    write_section(&mut w, &to_tensors(&params.layout(), &params.data, ""))?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let config = read_header(&mut r)?;
    let tensors = read_section(&mut r)?;
    let data = from_tensors(&Layout::new(&config), &tensors, "")?;
    Ok(ModelParams { config, data })
}

pub fn write_optimizer(path: &Path, config: &ModelConfig, opt: &OptimizerState<f32>) -> Result<()> {
    let layout = Layout::new(config);
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, config)?;
    write_u64(&mut w, opt.step)?;
    let mut tensors = to_tensors(&layout, &opt.first, "first.");
    tensors.extend(to_tensors(&layout, &opt.second, "second."));
    write_section(&mut w, &tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read_optimizer(path: &Path) -> Result<(ModelConfig, OptimizerState<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let config = read_header(&mut r)?;
    let step = read_u64(&mut r)?;
    let tensors = read_section(&mut r)?;
    let layout = Layout::new(&config);
    let half = tensors.len() / 2;
    if tensors.len() % 2 != 0 {
        return Err(Error::Format("optimizer file holds an odd number of tensors".into()));
    }
    let first = from_tensors(&layout, &tensors[..half], "first.")?;
    let second = from_tensors(&layout, &tensors[half..], "second.")?;
    Ok((config, OptimizerState { first, second, step }))
}
