//! `PMIX` packed dataset files: `{magic, version u32, V u32, S u32, count u64}`
//! followed by `count * S` little-endian `u32` token ids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, TokenSequence};
use crate::error::{Error, Result};
use crate::tensorfile::{expect_magic, read_u32, read_u64, write_u32, write_u64};

const MAGIC: &[u8; 4] = b"PMIX";
const VERSION: u32 = 1;

pub fn write_packed(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn read_packed(path: &Path) -> Result<Dataset> {
    decode(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn encode(w: &mut impl Write, data: &Dataset) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, data.vocab as u32)?;
    write_u32(w, data.seq_len as u32)?;
    write_u64(w, data.len() as u64)?;
    let mut buf = Vec::with_capacity(data.seq_len * 4);
    for s in &data.sequences {
        buf.clear();
        for id in &s.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn decode(r: &mut impl Read) -> Result<Dataset> {
    expect_magic(r, MAGIC)?;
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let vocab = read_u32(r)? as usize;
    let seq_len = read_u32(r)? as usize;
    let count = read_u64(r)? as usize;
    if seq_len < 2 {
        return Err(Error::Format(format!("sequence length {seq_len} below 2")));
    }
    let mut raw = vec![0u8; seq_len * 4];
    let mut sequences = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut raw)?;
        let ids = raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        sequences.push(TokenSequence { ids, offset: (i * seq_len) as u64 });
    }
    Dataset::new(vocab, seq_len, sequences).map_err(|e| Error::Format(e.to_string()))
}
