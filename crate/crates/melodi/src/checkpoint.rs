//! Binary checkpoint archive: named tensor records plus the resolved config
//! text and its hash, so a checkpoint is self-describing and a mismatched
//! config is caught at load time.
//!
//! Records are stored either as f32 (compact, the default for final model
//! snapshots) or f64 (exact, used for resumable training state).

use crate::config::fnv1a;
use crate::error::{MelodiError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MLDC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: Dtype,
}

impl Record {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Record {
        Record { name: name.into(), shape, data, dtype: Dtype::F64 }
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Record {
        Record { name: name.into(), shape, data, dtype: Dtype::F32 }
    }
}

pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }
}

fn bad(m: impl Into<String>) -> MelodiError {
    MelodiError::Checkpoint(m.into())
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = ckpt.config_text.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&fnv1a(cfg).to_le_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    w.write_all(&(ckpt.records.len() as u64).to_le_bytes())?;
    for r in &ckpt.records {
        let expect: usize = r.shape.iter().product();
        if expect != r.data.len() {
            return Err(bad(format!(
                "record `{}`: shape {:?} holds {expect} values but data has {}",
                r.name,
                r.shape,
                r.data.len()
            )));
        }
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[match r.dtype {
            Dtype::F32 => 0u8,
            Dtype::F64 => 1u8,
        }])?;
        w.write_all(&(r.shape.len() as u64).to_le_bytes())?;
        for &d in &r.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match r.dtype {
            Dtype::F32 => {
                for &v in &r.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in &r.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let stored_hash = read_u64(&mut r)?;
    if stored_hash != fnv1a(&cfg) {
        return Err(bad("config hash mismatch (corrupt checkpoint)"));
    }
    let config_text =
        String::from_utf8(cfg).map_err(|_| bad("config text is not valid UTF-8"))?;
    let step = read_u64(&mut r)?;
    let n_records = read_u64(&mut r)? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("record name not UTF-8"))?;
        let mut dt = [0u8; 1];
        r.read_exact(&mut dt)?;
        let dtype = match dt[0] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(bad(format!("record `{name}`: unknown dtype {other}"))),
        };
        let ndims = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        match dtype {
            Dtype::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..len {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            Dtype::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..len {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
        }
        records.push(Record { name, shape, data, dtype });
    }
    Ok(Checkpoint { config_text, step, records })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
