//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "CSITADCK"
//! version  u32      = 1
//! step     u64      optimizer step counter (0 when untrained)
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), ndim u32, dims u64 × ndim,
//!          data f64 × product(dims)
//! ```
//!
//! Entry names carry a section prefix: `param/<path>` for learnable
//! parameters, `buffer/<name>` for fixed statistics, and `adam_m/<path>`,
//! `adam_v/<path>` for optimizer moments. Parameter paths are the
//! [`ModuleParams`] names, so they are stable as long as the architecture is.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::{ModuleParams, Tensor};

const MAGIC: &[u8; 8] = b"CSITADCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ModuleParams,
    pub buffers: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map_or(0, |s| s.step)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut entries: Vec<(String, &[usize], &[f64])> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push((format!("param/{name}"), t.shape(), t.data()));
        }
        for (name, t) in &self.buffers {
            entries.push((format!("buffer/{name}"), t.shape(), t.data()));
        }
        if let Some(opt) = &self.optimizer {
            for ((name, t), (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                entries.push((format!("adam_m/{name}"), t.shape(), m));
                entries.push((format!("adam_v/{name}"), t.shape(), v));
            }
        }
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.step().to_le_bytes()).map_err(io)?;
        w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, shape, data) in entries {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: &str| Error::parse(path, 0, msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let step = read_u64(&mut r, path)?;
        let count = read_u32(&mut r, path)?;
        let mut ck = Checkpoint::default();
        let mut moments: Vec<(String, bool, Vec<f64>)> = Vec::new();
        for _ in 0..count {
            let len = read_u32(&mut r, path)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
            let ndim = read_u32(&mut r, path)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r, path).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                data.push(f64::from_le_bytes(buf));
            }
            let (section, rest) = name
                .split_once('/')
                .ok_or_else(|| bad(&format!("entry `{name}` has no section prefix")))?;
            match section {
                "param" => {
                    ck.params.insert(rest, Tensor::new(shape, data)?)?;
                }
                "buffer" => ck.buffers.push((rest.to_string(), Tensor::new(shape, data)?)),
                "adam_m" => moments.push((rest.to_string(), true, data)),
                "adam_v" => moments.push((rest.to_string(), false, data)),
                other => return Err(bad(&format!("unknown section `{other}`"))),
            }
        }
        if !moments.is_empty() || step > 0 {
            let mut state = AdamState::new(&ck.params);
            state.step = step;
            for (name, is_m, data) in moments {
                let id = ck
                    .params
                    .id(&name)
                    .ok_or_else(|| bad(&format!("moment for unknown parameter `{name}`")))?;
                let slot = if is_m {
                    &mut state.m[id.index()]
                } else {
                    &mut state.v[id.index()]
                };
                if slot.len() != data.len() {
                    return Err(bad(&format!("moment size mismatch for `{name}`")));
                }
                *slot = data;
            }
            ck.optimizer = Some(state);
        }
        Ok(ck)
    }

    /// Copy stored parameter values into `target`, which must have exactly
    /// the same paths and shapes.
    pub fn restore_into(&self, target: &mut ModuleParams) -> Result<()> {
        if self.params.len() != target.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                target.len()
            )));
        }
        for (name, t) in self.params.iter() {
            let dst = target.by_name_mut(name).ok_or_else(|| {
                Error::Shape(format!("checkpoint parameter `{name}` not present in model"))
            })?;
            if dst.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}
