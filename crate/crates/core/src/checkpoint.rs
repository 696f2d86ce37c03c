//! Binary checkpoint format (`.moec`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MOEC"                      magic
//! u32                         format version
//! u32 + bytes                 UTF-8 JSON model config
//! u32                         tensor count
//! per tensor:
//!   u16 + bytes               UTF-8 name
//!   u8                        rank
//!   u32 × rank                dims
//!   f64 × Π dims              row-major payload
//! ```
//!
//! Tensors are written in [`MoeModel::param_ids`] order. Expert counts per
//! layer are recovered from the router shapes, so pruned and merged students
//! round-trip without extra metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Expert, ModelConfig, MoeLayer, MoeModel, ParamId, Router};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MOEC";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &MoeModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let ids = model.param_ids();
    let mut out = Vec::with_capacity(16 + config.len() + model.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(config.len())?.to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&u32_len(ids.len())?.to_le_bytes());
    for id in ids {
        let name = id.to_string();
        let m = model
            .param(id)
            .ok_or_else(|| Error::Internal(format!("missing tensor {name}")))?;
        let name_len = u16::try_from(name.len()).map_err(|_| Error::format("tensor name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&u32_len(m.rows())?.to_le_bytes());
        out.extend_from_slice(&u32_len(m.cols())?.to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(format!("length {n} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<MoeModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("bad magic bytes"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| Error::format(format!("config JSON: {e}")))?;
    config.validate().map_err(|e| Error::format(format!("config: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<ParamId, Matrix> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let id = ParamId::parse(name).ok_or_else(|| Error::format(format!("unknown tensor {name}")))?;
        let rank = r.u8("tensor rank")?;
        if rank != 2 {
            return Err(Error::format(format!("tensor {name} has rank {rank}, expected 2")));
        }
        let rows = r.u32("dims")? as usize;
        let cols = r.u32("dims")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(format!("tensor {name} too large")))?;
        let payload = r.take(n, name)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("tensor {name} contains non-finite values")));
        }
        if tensors.insert(id, Matrix::from_vec(rows, cols, data)?).is_some() {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::format("trailing bytes after tensor table"));
    }

    let mut take = |id: ParamId| {
        tensors
            .remove(&id)
            .ok_or_else(|| Error::format(format!("missing tensor {id}")))
    };
    let embedding = take(ParamId::Embedding)?;
    let output_head = take(ParamId::OutputHead)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let router = take(ParamId::Router { layer })?;
        let experts = (0..router.rows())
            .map(|expert| {
                Ok(Expert {
                    w_in: take(ParamId::ExpertIn { layer, expert })?,
                    w_out: take(ParamId::ExpertOut { layer, expert })?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(MoeLayer {
            router: Router { w: router },
            experts,
        });
    }
    if let Some(id) = tensors.keys().next() {
        return Err(Error::format(format!("unexpected tensor {id}")));
    }
    let model = MoeModel {
        config,
        embedding,
        layers,
        output_head,
    };
    model
        .validate()
        .map_err(|e| Error::format(format!("inconsistent checkpoint: {e}")))?;
    Ok(model)
}

pub fn save(model: &MoeModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MoeModel> {
    from_bytes(&fs::read(path)?)
}
