use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::EncoderConfig;
use super::encoder::Model;
use super::optim::{AdagradConfig, LrSchedule, TrainState};
use super::params::{param_names, ModelParams};
use crate::corpus::SymbolTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
pub const CHECKPOINT_VERSION: u32 = 1;
const ACCUM_PREFIX: &str = "adagrad/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: EncoderConfig,
    symbols: SymbolTable,
    languages: Vec<String>,
    update_counter: u64,
    seed: u64,
    schedule: LrSchedule,
    optimizer: AdagradConfig,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, 2);
    put_u32(buf, t.rows as u32);
    put_u32(buf, t.cols as u32);
    for &v in &t.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Header("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Header("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(Error::Header(format!("tensor {name} has unsupported rank {rank}"))),
        };
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Header(format!("tensor {name} is too large")))?;
        let bytes = self.take(len.checked_mul(4).ok_or_else(|| Error::Header("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok((name, Tensor::from_vec(rows, cols, data)))
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let m = &state.model;
    let header = Header {
        config: m.config.clone(),
        symbols: m.symbols.clone(),
        languages: m.languages.clone(),
        update_counter: state.update_counter,
        seed: state.seed,
        schedule: state.schedule,
        optimizer: state.optimizer,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(&json);
    put_u32(&mut buf, (m.params.names().len() * 2) as u32);
    for (name, t) in m.params.iter() {
        put_tensor(&mut buf, name, t);
    }
    for (name, t) in state.accum.iter() {
        put_tensor(&mut buf, &format!("{ACCUM_PREFIX}{name}"), t);
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Header("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Header(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    header.config.validate()?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        named.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Header("trailing bytes after checkpoint tensors".into()));
    }
    let (accum, params): (Vec<_>, Vec<_>) = named.into_iter().partition(|(n, _)| n.starts_with(ACCUM_PREFIX));
    let expected = param_names(&header.config);
    let names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
    if names.iter().map(|s| s.as_str()).ne(expected.iter().map(String::as_str)) {
        return Err(Error::Header("checkpoint tensors do not match the encoder config".into()));
    }
    let params = ModelParams::from_named(params)?;
    let accum = ModelParams::from_named(
        accum
            .into_iter()
            .map(|(n, t)| (n[ACCUM_PREFIX.len()..].to_string(), t))
            .collect(),
    )?;
    let reference = super::params::init_params(&header.config, header.symbols.len(), header.languages.len(), 0)?;
    if !reference.same_shapes(&params) || !params.same_shapes(&accum) {
        return Err(Error::Header("checkpoint tensor shapes do not match the header".into()));
    }
    Ok(TrainState {
        model: Model {
            config: header.config,
            symbols: header.symbols,
            languages: header.languages,
            params,
        },
        accum,
        update_counter: header.update_counter,
        schedule: header.schedule,
        optimizer: header.optimizer,
        seed: header.seed,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(state: &TrainState) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode_checkpoint(state)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let mut cfg = EncoderConfig::new(4);
        cfg.d_model = 8;
        cfg.d_ff = 8;
        cfg.relpos_clip = 2;
        let m = Model::new(cfg, SymbolTable::build(["ab c"]), vec!["l1".into(), "l2".into()], 5).unwrap();
        let mut s = TrainState::new(m, LrSchedule::constant(0.03), 11);
        let mut g = s.model.params.zeros_like();
        for t in g.tensors_mut() {
            t.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        }
        s.optimizer_step(&g).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let bytes = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&state()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Header(_))));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
