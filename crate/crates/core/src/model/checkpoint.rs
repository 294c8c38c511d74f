//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `MBTCKPT\0`, version `u32`, the model configuration, the 32-byte vocab
//! fingerprint, the training step `u64`, the tensor count `u32`, then per
//! tensor its name, shape and `f32` data, and finally an optional optimizer
//! block (flag byte, Adam step, first and second moments in tensor order).

use std::path::Path;

use super::{ModelConfig, ModelParams, Tensor};
use crate::error::{Error, Result, ResultExt};
use crate::training::AdamState;

const MAGIC: &[u8; 8] = b"MBTCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_fingerprint: [u8; 32],
    pub step: u64,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.vocab_size, c.d_model, c.d_ff, c.n_layers_enc, c.n_layers_dec, c.n_heads, c.max_positions] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout_rate.to_le_bytes());
        out.extend_from_slice(&c.layer_drop_rate.to_le_bytes());
        out.extend_from_slice(&self.vocab_fingerprint);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.tensors.len() as u32).to_le_bytes());
        for t in &self.params.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &s in &t.shape {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            put_floats(&mut out, &t.data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.t.to_le_bytes());
                for moments in [&opt.m, &opt.v] {
                    for t in &moments.tensors {
                        put_floats(&mut out, &t.data);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u64()? as usize;
        }
        let dropout_rate = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let layer_drop_rate = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            d_ff: dims[2],
            n_layers_enc: dims[3],
            n_layers_dec: dims[4],
            n_heads: dims[5],
            max_positions: dims[6],
            dropout_rate,
            layer_drop_rate,
        };
        config.validate().context("checkpoint configuration")?;
        let vocab_fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let nd = r.u32()? as usize;
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(r.u64()? as usize);
            }
            let data = r.floats()?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::format(format!("tensor {name}: data does not match shape {shape:?}")));
            }
            tensors.push(Tensor { name, shape, data });
        }
        let params = ModelParams { tensors };
        params.check_config(&config).context("checkpoint tensors")?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut m = ModelParams::zeros_like(&params);
                let mut v = ModelParams::zeros_like(&params);
                for moments in [&mut m, &mut v] {
                    for t in moments.tensors.iter_mut() {
                        let data = r.floats()?;
                        if data.len() != t.data.len() {
                            return Err(Error::format(format!("optimizer moment for {} has wrong size", t.name)));
                        }
                        t.data = data;
                    }
                }
                Some(AdamState { t, m, v })
            }
            f => return Err(Error::format(format!("bad optimizer flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config,
            vocab_fingerprint,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format("checkpoint is truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.at) / 4 {
            return Err(Error::format("checkpoint is truncated"));
        }
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_opt: bool) -> Checkpoint {
        let config = ModelConfig::preset("tiny", 20).unwrap();
        let params = ModelParams::init(&config, 4).unwrap();
        let optimizer = with_opt.then(|| {
            let mut s = AdamState::new(&params);
            s.t = 17;
            s.m.tensors[0].data[3] = 0.25;
            s
        });
        Checkpoint {
            config,
            vocab_fingerprint: [7; 32],
            step: 17,
            params,
            optimizer,
        }
    }

    #[test]
    fn roundtrip_is_byte_stable() {
        for opt in [false, true] {
            let c = sample(opt);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample(true);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample(false).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
