//! Versioned binary checkpoints (`.mcuk`).
//!
//! ```text
//! "MCUK" | version u32le | meta_len u32le | meta (UTF-8 JSON) | count u32le | tensor*
//! tensor: name_len u16le | name | dtype u8 (1 = f64) | ndim u8 | dims u32le* | values f64le*
//! ```
//!
//! `meta` holds the model config, the optional training config, the
//! iteration, the Adam step counter and the RNG position. Tensors are the
//! model parameters under their own names, Adam moments as `adam.m/<name>`
//! and `adam.v/<name>`, and the running latent ranges as
//! `train.latent_range` when they exist.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, ParamSet};
use crate::error::{Error, Result};
use crate::model::{Codec, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: [u8; 4] = *b"MCUK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const RANGE_NAME: &str = "train.latent_range";

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub iteration: u64,
    pub params: ParamSet,
    pub adam: AdamState,
    pub rng: RngState,
    /// Running per-channel latent ranges (EMA), once training has started.
    pub latent_ranges: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: Option<TrainConfig>,
    iteration: u64,
    adam_t: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.bytes.len(),
                detail: format!("{what} at byte {} needs {n} bytes", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            adam_t: self.adam.t,
            rng_seed: self.rng.seed.iter().map(|b| format!("{b:02x}")).collect(),
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let count = 3 * self.params.len() + usize::from(self.latent_ranges.is_some());
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for p in self.params.iter() {
            put_tensor(&mut out, &p.name, &p.tensor.shape().0, p.tensor.data());
        }
        for (prefix, moments) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for (p, m) in self.params.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{}", p.name), &p.tensor.shape().0, m);
            }
        }
        if let Some(r) = &self.latent_ranges {
            put_tensor(&mut out, RANGE_NAME, &[r.len()], r);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic, expected \"MCUK\"".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        meta.model.validate()?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Corrupt(format!("tensor name at byte {at} is not UTF-8")))?
                .to_owned();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(Error::Corrupt(format!("tensor {name:?} has unknown dtype {dtype}")));
            }
            let ndim = r.u8("rank")? as usize;
            let dims = (0..ndim).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let bytes_needed = dims
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} dimensions overflow")))?;
            let raw = r.take(bytes_needed, "tensor values")?;
            let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if tensors.insert(name.clone(), (dims, values)).is_some() {
                return Err(Error::Corrupt(format!("tensor {name:?} appears twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        // Parameter names, order and shapes come from the architecture.
        let mut template_rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Codec::new(meta.model.clone(), &mut template_rng)?.params;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in params.iter_mut() {
            let mut fetch = |name: &str| -> Result<Vec<f64>> {
                let (dims, values) = tensors
                    .remove(name)
                    .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor {name:?}")))?;
                if dims != p.tensor.shape().0 {
                    return Err(Error::Corrupt(format!(
                        "tensor {name:?} has shape {dims:?}, model expects {}",
                        p.tensor.shape()
                    )));
                }
                Ok(values)
            };
            let value = fetch(&p.name)?;
            m.push(fetch(&format!("adam.m/{}", p.name))?);
            v.push(fetch(&format!("adam.v/{}", p.name))?);
            p.tensor = Tensor::new(p.tensor.shape(), value)?;
        }
        let latent_ranges = match tensors.remove(RANGE_NAME) {
            Some((dims, values)) if dims == [meta.model.num_latent_channels] => Some(values),
            Some((dims, _)) => return Err(Error::Corrupt(format!("latent range tensor has shape {dims:?}"))),
            None => None,
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Corrupt(format!("unexpected tensor {name:?}")));
        }
        let seed_hex = &meta.rng_seed;
        if seed_hex.len() != 64 {
            return Err(Error::Corrupt("rng seed must be 64 hex digits".into()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Corrupt("rng seed is not hexadecimal".into()))?;
        }
        let word_pos = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad rng position {:?}", meta.rng_word_pos)))?;
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            iteration: meta.iteration,
            params,
            adam: AdamState { m, v, t: meta.adam_t },
            rng: RngState {
                seed,
                stream: meta.rng_stream,
                word_pos,
            },
            latent_ranges,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("mcuk.tmp");
        let io = |e: std::io::Error| Error::File {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|e| Error::File {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// The model with this checkpoint's weights.
    pub fn codec(&self) -> Result<Codec> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut codec = Codec::new(self.model.clone(), &mut rng)?;
        codec.params = self.params.clone();
        Ok(codec)
    }

    /// Fresh untrained checkpoint with a model initialised from `seed`.
    pub fn untrained(model: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = Codec::new(model, &mut rng)?;
        Ok(Checkpoint {
            adam: AdamState::new(&codec.params),
            model: codec.config,
            train: None,
            iteration: 0,
            params: codec.params,
            rng: RngState::capture(&rng),
            latent_ranges: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_model() -> ModelConfig {
        ModelConfig {
            num_latent_channels: 4,
            encoder_widths: [4, 6, 4],
            decoder_base_width: 8,
            num_residual_blocks_per_stage: 1,
            input_size: (16, 16),
            ..ModelConfig::desk_scale()
        }
    }

    #[test]
    fn round_trip() {
        let mut ck = Checkpoint::untrained(small_model(), 5).unwrap();
        ck.iteration = 17;
        ck.adam.t = 17;
        ck.adam.m[0][0] = 0.25;
        ck.latent_ranges = Some(vec![1.0, 2.0, 3.0, 4.5]);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"MCUK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_position_survives() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..37 {
            rng.random::<u32>();
        }
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = Checkpoint::untrained(small_model(), 1).unwrap().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }
}
