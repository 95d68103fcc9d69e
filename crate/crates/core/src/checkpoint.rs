//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SCNFLOW\0"
//! version      u32      currently 1
//! header_len   u64      byte length of the JSON header
//! header       JSON     CheckpointHeader
//! payload      f64 LE   parameter arrays in header order, then the
//!                       optimizer's first and second moments if present
//! ```
//!
//! Parameters travel as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{NetConfig, Param, VelocityNet};
use crate::error::{Error, Result};
use crate::flow::{OptimizerState, TrainConfig};
use crate::text::{EmbeddingSource, ReferenceEncoder, Vocabulary};

pub const MAGIC: &[u8; 8] = b"SCNFLOW\0";
pub const FORMAT_VERSION: u32 = 1;

/// How prompts were turned into embeddings for this model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderInfo {
    pub source: EmbeddingSource,
    pub dim: usize,
    pub seed: u64,
    /// Reference encoder vocabulary in id order.
    pub vocabulary: Option<Vec<String>>,
}

impl EncoderInfo {
    pub fn reference(enc: &ReferenceEncoder) -> Self {
        Self {
            source: EmbeddingSource::Reference,
            dim: enc.dim,
            seed: enc.seed,
            vocabulary: Some(enc.vocab.words().to_vec()),
        }
    }

    /// Rebuilds the reference encoder, if this model used one.
    pub fn reference_encoder(&self) -> Result<Option<ReferenceEncoder>> {
        match (&self.source, &self.vocabulary) {
            (EmbeddingSource::Reference, Some(words)) => {
                let vocab = Vocabulary::from_words(words.iter().skip(1));
                if vocab.words() != words.as_slice() {
                    return Err(Error::Config("checkpoint vocabulary is malformed".into()));
                }
                Ok(Some(ReferenceEncoder::new(vocab, self.dim, self.seed)?))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    net: NetConfig,
    step: u64,
    seed: u64,
    arrays: Vec<ArrayInfo>,
    encoder: Option<EncoderInfo>,
    train: Option<TrainConfig>,
    has_optimizer_state: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: VelocityNet,
    /// Completed training steps.
    pub step: u64,
    pub seed: u64,
    pub encoder: Option<EncoderInfo>,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<OptimizerState>,
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Format {
        record: "checkpoint".into(),
        reason: reason.into(),
    }
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated"))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

impl Checkpoint {
    pub fn new(net: VelocityNet, step: u64, seed: u64) -> Self {
        Self {
            net,
            step,
            seed,
            encoder: None,
            train: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = self.net.param_count();
        if let Some(o) = &self.optimizer {
            if o.m.len() != p || o.v.len() != p {
                return Err(Error::Config(
                    "optimizer state does not match the network".into(),
                ));
            }
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            net: self.net.config().clone(),
            step: self.step,
            seed: self.seed,
            arrays: self
                .net
                .params()
                .entries()
                .iter()
                .map(|p| ArrayInfo {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            has_optimizer_state: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * 3 * p);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |vals: &[f64]| {
            vals.iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        };
        for param in self.net.params().entries() {
            put(&param.data);
        }
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(bytes, &mut at, 8)? != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| corrupt("header too large"))?;
        let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut at, len)?)?;
        if header.format_version != version {
            return Err(corrupt("header and preamble versions differ"));
        }
        let mut read = |n: usize| -> Result<Vec<f64>> {
            let raw = take(
                bytes,
                &mut at,
                n.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?,
            )?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let n = a.shape.iter().product();
            arrays.push(Param {
                name: a.name.clone(),
                shape: a.shape.clone(),
                data: read(n)?,
            });
        }
        let mut net = VelocityNet::new(header.net.clone(), 0)?;
        net.params_mut().load_from(&arrays)?;
        let optimizer = if header.has_optimizer_state {
            let p = net.param_count();
            Some(OptimizerState {
                m: read(p)?,
                v: read(p)?,
            })
        } else {
            None
        };
        if at != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Self {
            net,
            step: header.step,
            seed: header.seed,
            encoder: header.encoder,
            train: header.train,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Optimizer;

    fn sample_checkpoint() -> Checkpoint {
        let mut net = VelocityNet::new(NetConfig::tiny(8), 4).unwrap();
        net.jitter_zero_arrays(1, 0.5);
        let p = net.param_count();
        let enc = ReferenceEncoder::new(Vocabulary::template_lexicon(), 8, 21).unwrap();
        Checkpoint {
            net,
            step: 123,
            seed: 77,
            encoder: Some(EncoderInfo::reference(&enc)),
            train: Some(TrainConfig {
                optimizer: Optimizer::adam(),
                ..TrainConfig::default()
            }),
            optimizer: Some(OptimizerState {
                m: (0..p).map(|i| (i as f64).sin() * 1e-7).collect(),
                v: (0..p)
                    .map(|i| f64::from_bits(0x3c00_0000_0000_0000 + i as u64))
                    .collect(),
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(
            bits(&back.net.params().flatten()),
            bits(&ck.net.params().flatten())
        );
        assert_eq!(back.net.config(), ck.net.config());
        assert_eq!((back.step, back.seed), (123, 77));
        assert_eq!(back.encoder, ck.encoder);
        assert_eq!(back.train, ck.train);
        let (o, p) = (back.optimizer.as_ref().unwrap(), ck.optimizer.unwrap());
        assert_eq!(bits(&o.m), bits(&p.m));
        assert_eq!(bits(&o.v), bits(&p.v));
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn encoder_is_rebuilt() {
        let ck = sample_checkpoint();
        let enc = ck.encoder.unwrap().reference_encoder().unwrap().unwrap();
        let orig = ReferenceEncoder::new(Vocabulary::template_lexicon(), 8, 21).unwrap();
        let prompt = "A sunny day with stable output, peaking at 0.80 around 12:00.";
        assert_eq!(
            enc.encode_prompt(prompt).unwrap(),
            orig.encode_prompt(prompt).unwrap()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn mismatched_architecture_is_a_config_error() {
        let ck = Checkpoint::new(VelocityNet::new(NetConfig::tiny(8), 1).unwrap(), 0, 0);
        let mut bytes = ck.to_bytes().unwrap();
        // rename one array inside the header without changing its length
        let pos = bytes.windows(8).position(|w| w == b"conv_out").unwrap();
        bytes[pos..pos + 8].copy_from_slice(b"conv_xxx");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Config(_))
        ));
    }
}
