//! Pretrained embedding files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OLEM" | version u32 | vocab u32 | dim u32
//! then three blocks, tags 0 (encoder), 1 (decoder), 2 (output projection):
//!   tag u8 | vocab × dim f32, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::ModelConfig;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"OLEM";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Frozen encoder/decoder embeddings and output projection, each `[vocab×dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedEmbeddings {
    pub enc: Tensor,
    pub dec: Tensor,
    pub out_proj: Tensor,
}

impl PretrainedEmbeddings {
    pub fn new(enc: Tensor, dec: Tensor, out_proj: Tensor) -> Result<Self> {
        let shape = enc.dims2()?;
        for t in [&dec, &out_proj] {
            if t.dims2()? != shape {
                return Err(Error::dim("embeddings", enc.shape(), t.shape()));
            }
        }
        Ok(PretrainedEmbeddings { enc, dec, out_proj })
    }

    pub fn vocab(&self) -> usize {
        self.enc.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.enc.shape()[1]
    }

    /// Checks vocabulary and width against a model configuration.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let file = [self.vocab(), self.dim()];
        for vocab in [cfg.src_vocab, cfg.tgt_vocab] {
            let want = [vocab, cfg.d_model];
            if file != want {
                return Err(Error::dim("embedding file vs config", &file, &want));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (vocab, dim) = (self.vocab(), self.dim());
        let mut out = Vec::with_capacity(HEADER_LEN + 3 * (1 + 4 * vocab * dim));
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(vocab as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for (tag, t) in [(0u8, &self.enc), (1, &self.dec), (2, &self.out_proj)] {
            out.push(tag);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != EMBEDDING_MAGIC {
            return Err(Error::Magic {
                expected: EMBEDDING_MAGIC,
                found: magic,
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != EMBEDDING_VERSION {
            return Err(Error::Version {
                expected: EMBEDDING_VERSION,
                found: version,
            });
        }
        let (vocab, dim) = (word(8) as usize, word(12) as usize);
        let block = vocab * dim;
        let expected = HEADER_LEN + 3 * (1 + 4 * block);
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after embedding blocks",
                bytes.len() - expected
            )));
        }
        let mut tensors = Vec::with_capacity(3);
        let mut at = HEADER_LEN;
        for want_tag in 0u8..3 {
            if bytes[at] != want_tag {
                return Err(Error::Corrupt(format!(
                    "expected block tag {want_tag}, found {}",
                    bytes[at]
                )));
            }
            at += 1;
            let data = bytes[at..at + 4 * block]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 4 * block;
            tensors.push(Tensor::new(vec![vocab, dim], data)?);
        }
        let out_proj = tensors.pop().unwrap();
        let dec = tensors.pop().unwrap();
        let enc = tensors.pop().unwrap();
        Ok(PretrainedEmbeddings { enc, dec, out_proj })
    }
}

pub fn save_embeddings(path: impl AsRef<Path>, emb: &PretrainedEmbeddings) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, emb.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an embedding file; pass a config to validate vocabulary and width.
pub fn load_embeddings(path: impl AsRef<Path>, cfg: Option<&ModelConfig>) -> Result<PretrainedEmbeddings> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let emb = PretrainedEmbeddings::from_bytes(&bytes)?;
    if let Some(cfg) = cfg {
        emb.check(cfg)?;
    }
    Ok(emb)
}
