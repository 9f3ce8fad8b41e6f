//! Binary checkpoint format.
//!
//! Layout (little-endian): the magic `QEMB`, a `u16` version (1), a `u64`
//! byte length followed by a UTF-8 JSON metadata document, then every
//! parameter array as IEEE-754 `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{ArraySpec, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::textproc::Vocabulary;

pub const MAGIC: &[u8; 4] = b"QEMB";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    encoder: EncoderConfig,
    vocab_size: usize,
    vocab: Vec<String>,
    arrays: Vec<ArraySpec>,
}

pub fn checkpoint_bytes(params: &ModelParams, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if params.vocab_size() != vocab.len() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} token rows, vocabulary has {} entries",
            params.vocab_size(),
            vocab.len()
        )));
    }
    let meta = Metadata {
        encoder: params.config().clone(),
        vocab_size: vocab.len(),
        vocab: vocab.learned_tokens().to_vec(),
        arrays: params.layout().specs().cloned().collect(),
    };
    let doc = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(14 + doc.len() + 4 * params.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(doc.len() as u64).to_le_bytes());
    out.extend_from_slice(&doc);
    for &v in params.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelParams, Vocabulary)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 14 {
        return Err(bad("file too short for header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let doc_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let doc_end = 14usize
        .checked_add(usize::try_from(doc_len).map_err(|_| bad("metadata length overflow"))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated metadata"))?;
    let meta: Metadata =
        serde_json::from_slice(&bytes[14..doc_end]).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;

    let vocab = Vocabulary::from_tokens(meta.vocab.iter().cloned())?;
    if vocab.len() != meta.vocab_size {
        return Err(bad("vocabulary size does not match its token list"));
    }
    meta.encoder.validate()?;
    let expected: Vec<ArraySpec> = crate::encoder::ParamLayout::new(&meta.encoder, meta.vocab_size)
        .specs()
        .cloned()
        .collect();
    if expected != meta.arrays {
        return Err(bad("array manifest does not match the encoder configuration"));
    }
    let count: usize = meta.arrays.iter().map(ArraySpec::numel).sum();
    let payload = &bytes[doc_end..];
    if payload.len() != count * 4 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest declares {} floats",
            payload.len(),
            count
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let params = ModelParams::from_values(&meta.encoder, meta.vocab_size, values)?;
    Ok((params, vocab))
}

pub fn save_checkpoint(params: &ModelParams, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, vocab)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, Vocabulary)> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::build_vocab;

    fn sample() -> (ModelParams, Vocabulary) {
        let vocab = build_vocab(&["how do i learn rust", "what is rust"], 1).unwrap();
        let cfg = EncoderConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            max_len: 10,
            seed: 5,
        };
        (ModelParams::init(&cfg, vocab.len()).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_canonical() {
        let (p, v) = sample();
        let bytes = checkpoint_bytes(&p, &v).unwrap();
        let (p2, v2) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(v2, v);
        assert_eq!(p2.config(), p.config());
        for (a, b) in p.values().iter().zip(p2.values()) {
            assert_eq!(*a as f32, *b as f32);
            assert!((a - b).abs() <= a.abs() * f32::EPSILON as f64);
        }
        assert_eq!(checkpoint_bytes(&p2, &v2).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let (p, v) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qemb");
        save_checkpoint(&p, &v, &path).unwrap();
        let (p2, _) = load_checkpoint(&path).unwrap();
        let again = dir.path().join("m2.qemb");
        save_checkpoint(&p2, &v, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (p, v) = sample();
        let bytes = checkpoint_bytes(&p, &v).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad_magic), Err(Error::Checkpoint(m)) if m.contains("magic")));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(parse_checkpoint(&bad_version).is_err());

        assert!(parse_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        assert!(parse_checkpoint(&bytes[..20]).is_err());
        assert!(parse_checkpoint(&bytes[..3]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(parse_checkpoint(&extra).is_err());
    }

    #[test]
    fn declared_dims_must_match_payload() {
        let (p, v) = sample();
        let bytes = checkpoint_bytes(&p, &v).unwrap();
        let doc_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let doc = std::str::from_utf8(&bytes[14..14 + doc_len]).unwrap();
        let patched = doc.replacen("\"d_ff\":12", "\"d_ff\":13", 1);
        assert_ne!(patched, doc);
        let mut out = bytes[..6].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[14 + doc_len..]);
        assert!(matches!(parse_checkpoint(&out), Err(Error::Checkpoint(_))));
    }
}
