//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "CRFTLMCK"
//! version  u32 LE
//! kind     u8        0 = encoder, 1 = builder
//! config   u32 LE byte length, then UTF-8 `key=value\n` lines
//! vocab    u32 LE token count, then per token: u16 LE length + UTF-8 bytes
//! tensors  u32 LE count, then per tensor:
//!          u16 LE name length + UTF-8 name, u8 rank, rank × u32 LE dims,
//!          product(dims) × f64 LE values
//! ```

use std::fs;
use std::path::Path;

use super::encoder::{EncoderConfig, EncoderState};
use super::{NnError, ParamSet, Tensor};
use crate::corpus::{Vocab, N_SPECIAL, SPECIAL_TOKENS};

pub const MAGIC: &[u8; 8] = b"CRFTLMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Encoder,
    Builder,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Encoder => 0,
            CheckpointKind::Builder => 1,
        }
    }
}

/// Decoded file contents before any model-specific validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub kind: CheckpointKind,
    pub config: Vec<(String, String)>,
    pub vocab: Vocab,
    pub params: ParamSet,
}

pub fn encode_raw(ck: &RawCheckpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + ck.params.n_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ck.kind.code());
    let cfg: String = ck.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(ck.vocab.len() as u32).to_le_bytes());
    for tok in ck.vocab.tokens() {
        out.extend_from_slice(&(tok.len() as u16).to_le_bytes());
        out.extend_from_slice(tok.as_bytes());
    }
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (_, name, t) in ck.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, NnError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize, what: &'static str) -> Result<String, NnError> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| NnError::Format(format!("{what} is not UTF-8")))
    }
}

pub fn decode_raw(buf: &[u8]) -> Result<RawCheckpoint, NnError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(NnError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = match r.u8("kind")? {
        0 => CheckpointKind::Encoder,
        1 => CheckpointKind::Builder,
        other => return Err(NnError::Format(format!("unknown checkpoint kind {other}"))),
    };
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = r.string(cfg_len, "config")?;
    let config = cfg_text
        .lines()
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| NnError::Format(format!("bad config line {line:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_tokens = r.u32("vocab size")? as usize;
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
    for _ in 0..n_tokens {
        let len = r.u16("vocab entry")? as usize;
        tokens.push(r.string(len, "vocab entry")?);
    }
    if tokens.len() < N_SPECIAL || tokens[..N_SPECIAL] != SPECIAL_TOKENS {
        return Err(NnError::Format("vocabulary does not start with the special tokens".into()));
    }
    let vocab = Vocab::from_tokens(tokens.split_off(N_SPECIAL)).map_err(|e| NnError::Format(e.to_string()))?;
    let n_tensors = r.u32("tensor count")? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_tensors {
        let len = r.u16("tensor name")? as usize;
        let name = r.string(len, "tensor name")?;
        let rank = r.u8("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("tensor shape").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or(NnError::Truncated("tensor data"))?, "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(NnError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(RawCheckpoint {
        kind,
        config,
        vocab,
        params,
    })
}

pub fn write_raw(path: impl AsRef<Path>, ck: &RawCheckpoint) -> Result<(), NnError> {
    fs::write(path, encode_raw(ck))?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawCheckpoint, NnError> {
    decode_raw(&fs::read(path)?)
}

/// Checks names and shapes of `found` against `expected`.
pub fn check_layout(expected: &ParamSet, found: &ParamSet) -> Result<(), NnError> {
    if expected.len() != found.len() {
        return Err(NnError::ShapeMismatch(format!(
            "expected {} tensors, file has {}",
            expected.len(),
            found.len()
        )));
    }
    for ((_, en, et), (_, fname, ft)) in expected.iter().zip(found.iter()) {
        if en != fname || et.shape() != ft.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {en} {:?}, file has {fname} {:?}",
                et.shape(),
                ft.shape()
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint(state: &EncoderState, vocab: &Vocab, path: impl AsRef<Path>) -> Result<(), NnError> {
    if vocab.len() != state.config.vocab_size {
        return Err(NnError::ShapeMismatch(format!(
            "vocabulary has {} tokens but the encoder expects {}",
            vocab.len(),
            state.config.vocab_size
        )));
    }
    write_raw(
        path,
        &RawCheckpoint {
            kind: CheckpointKind::Encoder,
            config: state.config.to_pairs(),
            vocab: vocab.clone(),
            params: state.params.clone(),
        },
    )
}

/// Reads an encoder checkpoint together with the vocabulary it was trained on.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderState, Vocab), NnError> {
    let raw = read_raw(path)?;
    if raw.kind != CheckpointKind::Encoder {
        return Err(NnError::Format("not an encoder checkpoint".into()));
    }
    encoder_from_raw(raw)
}

pub fn encoder_from_raw(raw: RawCheckpoint) -> Result<(EncoderState, Vocab), NnError> {
    let config = EncoderConfig::from_pairs(&raw.config)?;
    check_layout(&EncoderState::skeleton(&config), &raw.params)?;
    if raw.vocab.len() != config.vocab_size {
        return Err(NnError::ShapeMismatch(format!(
            "vocabulary has {} tokens but config says {}",
            raw.vocab.len(),
            config.vocab_size
        )));
    }
    Ok((
        EncoderState {
            config,
            params: raw.params,
        },
        raw.vocab,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_encoder;

    fn vocab(n: usize) -> Vocab {
        Vocab::from_tokens((0..n - N_SPECIAL).map(|i| format!("w{i}")).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let st = init_encoder(&EncoderConfig::new(20), 4).unwrap();
        let v = vocab(20);
        save_checkpoint(&st, &v, &path).unwrap();
        let (back, vback) = load_checkpoint(&path).unwrap();
        assert_eq!(back, st);
        assert_eq!(vback, v);
        for (a, b) in back.params.tensors().iter().zip(st.params.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn vocab_size_mismatch_is_a_shape_error() {
        let st = init_encoder(&EncoderConfig::new(20), 4).unwrap();
        let mut raw = RawCheckpoint {
            kind: CheckpointKind::Encoder,
            config: st.config.to_pairs(),
            vocab: vocab(20),
            params: st.params.clone(),
        };
        for kv in &mut raw.config {
            if kv.0 == "vocab_size" {
                kv.1 = "25".into();
            }
        }
        let decoded = decode_raw(&encode_raw(&raw)).unwrap();
        assert!(matches!(encoder_from_raw(decoded), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let st = init_encoder(&EncoderConfig::new(8), 4).unwrap();
        let raw = RawCheckpoint {
            kind: CheckpointKind::Encoder,
            config: st.config.to_pairs(),
            vocab: vocab(8),
            params: st.params,
        };
        let bytes = encode_raw(&raw);
        assert!(matches!(decode_raw(&bytes[..bytes.len() - 3]), Err(NnError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_raw(&bad), Err(NnError::BadMagic)));
        let mut old = bytes.clone();
        old[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_raw(&old), Err(NnError::Version { found: 7, .. })));
    }
}
