//! Model checkpoints.
//!
//! Layout (little-endian): `b"VLMC"`, `u32` version, seven `u32` dims
//! (image_size, channels, patch, d_model, enc_hidden, hidden, vocab),
//! `u32` pad/bos/eos ids, `u32` token count and length-prefixed UTF-8
//! tokens, `u32` parameter count, then per parameter a length-prefixed name
//! followed by a `VFT1` tensor.

use std::fs;
use std::path::Path;

use super::model::{Param, Params, ToyVlm, VlmDims};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{decode_tensor, encode_tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLMC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(buf: &mut &[u8]) -> Result<usize> {
    crate::tensor::io_read_u32(buf).map(|v| v as usize)
}

fn get_str(buf: &mut &[u8]) -> Result<String> {
    let n = get_u32(buf)?;
    let bytes = crate::tensor::io_read_bytes(buf, n)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("token is not UTF-8".into()))
}

impl ToyVlm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let d = &self.dims;
        for v in [d.image_size, d.channels, d.patch, d.d_model, d.enc_hidden, d.hidden, d.vocab] {
            put_u32(&mut out, v);
        }
        put_u32(&mut out, self.vocab.pad_id);
        put_u32(&mut out, self.vocab.bos_id);
        put_u32(&mut out, self.vocab.eos_id);
        put_u32(&mut out, self.vocab.len());
        for t in self.vocab.tokens() {
            put_str(&mut out, t);
        }
        put_u32(&mut out, Params::NAMES.len());
        for (name, p) in self.params.iter() {
            put_str(&mut out, name);
            encode_tensor(&p.shape, &p.data, &mut out).expect("parameter shape is consistent");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut buf = bytes;
        let magic = crate::tensor::io_read_bytes(&mut buf, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = get_u32(&mut buf)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = get_u32(&mut buf)?;
        }
        let dims = VlmDims {
            image_size: dims[0],
            channels: dims[1],
            patch: dims[2],
            d_model: dims[3],
            enc_hidden: dims[4],
            hidden: dims[5],
            vocab: dims[6],
        };
        let (pad, bos, eos) = (get_u32(&mut buf)?, get_u32(&mut buf)?, get_u32(&mut buf)?);
        let ntok = get_u32(&mut buf)?;
        if ntok > 1 << 20 {
            return Err(Error::Format(format!("implausible vocabulary size {ntok}")));
        }
        let tokens = (0..ntok).map(|_| get_str(&mut buf)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::new(tokens, pad, bos, eos)?;
        let nparams = get_u32(&mut buf)?;
        if nparams != Params::NAMES.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {nparams} parameters, expected {}",
                Params::NAMES.len()
            )));
        }
        let mut named = Vec::with_capacity(nparams);
        for _ in 0..nparams {
            let name = get_str(&mut buf)?;
            let (shape, data) = decode_tensor(&mut buf)?;
            named.push((name, Param { shape, data }));
        }
        if !buf.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", buf.len())));
        }
        ToyVlm::from_parts(dims, vocab, Params::from_named(named)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_identical() {
        let m = ToyVlm::standard(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = ToyVlm::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), m.to_bytes());
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = ToyVlm::standard(3).to_bytes();
        for cut in [0, 3, 10, 200, bytes.len() - 1] {
            assert!(matches!(ToyVlm::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(ToyVlm::from_bytes(&bad), Err(Error::Format(_))));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(ToyVlm::from_bytes(&ver), Err(Error::Format(_))));
    }
}
