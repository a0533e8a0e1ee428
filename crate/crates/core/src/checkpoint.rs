//! Checkpoint files.
//!
//! Layout: magic `SFCK`, version byte, `u32` config length and the config
//! as TOML, `u64` training step, `u32` record count, then per record a `u32`
//! name length, the name and an f64 `FSTN` tensor. A SHA-256 digest of all
//! preceding bytes closes the file. Integers are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fstn::{self, Dtype};
use crate::model::Model;
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, step: usize, model: &Model) -> Self {
        Self {
            config: config.clone(),
            step,
            params: model.store.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let text = self.config.to_toml();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            fstn::encode(t, Dtype::F64, &mut out);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a checkpoint, verifying the digest before anything else is
    /// trusted. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 1 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Digest);
        }
        if body[4] != VERSION {
            return Err(Error::Version(body[4]));
        }
        let mut r = Reader { buf: body, pos: 5 };
        let n = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let text = r.take(n).ok_or_else(|| corrupt("truncated config"))?;
        let text = std::str::from_utf8(text).map_err(|_| corrupt("config is not UTF-8"))?;
        let config = RunConfig::parse(text)?;
        let step = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let count = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32().ok_or_else(|| corrupt("truncated record"))? as usize;
            let name = r.take(n).ok_or_else(|| corrupt("truncated record"))?;
            let name = std::str::from_utf8(name).map_err(|_| corrupt("record name is not UTF-8"))?;
            let (t, used) = fstn::decode(&body[r.pos..]).map_err(|e| corrupt(&e))?;
            r.pos += used;
            params.add(name, t)?;
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { config, step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest_hex(&self) -> String {
        let bytes = self.to_bytes();
        bytes[bytes.len() - DIGEST_LEN..].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rebuilds the model. When `expected` is given, its shape-affecting
    /// fields must match the stored configuration.
    pub fn model(&self, expected: Option<&RunConfig>) -> Result<Model> {
        if let Some(e) = expected {
            Model::check_structure(&self.config.model(), &e.model())?;
        }
        let mut model = Model::new(&self.config.model(), 0)?;
        if model.store.names() != self.params.names() {
            return Err(Error::Invalid("checkpoint parameters do not match the configured model".into()));
        }
        for (dst, src) in model.store.tensors_mut().iter_mut().zip(self.params.tensors()) {
            if dst.shape() != src.shape() {
                return Err(Error::Invalid("checkpoint parameter shapes do not match the configured model".into()));
            }
            *dst = src.clone();
        }
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        c.decoder.layers = 1;
        c.decoder.queries = 4;
        c.decoder.dim = 8;
        c.decoder.heads = 2;
        c.decoder.condition_dim = 4;
        c.decoder.projector_hidden = 8;
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let cfg = tiny();
        let model = Model::new(&cfg.model(), 1).unwrap();
        let a = Checkpoint::from_model(&cfg, 5, &model).to_bytes();
        let back = Checkpoint::from_bytes(&a, Path::new("x")).unwrap();
        assert_eq!(back.step, 5);
        assert_eq!(back.to_bytes(), a);
    }

    #[test]
    fn flipped_byte_fails_digest() {
        let cfg = tiny();
        let model = Model::new(&cfg.model(), 1).unwrap();
        let mut b = Checkpoint::from_model(&cfg, 0, &model).to_bytes();
        let mid = b.len() / 2;
        b[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&b, Path::new("x")), Err(Error::Digest)));
    }

    #[test]
    fn unknown_version_is_reported() {
        let cfg = tiny();
        let model = Model::new(&cfg.model(), 1).unwrap();
        let mut b = Checkpoint::from_model(&cfg, 0, &model).to_bytes();
        b.truncate(b.len() - DIGEST_LEN);
        b[4] = 9;
        let d = Sha256::digest(&b);
        b.extend_from_slice(&d);
        assert!(matches!(Checkpoint::from_bytes(&b, Path::new("x")), Err(Error::Version(9))));
    }

    #[test]
    fn structural_mismatch_names_field() {
        let cfg = tiny();
        let model = Model::new(&cfg.model(), 1).unwrap();
        let ck = Checkpoint::from_model(&cfg, 0, &model);
        let mut other = cfg.clone();
        other.decoder.queries = 6;
        match ck.model(Some(&other)) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "decoder.queries"),
            r => panic!("unexpected {:?}", r.map(|_| ())),
        }
    }
}
