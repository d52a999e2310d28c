//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TAGLMCTR"
//! version  u32
//! kind     u32 length + UTF-8
//! meta     u64 length + UTF-8 (TOML document)
//! count    u32
//! count × { name: u32 length + UTF-8, rank: u32, dims: rank × u64,
//!           payload: product(dims) × f32 }
//! sha256   32 bytes over everything above
//! ```
//!
//! Tensors are stored at 32-bit precision; loading casts back to the compute
//! type, so a round trip is exact for values already representable as `f32`.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{LabelScheme, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::langmodel::{LanguageModel, LmConfig};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tagger::{TaggerConfig, TaggerModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TAGLMCTR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: String,
    pub tensors: Vec<StoredTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Container("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { self.u32()? as u64 };
        usize::try_from(n).map_err(|_| Error::Container("length overflow".into()))
    }
    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Container("invalid UTF-8".into()))
    }
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: meta.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push(StoredTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.as_f64() as f32).collect(),
        });
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let st = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Container(format!("missing tensor `{name}`")))?;
        Tensor::new(st.shape.clone(), st.data.iter().map(|&x| T::lit(x as f64)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        b.extend_from_slice(self.kind.as_bytes());
        b.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        b.extend_from_slice(self.meta.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Container("not a model container".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Container("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Container(format!("format version {version}, expected {VERSION}")));
        }
        let kind = r.string(false)?;
        let meta = r.string(true)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string(false)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len(true)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Container("tensor size overflow".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Container("tensor size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Container("trailing bytes".into()));
        }
        Ok(Self { kind, meta, tensors })
    }

    /// Hex SHA-256 of the serialized container.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta_as<M: DeserializeOwned>(&self) -> Result<M> {
        toml::from_str(&self.meta).map_err(|e| Error::Container(format!("bad metadata: {e}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Container(format!("container holds a `{}`, expected `{kind}`", self.kind)));
        }
        Ok(())
    }
}

fn to_meta<M: Serialize>(m: &M) -> String {
    toml::to_string(m).expect("metadata serializes")
}

fn push_store<T: Scalar>(c: &mut Container, store: &ParamStore<T>) {
    for (_, name, t) in store.iter() {
        c.push(name, t);
    }
}

fn fill_store<T: Scalar>(c: &Container, store: &mut ParamStore<T>) -> Result<()> {
    if c.tensors.len() != store.len() {
        return Err(Error::Container(format!(
            "{} stored tensors for {} parameters",
            c.tensors.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = c.tensor::<T>(store.name(id))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Container(format!(
                "`{}` stored as {:?}, model expects {:?}",
                store.name(id),
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    config: LmConfig,
    vocab: Vec<String>,
    chars: Option<Vec<String>>,
}

pub const LM_KIND: &str = "language-model";
pub const TAGGER_KIND: &str = "tagger";

pub fn lm_container<T: Scalar>(m: &LanguageModel<T>) -> Container {
    let meta = LmMeta {
        config: m.config.clone(),
        vocab: m.vocab.symbols().to_vec(),
        chars: m.chars.as_ref().map(|c| c.symbols().to_vec()),
    };
    let mut c = Container::new(LM_KIND, to_meta(&meta));
    push_store(&mut c, &m.store);
    c
}

pub fn lm_from_container<T: Scalar>(c: &Container) -> Result<LanguageModel<T>> {
    c.expect_kind(LM_KIND)?;
    let meta: LmMeta = c.meta_as()?;
    let vocab = Vocabulary::from_symbols(meta.vocab)?;
    let chars = meta.chars.map(Vocabulary::from_symbols).transpose()?;
    let mut m = LanguageModel::new(meta.config, vocab, chars, &mut RngStream::new(0))?;
    fill_store(c, &mut m.store)?;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct TaggerMeta {
    config: TaggerConfig,
    words: Vec<String>,
    chars: Vec<String>,
    types: Vec<String>,
}

pub fn tagger_container<T: Scalar>(m: &TaggerModel<T>) -> Container {
    let meta = TaggerMeta {
        config: m.config.clone(),
        words: m.words.symbols().to_vec(),
        chars: m.chars.symbols().to_vec(),
        types: m.scheme.types().to_vec(),
    };
    let mut c = Container::new(TAGGER_KIND, to_meta(&meta));
    push_store(&mut c, &m.store);
    c
}

pub fn tagger_from_container<T: Scalar>(c: &Container) -> Result<TaggerModel<T>> {
    c.expect_kind(TAGGER_KIND)?;
    let meta: TaggerMeta = c.meta_as()?;
    let scheme = LabelScheme::new(meta.config.scheme, meta.types);
    let mut m = TaggerModel::new(
        meta.config,
        Vocabulary::from_symbols(meta.words)?,
        Vocabulary::from_symbols(meta.chars)?,
        scheme,
        None,
        &mut RngStream::new(0),
    )?;
    fill_store(c, &mut m.store)?;
    Ok(m)
}
