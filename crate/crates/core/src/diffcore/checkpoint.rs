//! Self-describing container for named arrays.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic    8 bytes  "VRMCKPT\0"
//! version  u32
//! count    u64
//! entries  count x { name_len u32, name utf8, dtype u8, ndim u8,
//!                    dims ndim x u64, payload_len u64, payload }
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Payloads are row-major element bytes, so a round trip is bit exact.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::Adam;
use super::params::ParamStore;
use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VRMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return corrupt("truncated checkpoint");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).or_else(|_| corrupt("length overflow"))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn put(&mut self, entry: Entry) {
        match self.index.get(&entry.name) {
            Some(&i) => self.entries[i] = entry,
            None => {
                self.index.insert(entry.name.clone(), self.entries.len());
                self.entries.push(entry);
            }
        }
    }

    pub fn put_tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        self.put(Entry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: vec![t.rows(), t.cols()],
            payload,
        });
    }

    pub fn put_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.put(Entry {
            name: name.to_string(),
            dtype: DType::U8,
            shape: vec![bytes.len()],
            payload: bytes.to_vec(),
        });
    }

    pub fn put_f64s(&mut self, name: &str, values: &[f64]) {
        self.put_tensor(name, &Tensor::<f64>::from_vec(1, values.len(), values.to_vec()));
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.put_bytes(name, &v.to_le_bytes());
    }

    /// Every array of `store` under `prefix/`.
    pub fn put_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.put_tensor(&format!("{prefix}/{name}"), t);
        }
    }

    pub fn get_tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let Some(e) = self.get(name) else {
            return corrupt(format!("missing array `{name}`"));
        };
        if e.dtype != T::DTYPE {
            return corrupt(format!("array `{name}` has dtype {:?}, expected {:?}", e.dtype, T::DTYPE));
        }
        let (rows, cols) = match e.shape[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => return corrupt(format!("array `{name}` is not two-dimensional")),
        };
        let size = T::DTYPE.size();
        let data = e.payload.chunks_exact(size).map(T::read_le).collect();
        Ok(Tensor::from_vec(rows, cols, data))
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(e) if e.dtype == DType::U8 => Ok(&e.payload),
            Some(_) => corrupt(format!("entry `{name}` is not a byte array")),
            None => corrupt(format!("missing entry `{name}`")),
        }
    }

    pub fn get_f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get_tensor::<f64>(name)?.into_vec())
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let b = self.get_bytes(name)?;
        match <[u8; 8]>::try_from(b) {
            Ok(a) => Ok(u64::from_le_bytes(a)),
            Err(_) => corrupt(format!("entry `{name}` is not a u64")),
        }
    }

    /// Overwrite every array of `store` from `prefix/`; the store is left
    /// untouched when any array is missing or mis-shaped.
    pub fn load_store<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let mut loaded = Vec::with_capacity(store.len());
        for (name, current) in store.iter() {
            let key = format!("{prefix}/{name}");
            let t = self.get_tensor::<T>(&key)?;
            if t.shape() != current.shape() {
                return Err(Error::Checkpoint(format!(
                    "array `{key}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    current.shape()
                )));
            }
            loaded.push(t);
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, t) in ids.into_iter().zip(loaded) {
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    /// Adam step count and moments, keyed by parameter name.
    pub fn put_optimizer<T: Real>(&mut self, prefix: &str, opt: &Adam<T>, store: &ParamStore<T>) {
        self.put_u64(&format!("{prefix}/step"), opt.step_count());
        let (m, v) = opt.moments();
        for ((name, _), (m, v)) in store.iter().zip(m.iter().zip(v)) {
            self.put_tensor(&format!("{prefix}/m/{name}"), m);
            self.put_tensor(&format!("{prefix}/v/{name}"), v);
        }
    }

    pub fn load_optimizer<T: Real>(&self, prefix: &str, opt: &mut Adam<T>, store: &ParamStore<T>) -> Result<()> {
        let step = self.get_u64(&format!("{prefix}/step"))?;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (name, _) in store.iter() {
            m.push(self.get_tensor(&format!("{prefix}/m/{name}"))?);
            v.push(self.get_tensor(&format!("{prefix}/v/{name}"))?);
        }
        opt.restore(step, m, v).map_err(|e| Error::Checkpoint(format!("`{prefix}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 8 + 32 {
            return corrupt("truncated checkpoint");
        }
        if &buf[..8] != MAGIC {
            return corrupt("not a checkpoint file (bad magic)");
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return corrupt(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return corrupt("checksum mismatch (truncated or corrupt file)");
        }
        let mut r = Reader { buf: body, pos: 12 };
        let count = r.len()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .or_else(|_| corrupt("entry name is not utf-8"))?
                .to_string();
            let Some(dtype) = DType::from_tag(r.u8()?) else {
                return corrupt(format!("entry `{name}` has unknown dtype"));
            };
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let payload_len = r.len()?;
            let elems: usize = shape.iter().product();
            if elems.checked_mul(dtype.size()) != Some(payload_len) {
                return corrupt(format!("entry `{name}` payload does not match its shape"));
            }
            let payload = r.take(payload_len)?.to_vec();
            if ck.contains(&name) {
                return corrupt(format!("duplicate entry `{name}`"));
            }
            ck.put(Entry {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if r.pos != body.len() {
            return corrupt("trailing bytes after last entry");
        }
        Ok(ck)
    }

    /// Atomic write: the file appears complete or not at all.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
