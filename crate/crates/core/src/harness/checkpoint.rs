//! Binary checkpoint: magic `CAFCCKPT`, version u32, config text, seed u64,
//! then named sections of named f32 tensors. All integers little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CAFCCKPT";
pub const VERSION: u32 = 1;

pub type Section = BTreeMap<String, Tensor<f32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Snapshot of the key=value configuration used for the run.
    pub config: String,
    pub seed: u64,
    pub sections: BTreeMap<String, Section>,
}

fn split_name(full: &str) -> (&str, &str) {
    full.split_once('.').unwrap_or((full, ""))
}

impl Checkpoint {
    /// Groups parameters by the first component of their dotted name.
    pub fn from_store(store: &ParamStore<f32>, config: impl Into<String>, seed: u64) -> Self {
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        for (name, t) in store.iter() {
            let (sec, rest) = split_name(name);
            sections
                .entry(sec.to_string())
                .or_default()
                .insert(rest.to_string(), t.clone());
        }
        Self {
            config: config.into(),
            seed,
            sections,
        }
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    /// Every tensor as a fresh parameter store.
    pub fn to_store(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (sec, tensors) in &self.sections {
            for (name, t) in tensors {
                store
                    .insert(format!("{sec}.{name}"), t.clone())
                    .expect("section/name pairs are unique");
            }
        }
        store
    }

    /// Overwrites the parameters of `store` under the given sections with the
    /// checkpointed values. Every such parameter must be present with the
    /// same shape.
    pub fn load_into(&self, store: &mut ParamStore<f32>, sections: &[&str]) -> Result<()> {
        let wanted: Vec<String> = store
            .names()
            .filter(|n| sections.contains(&split_name(n).0))
            .map(str::to_string)
            .collect();
        for full in wanted {
            let (sec, rest) = split_name(&full);
            let t = self
                .sections
                .get(sec)
                .and_then(|s| s.get(rest))
                .ok_or_else(|| Error::Missing(full.clone()))?;
            let expected = store.get(&full).expect("listed above").shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(Error::Shape {
                    name: full,
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            store.set(&full, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config);
        w.0.extend_from_slice(&self.seed.to_le_bytes());
        w.u32(self.sections.len() as u32);
        for (sec, tensors) in &self.sections {
            w.str(sec);
            w.u32(tensors.len() as u32);
            for (name, t) in tensors {
                w.str(name);
                w.u32(t.shape().len() as u32);
                for &d in t.shape() {
                    w.u32(d as u32);
                }
                for v in t.data() {
                    w.0.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config = r.str("config")?;
        let seed = u64::from_le_bytes(r.take(8, "seed")?.try_into().expect("8 bytes"));
        let n_sections = r.u32("section count")?;
        let mut sections = BTreeMap::new();
        for _ in 0..n_sections {
            let sec = r.str("section name")?;
            let n_tensors = r.u32("tensor count")?;
            let mut tensors = Section::new();
            for _ in 0..n_tensors {
                let name = r.str("tensor name")?;
                let rank = r.u32("rank")? as usize;
                let dims = (0..rank)
                    .map(|_| r.u32("dims").map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let len: usize = dims.iter().product();
                let raw = r.take(len * 4, &name)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                let t = Tensor::new(dims, data)
                    .map_err(|e| Error::Format(format!("tensor `{sec}.{name}`: {e}")))?;
                tensors.insert(name, t);
            }
            sections.insert(sec, tensors);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            seed,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not valid utf-8")))
    }
}
