//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `params.bin` and `manifest.json`.
//! `params.bin` is little-endian:
//!
//! ```text
//! magic "PTCK" | u32 version | u32 count
//! count x ( u32 name_len | name utf-8 | u32 ndim | ndim x u64 dim | numel x f64 )
//! ```
//!
//! The manifest repeats names and shapes and adds the dtype, the optimizer
//! step count and free-form metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter shape");
        self.names.push(name.into());
        self.shapes.push(shape.to_vec());
        self.data.push(data);
        ParamId(self.data.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.data.len()).map(ParamId)
    }

    pub fn data_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.data
    }

    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().map(Vec::len)
    }

    pub fn total_size(&self) -> usize {
        self.sizes().sum()
    }

    /// Places every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let tensors = self
            .data
            .iter()
            .zip(&self.shapes)
            .map(|(d, s)| tape.variable(d.clone(), s).expect("stored shapes are consistent"))
            .collect();
        Bound { tensors }
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }
}

/// Parameters placed on one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    tensors: Vec<Tensor<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Tensor<'t> {
        self.tensors[id.0]
    }

    /// Gradients after a backward pass, in store order. Parameters that did
    /// not influence the loss get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    step: u64,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub step: u64,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &ckpt.params;
    let mut bin = Vec::with_capacity(16 + p.total_size() * 8);
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&VERSION.to_le_bytes());
    bin.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for i in 0..p.len() {
        let name = p.names[i].as_bytes();
        bin.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bin.extend_from_slice(name);
        bin.extend_from_slice(&(p.shapes[i].len() as u32).to_le_bytes());
        for &d in &p.shapes[i] {
            bin.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &p.data[i] {
            bin.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: "posetransfer-checkpoint".into(),
        version: VERSION,
        dtype: "f64".into(),
        step: ckpt.step,
        tensors: (0..p.len())
            .map(|i| ManifestEntry {
                name: p.names[i].clone(),
                shape: p.shapes[i].clone(),
            })
            .collect(),
        meta: ckpt.meta.clone(),
    };
    let bin_path = dir.join("params.bin");
    fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    let json_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated params.bin".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let json_path = dir.join("manifest.json");
    let json = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let bin_path = dir.join("params.bin");
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut r = Reader { buf: &bin, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 name".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.add(name, &shape, data);
    }
    if r.pos != bin.len() {
        return Err(Error::Checkpoint("trailing bytes in params.bin".into()));
    }
    let listed: Vec<ManifestEntry> = (0..params.len())
        .map(|i| ManifestEntry {
            name: params.names[i].clone(),
            shape: params.shapes[i].clone(),
        })
        .collect();
    if listed != manifest.tensors {
        return Err(Error::Checkpoint("manifest does not match params.bin".into()));
    }
    Ok(Checkpoint {
        params,
        step: manifest.step,
        meta: manifest.meta,
    })
}
