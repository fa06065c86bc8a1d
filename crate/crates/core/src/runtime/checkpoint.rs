//! The "SDNC" checkpoint container: little-endian, versioned, with a JSON
//! header, a tensor table and a CRC-protected payload. Round trips are
//! byte-exact; any payload corruption fails the load with the offending
//! offset.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"SDNC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorEntry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl TensorEntry {
    pub fn dtype(&self) -> DType {
        match self {
            TensorEntry::F32 { .. } => DType::F32,
            TensorEntry::F64 { .. } => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorEntry::F32 { shape, .. } => shape,
            TensorEntry::F64 { shape, .. } => shape,
        }
    }

    pub fn byte_len(&self) -> usize {
        match self {
            TensorEntry::F32 { data, .. } => data.len() * 4,
            TensorEntry::F64 { data, .. } => data.len() * 8,
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            TensorEntry::F32 { data, .. } => {
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorEntry::F64 { data, .. } => {
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    phase: String,
    step: u64,
    config_hash: String,
    extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub phase: String,
    pub step: u64,
    pub config_hash: String,
    /// Free-form metadata: latent scale, stage name, parents of a merge,
    /// data-loader cursor, distillation plan.
    pub extra: BTreeMap<String, String>,
    tensors: Vec<(String, TensorEntry)>,
    index: BTreeMap<String, usize>,
}

impl Checkpoint {
    pub fn new(phase: &str, step: u64, config_hash: &str) -> Self {
        Checkpoint {
            phase: phase.into(),
            step,
            config_hash: config_hash.into(),
            extra: BTreeMap::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert_entry(&mut self, name: &str, entry: TensorEntry) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Checkpoint(format!(
                "duplicate tensor name {name}"
            )));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push((name.to_string(), entry));
        Ok(())
    }

    pub fn insert_tensor<E: Scalar>(&mut self, name: &str, t: &Tensor<E>) -> Result<()> {
        let entry = match E::DTYPE {
            DType::F32 => TensorEntry::F32 {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64() as f32).collect(),
            },
            DType::F64 => TensorEntry::F64 {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64()).collect(),
            },
        };
        self.insert_entry(name, entry)
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn tensor<E: Scalar>(&self, name: &str) -> Result<Tensor<E>> {
        let entry = self
            .entry(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if entry.dtype() != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} holds {}, requested {}",
                entry.dtype(),
                E::DTYPE
            )));
        }
        match entry {
            TensorEntry::F32 { shape, data } => {
                Tensor::from_vec(shape, data.iter().map(|&v| E::from_f64(v as f64)).collect())
            }
            TensorEntry::F64 { shape, data } => {
                Tensor::from_vec(shape, data.iter().map(|&v| E::from_f64(v)).collect())
            }
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn entries(&self) -> &[(String, TensorEntry)] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            phase: self.phase.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            extra: self.extra.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut payload = Vec::new();
        struct Row {
            name: Vec<u8>,
            dtype: u8,
            dims: Vec<u32>,
            offset: u64,
            byte_len: u64,
            crc: u32,
        }
        let mut rows = Vec::with_capacity(self.tensors.len());
        for (name, entry) in &self.tensors {
            let offset = payload.len() as u64;
            let before = payload.len();
            entry.write_payload(&mut payload);
            let crc = crc32fast::hash(&payload[before..]);
            rows.push(Row {
                name: name.as_bytes().to_vec(),
                dtype: match entry.dtype() {
                    DType::F32 => 0,
                    DType::F64 => 1,
                },
                dims: entry.shape().iter().map(|&d| d as u32).collect(),
                offset,
                byte_len: (payload.len() - before) as u64,
                crc,
            });
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
        for row in &rows {
            out.extend_from_slice(&(row.name.len() as u16).to_le_bytes());
            out.extend_from_slice(&row.name);
            out.push(row.dtype);
            out.push(row.dims.len() as u8);
            for d in &row.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&row.offset.to_le_bytes());
            out.extend_from_slice(&row.byte_len.to_le_bytes());
            out.extend_from_slice(&row.crc.to_le_bytes());
        }
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {MAGIC:?}",
                &magic
            )));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version}, expected {VERSION}"
            )));
        }
        let header_len = cur.u32()? as usize;
        let header: Header = serde_json::from_slice(cur.take(header_len)?)?;
        let count = cur.u32()? as usize;
        struct Row {
            name: String,
            dtype: u8,
            dims: Vec<usize>,
            offset: u64,
            byte_len: u64,
            crc: u32,
        }
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
            let dtype = cur.u8()?;
            let ndim = cur.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u32()? as usize);
            }
            let offset = cur.u64()?;
            let byte_len = cur.u64()?;
            let crc = cur.u32()?;
            rows.push(Row {
                name,
                dtype,
                dims,
                offset,
                byte_len,
                crc,
            });
        }
        let payload_start = cur.pos;
        let mut ckpt = Checkpoint {
            phase: header.phase,
            step: header.step,
            config_hash: header.config_hash,
            extra: header.extra,
            tensors: Vec::new(),
            index: BTreeMap::new(),
        };
        for row in rows {
            let lo = payload_start + row.offset as usize;
            let hi = lo + row.byte_len as usize;
            if hi > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated payload for {} at offset {}",
                    row.name, row.offset
                )));
            }
            let slice = &bytes[lo..hi];
            let crc = crc32fast::hash(slice);
            if crc != row.crc {
                return Err(Error::Checkpoint(format!(
                    "payload corruption in {} at offset {} (crc {:08x} != {:08x})",
                    row.name, row.offset, crc, row.crc
                )));
            }
            let numel: usize = row.dims.iter().product();
            let entry = match row.dtype {
                0 => {
                    if slice.len() != numel * 4 {
                        return Err(Error::Checkpoint(format!(
                            "tensor {} has {} bytes for {} f32 values",
                            row.name,
                            slice.len(),
                            numel
                        )));
                    }
                    TensorEntry::F32 {
                        shape: row.dims,
                        data: slice
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    }
                }
                1 => {
                    if slice.len() != numel * 8 {
                        return Err(Error::Checkpoint(format!(
                            "tensor {} has {} bytes for {} f64 values",
                            row.name,
                            slice.len(),
                            numel
                        )));
                    }
                    TensorEntry::F64 {
                        shape: row.dims,
                        data: slice
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    }
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown dtype tag {other} for {}",
                        row.name
                    )))
                }
            };
            ckpt.insert_entry(&row.name, entry)?;
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
