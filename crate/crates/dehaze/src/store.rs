//! Versioned binary container of named real arrays plus string metadata.
//! Backs both trainer checkpoints and feature-extractor weight files.
//!
//! Layout (all integers little-endian): magic `DHZTNSR1`, format version,
//! metadata key/value pairs, then arrays as (name, tag, dims, f64 data).
//! Writes are atomic (temp file + rename) and serialization is canonical,
//! so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{DehazeError, Result};

const MAGIC: &[u8; 8] = b"DHZTNSR1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    /// (name, tag, values); order is preserved.
    pub arrays: Vec<(String, String, ArrayD<f64>)>,
}

impl Container {
    pub fn array(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            write_str(&mut buf, k);
            write_str(&mut buf, v);
        }
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, tag, arr) in &self.arrays {
            write_str(&mut buf, name);
            write_str(&mut buf, tag);
            buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
            for d in arr.shape() {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(DehazeError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DehazeError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n_arrays = r.u32()?;
        let mut arrays = Vec::with_capacity(n_arrays as usize);
        for _ in 0..n_arrays {
            let name = r.string()?;
            let tag = r.string()?;
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let len: usize = dims.iter().product();
            let mut vals = Vec::with_capacity(len);
            for _ in 0..len {
                vals.push(r.f64()?);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals)
                .map_err(|_| DehazeError::Checkpoint("inconsistent array shape".into()))?;
            arrays.push((name, tag, arr));
        }
        if r.pos != data.len() {
            return Err(DehazeError::Checkpoint("trailing bytes".into()));
        }
        Ok(Container { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)
                .map_err(|e| DehazeError::io(tmp.display().to_string(), e))?;
            f.write_all(&self.to_bytes())
                .map_err(|e| DehazeError::io(tmp.display().to_string(), e))?;
        }
        fs::rename(&tmp, path).map_err(|e| DehazeError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut data))
            .map_err(|e| DehazeError::io(path.display().to_string(), e))?;
        Self::from_bytes(&data).map_err(|e| match e {
            DehazeError::Checkpoint(msg) => {
                DehazeError::Checkpoint(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(DehazeError::Checkpoint("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| DehazeError::Checkpoint("invalid utf-8 string".into()))
    }
}
