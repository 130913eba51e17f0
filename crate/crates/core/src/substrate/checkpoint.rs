//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "NAREMCKP"
//! version    u32      1
//! config     u64 length + UTF-8 JSON
//! count      u64      number of arrays
//! per array: u32 name length + UTF-8 name, u64 rows, u64 cols,
//!            rows·cols f64 values (row-major)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NAREMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub arrays: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_store(config_json: String, store: &ParamStore) -> Self {
        Checkpoint {
            config_json,
            arrays: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .arrays
            .iter()
            .map(|(n, m)| n.len() + 20 + m.len() * 8)
            .sum();
        let mut out = Vec::with_capacity(32 + self.config_json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, m) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            message,
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic).map_err(&bad)?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r).map_err(&bad)?);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let cfg_len = u64::from_le_bytes(read_array(&mut r).map_err(&bad)?) as usize;
        let config_json = read_string(&mut r, cfg_len).map_err(&bad)?;
        let count = u64::from_le_bytes(read_array(&mut r).map_err(&bad)?) as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_array(&mut r).map_err(&bad)?) as usize;
            let name = read_string(&mut r, name_len).map_err(&bad)?;
            let rows = u64::from_le_bytes(read_array(&mut r).map_err(&bad)?) as usize;
            let cols = u64::from_le_bytes(read_array(&mut r).map_err(&bad)?) as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| bad(format!("array `{name}` too large")))?;
            if r.len() < n * 8 {
                return Err(bad(format!("truncated payload for `{name}`")));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            arrays.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            config_json,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies arrays into `store`, which must hold exactly the same names
    /// and shapes.
    pub fn restore_into(&self, store: &mut ParamStore, origin: &Path) -> Result<()> {
        let bad = |message: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            message,
        };
        if self.arrays.len() != store.len() {
            return Err(bad(format!(
                "{} arrays, model expects {}",
                self.arrays.len(),
                store.len()
            )));
        }
        for (name, m) in &self.arrays {
            let id = store
                .id(name)
                .ok_or_else(|| bad(format!("unexpected array `{name}`")))?;
            if store.value(id).shape() != m.shape() {
                return Err(bad(format!(
                    "array `{name}` is {:?}, model expects {:?}",
                    m.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = m.clone();
        }
        Ok(())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> std::result::Result<(), String> {
    if r.len() < buf.len() {
        return Err("unexpected end of file".into());
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_array<const N: usize>(r: &mut &[u8]) -> std::result::Result<[u8; N], String> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_string(r: &mut &[u8], len: usize) -> std::result::Result<String, String> {
    if r.len() < len {
        return Err("unexpected end of file".into());
    }
    let s = std::str::from_utf8(&r[..len])
        .map_err(|e| e.to_string())?
        .to_owned();
    *r = &r[len..];
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40), cols in 1usize..5) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let ck = Checkpoint { config_json: "{\"a\":1}".into(), arrays: vec![("x.y".into(), m.clone())] };
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(&back.config_json, &ck.config_json);
            let got = &back.arrays[0].1;
            prop_assert_eq!(got.shape(), m.shape());
            for (a, b) in got.data().iter().zip(m.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint {
            config_json: "{}".into(),
            arrays: vec![("w".into(), Matrix::filled(2, 2, 1.5))],
        };
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("t")).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("t")).is_err());
    }
}
