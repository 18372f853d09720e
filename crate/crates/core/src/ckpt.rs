//! Parameter checkpoint files: named tensors with a shape header and
//! little-endian 64-bit floats.
//!
//! Layout (all integers little-endian):
//!   magic  b"PSCK"
//!   u32    format version (1)
//!   u32    tensor count
//!   per tensor:
//!     u32          name byte length, then that many UTF-8 bytes
//!     4 x u32      shape (N, C, H, W)
//!     N*C*H*W x f64  values
//!
//! The format is stable across versions; readers reject unknown magic or
//! version numbers rather than guessing.

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u32 = 1;

/// Serialize every parameter (in store order) to `path`.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let (n, c, h, w) = p.value.shape();
        for d in [n, c, h, w] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a checkpoint back as (name, tensor) pairs in file order.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let decode_err = |reason: &str| Error::Decode {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Option<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return None;
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Some(s)
        }
    }
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let mut take = |n: usize| cur.take(n).ok_or_else(|| decode_err("truncated checkpoint"));
    if take(4)? != MAGIC {
        return Err(decode_err("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(decode_err(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| decode_err("name is not UTF-8"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        }
        let len = dims.iter().product::<usize>();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        out.push((name, Tensor::from_vec(dims[0], dims[1], dims[2], dims[3], data)?));
    }
    Ok(out)
}

/// Load checkpoint values into an existing store; names and shapes must match
/// the store's layout exactly.
pub fn load_params(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = load_tensors(path)?;
    if tensors.len() != store.len() {
        return Err(Error::Decode {
            path: path.display().to_string(),
            reason: format!("checkpoint has {} tensors, model expects {}", tensors.len(), store.len()),
        });
    }
    for (i, (name, tensor)) in tensors.into_iter().enumerate() {
        let p = store.get_mut(i);
        if p.name != name || p.value.shape() != tensor.shape() {
            return Err(Error::Decode {
                path: path.display().to_string(),
                reason: format!("tensor {i} mismatch: file has {name:?}, model expects {:?}", p.name),
            });
        }
        p.value = tensor;
    }
    Ok(())
}
