//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CLATTCK1"
//! count    u32
//! count x entry:
//!   name_len u32, name utf-8 bytes
//!   dtype    u8      (1 = f64)
//!   ndim     u32, dims u64 x ndim
//!   offset   u64     byte offset of the data inside the payload
//! payload  f64 little-endian values, entries back to back
//! ```

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLATTCK1";
const DTYPE_F64: u8 = 1;

pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in entries {
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(DTYPE_F64);
        header.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    header.extend_from_slice(&payload);
    fs::write(path, header).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                line: 0,
                message: format!("checkpoint truncated at byte {}", self.pos),
            });
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
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(bad(format!("unsupported dtype {dtype} for {name}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        headers.push((name, shape, offset));
    }
    let payload = &buf[r.pos..];
    headers
        .into_iter()
        .map(|(name, shape, offset)| {
            let len: usize = shape.iter().product();
            let bytes = payload
                .get(offset..offset + 8 * len)
                .ok_or_else(|| bad(format!("payload of {name} out of bounds")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let entries = vec![
            (
                "w".to_string(),
                Tensor::new(&[2, 2], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE]).unwrap(),
            ),
            ("b".to_string(), Tensor::scalar(7.0)),
        ];
        save_checkpoint(&path, &entries).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), entries);
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..8], b"CLATTCK1");
        assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 2);
        // last 8 bytes are the scalar payload
        assert_eq!(f64::from_le_bytes(raw[raw.len() - 8..].try_into().unwrap()), 7.0);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"CLATTCK1\x05\x00").unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
