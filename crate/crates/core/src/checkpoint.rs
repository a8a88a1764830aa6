//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MILNET1\0"
//! u32 entry count
//! per entry: u32 name length, UTF-8 name, u8 rank, u32 dim * rank, f64 * prod(dims)
//! u32 CRC32 of every byte between the magic and the checksum
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MILNET1\0";

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    put_u32(&mut body, entries.len(), "entry count")?;
    for (name, t) in entries {
        put_u32(&mut body, name.len(), "name length")?;
        body.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("tensor {name} rank too large")))?;
        body.push(rank);
        for &d in t.dims() {
            put_u32(&mut body, d, "dim")?;
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(MAGIC.len() + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let body = &bytes[MAGIC.len()..bytes.len() - 4];
    let tail = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t =
            Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Looks up a required entry by name.
pub fn take_entry(entries: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let idx = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks entry {name}")))?;
    Ok(entries.remove(idx).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let e = vec![("a".to_string(), Tensor::from_vec(vec![1.5]).unwrap())];
        let b = encode(&e).unwrap();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'a');
        assert_eq!(b[17], 1);
        assert_eq!(&b[18..22], &1u32.to_le_bytes());
        assert_eq!(&b[22..30], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn corruption_is_detected() {
        let e = vec![("w".to_string(), Tensor::from_vec(vec![1.0, 2.0]).unwrap())];
        let mut b = encode(&e).unwrap();
        b[20] ^= 1;
        assert!(matches!(decode(&b), Err(Error::Format(_))));
        assert!(decode(b"MILNET0\0xxxxxxxx").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), name in "[a-z_.]{1,12}") {
            let n = vals.len();
            let e = vec![(name, Tensor::new(vec![n], vals).unwrap())];
            let bytes = encode(&e).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
