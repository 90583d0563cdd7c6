//! `MRF1` parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MRF1"
//! repeated until end of file:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 dims
//!   prod(dims) x f64 payload
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRF1";
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        4 + entries.iter().map(|(n, t)| 16 + n.len() + 8 * t.numel()).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing MRF1 magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        if name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("name length {name_len} too large")));
        }
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("rank {rank} of `{name}` too large")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dim")?)
                .map_err(|_| Error::Checkpoint("dimension overflows usize".into()))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` element count overflows")))?;
            dims.push(d);
        }
        let nbytes = numel
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` payload overflows")))?;
        let payload = r.take(nbytes, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&[("ab".to_string(), t)]);
        let mut expected = b"MRF1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"MRF2").is_err());
        assert!(decode(b"").is_err());
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("w".to_string(), t)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(decode(b"MRF1").unwrap().len(), 0);
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = b"MRF1".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(b'x');
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(entries in proptest::collection::vec(
            ("[a-z.]{0,12}", proptest::collection::vec(-1e6f64..1e6, 0..20)), 0..5)
        ) {
            let entries: Vec<(String, Tensor)> = entries
                .into_iter()
                .map(|(n, d)| (n, Tensor::from_vec(d)))
                .collect();
            prop_assert_eq!(decode(&encode(&entries)).unwrap(), entries);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let mut b = b"MRF1".to_vec();
            b.extend(bytes);
            let _ = decode(&b);
        }
    }
}
