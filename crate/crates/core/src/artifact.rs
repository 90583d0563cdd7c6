//! Model files: an `MRF1` container whose `meta:<key>=<value>` entries (empty
//! tensors) carry run metadata alongside the weights.

use std::fs;
use std::path::Path;

use moreflow_diffcore::{checkpoint, Tensor};

use crate::error::{Error, Result};
use crate::io::Meta;

const META_PREFIX: &str = "meta:";

pub type Entries = Vec<(String, Tensor)>;

pub fn pack(meta: &[(String, String)], tensors: Entries) -> Result<Entries> {
    let mut out = Vec::with_capacity(meta.len() + tensors.len());
    for (k, v) in meta {
        if k.is_empty() || k.contains('=') {
            return Err(Error::Mismatch(format!("bad metadata key `{k}`")));
        }
        out.push((format!("{META_PREFIX}{k}={v}"), Tensor::zeros(&[0])));
    }
    out.extend(tensors);
    Ok(out)
}

/// Separates metadata entries from tensors, preserving order.
pub fn unpack(entries: Entries) -> (Meta, Entries) {
    let mut meta = Vec::new();
    let mut rest = Vec::new();
    for (name, t) in entries {
        match name.strip_prefix(META_PREFIX).and_then(|s| s.split_once('=')) {
            Some((k, v)) if t.numel() == 0 => meta.push((k.to_string(), v.to_string())),
            _ => rest.push((name, t)),
        }
    }
    (meta, rest)
}

pub fn save(path: &Path, meta: &[(String, String)], tensors: Entries) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = checkpoint::encode(&pack(meta, tensors)?);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Meta, Entries)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(unpack(checkpoint::decode(&bytes)?))
}

/// Removes and returns the tensor called `name`.
pub fn take(entries: &mut Entries, name: &str) -> Result<Tensor> {
    let i = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Mismatch(format!("checkpoint lacks `{name}`")))?;
    Ok(entries.remove(i).1)
}

pub fn require<'a>(meta: &'a [(String, String)], key: &str) -> Result<&'a str> {
    crate::io::meta_get(meta, key).ok_or_else(|| Error::Mismatch(format!("checkpoint lacks metadata `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metadata_survives_a_roundtrip() {
        let meta = vec![("kind".to_string(), "tokenizer".to_string()), ("note".into(), "a=b c".into())];
        let tensors = vec![("w".to_string(), Tensor::from_vec(vec![1.0, 2.0]))];
        let bytes = checkpoint::encode(&pack(&meta, tensors.clone()).unwrap());
        let (m, t) = unpack(checkpoint::decode(&bytes).unwrap());
        assert_eq!((m, t), (meta, tensors));
        assert!(pack(&[("a=b".into(), "c".into())], vec![]).is_err());
    }
}
