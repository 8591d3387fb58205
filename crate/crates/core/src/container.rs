//! Binary tensor container shared by model artifacts: a magic line, a
//! one-line JSON manifest, then raw little-endian f64 arrays in manifest
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndiff::{ParamStore, Tensor};
use serde_json::{json, Map, Value};

pub fn encode(magic: &str, mut manifest: Map<String, Value>, store: &ParamStore) -> Vec<u8> {
    let mut offset = 0usize;
    let tensors: Vec<Value> = store
        .iter()
        .map(|(_, name, t)| {
            let entry = json!({"name": name, "rows": t.rows(), "cols": t.cols(), "offset": offset});
            offset += t.len() * 8;
            entry
        })
        .collect();
    manifest.insert("tensors".into(), Value::Array(tensors));
    let mut out = Vec::with_capacity(offset + 1024);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(Value::Object(manifest).to_string().as_bytes());
    out.push(b'\n');
    for (_, _, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Returns the manifest (without its tensor directory) and the tensors.
pub fn decode(magic: &str, bytes: &[u8]) -> Result<(Map<String, Value>, ParamStore), String> {
    let rest = bytes
        .strip_prefix(magic.as_bytes())
        .and_then(|r| r.strip_prefix(b"\n"))
        .ok_or_else(|| format!("missing {magic:?} magic line"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing manifest line")?;
    let manifest: Value =
        serde_json::from_slice(&rest[..nl]).map_err(|e| format!("manifest: {e}"))?;
    let Value::Object(mut manifest) = manifest else {
        return Err("manifest is not an object".into());
    };
    let data = &rest[nl + 1..];
    let dir = manifest
        .remove("tensors")
        .and_then(|v| v.as_array().cloned())
        .ok_or("manifest has no tensor directory")?;
    let mut store = ParamStore::new();
    let mut expected_offset = 0usize;
    for entry in dir {
        let field = |k: &str| entry.get(k).and_then(Value::as_u64).map(|v| v as usize);
        let (Some(name), Some(rows), Some(cols), Some(offset)) = (
            entry.get("name").and_then(Value::as_str),
            field("rows"),
            field("cols"),
            field("offset"),
        ) else {
            return Err(format!("bad tensor entry {entry}"));
        };
        let len = rows * cols * 8;
        if offset != expected_offset || offset + len > data.len() {
            return Err(format!("tensor {name}: offset {offset} out of place"));
        }
        let values = data[offset..offset + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(name, Tensor::from_vec(rows, cols, values).map_err(|e| e.to_string())?);
        expected_offset += len;
    }
    if expected_offset != data.len() {
        return Err(format!(
            "{} trailing bytes after tensor data",
            data.len() - expected_offset
        ));
    }
    Ok((manifest, store))
}

/// Writes to a sibling temporary file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::from_vec(2, 2, vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap());
        store.add("b", Tensor::scalar(7.0));
        let mut m = Map::new();
        m.insert("k".into(), json!(1));
        let bytes = encode("TEST 1", m.clone(), &store);
        let (m2, s2) = decode("TEST 1", &bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(s2.get(s2.find("a").unwrap()), store.get(store.find("a").unwrap()));
        assert!(decode("OTHER 1", &bytes).is_err());
        assert!(decode("TEST 1", &bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert!(!dir.path().join("x.bin.tmp").exists());
    }
}
