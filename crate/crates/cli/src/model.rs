//! Model files: a UTF-8 manifest followed by named tensor records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPENMDL\0"  u32 version
//! u64 manifest length, manifest bytes, u32 crc32 of the manifest
//! per tensor: u64 payload length, payload, u32 crc32 of the payload
//!   payload = u32 name length, name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! Manifest lines are `key<TAB>value`; each tensor is listed as
//! `tensor<TAB>group/name` in record order.

use std::collections::BTreeMap;
use std::path::Path;

use spen_core::autodiff::{ParamStore, Tensor};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SPENMDL\0";

/// Manifest fields plus parameter groups (`theta`, `phi`, `psi`, ...).
#[derive(Clone, Debug, Default)]
pub struct ModelFile {
    pub manifest: BTreeMap<String, String>,
    pub groups: BTreeMap<String, ParamStore>,
}

fn err(msg: impl Into<String>) -> CliError {
    CliError::Model(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(err(format!("file truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn checked_len(n: u64, what: &str) -> CliResult<usize> {
    usize::try_from(n).map_err(|_| err(format!("{what} length {n} is too large")))
}

impl ModelFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> CliResult<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| err(format!("manifest has no {key:?} entry")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| err(format!("manifest entry {key} = {v:?} is malformed")))
    }

    pub fn group(&self, name: &str) -> Option<&ParamStore> {
        self.groups.get(name)
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.manifest {
            if k == "tensor" || k.contains(['\t', '\n']) || v.contains('\n') {
                return Err(err(format!("manifest key {k:?} or its value cannot be stored")));
            }
            manifest.push_str(&format!("{k}\t{v}\n"));
        }
        let mut records = Vec::new();
        for (g, store) in &self.groups {
            if g.contains(['/', '\t', '\n']) {
                return Err(err(format!("bad group name {g:?}")));
            }
            for (name, t) in store.iter() {
                let full = format!("{g}/{name}");
                if full.contains(['\t', '\n']) {
                    return Err(err(format!("bad tensor name {full:?}")));
                }
                manifest.push_str(&format!("tensor\t{full}\n"));
                records.push((full, t));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&crc32fast::hash(manifest.as_bytes()).to_le_bytes());
        for (name, t) in records {
            let mut payload = Vec::with_capacity(16 + name.len() + 8 * t.len());
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            payload.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "header")? != MAGIC {
            return Err(err("not a model file (bad magic bytes)"));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "model format version {version} is not supported (this build reads version {FORMAT_VERSION})"
            )));
        }
        let n = checked_len(r.u64("manifest length")?, "manifest")?;
        let text = r.take(n, "manifest")?;
        if crc32fast::hash(text) != r.u32("manifest checksum")? {
            return Err(err("manifest checksum mismatch"));
        }
        let text = std::str::from_utf8(text).map_err(|_| err("manifest is not UTF-8"))?;
        let mut file = ModelFile::new();
        let mut expected: Vec<String> = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| err(format!("malformed manifest line {line:?}")))?;
            if k == "tensor" {
                expected.push(v.to_string());
            } else {
                file.manifest.insert(k.to_string(), v.to_string());
            }
        }
        let mut seen = Vec::with_capacity(expected.len());
        while !r.at_end() {
            let len = checked_len(r.u64("record length")?, "record")?;
            let payload = r.take(len, &format!("record {}", seen.len()))?;
            let crc = r.u32("record checksum")?;
            let mut p = Reader { bytes: payload, pos: 0 };
            let name_len = p.u32("record name")? as usize;
            let name = String::from_utf8_lossy(p.take(name_len, "record name")?).into_owned();
            if crc32fast::hash(payload) != crc {
                return Err(err(format!("checksum mismatch in tensor record {name:?}")));
            }
            let rows = p.u32("record shape")? as usize;
            let cols = p.u32("record shape")? as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| err(format!("tensor record {name:?} has an impossible shape")))?;
            let raw = p.take(count * 8, &format!("tensor record {name:?}"))?;
            if !p.at_end() {
                return Err(err(format!("tensor record {name:?} has trailing bytes")));
            }
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let (group, pname) = name
                .split_once('/')
                .ok_or_else(|| err(format!("tensor record {name:?} has no group")))?;
            file.groups
                .entry(group.to_string())
                .or_default()
                .add(pname, Tensor::from_rows(rows, cols, data));
            seen.push(name);
        }
        if seen != expected {
            let missing: Vec<_> = expected.iter().filter(|n| !seen.contains(n)).collect();
            let extra: Vec<_> = seen.iter().filter(|n| !expected.contains(n)).collect();
            return Err(err(format!(
                "tensor records do not match the manifest (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Model(m) => CliError::Model(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Copies every tensor of `stored` into the freshly constructed `target`,
/// which must have exactly the same names and shapes.
pub fn restore_into(target: &mut ParamStore, stored: &ParamStore, group: &str) -> CliResult<()> {
    if target.len() != stored.len() {
        return Err(err(format!(
            "group {group} holds {} tensors but the architecture has {}",
            stored.len(),
            target.len()
        )));
    }
    for (name, t) in stored.iter() {
        let id = target
            .find(name)
            .ok_or_else(|| err(format!("unexpected tensor {group}/{name}")))?;
        let dst = target.get(id);
        if dst.rows() != t.rows() || dst.cols() != t.cols() {
            return Err(err(format!(
                "tensor {group}/{name} is {}x{} but the architecture expects {}x{}",
                t.rows(),
                t.cols(),
                dst.rows(),
                dst.cols()
            )));
        }
        *target.get_mut(id) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelFile {
        let mut f = ModelFile::new();
        f.set("task", "seq");
        f.set("tau", 0.25);
        let mut s = ParamStore::new();
        s.add("energy.w", Tensor::from_rows(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]));
        s.add("energy.u", Tensor::from_rows(1, 3, vec![1.0, 2.0, 3.0]));
        f.groups.insert("theta".into(), s);
        let mut p = ParamStore::new();
        p.add("infnet.out.b", Tensor::zeros(1, 2));
        f.groups.insert("psi".into(), p);
        f
    }

    #[test]
    fn round_trip_is_bitwise() {
        let f = sample();
        let g = ModelFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        assert_eq!(g.manifest, f.manifest);
        for (name, store) in &f.groups {
            let other = &g.groups[name];
            assert_eq!(store.fingerprint(), other.fingerprint());
            for ((a, x), (b, y)) in store.iter().zip(other.iter()) {
                assert_eq!(a, b);
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(x), bits(y));
            }
        }
        assert_eq!(g.parse::<f64>("tau").unwrap(), 0.25);
    }

    #[test]
    fn corrupted_tensor_byte_names_the_record() {
        let bytes = sample().to_bytes().unwrap();
        let name = b"theta/energy.u";
        let start = bytes.windows(name.len()).rposition(|w| w == name).unwrap();
        let at = start + name.len() + 8 + 3; // inside the first value
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        let e = ModelFile::from_bytes(&bad).unwrap_err().to_string();
        assert!(e.contains("checksum mismatch") && e.contains("theta/energy.u"), "{e}");
        // every single-byte flip after the header is caught
        for i in 12..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            assert!(ModelFile::from_bytes(&b).is_err(), "flip at {i} went unnoticed");
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let e = ModelFile::from_bytes(&bytes).unwrap_err().to_string();
        assert!(e.contains('7') && e.contains(&FORMAT_VERSION.to_string()), "{e}");
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(ModelFile::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let f = sample();
        let mut target = ParamStore::new();
        target.add("energy.w", Tensor::zeros(2, 2));
        target.add("energy.u", Tensor::zeros(1, 3));
        restore_into(&mut target, &f.groups["theta"], "theta").unwrap();
        assert_eq!(target.fingerprint(), f.groups["theta"].fingerprint());
        let mut wrong = ParamStore::new();
        wrong.add("energy.w", Tensor::zeros(2, 2));
        wrong.add("energy.u", Tensor::zeros(3, 1));
        assert!(restore_into(&mut wrong, &f.groups["theta"], "theta").is_err());
    }
}
