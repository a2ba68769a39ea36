//! Tensor pack: a text manifest plus one binary blob.
//!
//! `<base>.manifest` starts with the line `tensorpack v1`, followed by one
//! line per tensor:
//!
//! ```text
//! layers.0.wq dtype=f64 shape=64x64 offset=0 stage=base
//! ```
//!
//! `<base>.bin` holds every tensor's entries as little-endian `f64`,
//! concatenated in manifest order; `offset` is the byte offset of the first
//! entry. Extra `key=value` pairs are free-form metadata. Keys and values are
//! percent-encoded for whitespace, `=` and `%`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const HEADER: &str = "tensorpack v1";

#[derive(Clone, Debug, PartialEq)]
pub struct PackEntry {
    pub name: String,
    pub tensor: Tensor,
    pub attrs: BTreeMap<String, String>,
}

impl PackEntry {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        PackEntry {
            name: name.into(),
            tensor,
            attrs: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.attrs.insert(key.to_string(), value.to_string());
        self
    }

    pub fn attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(&self.name, format!("missing attribute `{key}`")))
    }

    pub fn attr_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.attr(key)?;
        raw.parse()
            .map_err(|_| Error::format(&self.name, format!("attribute `{key}` has bad value `{raw}`")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorPack {
    pub entries: Vec<PackEntry>,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, ".manifest")
}

pub fn blob_path(base: &Path) -> PathBuf {
    with_suffix(base, ".bin")
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(base.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

impl TensorPack {
    pub fn new() -> Self {
        TensorPack::default()
    }

    pub fn push(&mut self, entry: PackEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Result<&PackEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(name, "entry not found"))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.get(name)?.tensor.clone())
    }

    /// Renders manifest text and blob bytes.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut manifest = format!("{HEADER}\n");
        let mut blob = Vec::new();
        for e in &self.entries {
            let shape = e
                .tensor
                .shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x");
            write!(
                manifest,
                "{} dtype=f64 shape={shape} offset={}",
                escape(&e.name),
                blob.len()
            )
            .unwrap();
            for (k, v) in &e.attrs {
                write!(manifest, " {}={}", escape(k), escape(v)).unwrap();
            }
            manifest.push('\n');
            for v in e.tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (manifest, blob)
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        match lines.next() {
            Some(HEADER) => {}
            other => {
                return Err(Error::format(
                    "<header>",
                    format!("expected `{HEADER}`, found {other:?}"),
                ))
            }
        }
        let mut pack = TensorPack::new();
        let mut expected_offset = 0usize;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut fields = line.split_whitespace();
            let name = unescape(fields.next().unwrap_or_default());
            let mut attrs = BTreeMap::new();
            for f in fields {
                let (k, v) = f
                    .split_once('=')
                    .ok_or_else(|| Error::format(&name, format!("field `{f}` is not key=value")))?;
                attrs.insert(unescape(k), unescape(v));
            }
            let dtype = attrs
                .remove("dtype")
                .ok_or_else(|| Error::format(&name, "missing dtype"))?;
            if dtype != "f64" {
                return Err(Error::format(&name, format!("unsupported dtype `{dtype}`")));
            }
            let shape: Vec<usize> = attrs
                .remove("shape")
                .ok_or_else(|| Error::format(&name, "missing shape"))?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(&name, "malformed shape"))?;
            let offset: usize = attrs
                .remove("offset")
                .ok_or_else(|| Error::format(&name, "missing offset"))?
                .parse()
                .map_err(|_| Error::format(&name, "malformed offset"))?;
            if offset != expected_offset {
                return Err(Error::format(
                    &name,
                    format!("offset {offset} does not follow previous entry (expected {expected_offset})"),
                ));
            }
            if pack.entries.iter().any(|e| e.name == name) {
                return Err(Error::format(&name, "duplicate entry"));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > blob.len() {
                return Err(Error::format(
                    &name,
                    format!("blob truncated: need {end} bytes, have {}", blob.len()),
                ));
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::format(&name, e.to_string()))?;
            pack.entries.push(PackEntry { name, tensor, attrs });
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(Error::format(
                "<blob>",
                format!("{} trailing bytes after last entry", blob.len() - expected_offset),
            ));
        }
        Ok(pack)
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (manifest, blob) = self.encode();
        let mp = manifest_path(base);
        std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
        let bp = blob_path(base);
        std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let mp = manifest_path(base);
        let manifest = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let bp = blob_path(base);
        let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        TensorPack::decode(&manifest, &blob)
    }

    pub fn exists(base: &Path) -> bool {
        manifest_path(base).exists() && blob_path(base).exists()
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '%' | '=' => write!(out, "%{:02X}", ch as u32).unwrap(),
            c if c.is_whitespace() => {
                let mut buf = [0u8; 4];
                for b in c.encode_utf8(&mut buf).bytes() {
                    write!(out, "%{b:02X}").unwrap();
                }
            }
            c => out.push(c),
        }
    }
    if out.is_empty() {
        out.push_str("%00");
    }
    out
}

fn unescape(s: &str) -> String {
    if s == "%00" {
        return String::new();
    }
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            if let Ok(b) = u8::from_str_radix(&s[i + 1..i + 3], 16) {
                out.push(b);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}
