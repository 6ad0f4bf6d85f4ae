//! Checkpoint storage: a text manifest plus one little-endian `f32` blob.
//!
//! ```text
//! protospsa-checkpoint 1
//! blob = model.bin
//! blob_bytes = 447744
//! meta net.channels = 64
//! tensor block0.conv.weight shape=64,1,3,3 offset=0 bytes=2304
//! ```
//!
//! Tensor order in the blob follows manifest order. `meta` entries carry
//! everything that is not a tensor (configuration, counters, weights of the
//! task-weighting state) as strings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const MAGIC: &str = "protospsa-checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(bad(format!("{kind} `{s}` must be non-empty without whitespace or `=`")));
    }
    Ok(())
}

/// Blob path paired with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing meta key `{key}`")))
    }

    pub fn meta_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| bad(format!("meta key `{key}` has unparsable value `{raw}`")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    /// Renders the manifest and blob without touching the filesystem.
    pub fn encode(&self, blob_name: &str) -> Result<(String, Vec<u8>)> {
        check_token("blob name", blob_name)?;
        let mut blob = Vec::new();
        let mut lines = Vec::new();
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            lines.push(format!(
                "tensor {name} shape={} offset={} bytes={}",
                shape.join(","),
                blob.len(),
                t.len() * 4
            ));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut manifest = format!("{MAGIC}\nblob = {blob_name}\nblob_bytes = {}\n", blob.len());
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(bad(format!("meta value for `{k}` contains a newline")));
            }
            manifest.push_str(&format!("meta {k} = {v}\n"));
        }
        for line in lines {
            manifest.push_str(&line);
            manifest.push('\n');
        }
        Ok((manifest, blob))
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a protospsa checkpoint manifest"));
        }
        let mut ckpt = Checkpoint::new();
        let mut declared_bytes = None;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(" = ")
                    .ok_or_else(|| bad(format!("malformed meta line `{line}`")))?;
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                ckpt.tensors.push(parse_tensor_line(rest, blob)?);
            } else if let Some(v) = line.strip_prefix("blob_bytes = ") {
                declared_bytes = Some(
                    v.parse::<usize>()
                        .map_err(|_| bad(format!("bad blob_bytes `{v}`")))?,
                );
            } else if line.starts_with("blob = ") {
                continue;
            } else {
                return Err(bad(format!("unrecognized manifest line `{line}`")));
            }
        }
        if declared_bytes != Some(blob.len()) {
            return Err(bad(format!(
                "blob has {} bytes, manifest declares {declared_bytes:?}",
                blob.len()
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_file = blob_path(manifest_path);
        let blob_name = blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| bad("checkpoint path has no usable file name"))?;
        let (manifest, blob) = self.encode(blob_name)?;
        if let Some(dir) = manifest_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(&blob_file, blob)?;
        fs::write(manifest_path, manifest)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(manifest_path)?;
        let blob_name = manifest
            .lines()
            .find_map(|l| l.strip_prefix("blob = "))
            .ok_or_else(|| bad("manifest names no blob"))?;
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let blob = fs::read(dir.join(blob_name))?;
        Self::decode(&manifest, &blob)
    }
}

fn parse_tensor_line(rest: &str, blob: &[u8]) -> Result<(String, Tensor<f32>)> {
    let mut parts = rest.split_whitespace();
    let name = parts.next().ok_or_else(|| bad("tensor line without name"))?;
    let mut shape = None;
    let mut offset = None;
    let mut bytes = None;
    for field in parts {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed tensor field `{field}`")))?;
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad number `{s}` for tensor `{name}`")))
        };
        match k {
            "shape" => shape = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?),
            "offset" => offset = Some(num(v)?),
            "bytes" => bytes = Some(num(v)?),
            _ => return Err(bad(format!("unknown tensor field `{k}`"))),
        }
    }
    let (shape, offset, bytes) = match (shape, offset, bytes) {
        (Some(s), Some(o), Some(b)) => (s, o, b),
        _ => return Err(bad(format!("incomplete tensor line for `{name}`"))),
    };
    let end = offset
        .checked_add(bytes)
        .filter(|&e| e <= blob.len() && bytes % 4 == 0)
        .ok_or_else(|| bad(format!("tensor `{name}` lies outside the blob")))?;
    let data = blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name.to_string(), Tensor::new(&shape, data)?))
}
