//! `apnet-ckpt-1` checkpoints: a text manifest plus a flat little-endian
//! `f64` blob.
//!
//! Manifest layout:
//!
//! ```text
//! apnet-ckpt-1
//! blob <file name of the binary blob>
//! meta <key> <value>            (zero or more)
//! param <name> <group> f64 <d0>x<d1>x... <byte offset>
//! ```
//!
//! A scalar parameter writes its shape as `scalar`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_VERSION: &str = "apnet-ckpt-1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: Vec<(String, String)>) -> Self {
        let params = store.iter().map(|(_, p)| (p.name.clone(), p.group.clone(), p.tensor.clone())).collect();
        Self { meta, params }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Writes `<path>` (manifest) and `<path>` with extension `bin` (blob).
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = blob_path(path);
        let mut manifest = format!("{CHECKPOINT_VERSION}\n");
        manifest.push_str(&format!(
            "blob {}\n",
            blob.file_name().and_then(|n| n.to_str()).ok_or_else(|| bad("non-utf8 blob path"))?
        ));
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("invalid meta entry `{k}`")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut bytes = Vec::new();
        for (name, group, t) in &self.params {
            if name.contains(char::is_whitespace) || group.contains(char::is_whitespace) {
                return Err(bad(format!("invalid parameter name `{name}`")));
            }
            let shape = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            manifest.push_str(&format!("param {name} {group} f64 {shape} {}\n", bytes.len()));
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, manifest)?;
        fs::write(blob, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(CHECKPOINT_VERSION) => {}
            other => return Err(bad(format!("expected `{CHECKPOINT_VERSION}` header, got {other:?}"))),
        }
        let mut blob_name = None;
        let mut meta = Vec::new();
        let mut specs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                ["blob", name] => blob_name = Some(name.to_string()),
                ["meta", key, rest @ ..] => meta.push((key.to_string(), rest.join(" "))),
                ["param", name, group, "f64", shape, offset] => {
                    let shape: Vec<usize> = if *shape == "scalar" {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad(format!("line {}: bad shape `{shape}`", lineno + 2)))?
                    };
                    let offset: usize =
                        offset.parse().map_err(|_| bad(format!("line {}: bad offset", lineno + 2)))?;
                    specs.push((name.to_string(), group.to_string(), shape, offset));
                }
                _ => return Err(bad(format!("line {}: unrecognised entry `{line}`", lineno + 2))),
            }
        }
        let blob_name = blob_name.ok_or_else(|| bad("manifest has no blob entry"))?;
        let bytes = fs::read(path.with_file_name(blob_name))?;
        let mut params = Vec::with_capacity(specs.len());
        for (name, group, shape, offset) in specs {
            let n: usize = shape.iter().product();
            let end = offset + 8 * n;
            let raw = bytes.get(offset..end).ok_or_else(|| bad(format!("`{name}` extends past end of blob")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push((name, group, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, params })
    }

    /// Copies parameter values into `store`, matching by name. Every store
    /// parameter must be present with the same shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let (_, _, t) = self
                .params
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| bad(format!("checkpoint has no parameter `{name}`")))?;
            if t.shape() != store.tensor(id).shape() {
                return Err(bad(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.tensor(id).shape()
                )));
            }
            *store.tensor_mut(id) = t.clone();
        }
        Ok(())
    }
}
