//! Checkpoint directory format.
//!
//! `manifest.txt` is UTF-8 text, one record per line:
//!
//! ```text
//! format bertswin-archive 1
//! meta <key> <JSON string>
//! tensor <name> <offset> <count> <dim0>x<dim1>x...
//! sha256 <hex digest of tensors.bin>
//! ```
//!
//! `tensors.bin` is the concatenation of every tensor as little-endian `f64`;
//! `offset` and `count` are in elements. Scalars use the shape `-`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER: &str = "format bertswin-archive 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

impl TensorArchive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    pub fn manifest(&self, blob: &[u8]) -> Result<String> {
        let mut m = String::new();
        let _ = writeln!(m, "{HEADER}");
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("archive meta key `{k}` must be a single word")));
            }
            let _ = writeln!(m, "meta {k} {}", serde_json::to_string(v)?);
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("tensor name `{name}` must be a single word")));
            }
            let _ = writeln!(m, "tensor {name} {offset} {} {}", t.numel(), shape_text(t.shape()));
            offset += t.numel();
        }
        let _ = writeln!(m, "sha256 {}", hex(&Sha256::digest(blob)));
        Ok(m)
    }

    /// SHA-256 over manifest and blob; equal archives hash equal.
    pub fn digest(&self) -> Result<String> {
        let blob = self.blob();
        let manifest = self.manifest(&blob)?;
        let mut h = Sha256::new();
        h.update(manifest.as_bytes());
        h.update(&blob);
        Ok(hex(&h.finalize()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let blob = self.blob();
        let manifest = self.manifest(&blob)?;
        std::fs::write(dir.join("tensors.bin"), &blob)?;
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let blob = std::fs::read(dir.join("tensors.bin"))?;
        Self::parse(&text, &blob)
    }

    pub fn parse(manifest: &str, blob: &[u8]) -> Result<Self> {
        let err =
            |line: usize, field: &str, msg: String| Error::parse(format!("manifest line {line}, field `{field}`"), msg);
        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == HEADER => {}
            other => {
                return Err(err(
                    1,
                    "format",
                    format!("expected `{HEADER}`, found `{}`", other.map_or("", |o| o.1)),
                ));
            }
        }
        if !blob.len().is_multiple_of(8) {
            return Err(Error::parse(
                "tensors.bin",
                format!("length {} is not a multiple of 8", blob.len()),
            ));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut archive = TensorArchive::default();
        let mut digest_seen = false;
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.splitn(3, ' ');
            let kind = f.next().unwrap_or_default();
            match kind {
                "meta" => {
                    let key = f.next().ok_or_else(|| err(n, "meta.key", "missing".into()))?;
                    let raw = f.next().ok_or_else(|| err(n, "meta.value", "missing".into()))?;
                    let v: String = serde_json::from_str(raw).map_err(|e| err(n, "meta.value", e.to_string()))?;
                    archive.meta.insert(key.to_string(), v);
                }
                "tensor" => {
                    let parts: Vec<&str> = line.split(' ').collect();
                    if parts.len() != 5 {
                        return Err(err(n, "tensor", format!("expected 5 fields, found {}", parts.len())));
                    }
                    let num = |s: &str, field: &str| {
                        s.parse::<usize>()
                            .map_err(|_| err(n, field, format!("`{s}` is not an integer")))
                    };
                    let offset = num(parts[2], "tensor.offset")?;
                    let count = num(parts[3], "tensor.count")?;
                    let shape: Vec<usize> = if parts[4] == "-" {
                        vec![]
                    } else {
                        parts[4]
                            .split('x')
                            .map(|d| num(d, "tensor.shape"))
                            .collect::<Result<_>>()?
                    };
                    if shape.iter().product::<usize>() != count {
                        return Err(err(
                            n,
                            "tensor.shape",
                            format!("{shape:?} does not hold {count} values"),
                        ));
                    }
                    let end = offset.checked_add(count).filter(|e| *e <= values.len());
                    let end =
                        end.ok_or_else(|| err(n, "tensor.offset", format!("range {offset}+{count} exceeds blob")))?;
                    archive
                        .tensors
                        .push((parts[1].to_string(), Tensor::new(shape, values[offset..end].to_vec())?));
                }
                "sha256" => {
                    let want = f.next().unwrap_or_default();
                    let have = hex(&Sha256::digest(blob));
                    if want != have {
                        return Err(err(n, "sha256", "blob digest does not match".into()));
                    }
                    digest_seen = true;
                }
                other => return Err(err(n, "record", format!("unknown record type `{other}`"))),
            }
        }
        if !digest_seen {
            return Err(err(manifest.lines().count(), "sha256", "missing".into()));
        }
        Ok(archive)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
