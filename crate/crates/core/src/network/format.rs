//! On-disk model container.
//!
//! ```text
//! CPCOMP-NET <version>\n
//! <manifest byte length> <manifest CRC-32, hex>\n
//! <manifest: JSON, layers with kinds, geometry and blob descriptors>
//! <blob>*   each: u64 LE byte length, then raw f64 LE values
//! ```
//!
//! Blobs appear in manifest order (layer by layer, parameter roles in
//! [`LayerKind::params`] order). Each descriptor carries the blob's shape,
//! byte length and CRC-32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, NetworkSpec};
use crate::conv::ConvSpec;
use crate::cp::CpFactors;
use crate::error::{Error, Result};
use crate::svd::SvdFactors;
use crate::tensor::DenseTensor;

pub const MAGIC: &str = "CPCOMP-NET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    input_shape: Vec<usize>,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conv: Option<ConvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default)]
    tensors: Vec<BlobRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobRecord {
    role: String,
    shape: Vec<usize>,
    bytes: u64,
    crc32: u32,
}

fn blob_bytes(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 8);
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn to_bytes(net: &NetworkSpec) -> Vec<u8> {
    let mut blobs = Vec::new();
    let mut records = Vec::with_capacity(net.layers().len());
    for l in net.layers() {
        let mut rec = LayerRecord {
            name: l.name.clone(),
            kind: l.kind.tag().to_string(),
            conv: None,
            window: None,
            stride: None,
            tensors: Vec::new(),
        };
        match &l.kind {
            LayerKind::Conv { spec, .. } | LayerKind::DecomposedConv { spec, .. } => rec.conv = Some(*spec),
            LayerKind::MaxPool { window, stride } => {
                rec.window = Some(*window);
                rec.stride = Some(*stride);
            }
            _ => {}
        }
        for (role, t) in l.kind.params() {
            let bytes = blob_bytes(t);
            rec.tensors.push(BlobRecord {
                role: role.to_string(),
                shape: t.shape().to_vec(),
                bytes: bytes.len() as u64,
                crc32: crc32fast::hash(&bytes),
            });
            blobs.push(bytes);
        }
        records.push(rec);
    }
    let manifest = serde_json::to_vec_pretty(&Manifest {
        input_shape: net.input_shape().to_vec(),
        layers: records,
    })
    .expect("manifest serializes");
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{} {:08x}\n", manifest.len(), crc32fast::hash(&manifest)).into_bytes();
    out.extend_from_slice(&manifest);
    for b in blobs {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(&b);
    }
    out
}

pub fn save(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(net)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        message: message.into(),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let Some(nl) = rest.iter().take(64).position(|&b| b == b'\n') else {
            return parse_err(start, format!("missing {what} line"));
        };
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).or_else(|_| parse_err(start, format!("{what} line is not UTF-8")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.pos;
        if self.bytes.len() - start < n {
            return parse_err(start, format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - start));
        }
        self.pos += n;
        Ok(&self.bytes[start..start + n])
    }
}

/// Byte offset of a (1-based) line/column position inside `text`.
fn line_col_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut cur = 1;
    for (i, &b) in text.iter().enumerate() {
        if cur == line {
            return (i + column.saturating_sub(1)).min(text.len());
        }
        if b == b'\n' {
            cur += 1;
        }
    }
    text.len()
}

fn expected_roles(kind: &str) -> Option<&'static [&'static str]> {
    Some(match kind {
        "conv" => &["weight", "bias"],
        "cp_conv" => &["u1", "u2", "u3", "bias"],
        "fc" => &["weight", "bias"],
        "svd_fc" => &["ud", "vt", "bias"],
        "relu" | "maxpool" | "flatten" => &[],
        _ => return None,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkSpec> {
    let mut cur = Cursor { bytes, pos: 0 };
    let header = cur.line("header")?;
    let version = match header.split_once(' ') {
        Some((magic, v)) if magic == MAGIC && v.bytes().all(|b| b.is_ascii_digit()) => v.parse::<u32>().or_else(|_| parse_err(MAGIC.len() + 1, format!("bad version `{v}`")))?,
        _ => return parse_err(0, format!("not a {MAGIC} file")),
    };
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len_at = cur.pos;
    let bad_len = || Error::Parse {
        offset: len_at,
        message: "manifest length line must be `<bytes> <crc32 hex>`".into(),
    };
    let (len_text, crc_text) = cur.line("manifest length")?.split_once(' ').ok_or_else(|| bad_len())?;
    let canonical = |t: &str, digits: fn(&u8) -> bool| !t.is_empty() && t.bytes().all(|b| digits(&b));
    if !canonical(len_text, u8::is_ascii_digit) || crc_text.len() != 8 || !canonical(crc_text, |b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err(bad_len());
    }
    let manifest_len: usize = len_text.parse().map_err(|_| bad_len())?;
    let manifest_crc = u32::from_str_radix(crc_text, 16).map_err(|_| bad_len())?;
    let manifest_at = cur.pos;
    let raw = cur.take(manifest_len, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(raw).map_err(|e| Error::Parse {
        offset: manifest_at + line_col_offset(raw, e.line(), e.column()),
        message: format!("manifest: {e}"),
    })?;
    // Unknown kinds are reported before the checksum so that files written
    // by a newer tool get the more useful error.
    if let Some(rec) = manifest.layers.iter().find(|r| expected_roles(&r.kind).is_none()) {
        return Err(Error::UnknownLayer {
            kind: rec.kind.clone(),
            version,
        });
    }
    if crc32fast::hash(raw) != manifest_crc {
        return Err(Error::Checksum {
            name: "manifest".into(),
            offset: manifest_at,
        });
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for rec in manifest.layers {
        let roles = expected_roles(&rec.kind).expect("kinds checked above");
        let found: Vec<&str> = rec.tensors.iter().map(|t| t.role.as_str()).collect();
        if found != roles {
            return parse_err(manifest_at, format!("layer `{}` ({}) has tensors {found:?}, expected {roles:?}", rec.name, rec.kind));
        }
        let mut tensors = Vec::with_capacity(rec.tensors.len());
        for blob in &rec.tensors {
            let at = cur.pos;
            let len = u64::from_le_bytes(cur.take(8, "blob length")?.try_into().expect("8 bytes"));
            if len != blob.bytes {
                return parse_err(at, format!("blob `{}.{}` is {len} bytes, manifest says {}", rec.name, blob.role, blob.bytes));
            }
            let count = blob.shape.iter().try_fold(1usize, |a, &n| a.checked_mul(n));
            if count.and_then(|c| c.checked_mul(8)) != Some(len as usize) {
                return parse_err(at, format!("blob `{}.{}` length {len} does not match shape {:?}", rec.name, blob.role, blob.shape));
            }
            let data_at = cur.pos;
            let raw = cur.take(len as usize, "blob")?;
            if crc32fast::hash(raw) != blob.crc32 {
                return Err(Error::Checksum {
                    name: format!("{}.{}", rec.name, blob.role),
                    offset: data_at,
                });
            }
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = DenseTensor::new(blob.shape.clone(), values).or_else(|e| parse_err(at, e.to_string()))?;
            tensors.push(t);
        }
        let geometry = |what: &str| -> Result<ConvSpec> {
            rec.conv.ok_or_else(|| Error::Parse {
                offset: manifest_at,
                message: format!("{what} layer `{}` lacks conv geometry", rec.name),
            })
        };
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("role count checked");
        let kind = match rec.kind.as_str() {
            "conv" => LayerKind::Conv {
                spec: geometry("conv")?,
                weights: next(),
                bias: next(),
            },
            "cp_conv" => {
                let spec = geometry("cp_conv")?;
                let (u1, u2, u3) = (next(), next(), next());
                LayerKind::DecomposedConv {
                    spec,
                    factors: CpFactors::new(u1, u2, u3).or_else(|e| parse_err(manifest_at, e.to_string()))?,
                    bias: next(),
                }
            }
            "fc" => LayerKind::Fc {
                weights: next(),
                bias: next(),
            },
            "svd_fc" => {
                let (ud, vt) = (next(), next());
                LayerKind::DecomposedFc {
                    factors: SvdFactors::from_parts(ud, vt).or_else(|e| parse_err(manifest_at, e.to_string()))?,
                    bias: next(),
                }
            }
            "relu" => LayerKind::Relu,
            "flatten" => LayerKind::Flatten,
            "maxpool" => match (rec.window, rec.stride) {
                (Some(window), Some(stride)) => LayerKind::MaxPool { window, stride },
                _ => return parse_err(manifest_at, format!("maxpool `{}` lacks window/stride", rec.name)),
            },
            _ => unreachable!("kind checked above"),
        };
        layers.push(Layer::new(rec.name, kind));
    }
    if cur.pos != bytes.len() {
        return parse_err(cur.pos, format!("{} trailing bytes after the last blob", bytes.len() - cur.pos));
    }
    NetworkSpec::new(manifest.input_shape, layers).or_else(|e| parse_err(manifest_at, e.to_string()))
}
