//! Tensor container file: a text manifest followed by raw little-endian data.
//!
//! ```text
//! TTA-CONTAINER 1
//! meta <key> <value>
//! tensor <name> <dtype> <d0,d1,..> <byte offset> <byte length>
//! end
//! <payload bytes, concatenated in manifest order>
//! ```
//!
//! Offsets are relative to the first payload byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

const MAGIC: &str = "TTA-CONTAINER 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Format(format!("{kind} {s:?} must be non-empty without whitespace")));
    }
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        check_token("meta key", key)?;
        let value = value.into();
        if value.contains('\n') {
            return Err(Error::Format(format!("meta value for {key} contains a newline")));
        }
        self.meta.retain(|(k, _)| k != key);
        self.meta.push((key.to_string(), value));
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| Error::Format(format!("container is missing meta key {key}")))
    }

    pub fn push_tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        check_token("tensor name", name)?;
        let mut bytes = Vec::new();
        T::write_le(t.data(), &mut bytes);
        self.entries.push(Entry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        });
        Ok(())
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], values: &[u32]) -> Result<()> {
        check_token("tensor name", name)?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!("{name}: shape {shape:?} vs {} values", values.len())));
        }
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.entries.push(Entry {
            name: name.to_string(),
            dtype: DType::U32,
            shape: shape.to_vec(),
            bytes,
        });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("container has no tensor named {name}")))
    }

    /// Reads a float tensor, converting between f32 and f64 when needed.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let data: Vec<T> = match e.dtype {
            d if d == T::DTYPE => T::read_le(&e.bytes),
            DType::F32 => f32::read_le(&e.bytes).into_iter().map(|v| T::lit(v as f64)).collect(),
            DType::F64 => f64::read_le(&e.bytes).into_iter().map(T::lit).collect(),
            DType::U32 => return Err(Error::Format(format!("{name} is u32, expected a float tensor"))),
        };
        Tensor::from_vec(&e.shape, data)
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        let e = self.entry(name)?;
        if e.dtype != DType::U32 {
            return Err(Error::Format(format!("{name} is {}, expected u32", e.dtype.name())));
        }
        Ok(e.bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "tensor {} {} {} {} {}\n",
                e.name,
                e.dtype.name(),
                dims.join(","),
                offset,
                e.bytes.len()
            ));
            offset += e.bytes.len();
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let len = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| Error::Format("truncated manifest".into()))?;
            let line = std::str::from_utf8(&rest[..len]).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
            pos += len + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(Error::Format("not a tensor container (bad magic line)".into()));
        }
        let mut meta = Vec::new();
        let mut layout = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 5 {
                    return Err(Error::Format(format!("bad tensor line: {line}")));
                }
                let dtype = DType::parse(parts[1]).ok_or_else(|| Error::Format(format!("unknown dtype {}", parts[1])))?;
                let shape = if parts[2].is_empty() {
                    Vec::new()
                } else {
                    parts[2]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Format(format!("bad shape in: {line}")))?
                };
                let offset: usize = parts[3].parse().map_err(|_| Error::Format(format!("bad offset in: {line}")))?;
                let length: usize = parts[4].parse().map_err(|_| Error::Format(format!("bad length in: {line}")))?;
                if shape.iter().product::<usize>() * dtype.size() != length {
                    return Err(Error::Format(format!("length does not match shape in: {line}")));
                }
                layout.push((parts[0].to_string(), dtype, shape, offset, length));
            } else {
                return Err(Error::Format(format!("unrecognized manifest line: {line}")));
            }
        }
        let payload = &bytes[pos..];
        let mut entries = Vec::with_capacity(layout.len());
        for (name, dtype, shape, offset, length) in layout {
            let end = offset
                .checked_add(length)
                .filter(|e| *e <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor {name} extends past end of file")))?;
            entries.push(Entry {
                name,
                dtype,
                shape,
                bytes: payload[offset..end].to_vec(),
            });
        }
        Ok(Container { meta, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
