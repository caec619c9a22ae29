//! Named parameter storage and the binary checkpoint format.
//!
//! Layout:
//!
//! ```text
//! GLANDSEG-CHECKPOINT 1
//! meta <key> <value>              (any number of lines)
//! tensors <count>
//! <param|buffer> <name> <ndim> <dim>...
//! end
//! <little-endian f32 payload, tensors in table order>
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{Gradients, Tensor};
use crate::{Error, Result};

const MAGIC: &str = "GLANDSEG-CHECKPOINT 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Updated by the optimizer.
    Param,
    /// Carried state such as running statistics.
    Buffer,
}

impl Kind {
    fn tag(self) -> &'static str {
        match self {
            Kind::Param => "param",
            Kind::Buffer => "buffer",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, (Kind, Tensor)>,
    meta: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, kind: Kind, t: Tensor) {
        self.tensors.insert(name.to_string(), (kind, t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                what: "checkpoint",
                message: format!("missing tensor `{name}`"),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(|(_, t)| t)
    }

    pub fn kind(&self, name: &str) -> Option<Kind> {
        self.tensors.get(name).map(|(k, _)| *k)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(_, (k, _))| *k == Kind::Param)
            .map(|(n, (_, t))| (n, t))
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().map(|(_, t)| t.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Applies `f(param, grad)` to every parameter that has a gradient.
    pub fn update(&mut self, grads: &Gradients, mut f: impl FnMut(&str, &mut Tensor, &Tensor)) {
        for (name, g) in grads.iter() {
            if let Some((Kind::Param, t)) = self.tensors.get_mut(name) {
                f(name, t, g);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}").unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        writeln!(out, "tensors {}", self.tensors.len()).unwrap();
        for (name, (kind, t)) in &self.tensors {
            write!(out, "{} {name} {}", kind.tag(), t.shape().len()).unwrap();
            for d in t.shape() {
                write!(out, " {d}").unwrap();
            }
            writeln!(out).unwrap();
        }
        writeln!(out, "end").unwrap();
        for (_, t) in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |message: String| Error::Format {
            what: "checkpoint",
            message,
        };
        let mut pos = 0;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("bad magic line".into()));
        }
        let mut store = ParamStore::new();
        let mut table: Vec<(String, Kind, Vec<usize>)> = Vec::new();
        let mut line = next_line()?;
        while let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            store.set_meta(k, v);
            line = next_line()?;
        }
        let count: usize = line
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("expected tensor count, got `{line}`")))?;
        for _ in 0..count {
            let l = next_line()?;
            let mut it = l.split_whitespace();
            let kind = match it.next() {
                Some("param") => Kind::Param,
                Some("buffer") => Kind::Buffer,
                other => return Err(bad(format!("unknown tensor kind {other:?}"))),
            };
            let name = it.next().ok_or_else(|| bad("missing tensor name".into()))?;
            let ndim: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("bad rank for `{name}`")))?;
            let dims = it
                .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad dim for `{name}`"))))
                .collect::<Result<Vec<_>>>()?;
            if dims.len() != ndim {
                return Err(bad(format!("`{name}`: rank {ndim} but {} dims", dims.len())));
            }
            table.push((name.to_string(), kind, dims));
        }
        if next_line()? != "end" {
            return Err(bad("missing `end` line".into()));
        }
        let mut payload = &bytes[pos..];
        for (name, kind, dims) in table {
            let n: usize = dims.iter().product();
            if payload.len() < 4 * n {
                return Err(bad(format!("payload truncated in `{name}`")));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            payload = &payload[4 * n..];
            store.insert(&name, kind, Tensor::new(dims, data)?);
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rounds every value through `f32`, matching what a save/load cycle does.
    pub fn quantize(&mut self) {
        for (_, t) in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.set_meta("widths", "4,8");
        s.insert("a.w", Kind::Param, Tensor::new(vec![2, 1, 1, 1], vec![0.5, -1.25]).unwrap());
        s.insert("a.running_var", Kind::Buffer, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        s.insert("s", Kind::Param, Tensor::scalar(3.0));
        s
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let s = sample();
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.meta("widths"), Some("4,8"));
        assert_eq!(back.param_count(), 3);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut b = sample().to_bytes();
        b.pop();
        assert!(matches!(ParamStore::from_bytes(&b), Err(Error::Format { .. })));
        let mut b = sample().to_bytes();
        b.push(0);
        assert!(ParamStore::from_bytes(&b).is_err());
        assert!(ParamStore::from_bytes(b"nope\n").is_err());
    }
}
