//! Versioned binary weights container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "TSRWGHT\n"
//! format       u32
//! engine       u32 length + UTF-8 crate version
//! network      u32 length + JSON NetworkSpec
//! count        u32 tensor count
//! table        count × { u32 length + UTF-8 name, u32 rank, rank × u64 dim,
//!                        u64 offset into the data section }
//! data         f64 values, tensors back to back in table order
//! ```
//!
//! Batch-norm running statistics are stored as `bn<i>.running_mean` and
//! `bn<i>.running_var` next to the trainable parameters.

use std::fs;
use std::path::Path;

use crate::architectures::{build_network, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TSRWGHT\n";
pub const FORMAT_VERSION: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub engine_version: String,
    pub spec: NetworkSpec,
    pub tensors: Vec<(String, Tensor)>,
}

impl WeightsFile {
    pub fn from_network(network: &Network) -> Self {
        let mut tensors: Vec<(String, Tensor)> = network
            .graph
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone().with_requires_grad(false)))
            .collect();
        for (i, s) in network.graph.batch_norms().iter().enumerate() {
            let c = s.running_mean.len();
            let t = |v: &[f64]| Tensor::new([c], v.to_vec()).expect("channel vector");
            tensors.push((format!("bn{}.running_mean", i + 1), t(&s.running_mean)));
            tensors.push((format!("bn{}.running_var", i + 1), t(&s.running_var)));
        }
        Self {
            engine_version: ENGINE_VERSION.to_string(),
            spec: network.spec.clone(),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.engine_version);
        put_str(
            &mut out,
            &serde_json::to_string(&self.spec).expect("spec serializes"),
        );
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &bytes)
    }

    pub fn parse(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            path,
            bytes,
            pos: 0,
        };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(r.error(0, "not a weights file (bad magic)"));
        }
        let at = r.pos;
        let format = r.u32("format version")?;
        if format != FORMAT_VERSION {
            return Err(r.error(
                at,
                format!("format version {format}, this engine reads {FORMAT_VERSION}"),
            ));
        }
        let at = r.pos;
        let engine_version = r.string("engine version")?;
        if engine_version != ENGINE_VERSION {
            return Err(r.error(
                at,
                format!("written by engine {engine_version}, this is {ENGINE_VERSION}"),
            ));
        }
        let at = r.pos;
        let spec_json = r.string("network spec")?;
        let spec: NetworkSpec = serde_json::from_str(&spec_json)
            .map_err(|e| r.error(at, format!("network spec: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let at = r.pos;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(r.error(at, format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dimension")? as usize);
            }
            let at = r.pos;
            let offset = r.u64("tensor offset")?;
            table.push((name, shape, offset, at));
        }
        let data_start = r.pos;
        let data_len = bytes.len() - data_start;
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset, at) in table {
            if offset != expected {
                return Err(r.error(
                    at,
                    format!("tensor `{name}` offset {offset}, expected {expected}"),
                ));
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| {
                    n > 0
                        && n.checked_mul(8)
                            .is_some_and(|b| b as u64 <= data_len as u64)
                })
                .ok_or_else(|| {
                    r.error(at, format!("tensor `{name}` shape {shape:?} is invalid"))
                })?;
            let start = data_start + offset as usize;
            let end = start + 8 * len;
            if end > bytes.len() {
                return Err(r.error(bytes.len(), format!("data for `{name}` is truncated")));
            }
            let data: Vec<f64> = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected += 8 * len as u64;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let end = data_start + expected as usize;
        if end != bytes.len() {
            return Err(r.error(
                end,
                format!("{} unexpected trailing bytes", bytes.len() - end),
            ));
        }
        Ok(Self {
            engine_version,
            spec,
            tensors,
        })
    }

    /// Rebuilds the network and overwrites its parameters and running
    /// statistics with the stored values.
    pub fn into_network(&self) -> Result<Network> {
        let mut net = build_network(&self.spec, 0)?;
        let missing = |name: &str| Error::Unknown {
            kind: "tensor in weights file",
            name: name.to_string(),
        };
        for p in net.graph.params_mut() {
            let t = self.tensor(&p.name).ok_or_else(|| missing(&p.name))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(
                    p.name.clone(),
                    format!(
                        "stored {:?}, network expects {:?}",
                        t.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
        for (i, s) in net.graph.batch_norms_mut().iter_mut().enumerate() {
            for (suffix, dst) in [
                ("running_mean", &mut s.running_mean),
                ("running_var", &mut s.running_var),
            ] {
                let name = format!("bn{}.{suffix}", i + 1);
                let t = self.tensor(&name).ok_or_else(|| missing(&name))?;
                if t.len() != dst.len() {
                    return Err(Error::shape(name, "running statistics length mismatch"));
                }
                dst.copy_from_slice(t.data());
            }
        }
        let known = net.graph.params().len() + 2 * net.graph.batch_norms().len();
        if known != self.tensors.len() {
            return Err(Error::invalid(format!(
                "weights file holds {} tensors, network has {known}",
                self.tensors.len()
            )));
        }
        Ok(net)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.bytes.len(), format!("file ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error(at, format!("{what} is not UTF-8")))
    }
}
