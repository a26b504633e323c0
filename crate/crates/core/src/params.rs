//! Named trainable tensors, their on-disk record format, and gradient buffers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "CMAC-CKPT v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: String,
    value: Tensor,
}

/// Ordered collection of named parameters. Each parameter belongs to a group
/// (a sub-network such as `lstm` or `backbone-rgb`) used for reporting.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    scope: String,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Prefix for the group of every parameter added afterwards, e.g.
    /// `"depth:"` for the second of two independent streams.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    pub fn add(&mut self, group: &str, name: &str, value: Tensor) -> ParamId {
        let group = format!("{}{}", self.scope, group);
        let full = format!("{}/{}", group, name);
        assert!(
            self.find(&full).is_none(),
            "duplicate parameter name {full}"
        );
        self.entries.push(Entry {
            name: full,
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Distinct groups in registration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<(&str, &Tensor)> = self
            .entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value))
            .collect();
        write_records(path, &records)
    }

    /// Replaces every parameter value from a checkpoint. Names and shapes
    /// must match this store exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = read_records(path)?;
        if records.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "{} holds {} tensors, model expects {}",
                path.display(),
                records.len(),
                self.entries.len()
            )));
        }
        for (name, tensor) in records {
            let id = self.find(&name).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected tensor '{}' in {}", name, path.display()))
            })?;
            let expected = self.get(id).shape().to_vec();
            if tensor.shape() != expected.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, model expects {:?}",
                    name,
                    tensor.shape(),
                    expected
                )));
            }
            *self.get_mut(id) = tensor;
        }
        Ok(())
    }
}

/// Writes `CMAC-CKPT v1` followed by one record per tensor: the name on its
/// own line, a line `rank e1 .. en`, then the values as little-endian `f64`.
pub fn write_records(path: &Path, records: &[(&str, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{}", CHECKPOINT_HEADER)?;
        for (name, t) in records {
            writeln!(w, "{}", name)?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "{} {}", t.rank(), dims.join(" "))?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_records(path, &bytes)
}

fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cursor = 0usize;
    let header = read_line(path, bytes, &mut cursor)?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::format(path, 0, format!("bad header '{}'", header)));
    }
    let mut out = Vec::new();
    while cursor < bytes.len() {
        let name = read_line(path, bytes, &mut cursor)?;
        let dims_at = cursor as u64;
        let dims_line = read_line(path, bytes, &mut cursor)?;
        let nums: Vec<usize> = dims_line
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, dims_at, format!("bad extents line '{}'", dims_line)))?;
        let (rank, extents) = match nums.split_first() {
            Some((&r, rest)) if r == rest.len() && r > 0 => (r, rest.to_vec()),
            _ => {
                return Err(Error::format(
                    path,
                    dims_at,
                    format!("extents line '{}' does not match its rank", dims_line),
                ))
            }
        };
        debug_assert_eq!(rank, extents.len());
        let count: usize = extents.iter().product();
        let needed = count * 8;
        if bytes.len() - cursor < needed {
            return Err(Error::format(
                path,
                cursor as u64,
                format!(
                    "tensor '{}' truncated: needs {} bytes, {} remain",
                    name,
                    needed,
                    bytes.len() - cursor
                ),
            ));
        }
        let data = bytes[cursor..cursor + needed]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(extents, data)
            .map_err(|e| Error::format(path, dims_at, e.to_string()))?;
        cursor += needed;
        out.push((name, tensor));
    }
    Ok(out)
}

fn read_line(path: &Path, bytes: &[u8], cursor: &mut usize) -> Result<String> {
    let start = *cursor;
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| Error::format(path, start as u64, "unterminated line"))?;
    let line = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::format(path, start as u64, "line is not UTF-8"))?;
    *cursor = end + 1;
    Ok(line.to_string())
}

/// One gradient tensor per parameter of a store.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            for (d, s) in self.grads[id.0].data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let mut store = ParamStore::new();
        store.add("g", "w", Tensor::matrix(2, 2, vec![0.1, -3.5e-300, f64::MAX, 1.0 / 3.0]).unwrap());
        store.add("g", "b", Tensor::vector(&[f64::MIN_POSITIVE]));
        store.save(&path).unwrap();

        let mut other = store.clone();
        *other.get_mut(ParamId(0)) = Tensor::zeros(&[2, 2]);
        other.load(&path).unwrap();
        for id in store.ids() {
            let (a, b) = (store.get(id), other.get(id));
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"CMAC-CKPT v1\ng/w\n2 2 2\n"));
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let mut store = ParamStore::new();
        store.add("g", "w", Tensor::vector(&[1.0, 2.0]));
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_records(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let mut a = ParamStore::new();
        a.add("heads", "cls.w", Tensor::zeros(&[3, 2]));
        a.save(&path).unwrap();
        let mut b = ParamStore::new();
        b.add("heads", "cls.w", Tensor::zeros(&[4, 2]));
        let err = b.load(&path).unwrap_err().to_string();
        assert!(err.contains("heads/cls.w"), "{err}");
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        std::fs::write(&path, b"NOT-A-CKPT\n").unwrap();
        assert!(matches!(read_records(&path), Err(Error::Format { offset: 0, .. })));
    }
}
