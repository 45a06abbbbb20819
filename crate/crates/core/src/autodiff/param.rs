//! Named trainable parameters and the DACKPT1 checkpoint format.
//!
//! DACKPT1 layout: ASCII magic `DACKPT1`, newline, a one-line JSON manifest of
//! parameter names and shapes, newline, then concatenated little-endian
//! binary32 blobs in manifest order.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{numel, Element};

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
}

/// A named tensor with a persistent gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<E: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<E>,
    pub grad: Vec<E>,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<E>) -> Self {
        let n = numel(&shape);
        assert_eq!(n, values.len(), "parameter values must match shape");
        Self { name: name.into(), shape, values, grad: vec![E::ZERO; n] }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.iter_mut() {
            *g = E::ZERO;
        }
    }
}

pub type ParamRef<E> = Rc<RefCell<Parameter<E>>>;

/// Ordered collection of parameters with unique names.
#[derive(Default)]
pub struct ParameterSet<E: Element> {
    params: Vec<ParamRef<E>>,
}

impl<E: Element> ParameterSet<E> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Register a fresh parameter; panics on duplicate names (model bug).
    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<E>) -> ParamRef<E> {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.borrow().name != name),
            "duplicate parameter name {name}"
        );
        let p = Rc::new(RefCell::new(Parameter::new(name, shape, values)));
        self.params.push(Rc::clone(&p));
        p
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamRef<E>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.borrow_mut().zero_grad();
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.borrow().values.len()).sum()
    }

    /// Extend with every parameter of `other` (shared references).
    pub fn absorb(&mut self, other: &ParameterSet<E>) {
        for p in &other.params {
            self.params.push(Rc::clone(p));
        }
    }

    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        self.params
            .iter()
            .map(|p| {
                let pb = p.borrow();
                CheckpointEntry {
                    name: pb.name.clone(),
                    shape: pb.shape.clone(),
                    values: pb.values.iter().map(|&v| v.to_f64() as f32).collect(),
                }
            })
            .collect()
    }

    /// Load values from checkpoint entries; every parameter must be present
    /// with a matching shape.
    pub fn apply_entries(&self, entries: &[CheckpointEntry]) -> Result<(), CheckpointError> {
        for p in &self.params {
            let mut pb = p.borrow_mut();
            let e = entries
                .iter()
                .find(|e| e.name == pb.name)
                .ok_or_else(|| CheckpointError::Missing(pb.name.clone()))?;
            if e.shape != pb.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: pb.name.clone(),
                    found: e.shape.clone(),
                    expected: pb.shape.clone(),
                });
            }
            for (v, &x) in pb.values.iter_mut().zip(e.values.iter()) {
                *v = E::from_f64(x as f64);
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8] = b"DACKPT1\n";

/// One named blob in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestItem>,
}

/// Write entries to a DACKPT1 file in the given order.
pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[CheckpointEntry]) -> Result<(), CheckpointError> {
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|q| q.name == e.name) {
            return Err(CheckpointError::DuplicateName(e.name.clone()));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let manifest = Manifest {
        params: entries
            .iter()
            .map(|e| ManifestItem { name: e.name.clone(), shape: e.shape.clone() })
            .collect(),
    };
    let json = serde_json::to_string(&manifest).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    w.write_all(json.as_bytes())?;
    w.write_all(b"\n")?;
    for e in entries {
        debug_assert_eq!(numel(&e.shape), e.values.len());
        for &x in &e.values {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a DACKPT1 file back into entries.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointEntry>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Malformed("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let mut manifest_line = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|_| CheckpointError::Malformed("unterminated manifest".into()))?;
        if b[0] == b'\n' {
            break;
        }
        manifest_line.push(b[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&manifest_line)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let total: usize = manifest.params.iter().map(|p| numel(&p.shape)).sum();
    if rest.len() != total * 4 {
        return Err(CheckpointError::Malformed(format!(
            "payload holds {} bytes, manifest promises {}",
            rest.len(),
            total * 4
        )));
    }
    let mut entries = Vec::with_capacity(manifest.params.len());
    let mut off = 0usize;
    for item in manifest.params {
        let n = numel(&item.shape);
        let mut values = Vec::with_capacity(n);
        for chunk in rest[off..off + n * 4].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        off += n * 4;
        entries.push(CheckpointEntry { name: item.name, shape: item.shape, values });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let entries = vec![
            CheckpointEntry { name: "a.w".into(), shape: vec![2, 2], values: vec![1.0, 2.0, 3.0, 4.0] },
            CheckpointEntry { name: "a.b".into(), shape: vec![2], values: vec![-0.5, 0.5] },
        ];
        save_checkpoint(&p, &entries).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn parameter_set_apply_checks_shapes() {
        let mut set: ParameterSet<f32> = ParameterSet::new();
        set.register("w", vec![2], vec![0.0, 0.0]);
        let wrong = vec![CheckpointEntry { name: "w".into(), shape: vec![3], values: vec![0.0; 3] }];
        assert!(matches!(
            set.apply_entries(&wrong),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
        let missing: Vec<CheckpointEntry> = vec![];
        assert!(matches!(set.apply_entries(&missing), Err(CheckpointError::Missing(_))));
        let ok = vec![CheckpointEntry { name: "w".into(), shape: vec![2], values: vec![1.5, 2.5] }];
        set.apply_entries(&ok).unwrap();
        assert_eq!(set.iter().next().unwrap().borrow().values, vec![1.5, 2.5]);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DACKPT1\n");
        bytes.extend_from_slice(br#"{"params":[{"name":"w","shape":[2]}]}"#);
        bytes.push(b'\n');
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CheckpointError::Malformed(_))));
    }
}
