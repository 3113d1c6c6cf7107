//! Named parameter registry and on-disk checkpoints.
//!
//! A checkpoint is a directory: `manifest.json` records the schema
//! version plus every parameter's name, shape, and dtype; each parameter
//! lives in its own raw little-endian file. Round trips are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{DrslError, Result};
use crate::tape::{Id, Real, Tape};

const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Ordered collection of parameters with unique names. Order is creation
/// order and is stable across save/load, so optimizer state stays aligned.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Real> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name and returns its index.
    pub fn register(&mut self, name: &str, value: ArrayD<F>) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let ix = self.params.len();
        self.by_name.insert(name.to_string(), ix);
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        ix
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, ix: usize) -> &Param<F> {
        &self.params[ix]
    }

    pub fn get_mut(&mut self, ix: usize) -> &mut Param<F> {
        &mut self.params[ix]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.index_of(name).map(|ix| &self.params[ix])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    /// Puts every parameter on a tape as a leaf. The returned ids are
    /// parallel to parameter indices; gradients are read back through them.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Id> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    params: Vec<ManifestEntry>,
}

fn dtype_name<F: Real>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Writes a checkpoint directory. Existing parameter files are replaced.
pub fn save_checkpoint<F: Real>(dir: &Path, params: &ParamSet<F>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DrslError::io(dir, e))?;
    let mut entries = Vec::new();
    for (ix, p) in params.iter().enumerate() {
        let file = format!("param_{ix:03}.bin");
        let path = dir.join(&file);
        let mut buf = Vec::with_capacity(p.value.len() * std::mem::size_of::<F>());
        for &v in p.value.iter() {
            if std::mem::size_of::<F>() == 4 {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        fs::write(&path, &buf).map_err(|e| DrslError::io(&path, e))?;
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: dtype_name::<F>().to_string(),
            file,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| DrslError::io(&path, e))?;
    Ok(())
}

/// Reads a checkpoint directory back into a fresh `ParamSet`.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<ParamSet<F>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| DrslError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| DrslError::decode(&manifest_path, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DrslError::decode(
            &manifest_path,
            format!(
                "unsupported checkpoint schema {} (expected {})",
                manifest.schema_version, SCHEMA_VERSION
            ),
        ));
    }
    let mut set = ParamSet::new();
    for entry in &manifest.params {
        if entry.dtype != dtype_name::<F>() {
            return Err(DrslError::decode(
                &manifest_path,
                format!(
                    "parameter {} stored as {}, loader expects {}",
                    entry.name,
                    entry.dtype,
                    dtype_name::<F>()
                ),
            ));
        }
        let path = dir.join(&entry.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DrslError::io(&path, e))?;
        let count: usize = entry.shape.iter().product();
        let width = std::mem::size_of::<F>();
        if bytes.len() != count * width {
            return Err(DrslError::decode(
                &path,
                format!("expected {} bytes, found {}", count * width, bytes.len()),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(width) {
            let v = if width == 4 {
                F::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64)
            } else {
                F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap()))
            };
            data.push(v);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| DrslError::decode(&path, e.to_string()))?;
        set.register(&entry.name, arr);
    }
    Ok(set)
}

/// Writes all mode centers as CSV, one row per (class, mode) in bank
/// order, one column per embedding dimension.
pub fn dump_centers_csv<F: Real>(params: &ParamSet<F>, bank_name: &str, out: &mut dyn Write) -> Result<()> {
    let bank = params
        .by_name(bank_name)
        .ok_or_else(|| DrslError::MissingInput(format!("parameter {bank_name}")))?;
    let view = bank
        .value
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| DrslError::Shape(e.to_string()))?;
    for row in view.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
        writeln!(out, "{}", cells.join(",")).map_err(|e| DrslError::io("<writer>", e))?;
    }
    Ok(())
}
