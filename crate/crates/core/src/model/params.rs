//! Named parameter arrays and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "PDCK" | version u32 | header_len u32 | header JSON
//! array_count u32
//! repeated: name_len u32 | name | dtype u8 (0 = f32, 1 = f64)
//!           ndim u32 | dims u64 * ndim | raw LE values
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Coarse grouping of parameters, used to target gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamClass {
    Conv,
    NormAffine,
    AttentionProj,
    FilmMlp,
    Embedding,
    Linear,
}

impl ParamClass {
    pub const ALL: [ParamClass; 6] = [
        ParamClass::Conv,
        ParamClass::NormAffine,
        ParamClass::AttentionProj,
        ParamClass::FilmMlp,
        ParamClass::Embedding,
        ParamClass::Linear,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    classes: Vec<ParamClass>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, class: ParamClass, t: Tensor) -> Result<(), ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.classes.push(class);
        self.tensors.push(t);
        Ok(())
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn insert_weight<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        class: ParamClass,
        rows: usize,
        cols: usize,
        fan_in: usize,
    ) -> Result<(), ModelError> {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, class, Tensor::from_vec(rows, cols, data))
    }

    pub fn insert_random<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        class: ParamClass,
        rows: usize,
        cols: usize,
        std: f64,
    ) -> Result<(), ModelError> {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, class, Tensor::from_vec(rows, cols, data))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_index(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_index_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn class(&self, i: usize) -> ParamClass {
        self.classes[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// A store with the same names/shapes and all-zero values.
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }
}

/// A set of named arrays plus a JSON header, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub arrays: Vec<(String, DType, Tensor)>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, dtype, t) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[match dtype {
                DType::F32 => 0u8,
                DType::F64 => 1u8,
            }])?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(t.rows as u64).to_le_bytes())?;
            w.write_all(&(t.cols as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in &t.data {
                match dtype {
                    DType::F32 => buf.extend_from_slice(&(*v as f32).to_le_bytes()),
                    DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32, ModelError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_of<R: Read>(r: &mut R) -> Result<u64, ModelError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = u32_of(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32_of(&mut r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header = serde_json::from_slice(&hbuf)?;
        let count = u32_of(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32_of(&mut r)? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf)?;
            let name = String::from_utf8(nbuf).map_err(|_| ModelError::Checkpoint("non-utf8 name".into()))?;
            let mut d = [0u8; 1];
            r.read_exact(&mut d)?;
            let dtype = match d[0] {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(ModelError::Checkpoint(format!("unknown dtype {other}"))),
            };
            let ndim = u32_of(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64_of(&mut r)? as usize);
            }
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(ModelError::Checkpoint(format!("unsupported rank {ndim}"))),
            };
            let n = rows * cols;
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let mut raw = vec![0u8; n * width];
            r.read_exact(&mut raw)?;
            let data = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            };
            arrays.push((name, dtype, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    /// Copies arrays named like the store's parameters into it. Every
    /// parameter must be present with a matching shape.
    pub fn restore_into(&self, prefix: &str, store: &mut ParamStore) -> Result<(), ModelError> {
        for i in 0..store.len() {
            let key = format!("{prefix}{}", store.name(i));
            let t = self
                .array(&key)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing array `{key}`")))?;
            let dst = store.get_index_mut(i);
            if t.shape() != dst.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "checkpoint array `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore, dtype: DType) {
        for (name, t) in store.iter() {
            self.arrays.push((format!("{prefix}{name}"), dtype, t.clone()));
        }
    }
}
