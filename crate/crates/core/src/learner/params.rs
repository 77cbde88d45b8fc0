//! Flat parameter vectors with named tensor layouts, and their checkpoint
//! file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        TensorSpec {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Model parameters flattened into one vector. Arithmetic between two
/// vectors is only defined when their layouts match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<TensorSpec>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<TensorSpec>) -> Result<Self> {
        let expected: usize = layout.iter().map(TensorSpec::numel).sum();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameter vector has non-finite entries"));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Vec<TensorSpec>) -> Self {
        let n = layout.iter().map(TensorSpec::numel).sum();
        ParamVector {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        ParamVector {
            values: vec![0.0; other.values.len()],
            layout: other.layout.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of the tensor with the given name.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for spec in &self.layout {
            let n = spec.numel();
            if spec.name == name {
                return Some(&self.values[offset..offset + n]);
            }
            offset += n;
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        Ok(ParamVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        Ok(ParamVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&self, s: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| v * s).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_layout(x)?;
        self.values
            .iter_mut()
            .zip(&x.values)
            .for_each(|(s, xi)| *s += a * xi);
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Checkpoint encoding, all integers `u64` and floats `f64`, little-endian:
    /// tensor count, then per tensor the UTF-8 name length, the name bytes,
    /// the rank and each dimension; then every value in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        let put = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        put(&mut out, self.layout.len() as u64);
        for spec in &self.layout {
            put(&mut out, spec.name.len() as u64);
            out.extend_from_slice(spec.name.as_bytes());
            put(&mut out, spec.shape.len() as u64);
            for &d in &spec.shape {
                put(&mut out, d as u64);
            }
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        let count = reader.u64()? as usize;
        let mut layout = Vec::new();
        for _ in 0..count {
            let name_len = reader.u64()? as usize;
            let name = std::str::from_utf8(reader.take(name_len)?)
                .map_err(|_| Error::invalid("tensor name is not UTF-8"))?
                .to_string();
            let rank = reader.u64()? as usize;
            let shape = (0..rank)
                .map(|_| reader.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            layout.push(TensorSpec { name, shape });
        }
        let total: usize = layout.iter().map(TensorSpec::numel).sum();
        let rest = bytes.len() - reader.pos;
        if rest != total * 8 {
            return Err(Error::invalid(format!(
                "checkpoint body has {rest} bytes, layout needs {}",
                total * 8
            )));
        }
        let values = (0..total)
            .map(|_| reader.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        ParamVector::new(values, layout)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::invalid("checkpoint truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
