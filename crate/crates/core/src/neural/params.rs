use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Name and shape of one tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat `f32` parameter storage with a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    layout: Vec<TensorSpec>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<TensorSpec>) -> Self {
        let len = layout.iter().map(TensorSpec::numel).sum();
        Self {
            values: vec![0.0; len],
            layout,
        }
    }

    pub fn from_values(layout: Vec<TensorSpec>, values: Vec<f32>) -> Result<Self> {
        let len: usize = layout.iter().map(TensorSpec::numel).sum();
        if len != values.len() {
            return Err(Error::Shape(format!(
                "layout declares {len} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_congruent(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// Range of the named tensor inside the flat storage.
    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        let mut start = 0;
        for spec in &self.layout {
            let end = start + spec.numel();
            if spec.name == name {
                return Some(start..end);
            }
            start = end;
        }
        None
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.range(name).map(|r| &self.values[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.range(name).map(move |r| &mut self.values[r])
    }

    /// FNV-1a over the little-endian bytes of the named tensor (or all values).
    pub fn checksum(&self, name: Option<&str>) -> u64 {
        let slice = match name {
            Some(n) => self.tensor(n).unwrap_or(&[]),
            None => &self.values,
        };
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in slice {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
