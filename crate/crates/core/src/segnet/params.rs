use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flat, ordered storage for a set of named tensors.
///
/// The layout (names, shapes, offsets) is fixed by the network configuration,
/// so two vectors built from the same configuration combine elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    pub entries: Vec<ParamEntry>,
    pub values: Vec<T>,
}

impl<T: Real> Default for ParamVector<T> {
    fn default() -> Self {
        ParamVector {
            entries: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamVector<T> {
    /// Appends a tensor filled with `init` and returns its value offset.
    pub(crate) fn push(&mut self, name: impl Into<String>, shape: &[usize], init: impl FnMut() -> T) -> usize {
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        let mut init = init;
        self.values.extend((0..len).map(|_| init()));
        offset
    }

    pub fn total_count(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.offset..e.offset + e.len])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let e = self.entries.iter().find(|e| e.name == name)?.clone();
        Some(&mut self.values[e.offset..e.offset + e.len])
    }

    pub fn same_layout(&self, other: &ParamVector<T>) -> bool {
        self.entries == other.entries
    }

    pub fn check_compatible(&self, other: &ParamVector<T>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "parameter layouts differ ({} vs {} values)",
                self.total_count(),
                other.total_count()
            )))
        }
    }

    pub fn zeros_like(&self) -> ParamVector<T> {
        ParamVector {
            entries: self.entries.clone(),
            values: vec![T::zero(); self.values.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| self.values[e.offset..e.offset + e.len].iter().any(|v| !v.is_finite()))
            .map(|e| e.name.as_str())
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            entries: self.entries.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}
