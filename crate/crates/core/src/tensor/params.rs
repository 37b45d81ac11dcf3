use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Named trainable tensors with optional gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct SerializedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDocument {
    format_version: u32,
    params: Vec<SerializedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.push(Entry {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.entries.len() - 1))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Sets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            match &mut e.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => e.grad = Some(vec![0.0; e.value.numel()]),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let e = &mut self.entries[id.0];
        match &mut e.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => e.grad = Some(grad.to_vec()),
        }
    }

    pub(crate) fn entries_mut(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor, Option<&Vec<f64>>)> {
        self.entries
            .iter_mut()
            .map(|e| (e.name.as_str(), &mut e.value, e.grad.as_ref()))
    }

    pub(crate) fn to_serialized(&self) -> Vec<SerializedParam> {
        self.entries
            .iter()
            .map(|e| SerializedParam {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                values: e.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from a serialized list. Every registered
    /// parameter must be present with a matching shape.
    pub(crate) fn assign_serialized(&mut self, params: Vec<SerializedParam>) -> Result<()> {
        if params.len() != self.entries.len() {
            return Err(Error::Corrupt(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                params.len()
            )));
        }
        for p in params {
            let id = self
                .find(&p.name)
                .ok_or_else(|| Error::Corrupt(format!("unknown parameter {:?}", p.name)))?;
            let slot = &mut self.entries[id.0].value;
            if slot.shape() != p.shape.as_slice() {
                return Err(Error::Corrupt(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    p.name,
                    p.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(p.shape, p.values)
                .map_err(|e| Error::Corrupt(format!("parameter {:?}: {e}", p.name)))?;
        }
        Ok(())
    }

    /// Flat `(name, shape, values)` list in a versioned JSON document.
    pub fn to_json(&self) -> Result<String> {
        let doc = ParamsDocument {
            format_version: PARAMS_FORMAT_VERSION,
            params: self.to_serialized(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    /// Parses a document written by [`ParamStore::to_json`] into a fresh store.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDocument =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        if doc.format_version != PARAMS_FORMAT_VERSION {
            return Err(Error::Version {
                found: doc.format_version,
                expected: PARAMS_FORMAT_VERSION,
            });
        }
        let mut store = ParamStore::new();
        for p in doc.params {
            let value = Tensor::new(p.shape, p.values)
                .map_err(|e| Error::Corrupt(format!("parameter {:?}: {e}", p.name)))?;
            store.add(p.name, value)?;
        }
        Ok(store)
    }
}
