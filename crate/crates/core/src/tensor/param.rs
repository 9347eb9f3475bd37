use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Format tag written into every checkpoint.
pub const CHECKPOINT_FORMAT: &str = "hpk.v1";

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor together with its adaptive-moment slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let first_moment = Tensor::zeros(value.shape());
        let second_moment = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            first_moment,
            second_moment,
        }
    }
}

/// Non-trainable named state, e.g. running feature statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffer(&self, idx: usize) -> &Tensor {
        &self.buffers[idx].value
    }

    pub fn buffer_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.buffers[idx].value
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn zero_grads(&self) -> GradMap {
        GradMap {
            grads: self
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Gradient of a scalar with respect to every parameter of a store,
/// aligned by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    grads: Vec<Tensor>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn accumulate(&mut self, other: &GradMap, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    meta: serde_json::Value,
    store: ParamStore,
}

/// Writes `store` plus free-form metadata as an `hpk.v1` checkpoint.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        meta,
        store: store.clone(),
    };
    let text = serde_json::to_string(&file)?;
    // Atomic replace.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Incompatible(format!(
            "format tag {:?}, expected {CHECKPOINT_FORMAT:?}",
            file.format
        )));
    }
    for p in &file.store.params {
        let n: usize = p.value.shape().iter().product();
        if n != p.value.numel() {
            return Err(Error::Incompatible(format!("parameter {} has inconsistent shape", p.name)));
        }
    }
    Ok((file.store, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::new(vec![2, 2], vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap(),
        );
        store.add_buffer("running_mean", Tensor::vector(vec![std::f64::consts::PI, 1e-17]));
        store.get_mut(w).second_moment.data_mut()[1] = 0.123456789012345678;
        store.step = 17;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &store, serde_json::json!({"k": 3})).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(meta["k"], 3);
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        fs::write(
            &path,
            r#"{"format":"hpk.v0","meta":null,"store":{"params":[],"buffers":[],"step":0}}"#,
        )
        .unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));
    }
}
