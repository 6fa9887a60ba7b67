//! Named parameter storage, JSON checkpoints, and the per-forward-pass context.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{GdeError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered set of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is a model
    /// construction bug rather than a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter '{name}'");
        let (idx, _) = self.entries.insert_full(name, value);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    pub fn to_json(&self) -> Result<String> {
        let map: IndexMap<&str, StoredTensor> = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k.as_str(),
                    StoredTensor {
                        rows: v.rows,
                        cols: v.cols,
                        data: v.data.clone(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: IndexMap<String, StoredTensor> = serde_json::from_str(text)?;
        let mut out = ParamSet::new();
        for (k, v) in map {
            let t = Tensor::new(v.rows, v.cols, v.data)
                .map_err(|e| GdeError::Contract(format!("parameter '{k}': {e}")))?;
            out.add(k, t);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| GdeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GdeError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Replaces values from a checkpoint with identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(GdeError::Contract(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (name, value) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| GdeError::Contract(format!("checkpoint lacks parameter '{name}'")))?;
            if src.shape() != value.shape() {
                return Err(GdeError::Contract(format!(
                    "parameter '{name}': checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            *value = src.clone();
        }
        Ok(())
    }
}

/// State of a single forward pass: the tape, bound parameters, and the
/// dropout masks sampled for this pass.
///
/// Masks are drawn the first time a layer asks for one and then reused for
/// every later evaluation in the same pass, so a solver sees a
/// deterministic right-hand side.
pub struct Ctx<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
    masks: RefCell<HashMap<(usize, usize, usize), Rc<Tensor>>>,
}

impl<'t> Ctx<'t> {
    /// Parameters tracked for gradients, dropout enabled when `dropout_seed` is set.
    pub fn train(tape: &'t Tape, params: &ParamSet, dropout_seed: Option<u64>) -> Self {
        Self {
            tape,
            params: params.entries.values().map(|t| tape.param(t.clone())).collect(),
            dropout_rng: dropout_seed.map(|s| RefCell::new(ChaCha8Rng::seed_from_u64(s))),
            masks: RefCell::new(HashMap::new()),
        }
    }

    /// Parameters bound as constants, no dropout.
    pub fn eval(tape: &'t Tape, params: &ParamSet) -> Self {
        Self {
            tape,
            params: params.entries.values().map(|t| tape.constant(t.clone())).collect(),
            dropout_rng: None,
            masks: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Inverted-dropout mask for the layer identified by `key`, or `None`
    /// outside training.
    pub fn dropout_mask(&self, key: ParamId, rows: usize, cols: usize, rate: f64) -> Option<Rc<Tensor>> {
        let rng = self.dropout_rng.as_ref()?;
        if rate <= 0.0 {
            return None;
        }
        let mut masks = self.masks.borrow_mut();
        let mask = masks.entry((key.0, rows, cols)).or_insert_with(|| {
            let mut rng = rng.borrow_mut();
            let keep = 1.0 - rate;
            Rc::new(Tensor::from_fn(rows, cols, |_, _| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            }))
        });
        Some(Rc::clone(mask))
    }

    /// Gradients in parameter order; zeros for parameters the loss did not touch.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}
