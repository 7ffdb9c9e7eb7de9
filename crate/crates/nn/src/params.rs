use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::NnError;
use crate::graph::{Gradients, Matrix};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) struct ParamKey {
    pub store: u64,
    pub param: ParamId,
}

impl ParamKey {
    pub fn new(store: u64, param: ParamId) -> Self {
        Self { store, param }
    }
}

/// Named trainable arrays with a parallel gradient slot for each.
///
/// Values sit behind `Arc` so graphs and read-only evaluation threads can
/// share them without copying; the optimizer writes through
/// [`Arc::make_mut`]. Every store carries a process-unique id so gradients
/// from a graph that mixes several stores land in the right place.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    values: Vec<Arc<Matrix>>,
    grads: Vec<Matrix>,
    index: BTreeMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new((**v).clone())).collect(),
            grads: self.grads.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn store_id(&self) -> u64 {
        self.id
    }

    /// Registers a parameter. Panics on a duplicate name: layer names are
    /// fixed at construction time, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.grads.push(Matrix::zeros(value.raw_dim()));
        self.values.push(Arc::new(value));
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    /// Adds a `rows x cols` array drawn uniformly from `±bound`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = if bound > 0.0 {
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
        } else {
            Array2::zeros((rows, cols))
        };
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Parameters in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.index
            .iter()
            .map(move |(n, id)| (n.as_str(), &*self.values[id.0]))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<(), NnError> {
        if value.dim() != self.values[id.0].dim() {
            return Err(NnError::Config(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].dim(),
                value.dim()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Adds the gradients belonging to this store; other stores' entries are ignored.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.for_store(self.id) {
            self.grads[id.0] += g;
        }
    }

    /// Adds `g` directly into the gradient slot of `id`.
    pub fn accumulate_raw(&mut self, id: ParamId, g: &Matrix) {
        self.grads[id.0] += g;
    }

    /// Overwrites every value with the one of the same name in `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if self.index.len() != other.index.len() {
            return Err(NnError::Config("parameter sets differ in size".into()));
        }
        for (name, &id) in &self.index {
            let src = other
                .id_of(name)
                .ok_or_else(|| NnError::Config(format!("missing parameter {name}")))?;
            if other.get(src).dim() != self.values[id.0].dim() {
                return Err(NnError::Config(format!("shape mismatch for {name}")));
            }
            self.values[id.0] = Arc::new(other.get(src).clone());
        }
        Ok(())
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&str, &mut Matrix)) {
        for (name, id) in &self.index {
            f(name, Arc::make_mut(&mut self.values[id.0]));
        }
    }

    /// SHA-256 over names, shapes and little-endian values in name order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.named() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((value.nrows() as u64).to_le_bytes());
            h.update((value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// True when every name, shape and value bit matches.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.index.len() == other.index.len()
            && self.named().zip(other.named()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.dim() == b.dim()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
