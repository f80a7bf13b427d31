use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u64);

#[derive(Debug, Clone)]
pub struct ParamHandle<T> {
    pub id: ParamId,
    pub array: DenseArray<T>,
    pub trainable: bool,
}

/// Owner of every parameter array of a model. Ids are handed out
/// sequentially and never reused.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    handles: BTreeMap<ParamId, ParamHandle<T>>,
    next_id: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            handles: BTreeMap::new(),
            next_id: 0,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, array: DenseArray<T>, trainable: bool) -> ParamId {
        let id = ParamId(self.next_id);
        self.next_id += 1;
        self.handles.insert(
            id,
            ParamHandle {
                id,
                array,
                trainable,
            },
        );
        id
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamHandle<T>> {
        self.handles.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut ParamHandle<T>> {
        self.handles.get_mut(&id)
    }

    pub fn array(&self, id: ParamId) -> &DenseArray<T> {
        &self.handles[&id].array
    }

    pub fn array_mut(&mut self, id: ParamId) -> &mut DenseArray<T> {
        &mut self
            .handles
            .get_mut(&id)
            .expect("parameter id belongs to this store")
            .array
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamHandle<T>> {
        self.handles.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamHandle<T>> {
        self.handles.values_mut()
    }

    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.handles
            .values()
            .filter(|h| h.trainable)
            .map(|h| h.array.len())
            .sum()
    }
}

/// Gradients of a scalar loss keyed by parameter id.
#[derive(Debug, Clone)]
pub struct GradMap<T> {
    grads: BTreeMap<ParamId, DenseArray<T>>,
}

impl<T: Scalar> Default for GradMap<T> {
    fn default() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> GradMap<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `grad` into the entry for `id`, creating it if absent.
    pub fn accumulate(&mut self, id: ParamId, grad: DenseArray<T>) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.grads.insert(id, grad);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&DenseArray<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &DenseArray<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Checks every key refers to a trainable parameter of matching shape.
    pub fn validate(&self, store: &ParamStore<T>) -> Result<()> {
        for (id, grad) in &self.grads {
            let handle = store
                .get(*id)
                .filter(|h| h.trainable)
                .ok_or(Error::MissingGradient(id.0))?;
            if handle.array.shape() != grad.shape() {
                return Err(Error::Shape {
                    layer: format!("gradient of parameter {}", id.0),
                    expected: handle.array.shape().to_vec(),
                    actual: grad.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
