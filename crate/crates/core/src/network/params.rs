use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::Real;

/// Index of a tensor inside [`ModelParameters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One named weight tensor. Batch-norm running statistics are stored here
/// as non-trainable buffers so that checkpoints carry them.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub trainable: bool,
}

/// Ordered collection of every weight tensor in the network.
///
/// The two siamese branches index the same entries, so there is exactly one
/// copy of each shared weight.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParameters<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ModelParameters<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<T>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.params.push(Parameter { name, shape, values, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].values
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].values
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights (including buffers).
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients { grads: self.params.iter().map(|p| vec![T::zero(); p.values.len()]).collect() }
    }

    /// Replaces values of every tensor whose name and shape match one in `other`.
    pub fn checked_assign(&mut self, other: &ModelParameters<T>) -> Result<(), String> {
        if self.params.len() != other.params.len() {
            return Err(alloc::format!("expected {} tensors, got {}", self.params.len(), other.params.len()));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(alloc::format!(
                    "tensor mismatch: {} {:?} vs {} {:?}",
                    mine.name,
                    mine.shape,
                    theirs.name,
                    theirs.shape
                ));
            }
            mine.values.clone_from(&theirs.values);
        }
        Ok(())
    }
}

/// Accumulated gradients aligned with a [`ModelParameters`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<T>> {
        self.grads.iter()
    }

    pub fn fill_zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}
