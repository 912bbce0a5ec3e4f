use std::cell::RefCell;
use std::sync::Arc;

use crate::tape::{Gradients, Tape, Var};
use crate::{Float, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model component.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    frozen: bool,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), frozen: false }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape change for parameter {}",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value);
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub(crate) fn arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    /// Mark the store read-only: bindings become constants and optimizers
    /// refuse to step it.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Order-sensitive FNV-1a hash over names and bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, value) in self.names.iter().zip(&self.values) {
            eat(name.as_bytes());
            for v in value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Same parameters in another precision.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            frozen: self.frozen,
        }
    }

    pub fn bind<'t, 's>(&'s self, tape: &'t Tape<T>) -> Binding<'t, 's, T> {
        Binding::new(tape, self, !self.frozen)
    }

    /// Bind without gradient tracking regardless of the frozen flag.
    pub fn bind_const<'t, 's>(&'s self, tape: &'t Tape<T>) -> Binding<'t, 's, T> {
        Binding::new(tape, self, false)
    }
}

/// Lazily records a store's parameters as leaves on one tape.
pub struct Binding<'t, 's, T: Float> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    slots: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: bool,
}

impl<'t, 's, T: Float> Binding<'t, 's, T> {
    fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Binding { tape, store, slots: RefCell::new(vec![None; store.len()]), trainable }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        let mut slots = self.slots.borrow_mut();
        *slots[id.0].get_or_insert_with(|| self.tape.leaf_arc(self.store.arc(id), self.trainable))
    }

    /// Per-parameter gradients (absent for parameters unused by the loss).
    pub fn grads(&self, g: &Gradients<T>) -> ParamGrads<T> {
        let slots = self.slots.borrow();
        ParamGrads {
            grads: slots.iter().map(|s| s.and_then(|v| g.get_id(v.id()).cloned())).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Element-wise sum with another gradient set for the same store.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient sets for different stores");
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }

    /// Flattened gradient values of the listed parameters (zeros where absent).
    pub fn flatten(&self, store: &ParamStore<T>) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.numel());
        for (i, g) in self.grads.iter().enumerate() {
            match g {
                Some(g) => out.extend(g.data().iter().map(|v| v.as_f64())),
                None => out.extend(std::iter::repeat_n(0.0, store.get(ParamId(i)).len())),
            }
        }
        out
    }
}
