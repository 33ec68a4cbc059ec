use std::cell::RefCell;
use std::sync::Arc;

use crate::autograd::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Flat, ordered storage for every named parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = Arc::new(value);
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Cheap copy sharing every value, with all parameters frozen.
    pub fn frozen_view(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    trainable: false,
                    ..p.clone()
                })
                .collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Per-parameter gradient buffers, indexed by [`ParamId`].
pub type ParamGrads = Vec<Option<Tensor>>;

/// Binds store parameters onto a tape lazily, one leaf per parameter.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let p = &self.store.params[id.0];
            self.tape.leaf_shared(Arc::clone(&p.value), p.trainable)
        })
    }

    /// Uses `var` in place of the stored value of `id` for the rest of this pass.
    pub fn bind(&self, id: ParamId, var: Var<'t>) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    /// Extracts gradients of the trainable parameters touched by this pass.
    pub fn collect(&self, mut grads: Gradients) -> ParamGrads {
        let bound = self.bound.borrow();
        bound
            .iter()
            .enumerate()
            .map(|(i, var)| match var {
                Some(v) if self.store.params[i].trainable => grads.take(*v),
                _ => None,
            })
            .collect()
    }
}

/// Sums per-example gradients in the given order and scales by `scale`.
///
/// The reduction order is fixed, so the result does not depend on how the
/// examples were scheduled.
pub fn reduce_grads(parts: Vec<ParamGrads>, scale: f64) -> ParamGrads {
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else {
        return Vec::new();
    };
    for part in iter {
        for (slot, g) in acc.iter_mut().zip(part) {
            match (slot.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }
    for t in acc.iter_mut().flatten() {
        t.scale_in_place(scale);
    }
    acc
}
