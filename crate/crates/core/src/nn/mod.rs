//! Network building blocks shared by every model in the pipeline, plus the
//! parameter store and optimizer.
//!
//! Parameters live outside any tape in a [`ParamStore`]; a forward pass
//! injects them as tagged leaves so the optimizer can collect per-parameter
//! gradients after `backward`.

pub mod blocks;
pub mod init;
pub mod optim;
pub mod spectral;
pub mod transformer;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::ArrayD;

use crate::autodiff::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

struct ParamEntry<T> {
    name: String,
    value: ArrayD<T>,
    trainable: bool,
}

/// Distinguishes tape tags of different stores sharing one tape.
static STORE_NAMESPACE: AtomicUsize = AtomicUsize::new(1);
const NAMESPACE_SHIFT: usize = 32;

/// Named, persistent model parameters.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    tag_base: usize,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            tag_base: STORE_NAMESPACE.fetch_add(1, Ordering::Relaxed) << NAMESPACE_SHIFT,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape changed",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Inject the parameter into a tape as a (cached) tagged leaf.
    pub fn on_tape(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.leaf_tagged(
            self.value(id).clone(),
            self.trainable(id),
            self.tag_base | id.0,
        )
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Gradients of this store's parameters harvested from a tape after
    /// `backward`. Tags from other stores sharing the tape are ignored.
    pub fn grads_from(&self, tape: &Tape<T>) -> Vec<(ParamId, ArrayD<T>)> {
        tape.tagged_grads()
            .into_iter()
            .filter(|(tag, _)| tag & !((1usize << NAMESPACE_SHIFT) - 1) == self.tag_base)
            .map(|(tag, g)| (ParamId(tag & ((1usize << NAMESPACE_SHIFT) - 1)), g.clone()))
            .collect()
    }
}

/// Gradients keyed by parameter, for single-store tapes.
pub fn collect_grads<T: Scalar>(tape: &Tape<T>) -> Vec<(ParamId, ArrayD<T>)> {
    tape.tagged_grads()
        .into_iter()
        .map(|(tag, g)| (ParamId(tag & ((1usize << NAMESPACE_SHIFT) - 1)), g.clone()))
        .collect()
}
