//! The hierarchical byte/word model and the token-level baseline.

mod baseline;
mod hat;

pub use baseline::{BaselineConfig, BaselineForward, BaselineParams, BaselineVars};
pub use hat::{BlockSpan, HatConfig, HatForward, HatParams, HatVars};

use std::rc::Rc;

use thiserror::Error;

use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};
use crate::transformer::StackError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("nothing to predict: every document needs at least one word before [S]")]
    NoTargets,
    #[error("document {0} does not end with [S]")]
    MissingEndOfDoc(usize),
    #[error("word of {len} bytes exceeds the cap of {cap}")]
    WordTooLong { len: usize, cap: usize },
}

impl From<NumericsError> for ModelError {
    fn from(e: NumericsError) -> Self {
        ModelError::Stack(StackError::Numerics(e))
    }
}

/// A set of trainable tensors with a fixed canonical order.
pub trait Parameters<F: Real> {
    fn named(&self) -> Vec<(String, &Tensor<F>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape handles for a [`Parameters`] set, in the same order.
pub trait BoundParameters<'t, F: Real> {
    fn vars(&self) -> Vec<Var<'t, F>>;
}

/// Read-only snapshot of a parameter set that binds to a tape without
/// copying. Used for inference, where a tape is built per decoding step.
pub struct Frozen<F: Real> {
    tensors: Vec<Rc<Tensor<F>>>,
}

impl<F: Real> Frozen<F> {
    pub fn new<P: Parameters<F>>(params: &P) -> Self {
        Frozen {
            tensors: params.named().into_iter().map(|(_, t)| Rc::new(t.clone())).collect(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Vec<Var<'t, F>> {
        self.tensors.iter().map(|t| tape.constant_shared(t.clone())).collect()
    }
}
