//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The graph is rebuilt on every forward pass (define-by-run): each
//! operation appends one node holding its output value and a closure that
//! scatters the node's gradient back into its parents. `backward` walks the
//! tape once in reverse. The whole engine is generic over the scalar type,
//! so the same model code trains at `f32` and is finite-difference checked
//! at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Scalar types the tape can differentiate through.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + 'static
{
    /// Lossless-enough conversion from config-space `f64`.
    fn from_f64(x: f64) -> Self {
        Self::from(x).expect("f64 convertible to Real")
    }

    /// Named to avoid colliding with `ToPrimitive::to_f64` during method
    /// resolution on references.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Real convertible to f64")
    }

    fn from_usize(x: usize) -> Self {
        Self::from(x).expect("usize convertible to Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Index of a node on the tape.
pub type Id = usize;

type BackFn<F> = Box<dyn FnOnce(&ArrayD<F>, &[ArrayD<F>], &mut [ArrayD<F>])>;

/// A gradient tape. Values are stored per node; backward closures are
/// consumed by the single `backward` call.
pub struct Tape<F: Real> {
    values: Vec<ArrayD<F>>,
    backs: Vec<Option<BackFn<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Id the next pushed node will get. Lets a backward closure refer to
    /// its own output value through the `values` slice.
    pub fn next_id(&self) -> Id {
        self.values.len()
    }

    /// Adds an input node (parameter, image, constant). Gradients still
    /// accumulate into it, so leaves are differentiable by default.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Id {
        self.values.push(value);
        self.backs.push(None);
        self.values.len() - 1
    }

    /// Adds an operation node. `back` receives (output gradient, all node
    /// values, all node gradients) and must accumulate (`+=`) into parents.
    pub fn push<B>(&mut self, value: ArrayD<F>, back: B) -> Id
    where
        B: FnOnce(&ArrayD<F>, &[ArrayD<F>], &mut [ArrayD<F>]) + 'static,
    {
        self.values.push(value);
        self.backs.push(Some(Box::new(back)));
        self.values.len() - 1
    }

    pub fn value(&self, id: Id) -> &ArrayD<F> {
        &self.values[id]
    }

    /// Value of a rank-0 node.
    pub fn scalar(&self, id: Id) -> F {
        let v = &self.values[id];
        assert_eq!(v.ndim(), 0, "node {id} is not a scalar");
        v[[]]
    }

    /// Runs reverse-mode accumulation from a rank-0 root and returns the
    /// gradient of every node. Consumes the backward closures, so this can
    /// run once per tape.
    pub fn backward(&mut self, root: Id) -> Vec<ArrayD<F>> {
        assert!(root < self.values.len(), "root {root} not on tape");
        assert_eq!(self.values[root].ndim(), 0, "backward root must be a scalar");
        let mut grads: Vec<ArrayD<F>> = self
            .values
            .iter()
            .map(|v| ArrayD::zeros(v.raw_dim()))
            .collect();
        grads[root].fill(F::one());
        for id in (0..=root).rev() {
            if let Some(back) = self.backs[id].take() {
                let g = grads[id].clone();
                back(&g, &self.values, &mut grads);
            }
        }
        grads
    }
}
