//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] evaluates ops eagerly and records them in execution order.
//! Trainable weights live in a [`ParamSet`]; [`Graph::param`] brings one
//! into a graph as a leaf, and [`Graph::backward_into`] accumulates the
//! gradients back into the set for an optimizer such as [`Adam`].
//!
//! ```
//! use medrek_autodiff::{Graph, ParamSet, Tensor};
//!
//! let mut params = ParamSet::new();
//! let x = params.add("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let mut g = Graph::new();
//! let xv = g.param(&params, x);
//! let sq = g.mul(xv, xv).unwrap();
//! let loss = g.sum_all(sq).unwrap();
//! g.backward_into(loss, &mut params).unwrap();
//! assert_eq!(params.get(x).grad.as_deref(), Some(&[2.0, 4.0][..]));
//! ```

mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Reduce, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamSet};
pub use tensor::{Precision, Tensor};
