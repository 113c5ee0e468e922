//! A compact reverse-mode automatic differentiation engine on top of
//! `ndarray`, with the operations needed by 3D convolutional and windowed
//! attention networks: convolutions, pooling, normalisation, batched matrix
//! products and the usual elementwise math.
//!
//! ```
//! use autograd::{ParamStore, Init, Tensor};
//!
//! let store = ParamStore::<f64>::new(0);
//! let w = store.root().param("w", &[3], Init::Const(2.0));
//! let x = Tensor::new(ndarray::arr1(&[1.0, 2.0, 3.0]).into_dyn());
//! let loss = w.tensor().mul(&x).sum_all();
//! let grads = loss.backward();
//! assert_eq!(grads.param(&w).unwrap().as_slice().unwrap(), &[1.0, 2.0, 3.0]);
//! ```

pub mod nn;
mod ops;
pub mod optim;
mod param;
pub mod profile;
mod real;
pub mod serialize;
mod tensor;

pub use ops::elementwise::sigmoid_array;
pub use param::{Init, Param, ParamKey, ParamStore, Scope};
pub use real::Real;
pub use tensor::{is_grad_enabled, no_grad, BackwardArgs, Gradients, NoGradGuard, Tensor};
