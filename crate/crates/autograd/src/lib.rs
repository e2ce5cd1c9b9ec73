//! Reverse-mode automatic differentiation over `ndarray`, with the dense-prediction kernels
//! (convolution, bilinear resampling, offset warping, normalisation) implemented directly so
//! that every pullback can be checked against finite differences in `f64`.
//!
//! ```
//! use ndarray::{arr1, ArrayD};
//! use pstnet_autograd::Graph;
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(arr1(&[1.0, -2.0, 3.0]).into_dyn());
//! let y = x.square().sum_all();
//! let grads = g.backward(y);
//! assert_eq!(grads.get(x).unwrap(), &arr1(&[2.0, -4.0, 6.0]).into_dyn());
//! # let _: Option<ArrayD<f64>> = None;
//! ```

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod params;
pub mod real;

pub use gradcheck::{GradCheck, GradCheckResult};
pub use graph::{Gradients, Graph, Var};
pub use nn::{apply_updates, BatchNorm2d, BufferUpdate, Conv2d, ConvSpec, Ctx, LayerNorm, Linear, Mode};
pub use ops::elementwise::sigmoid;
pub use ops::norm::BatchStats;
pub use params::{Init, ParamBuilder, ParamEntry, ParamId, ParamStore, Role};
pub use real::{DType, Real};

pub use ndarray;
