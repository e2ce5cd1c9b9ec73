//! Polyp segmentation network: a shunted-attention encoder, frequency channel attention on the
//! shallowest features, offset-aligned multi-scale fusion, cross perception of the two paths,
//! the deep-supervised loss, the evaluation metrics, and the training and inference harness.
//!
//! ```
//! use pstnet::{Ablation, ModelConfig, PstNet};
//! use pstnet::pstnet_autograd::{ndarray::{ArrayD, IxDyn}, Ctx, Graph, Mode};
//!
//! let (net, store) = PstNet::build::<f32>(&ModelConfig::toy(), Ablation::None, 0).unwrap();
//! let graph = Graph::new();
//! let ctx = Ctx::new(&graph, &store, Mode::Eval);
//! let image = ctx.constant(ArrayD::zeros(IxDyn(&[1, 3, 64, 64])));
//! let out = net.forward(&ctx, image).unwrap();
//! assert_eq!(out.combined.shape(), vec![1, 1, 64, 64]);
//! ```

pub mod config;
pub mod cpm;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fcam;
pub mod fsam;
pub mod harness;
mod layers;
pub mod losses;
pub mod metrics;
pub mod model;

pub use pstnet_autograd;

pub use config::{AblationConfig, ExperimentConfig};
pub use data::{DataConfig, SamplePair, SplitSpec};
pub use error::{Error, Result};
pub use harness::{Checkpoint, TrainConfig, Trainer};
pub use layers::{Cbs, LogitHead};
pub use losses::{LossTerms, LossWeights};
pub use metrics::{MetricOptions, MetricReport};
pub use model::{Ablation, ModelConfig, PredictionTriple, PstNet};
