//! Speak-the-Art core: a self-contained two-stage speech-to-image pipeline.
//!
//! Stage one aligns caption frame sequences with frozen teacher image
//! embeddings through a contrastive encoder; stage two generates VQ token
//! grids with a conditional mask-and-replace discrete diffusion model and
//! decodes them to images. Everything runs on a small f64 autodiff engine
//! with deterministic seeding, plus FID / IS / Recall@k evaluation and a
//! synthetic bilingual paired corpus.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod vq;
pub mod error;
pub mod evalnet;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Result, StaError};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
