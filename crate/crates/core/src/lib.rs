//! Distribution-based vision-language representation learning at desk scale.
//!
//! Every token of both modalities is encoded as a diagonal Gaussian by a
//! Probability Distribution Encoder ([`pde`]). Training combines a
//! Wasserstein-similarity contrastive loss, masked-token prediction and
//! image-text matching over reparameterized samples, plus an entropy floor
//! that prevents the variances from collapsing ([`objectives`]). All math
//! runs on a small reverse-mode engine ([`autograd`]).

pub mod autograd;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod param;
pub mod pde;
pub mod rng;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use data::{PairedExample, SyntheticCorpusConfig};
pub use error::{Error, Result};
pub use fusion::{EncoderConfig, Modality, ModalityStream};
pub use model::{Model, ModelConfig};
pub use objectives::{LossConfig, MetricsRecord};
pub use gaussian::{DiagGaussianSeq, GaussianToken};
pub use harness::{EllipseRecord, RecallTable, RunConfig};
pub use param::{AdamW, ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use tensor::Tensor;
