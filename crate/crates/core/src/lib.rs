//! Query-based set-prediction detection with gradual query pruning.
//!
//! The crate contains a small dense tensor library with reverse-mode
//! differentiation, a DETR-style transformer decoder, a synthetic detection
//! task, Hungarian matching with a focal set loss, the gradual query pruning
//! engine and the measurement tools (FLOPs, latency, selection frequency,
//! mAP) used to study it.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod gpq;
pub mod matching;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use attention::{AttentionParams, Decoder, DecoderLayer, SelfAttention};
pub use detector::{Detection, Detector, ModelConfig, Prediction, QueryBank, Scene, SceneConfig};
pub use error::{Error, Result};
pub use gpq::{Criterion, PruneReport, PruneSchedule, ScoreLedger};
pub use matching::{Assignment, CostMatrix};
pub use tensor::{Graph, NodeId, Tensor};
