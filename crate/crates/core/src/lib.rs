//! Dual-encoder entity disambiguation with contextual label verbalizations.
//!
//! Mentions and knowledge-base labels are embedded by two independent
//! encoders and linked by nearest-neighbour search over the full label set.
//! Training mines hard negatives from a periodically refreshed label-embedding
//! cache; inference can run iteratively, inserting confident predictions'
//! verbalizations into the text before re-predicting the rest.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod label_index;
pub mod metric;
pub mod predictor;
pub mod synthetic;
pub mod trainer;
pub mod verbalizer;

pub use config::TrainConfig;
pub use corpus::{Chunk, Document, EntityRecord, LabelSet, Mention};
pub use encoder::{Model, Pooling};
pub use error::{Error, Result};
pub use label_index::LabelCache;
pub use metric::{LossKind, SimilarityKind};
pub use verbalizer::{verbalize, Format, Verbalization};
