//! Knowledge-graph embeddings with meta-learned entity unlearning.
//!
//! The crate trains a baseline KGE model, meta-trains an ensemble of graph
//! learners that regenerate entity embeddings from neighbourhood context, and
//! uses that ensemble to remove a set of triples from a trained model without
//! retraining from scratch.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file fix it to `f64`.

pub mod error;
pub mod eval;
pub mod graph;
pub mod kge;
pub mod metaeu;
pub mod metatask;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;

mod codec;

pub use error::{Error, Result};
pub use eval::{evaluate, hits_at, mrr, rank_query, EvalReport, Metrics, RankMode, RankResult, Side, Split};
pub use graph::{ForgetSpec, ForgetSplit, KnowledgeGraph, Triple, Vocab};
pub use kge::{EmbeddingStore, ModelKind, NormKind, Scorer};
pub use metaeu::{Ablation, Ensemble, MetaModel, MetaTrainConfig, UnlearnConfig};
pub use metatask::{sample_task, task_stream, MetaTask, TaskParams, TaskStream};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{SparseRows, Tensor2};

pub type Tensor = Tensor2<f64>;
pub type Store = EmbeddingStore<f64>;
