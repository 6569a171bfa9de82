//! Meta-learned embedding generation and the unlearning procedure built on it.
//!
//! A base learner turns a task's support graph into embeddings for its
//! entities in three stages: a relation-aware initializer averages learned
//! per-relation vectors over each entity's outgoing and incoming relations,
//! `L` layers of normalized relational message passing refine them, and an
//! integrator maps the concatenation of all layer outputs back to `d`
//! dimensions. An [`Ensemble`] mixes several learners with simplex weights.

pub mod checkpoint;
pub mod context;
pub mod ensemble;
pub mod learner;
pub mod loss;
pub mod train;
pub mod unlearn;

pub use context::TaskGraph;
pub use ensemble::{Ablation, Ensemble, MetaModel};
pub use learner::{generate, hei, neem_forward, raeeg_init, BaseLearner};
pub use loss::{ensemble_loss, finetune, loss_l3, loss_l4, QueryBatch};
pub use train::{generate_task, meta_train, task_query_ranks, MetaTrainConfig, MetaTrainOutcome};
pub use unlearn::{unlearn, UnlearnConfig, UnlearnOutcome};
