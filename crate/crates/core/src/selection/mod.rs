//! Importance scoring, Top-K token selection and the classification path
//! that consumes the kept tokens.

mod finetune;
pub mod head;
mod scorer;
mod topk;

pub use finetune::{
    finetune_loss, finetune_step, FinetuneBatch, FinetuneConfig, FinetuneMode, FinetuneModel,
    FinetuneOutcome,
};
pub use head::{Classifier, DropPolicy, TaskHead, TASK_HEAD};
pub use scorer::{gate_embeddings, Selector, SELECTOR};
pub use topk::{sample_k, select_top_k, ImportanceMap, SelectionResult};
