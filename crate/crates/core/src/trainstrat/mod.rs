//! Entailment-enhanced retrieval training: a reference dual encoder,
//! negative-sample filtering against the entailment graph, and weak-positive
//! batches trained at a reduced learning rate.

mod dual;
mod graph;
mod plan;
mod train;

pub use dual::{
    contrastive_loss_on_tape, contrastive_step, embed_corpus, image_tower, init_dual_encoder, negative_mask, text_tower,
    DualEncoderConfig, StepOutcome, DUAL_PREFIX,
};
pub use graph::{build_entailment_graph, filter_negative, EntailmentGraph};
pub use plan::{plan_batches, BatchKind, BatchPlan, Pair, PlanConfig, PlannedBatch};
pub use train::{epoch_seed, rank_captions, train_retrieval, RetrievalTrainConfig, StepRecord};

#[cfg(test)]
mod tests;
