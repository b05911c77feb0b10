//! Desk-scale preference optimization: exact loss and gradients on a toy
//! policy, descending-gap curriculum ordering, a deterministic training
//! loop, and the curriculum-ordered manifest export for external trainers.

pub mod export;
pub mod loss;
pub mod order;
pub mod policy;
pub mod schedule;
pub mod synth;
pub mod tokenize;
pub mod train;

pub use export::{export_training_manifest, validate_training_manifest, ExportInfo};
pub use loss::{batch_item, dpo_grad, dpo_loss, sigmoid, softplus, DpoBatchItem};
pub use order::{curriculum_order, curriculum_order_by_delta, make_batches, OrderingArm};
pub use policy::ToyPolicy;
pub use schedule::cosine_lr;
pub use synth::{synth_dataset, SynthSpec};
pub use tokenize::{tokenize, TokenizedPair, TokenizerSpec};
pub use train::{mean_loss, preference_accuracy, train, TraceRow, TrainOutcome};
