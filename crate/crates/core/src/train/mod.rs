//! Toy training: synthetic shapes, centre-in-box assignment, BCE and L1
//! losses, and the staged schedule.

mod assign;
mod check;
mod data;
mod eval;
mod loss;
mod pipeline;
mod stages;

pub use assign::{assign_targets, Targets};
pub use check::stage_grad_check;
pub use data::{
    class_names, gen_dataset, gen_sample, sample_seed, synthetic_embeddings, Object, Shape, SyntheticSample, ToyClass,
    TOY_CLASSES,
};
pub use eval::{
    closed_set_detect, evaluate_closed_set, evaluate_prompt_free, match_objects, visual_class_prompts, EvalOptions,
    RecallCount,
};
pub use loss::{bce_loss, class_targets, savpe_loss, specialized_loss, text_loss};
pub use pipeline::{run_toy, StageEpochs, ToyConfig, ToyRun};
pub use stages::{
    batch_vocabulary, init_specialized, run_stage, sample_prompt_masks, FreezeSpec, MetricRecord, PromptBank, Stage,
    StageOptions, StageReport,
};
