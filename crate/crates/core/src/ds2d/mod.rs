//! Self-speculative decoding with tree drafts produced by static forecast
//! embeddings and verified greedily in the following step.

mod branch;
mod forecast;
mod run;
mod step;
mod tree;

pub use branch::{
    enumerate_branch_configs, optimize_branch_config, reference_configs, AcceptanceModel, BranchConfig, BranchRow,
    CostModel, DEFAULT_ROW_BUDGET,
};
pub use forecast::{ForecastState, DEFAULT_PREFIX_LEN};
pub use run::{measure_cost_model, run_ds2d, DrafterMode, Ds2dOptions, Ds2dOutput, Ds2dStats, PREFIX_SEGMENT};
pub use step::{assemble_prefill_input, assemble_step_input, RowKind, StepInput, StepLayout};
pub use tree::{build_draft_tree, verify_and_extend, DraftNode, DraftTree, VerificationResult};
