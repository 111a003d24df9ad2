//! Multi-candidate speculative decoding at desk scale.
//!
//! The crate implements the full decoding stack over exact tabular (and
//! tiny neural) language models, small enough that every distributional
//! claim can be checked against a brute-force enumeration oracle:
//!
//! - [`dist`] — probability distributions, temperature, residuals.
//! - [`model`] — tabular n-gram and tiny feed-forward models, plus the
//!   masked tree-forward evaluation both share.
//! - [`tree`] — token-tree skeletons, topology-aware causal masks,
//!   dynamic mask slicing, position indexing.
//! - [`engine`] — vanilla decoding, baseline speculative decoding,
//!   draft- and target-initialized multi-candidate SD, and the dynamic
//!   variant gated by a decision model.
//! - [`decision`] — the early-stop decision models (T1 on draft hidden
//!   states, T2 on draft output statistics) and their training loop.
//! - [`oracle`] — exact first-token output distributions by enumeration,
//!   independent of the engine's sampling path.
//! - [`synthetic`] — seeded model/prompt generators and the descriptor
//!   strings the benchmark CLI uses to address models.

pub mod decision;
pub mod dist;
pub mod engine;
pub mod error;
pub mod model;
pub mod oracle;
pub mod synthetic;
pub mod tree;

pub use decision::{DecisionModel, DecisionT1, DecisionT2, FeatureKind, LabelMode};
pub use dist::{apply_temperature, residual_distribution, residual_or_target, Distribution, Residual};
pub use engine::{
    improvement_factor, run_generation, EngineConfig, EvalCache, GenerationResult, Method,
    SessionStats, StepOutcome, StepRecord,
};
pub use error::{Error, Result};
pub use model::{Model, TabularModel, TinyNeuralModel, Vocabulary};
pub use oracle::{exact_output_distribution, simulate_first_token_distribution};
pub use synthetic::{resolve_model, smoothed_draft, synthetic_prompts, synthetic_target, SyntheticSpec};
pub use tree::{
    build_topology_mask, build_tree_shape, mask_growth, position_indices, slice_mask, MaskSlice,
    MaskView, TokenTree, TopologyMask, TreeConfig, TreeShape,
};
