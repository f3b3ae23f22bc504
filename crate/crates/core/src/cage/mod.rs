//! The CAGE text-vision fusion block: cross-attention context, gated
//! refinement, FiLM modulation, residual output.

pub mod backward;
pub mod checkpoint;
pub mod config;
pub mod dropin;
pub mod forward;
pub mod params;
pub mod verify;

pub use backward::{backward, CageGradients};
pub use config::{CageConfig, ResidualKind};
pub use dropin::{default_neck_levels, drop_in_check, drop_in_check_with, NeckLevelSpec};
pub use forward::{
    cross_attention_context, forward, forward_instrumented, merge_and_film, occlusion_gate,
    refine_context, CageActivations,
};
pub use params::{init_params, CageParams};
pub use verify::{full_block_grad_check, BlockGradReport, ProbeSpec};
