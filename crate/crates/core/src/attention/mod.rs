//! Biased self/cross attention, revised temporal attention and the
//! phase-switched bias masks.

pub mod masks;
pub mod mha;
pub mod temporal;

pub use masks::{
    apply_phase_bias, build_diagonal_bias, build_dispersed_bias, mask_and_renormalize, phase_mask, BiasMask,
    BiasMode, BiasTargets, MaskKind, PhaseBranch, PhaseConfig, PhaseOrder,
};
pub use mha::{
    biased_cross_attention, biased_self_attention, cross_attention_mask, self_attention_mask, AttentionBias,
    AttentionCache, AttentionParams,
};
pub use temporal::{revised_temporal_attention, revised_temporal_attention_backward, TemporalCache, TemporalLatent};
