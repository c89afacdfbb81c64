//! The hierarchical mixer network.
//!
//! Pipeline: per-joint linear embedding plus a learnable positional matrix, `M`
//! stacked mixers, and a shared per-joint linear head. Each mixer splits channels
//! into three slices for the joint-level (graph convolution), part-level (limb
//! constraints) and body-level (self-attention) blocks, feeds each block's output
//! into the next block's input, concatenates and applies a residual channel MLP.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use config::{BlockSet, ModelConfig, Structure};
pub use forward::{
    channel_mlp_graph, embed, embed_graph, forward_batch, gbi_forward, gbi_graph, ipc_forward, ipc_graph,
    ljc_forward, ljc_graph, mixer_forward, mixer_graph, model_forward, model_graph, AttentionTrace,
    ForwardTrace, Topology,
};
pub use params::{
    expected_param_count, ChannelMlp, GbiParams, IpcParams, LjcParams, MixerParams, ModelParams, Norm,
};

/// Convenience alias for [`ModelParams::init`].
pub fn init_params(config: &ModelConfig, seed: u64) -> crate::Result<ModelParams> {
    ModelParams::init(config, seed)
}

/// Convenience alias for [`ModelParams::param_count`].
pub fn param_count(params: &ModelParams) -> usize {
    params.param_count()
}
