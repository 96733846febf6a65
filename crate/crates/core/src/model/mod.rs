//! The DAEM network: multi-scale graph convolution, two diffusion-attention experts and a
//! two-class head, with hand-written gradients.

pub mod daem;
pub mod expert;
pub mod head;
pub mod losses;
pub mod msgc;
mod params;

pub use daem::{backward, forward, loss_and_grad, loss_value, predict, ForwardOutput, StepResult};
pub use expert::{
    dam_layer, dam_layer_runs, diffusion_attention, diffusion_attention_heads, energy,
    expert_forward, pool_and_concat, BiasPolicy, EnergyParams, ExpertOutput, PooledTokens,
};
pub use head::classify;
pub use losses::{
    consistency_mse, cross_entropy, supcon_loss, total_loss, ContrastiveQueue, LossComponents,
    LossWeights,
};
pub use msgc::{mean_aggregate, msgc_forward, sage_conv};
pub use params::{
    DamLayerParams, ExpertParams, HeadParams, ModelConfig, ModelParams, MsgcParams, SageParams,
    BRANCH_NAMES,
};
