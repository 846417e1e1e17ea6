//! Toy decoder-only transformer: pre-norm attention, SwiGLU FFN, KV cache,
//! modality-tagged tokens and per-layer execution modes.

mod cache;
mod config;
mod forward;
mod plan;
mod tokens;
mod weights;

pub use cache::{KvCache, LayerCache};
pub use config::ModelConfig;
pub use forward::{
    argmax, decode_step, forward, generate, position_encoding, teacher_forced, ForwardOptions,
    ForwardTrace, Generation, LayerProbe, ProbeRequest, PruneEvent, StepOutput, NORM_EPS,
    POS_SCALE,
};
pub use plan::{FfnMode, HadamardScope, LayerExecPlan, LayerPlan, PrunePoint, PrunePolicy};
pub use tokens::{synthetic_streams, Modality, TokenStream};
pub use weights::{ffn_swiglu, init_weights, FfnBlock, LayerWeights, ModelWeights, EMBED_RANGE};
