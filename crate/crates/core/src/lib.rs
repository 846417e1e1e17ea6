//! Contribution-aware visual token pruning and closed-form Hadamard FFN
//! approximation on a deterministic toy decoder, plus the diagnostics that
//! motivate them: sink taxonomy, FFN linearity profiling, Hellinger
//! divergence and an analytical FLOPs model.

pub mod contribution;
pub mod divergence;
pub mod error;
pub mod flops;
pub mod hadamard;
pub mod io;
pub mod model;
pub mod profile;
pub mod sinks;
pub mod tensor;

pub use contribution::{
    attention_contribution, contribution_trajectory, prune_cache, rank_by_attention,
    rank_by_contribution, uniform_stride, ContributionRecord, KeepSet, TokenRef,
};
pub use divergence::{hellinger, trace_divergence, DivergenceTrace};
pub use error::{CapaError, Result};
pub use flops::{pipeline_report, Component, CostReport, SeqShape};
pub use hadamard::{
    apply_hadamard, calibrate_layers, solve_alpha, AlphaVector, CalibMoments, ALPHA_EPS,
};
pub use io::{NamedTensor, TensorFile};
pub use model::{
    decode_step, forward, generate, init_weights, synthetic_streams, FfnMode, ForwardOptions,
    ForwardTrace, HadamardScope, KvCache, LayerExecPlan, Modality, ModelConfig, ModelWeights,
    ProbeRequest, PrunePoint, PrunePolicy, TokenStream,
};
pub use profile::{
    build_profile, select_layers, LayerSelection, ProtectedLayers, RedundancyProfile,
};
pub use sinks::{classify, sink_report, sink_value, CSplit, SinkClass, SinkRecord};
pub use tensor::{cosine_sim, l2_norm, matmul, softmax, OpCounter, Tensor2D};
