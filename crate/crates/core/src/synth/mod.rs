//! Synthetic face/identity generation and face-swap simulation.

mod benchmark;
mod render;

pub use benchmark::{build_benchmark, Benchmark, BenchmarkConfig, BenchmarkError};
pub use render::{
    generate_prototypes, render_real, render_swap, AttributeParams, IdentityPrototype,
    RenderConfig, SwapMechanism, SwapSpec, SynthError, NOISE_SIGMA, PATTERN_DIM,
};
