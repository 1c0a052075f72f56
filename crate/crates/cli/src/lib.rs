//! Operator-facing pipeline: synthesize corpora, fit masks and routers,
//! replay mixed-domain streams under the different serving modes, and
//! aggregate reports. The binary in `main.rs` is a thin clap wrapper over
//! [`commands`]; everything testable lives here.

pub mod commands;
pub mod modes;

pub use modes::{
    run_stream, run_vanilla, Mode, RunError, RunResult, StreamRunConfig, StreamRunOutput,
};
