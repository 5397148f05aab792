//! Audio-visual overlapped speech recognition on synthetic data.
//!
//! The crate covers the whole pipeline: a synthetic audio-visual corpus with
//! controlled-SNR two-speaker mixtures ([`synthdata`]), log-mel and visual
//! front-ends ([`features`]), a small reverse-mode differentiation core
//! ([`autodiff`]), factored TDNN layers ([`tdnn`]), concatenation and gated
//! modality fusion ([`fusion`]), lattice-free MMI sequence training
//! ([`seqtrain`]), Viterbi decoding and WER scoring ([`decoder`]), a
//! time-frequency masking front-end for pipelined systems ([`separation`])
//! and the experiment harness ([`experiment`]).

pub mod config;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod autodiff;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod matrix;
pub mod separation;
pub mod seqtrain;
pub mod synthdata;
pub mod tdnn;
pub mod util;

pub use error::{Error, Result};
pub use matrix::Matrix;

pub const SAMPLE_RATE: u32 = 16_000;
/// 10 ms hop.
pub const SAMPLES_PER_HOP: usize = 160;
/// 40 ms analysis window.
pub const SAMPLES_PER_WINDOW: usize = 640;
pub const FFT_SIZE: usize = 1024;
pub const NUM_MEL_BINS: usize = 40;
pub const VISUAL_FPS: usize = 25;
