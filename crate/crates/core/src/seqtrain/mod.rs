//! Lattice-free MMI sequence training.
//!
//! Both graphs are HMMs over one-state-per-symbol topologies. The
//! denominator composes the symbol bigram with the topology and is shared
//! by every utterance; the numerator is a time-expanded graph built from one
//! utterance's frame alignment. Forward-backward runs in the log semiring,
//! with leaky-HMM smoothing on the denominator.

pub mod fb;
pub mod graph;
pub mod lfmmi;
pub mod trainer;

pub use fb::{forward_backward, FbResult, Scores};
pub use graph::{build_denominator, build_numerator, Arc, HmmGraph, HmmTopology};
pub use lfmmi::{frame_ce, lfmmi_loss, LfmmiLoss};
pub use trainer::{
    decode_one, decode_wer, pretrain_frontend, render_log, train, CheckpointSink, Criterion, Example, PretrainedFrontend, TrainConfig,
    TrainLogRow, TrainOutcome,
};
