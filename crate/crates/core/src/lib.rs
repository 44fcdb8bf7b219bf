//! Temporal co-denoising: long sequences sampled, inverted and edited by
//! jointly denoising overlapping short clips and merging them every step.

pub mod co_denoise;
pub mod conditions;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod report;
pub mod schedule;
pub mod sequence;
pub mod synthdata;
pub mod windowing;

pub use co_denoise::{initial_noise, smooth_adjacent_frames, CoDenoiser, LadderTiming};
pub use conditions::{ClipIdentifiers, ConditionEmbedding, ConditionTrack, FramePrompt};
pub use denoiser::{AttentionMode, Denoiser};
pub use error::{Error, Result};
pub use schedule::{cfg_combine, GuidanceConfig, NoiseSchedule};
pub use sequence::{Clip, LongSequence};
pub use windowing::{merge_weighted, split, ClipLayout, WeightScheme};
