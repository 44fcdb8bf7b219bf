//! The run manifest: one TOML file with everything needed to repeat a run.
//!
//! Relative paths are resolved against the manifest's directory. The copy
//! written next to the outputs is fully resolved: absolute paths, the
//! checkpoint hash and the pad count are filled in, so running it again
//! reproduces the outputs bit for bit.

use std::path::{Path, PathBuf};

use codenoise::denoiser::AttentionMode;
use codenoise::metrics::{EmbedderKind, EmbedderSpec};
use codenoise::synthdata::ScenePrompt;
use codenoise::windowing::WeightKind;
use codenoise::{ClipIdentifiers, ClipLayout, NoiseSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generate,
    Invert,
    Edit,
    TrainOneShot,
    Ablate,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Generate => "generate",
            Mode::Invert => "invert",
            Mode::Edit => "edit",
            Mode::TrainOneShot => "train_one_shot",
            Mode::Ablate => "ablate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub layout: LayoutSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    pub conditions: ConditionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<DenoiserSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<ConditionSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule, CliError> {
        Ok(NoiseSchedule::linear(
            self.steps,
            self.beta_start,
            self.beta_end,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSection {
    /// Requested frame count; padded up to the clip grid.
    pub frames: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub weights: WeightKind,
    #[serde(default = "default_frame_shape")]
    pub frame_shape: [usize; 2],
    /// Repeated-last-frame padding; filled in when the manifest is emitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
}

fn default_window() -> usize {
    16
}

fn default_stride() -> usize {
    4
}

fn default_frame_shape() -> [usize; 2] {
    [16, 16]
}

/// Smallest padded length that fits the clip grid of every stride given.
pub fn padded_for(frames: usize, window: usize, strides: &[usize]) -> Result<usize, CliError> {
    let mut len = frames.max(window);
    let limit = len + window * strides.iter().product::<usize>().max(1);
    while len <= limit {
        let mut fits = true;
        for &s in strides {
            let (padded, _) = ClipLayout::padded_length(len, window, s)?;
            fits &= padded == len;
        }
        if fits {
            return Ok(len);
        }
        len += 1;
    }
    Err(CliError::Config(format!(
        "no common clip grid for window {window} and strides {strides:?}"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Adjacent-frame penalty step applied after every merge; 0 disables.
    pub smoothing: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 13.5,
            smoothing: 0.0,
        }
    }
}

/// Exactly one of an inline track, a track file or scene prompts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSource {
    /// Track text: `clip_index<TAB>label<TAB>comma-separated floats` per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenes: Vec<ScenePrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSection {
    Analytic {
        #[serde(default = "default_variance")]
        variance: f64,
        #[serde(default = "default_shared")]
        shared_variance: f64,
    },
    Learned {
        checkpoint: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sha256: Option<String>,
    },
}

fn default_variance() -> f64 {
    0.05
}

fn default_shared() -> f64 {
    0.5
}

/// Source video for invert, edit and training. Without a file the video is
/// rendered from the scene prompts in `conditions`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_sha256: Option<String>,
    #[serde(default)]
    pub render_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch: usize,
    pub drop_probability: f64,
    pub hidden: usize,
    pub time_features: usize,
    pub attention: AttentionMode,
    pub seed: u64,
    pub identifiers: bool,
    pub identifier_scale: f64,
    pub probe_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 3e-5,
            batch: 5,
            drop_probability: ClipIdentifiers::DEFAULT_DROP_PROBABILITY,
            hidden: 32,
            time_features: 16,
            attention: AttentionMode::Bidirectional,
            seed: 0,
            identifiers: true,
            identifier_scale: 1.0,
            probe_steps: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub embedder: EmbedderKind,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            embedder: EmbedderKind::Flatten,
            output_dim: 32,
            seed: 0,
        }
    }
}

impl MetricsSection {
    pub fn spec(&self) -> EmbedderSpec {
        match self.embedder {
            EmbedderKind::Flatten => EmbedderSpec::flatten(),
            EmbedderKind::RandomProjection => {
                EmbedderSpec::random_projection(self.output_dim, self.seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Also write one binary PGM per output frame.
    #[serde(default)]
    pub dump_pgm: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_hash(what: &str, path: &Path, expected: &mut Option<String>) -> Result<(), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    let actual = sha256_hex(&bytes);
    match expected {
        Some(h) if *h != actual => Err(CliError::Config(format!(
            "{what} {} has sha256 {actual}, manifest expects {h}",
            path.display()
        ))),
        _ => {
            *expected = Some(actual);
            Ok(())
        }
    }
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut manifest = Self::parse(&text)?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        let base = base.canonicalize().unwrap_or(base);
        manifest.make_paths_absolute(&base);
        Ok(manifest)
    }

    fn make_paths_absolute(&mut self, base: &Path) {
        for source in std::iter::once(&mut self.conditions).chain(self.edit.as_mut()) {
            if let Some(p) = source.track_file.as_mut() {
                *p = absolute(base, p);
            }
        }
        if let Some(DenoiserSection::Learned { checkpoint, .. }) = self.denoiser.as_mut() {
            *checkpoint = absolute(base, checkpoint);
        }
        if let Some(p) = self.input.as_mut().and_then(|i| i.video.as_mut()) {
            *p = absolute(base, p);
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("manifest: {e}")))
    }

    /// Checks structure, verifies or records file hashes, inlines track
    /// files and records the pad count.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        if self.repeat == 0 {
            return bad("repeat must be >= 1".into());
        }
        if self.layout.frames == 0 {
            return bad("layout.frames must be >= 1".into());
        }
        if self.layout.frame_shape.contains(&0) {
            return bad("layout.frame_shape entries must be >= 1".into());
        }
        if self.layout.weights == WeightKind::Custom {
            return bad("layout.weights must be uniform or tent".into());
        }
        for source in std::iter::once(&mut self.conditions).chain(self.edit.as_mut()) {
            let count = [
                source.track.is_some(),
                source.track_file.is_some(),
                !source.scenes.is_empty(),
            ]
            .iter()
            .filter(|b| **b)
            .count();
            if count != 1 {
                return bad(
                    "each condition section needs exactly one of track, track_file, scenes".into(),
                );
            }
            if let Some(path) = source.track_file.take() {
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                source.track = Some(text);
            }
            for p in &source.scenes {
                if p.scene.frame_shape != self.layout.frame_shape {
                    return bad(format!(
                        "scene frame shape {:?} differs from layout frame shape {:?}",
                        p.scene.frame_shape, self.layout.frame_shape
                    ));
                }
            }
        }
        match self.mode {
            Mode::TrainOneShot => {
                if self.train.is_none() {
                    self.train = Some(TrainSection::default());
                }
            }
            Mode::Edit if self.edit.is_none() => {
                return bad("edit mode needs an [edit] section".into())
            }
            _ => {}
        }
        if self.mode != Mode::TrainOneShot && self.denoiser.is_none() {
            return bad("a [denoiser] section is required".into());
        }
        if matches!(self.mode, Mode::Ablate) && self.conditions.scenes.is_empty() {
            return bad(
                "ablate mode needs scene prompts so every layout gets its own conditions".into(),
            );
        }
        if let Some(DenoiserSection::Learned { checkpoint, sha256 }) = self.denoiser.as_mut() {
            check_hash("checkpoint", checkpoint, sha256)?;
        }
        if let Some(input) = self.input.as_mut() {
            if let Some(video) = input.video.as_ref() {
                check_hash("input video", video, &mut input.video_sha256)?;
            }
        }
        let needs_input = matches!(self.mode, Mode::Invert | Mode::Edit | Mode::TrainOneShot);
        if needs_input {
            let has_video = self.input.as_ref().is_some_and(|i| i.video.is_some());
            if !has_video && self.conditions.scenes.is_empty() {
                return bad("an input video or scene prompts to render one are required".into());
            }
            self.input.get_or_insert_with(InputSection::default);
        }
        let pad = self.padded_frames()? - self.layout.frames;
        if let Some(recorded) = self.layout.pad {
            if recorded != pad {
                return bad(format!(
                    "layout.pad is {recorded} but the clip grid needs {pad}"
                ));
            }
        }
        self.layout.pad = Some(pad);
        Ok(self)
    }

    /// Padded length: the co-denoising grid, plus the isolated grid when ablating.
    pub fn padded_frames(&self) -> Result<usize, CliError> {
        let l = &self.layout;
        if l.stride == 0 || l.stride > l.window {
            return Err(CliError::Config(format!(
                "stride {} must be in [1, window {}]",
                l.stride, l.window
            )));
        }
        let strides: &[usize] = match self.mode {
            Mode::Ablate => &[l.stride, l.window],
            _ => &[l.stride],
        };
        padded_for(l.frames, l.window, strides)
    }
}
