//! Synthetic moving-blob sequences with parameter vectors as conditions.
//!
//! A [`SceneSpec`] maps to a 9-slot condition vector:
//!
//! | slot | meaning |
//! |------|---------|
//! | 0..3 | motion one-hot: static, linear, sinusoidal |
//! | 3    | velocity / frame width |
//! | 4    | time offset / 64 |
//! | 5, 6 | blob center x / width, y / height |
//! | 7    | blob width / frame width |
//! | 8    | amplitude |
//!
//! Rendering works on any vector, including blends of several specs: the
//! horizontal position is `cx + sum_m w_m * law_m(offset + j)` where `w_m` are
//! the motion slots. Blobs that leave the frame wrap around toroidally.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditions::{assign_clip_conditions_with, ConditionEmbedding, FramePrompt};
use crate::error::{Error, Result};
use crate::sequence::LongSequence;
use crate::windowing::ClipLayout;

pub const CONDITION_DIM: usize = 9;
/// Period of the sinusoidal motion law, in frames.
pub const SINE_PERIOD: f64 = 32.0;
const OFFSET_SCALE: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    #[default]
    Linear,
    Sinusoidal,
}

impl Motion {
    fn slot(self) -> usize {
        match self {
            Motion::Static => 0,
            Motion::Linear => 1,
            Motion::Sinusoidal => 2,
        }
    }

    /// Horizontal displacement at time `tau` for unit-weighted motion.
    fn displacement(self, velocity: f64, tau: f64) -> f64 {
        match self {
            Motion::Static => 0.0,
            Motion::Linear => velocity * tau,
            Motion::Sinusoidal => {
                let omega = 2.0 * PI / SINE_PERIOD;
                velocity / omega * (omega * tau).sin()
            }
        }
    }
}

/// A single Gaussian blob moving horizontally over a `height x width` frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub motion: Motion,
    /// Pixels per frame (peak speed for sinusoidal motion).
    pub velocity: f64,
    /// Frames elapsed before frame 0; [`advanced`](Self::advanced) shifts it.
    #[serde(default)]
    pub time_offset: f64,
    /// `[x, y]` in pixels.
    pub center: [f64; 2],
    pub blob_width: f64,
    pub amplitude: f64,
    /// `[height, width]`.
    #[serde(default = "default_frame_shape")]
    pub frame_shape: [usize; 2],
    /// Standard deviation of seeded per-pixel noise added by [`render_scene`].
    #[serde(default)]
    pub noise_floor: f64,
}

fn default_frame_shape() -> [usize; 2] {
    [16, 16]
}

impl SceneSpec {
    pub fn new(
        motion: Motion,
        velocity: f64,
        center: [f64; 2],
        blob_width: f64,
        amplitude: f64,
    ) -> Self {
        Self {
            motion,
            velocity,
            time_offset: 0.0,
            center,
            blob_width,
            amplitude,
            frame_shape: default_frame_shape(),
            noise_floor: 0.0,
        }
    }

    pub fn with_frame_shape(mut self, shape: [usize; 2]) -> Self {
        self.frame_shape = shape;
        self
    }

    pub fn with_noise_floor(mut self, std: f64) -> Self {
        self.noise_floor = std;
        self
    }

    /// The same scene observed `frames` later.
    pub fn advanced(&self, frames: usize) -> Self {
        Self {
            time_offset: self.time_offset + frames as f64,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blob_width > 0.0 && self.blob_width.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "blob width must be positive, got {}",
                self.blob_width
            )));
        }
        if self.frame_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidRange("frame shape must be nonzero".into()));
        }
        if !(self.noise_floor >= 0.0) {
            return Err(Error::InvalidRange("noise floor must be >= 0".into()));
        }
        let finite = [
            self.velocity,
            self.time_offset,
            self.center[0],
            self.center[1],
            self.amplitude,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scene parameters must be finite".into()));
        }
        Ok(())
    }

    /// Unwrapped blob center at frame `j`.
    pub fn center_at(&self, j: usize) -> [f64; 2] {
        let tau = self.time_offset + j as f64;
        [
            self.center[0] + self.motion.displacement(self.velocity, tau),
            self.center[1],
        ]
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape[0] * self.frame_shape[1]
    }
}

/// Condition vector for a scene. Injective for a fixed frame shape.
pub fn spec_to_condition(spec: &SceneSpec) -> ConditionEmbedding {
    let [h, w] = spec.frame_shape;
    let (h, w) = (h as f64, w as f64);
    let mut v = Array1::zeros(CONDITION_DIM);
    v[spec.motion.slot()] = 1.0;
    v[3] = spec.velocity / w;
    v[4] = spec.time_offset / OFFSET_SCALE;
    v[5] = spec.center[0] / w;
    v[6] = spec.center[1] / h;
    v[7] = spec.blob_width / w;
    v[8] = spec.amplitude;
    ConditionEmbedding::new(v)
}

/// Inverse of [`spec_to_condition`]. Requires an exact motion one-hot.
pub fn condition_to_spec(
    condition: &ConditionEmbedding,
    frame_shape: [usize; 2],
) -> Result<SceneSpec> {
    let v = &condition.vector;
    if v.len() != CONDITION_DIM {
        return Err(Error::Dimension {
            what: "scene condition",
            expected: CONDITION_DIM,
            found: v.len(),
        });
    }
    let motion = match (v[0], v[1], v[2]) {
        (1.0, 0.0, 0.0) => Motion::Static,
        (0.0, 1.0, 0.0) => Motion::Linear,
        (0.0, 0.0, 1.0) => Motion::Sinusoidal,
        _ => {
            return Err(Error::Condition(
                "motion slots are not a one-hot; vector is a blend of scenes".into(),
            ))
        }
    };
    let (h, w) = (frame_shape[0] as f64, frame_shape[1] as f64);
    Ok(SceneSpec {
        motion,
        velocity: v[3] * w,
        time_offset: v[4] * OFFSET_SCALE,
        center: [v[5] * w, v[6] * h],
        blob_width: v[7] * w,
        amplitude: v[8],
        frame_shape,
        noise_floor: 0.0,
    })
}

fn render_blob(frame: &mut [f64], shape: [usize; 2], center: [f64; 2], width: f64, amplitude: f64) {
    let [h, w] = shape;
    let inv = 1.0 / (2.0 * width * width);
    for y in 0..h {
        let mut dy = y as f64 - center[1];
        dy -= h as f64 * (dy / h as f64).round();
        for x in 0..w {
            let mut dx = x as f64 - center[0];
            dx -= w as f64 * (dx / w as f64).round();
            frame[y * w + x] = amplitude * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// Noise-free frames for an arbitrary condition vector, `num_frames x (h*w)`.
/// Zero amplitude or non-positive width renders blank frames, so the null
/// condition is the empty scene.
pub fn render_condition(
    condition: &ConditionEmbedding,
    frame_shape: [usize; 2],
    num_frames: usize,
) -> Result<Array2<f64>> {
    let v = &condition.vector;
    if v.len() != CONDITION_DIM {
        return Err(Error::Dimension {
            what: "scene condition",
            expected: CONDITION_DIM,
            found: v.len(),
        });
    }
    let [h, w] = frame_shape;
    let mut out = Array2::zeros((num_frames, h * w));
    let (fh, fw) = (h as f64, w as f64);
    let width = v[7] * fw;
    let amplitude = v[8];
    if amplitude == 0.0 || width <= 0.0 {
        return Ok(out);
    }
    let velocity = v[3] * fw;
    let offset = v[4] * OFFSET_SCALE;
    let (cx, cy) = (v[5] * fw, v[6] * fh);
    for (j, mut row) in out.rows_mut().into_iter().enumerate() {
        let tau = offset + j as f64;
        let x = cx
            + [Motion::Static, Motion::Linear, Motion::Sinusoidal]
                .iter()
                .map(|m| v[m.slot()] * m.displacement(velocity, tau))
                .sum::<f64>();
        render_blob(
            row.as_slice_mut().expect("standard layout"),
            frame_shape,
            [x, cy],
            width,
            amplitude,
        );
    }
    Ok(out)
}

/// Renders `num_frames` frames of a scene plus its seeded noise floor.
pub fn render_scene(spec: &SceneSpec, num_frames: usize, seed: u64) -> Result<LongSequence> {
    spec.validate()?;
    if num_frames == 0 {
        return Err(Error::InvalidRange("num_frames must be >= 1".into()));
    }
    let mut frames = Array2::zeros((num_frames, spec.frame_len()));
    for (j, mut row) in frames.rows_mut().into_iter().enumerate() {
        render_blob(
            row.as_slice_mut().expect("standard layout"),
            spec.frame_shape,
            spec.center_at(j),
            spec.blob_width,
            spec.amplitude,
        );
    }
    if spec.noise_floor > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        frames.mapv_inplace(|v| v + spec.noise_floor * rng.sample::<f64, _>(StandardNormal));
    }
    LongSequence::new(frames, spec.frame_shape.to_vec())
}

/// A scene assigned to a frame range of a long sequence. `scene` is given
/// at frame 0 of the whole sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrompt {
    pub start: usize,
    pub end: usize,
    pub scene: SceneSpec,
}

impl ScenePrompt {
    pub fn new(frames: std::ops::Range<usize>, scene: SceneSpec) -> Self {
        Self {
            start: frames.start,
            end: frames.end,
            scene,
        }
    }

    fn frame_prompt(&self) -> FramePrompt {
        FramePrompt::new(self.start..self.end, spec_to_condition(&self.scene))
    }
}

/// Per-clip conditions for scene prompts: each region's scene is advanced
/// to the clip's first frame, and straddling clips blend by frame count.
pub fn scene_clip_conditions(
    prompts: &[ScenePrompt],
    layout: &ClipLayout,
) -> Result<Vec<ConditionEmbedding>> {
    for p in prompts {
        p.scene.validate()?;
    }
    let frame_prompts: Vec<FramePrompt> = prompts.iter().map(ScenePrompt::frame_prompt).collect();
    assign_clip_conditions_with(&frame_prompts, layout, |fp, clip_start| {
        let owner = prompts
            .iter()
            .find(|p| p.start == fp.frames.start)
            .expect("prompt regions are distinct");
        spec_to_condition(&owner.scene.advanced(clip_start))
    })
}

/// The clean frame each prompt asks for at every frame index, as frame-space
/// vectors (alignment targets).
pub fn scene_frame_targets(
    prompts: &[ScenePrompt],
    num_frames: usize,
) -> Result<Vec<ConditionEmbedding>> {
    (0..num_frames)
        .map(|j| {
            let p = prompts
                .iter()
                .find(|p| (p.start..p.end).contains(&j))
                .ok_or_else(|| Error::Condition(format!("no prompt covers frame {j}")))?;
            let frame = render_condition(
                &spec_to_condition(&p.scene.advanced(j)),
                p.scene.frame_shape,
                1,
            )?;
            Ok(ConditionEmbedding::new(frame.row(0).to_owned()))
        })
        .collect()
}

/// Renders each prompt's own frames and concatenates them.
pub fn render_prompts(prompts: &[ScenePrompt], seed: u64) -> Result<LongSequence> {
    let mut sorted: Vec<&ScenePrompt> = prompts.iter().collect();
    sorted.sort_by_key(|p| p.start);
    let mut parts = Vec::new();
    for (k, p) in sorted.iter().enumerate() {
        if p.end <= p.start {
            return Err(Error::Condition(format!(
                "empty prompt region {}..{}",
                p.start, p.end
            )));
        }
        let scene = p.scene.advanced(p.start);
        parts.push(render_scene(
            &scene,
            p.end - p.start,
            seed.wrapping_add(k as u64),
        )?);
    }
    LongSequence::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(motion: Motion, v: f64) -> SceneSpec {
        SceneSpec::new(motion, v, [4.0, 8.0], 2.0, 1.0)
    }

    #[test]
    fn scene_prompts_advance_to_clip_start() {
        let a = spec(Motion::Linear, 1.0);
        let b = spec(Motion::Static, 0.0);
        let prompts = [
            ScenePrompt::new(0..8, a.clone()),
            ScenePrompt::new(8..16, b.clone()),
        ];
        let layout = ClipLayout::new(16, 4, 4).unwrap();
        let conds = scene_clip_conditions(&prompts, &layout).unwrap();
        assert_eq!(conds[1], spec_to_condition(&a.advanced(4)));
        assert_eq!(conds[3], spec_to_condition(&b.advanced(12)));
        let video = render_prompts(&prompts, 0).unwrap();
        let targets = scene_frame_targets(&prompts, 16).unwrap();
        for j in [0, 5, 9, 15] {
            assert_eq!(targets[j].vector, video.frames().row(j));
        }
        // the clip mean for clip 1 is exactly frames 4..8
        let mean = render_condition(&conds[1], [16, 16], 4).unwrap();
        assert_eq!(mean, video.frames().slice(ndarray::s![4..8, ..]));
    }

    #[test]
    fn zero_velocity_gives_identical_frames() {
        let seq = render_scene(&spec(Motion::Linear, 0.0), 5, 0).unwrap();
        for j in 1..5 {
            assert_eq!(seq.frames().row(j), seq.frames().row(0));
        }
    }

    #[test]
    fn linear_centers_step_by_velocity() {
        let s = spec(Motion::Linear, 1.5);
        let (a, b) = (s.center_at(0), s.center_at(1));
        assert_eq!(b[0] - a[0], 1.5);
        assert_eq!(a[1], b[1]);
        // the rendered peak moves too
        let seq = render_scene(&spec(Motion::Linear, 1.0), 2, 0).unwrap();
        let argmax = |j: usize| {
            seq.frames()
                .row(j)
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(1), argmax(0) + 1);
    }

    #[test]
    fn sinusoidal_trajectory_closed_form() {
        let s = spec(Motion::Sinusoidal, 0.8);
        let omega = 2.0 * PI / 32.0;
        for j in 0..64 {
            let expected = 4.0 + 0.8 / omega * (omega * j as f64).sin();
            assert!((s.center_at(j)[0] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn wraps_at_frame_edge() {
        let mut s = spec(Motion::Static, 0.0);
        s.center = [15.6, 8.0];
        let seq = render_scene(&s, 1, 0).unwrap();
        let row = seq.frames().row(0);
        // column 0 is 0.4 px away through the seam, column 15 is 0.6 px away
        assert!(row[8 * 16] > row[8 * 16 + 15]);
    }

    #[test]
    fn seeds_only_change_noise_floor() {
        let s = spec(Motion::Linear, 0.5).with_noise_floor(0.1);
        let clean = render_scene(&spec(Motion::Linear, 0.5), 8, 0).unwrap();
        let a = render_scene(&s, 8, 1).unwrap();
        let b = render_scene(&s, 8, 1).unwrap();
        let c = render_scene(&s, 8, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let resid_a = a.frames() - clean.frames();
        let resid_c = c.frames() - clean.frames();
        assert!(resid_a.iter().all(|v| v.abs() < 1.0));
        assert!(resid_c.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn condition_round_trip_and_slots() {
        let a = spec(Motion::Sinusoidal, 0.75);
        let c = spec_to_condition(&a);
        assert_eq!(condition_to_spec(&c, [16, 16]).unwrap(), a);
        assert_eq!(spec_to_condition(&a), c);

        let mut b = a.clone();
        b.velocity = 1.25;
        let diff: Vec<usize> = (0..CONDITION_DIM)
            .filter(|&k| c.vector[k] != spec_to_condition(&b).vector[k])
            .collect();
        assert_eq!(diff, vec![3]);

        let blend = ConditionEmbedding::new(
            (&c.vector + &spec_to_condition(&spec(Motion::Static, 0.0)).vector) / 2.0,
        );
        assert!(condition_to_spec(&blend, [16, 16]).is_err());
    }

    #[test]
    fn rendering_condition_matches_scene() {
        let s = spec(Motion::Linear, 0.7).advanced(3);
        let from_cond = render_condition(&spec_to_condition(&s), [16, 16], 6).unwrap();
        let direct = render_scene(&s, 6, 0).unwrap();
        for (a, b) in from_cond.iter().zip(direct.frames().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let blank =
            render_condition(&ConditionEmbedding::null(CONDITION_DIM), [16, 16], 2).unwrap();
        assert!(blank.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn advancing_matches_later_frames() {
        let s = spec(Motion::Sinusoidal, 0.6);
        let long = render_scene(&s, 10, 0).unwrap();
        let later = render_scene(&s.advanced(4), 6, 0).unwrap();
        for j in 0..6 {
            for (a, b) in later
                .frames()
                .row(j)
                .iter()
                .zip(long.frames().row(j + 4).iter())
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(Motion::Linear, 0.5);
        s.blob_width = 0.0;
        assert!(render_scene(&s, 4, 0).is_err());
        assert!(render_scene(&spec(Motion::Linear, 0.5), 0, 0).is_err());
    }

    #[test]
    fn injective_over_grid() {
        let mut seen = Vec::new();
        for motion in [Motion::Static, Motion::Linear, Motion::Sinusoidal] {
            for v in [0.0, 0.5, 1.0] {
                for cx in [2.0, 8.0] {
                    for amp in [0.5, 1.0] {
                        let c = spec_to_condition(&SceneSpec::new(motion, v, [cx, 8.0], 2.0, amp));
                        assert!(!seen.contains(&c.vector));
                        seen.push(c.vector);
                    }
                }
            }
        }
    }
}
