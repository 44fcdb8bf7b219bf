//! Long-sequence sampling, inversion and editing by jointly denoising
//! overlapping clips.
//!
//! Every rung of the DDIM ladder splits the current sequence into clips,
//! steps each clip on a worker pool, and merges the results single-threaded
//! in fixed clip order, so the output does not depend on the worker count.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::conditions::{identifier_guided_noise, ClipIdentifiers, ConditionEmbedding};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::{cfg_combine, GuidanceConfig, NoiseSchedule};
use crate::sequence::{Clip, LongSequence};
use crate::windowing::{merge_weighted, split, ClipLayout, WeightScheme};

/// Wall-clock split of one ladder run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LadderTiming {
    /// Time spent in the parallel per-clip denoise and step phase.
    pub denoise: Duration,
    pub merge: Duration,
    pub rungs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Sample,
    Invert,
}

/// A configured co-denoising run over one layout.
pub struct CoDenoiser<'a, D: Denoiser + ?Sized> {
    denoiser: &'a D,
    schedule: &'a NoiseSchedule,
    layout: ClipLayout,
    weights: WeightScheme,
    guidance: GuidanceConfig,
    identifiers: Option<&'a ClipIdentifiers>,
    steps: usize,
    smoothing: f64,
    pool: rayon::ThreadPool,
}

impl<'a, D: Denoiser + ?Sized> CoDenoiser<'a, D> {
    /// Uniform weights, no guidance, one worker, 50 steps.
    pub fn new(denoiser: &'a D, schedule: &'a NoiseSchedule, layout: ClipLayout) -> Result<Self> {
        if let Some(window) = denoiser.window() {
            if window != layout.window() {
                return Err(Error::Layout(format!(
                    "denoiser expects clips of {window} frames, layout uses {}",
                    layout.window()
                )));
            }
        }
        Ok(Self {
            denoiser,
            schedule,
            weights: WeightScheme::uniform(&layout),
            layout,
            guidance: GuidanceConfig::unguided(0),
            identifiers: None,
            steps: 50.min(schedule.num_steps()),
            smoothing: 0.0,
            pool: build_pool(1)?,
        })
    }

    pub fn with_weights(mut self, weights: WeightScheme) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_guidance(mut self, guidance: GuidanceConfig) -> Self {
        self.guidance = guidance;
        self
    }

    pub fn with_identifiers(mut self, identifiers: &'a ClipIdentifiers) -> Result<Self> {
        if identifiers.clip_count() != self.layout.clip_count() {
            return Err(Error::Dimension {
                what: "identifier count",
                expected: self.layout.clip_count(),
                found: identifiers.clip_count(),
            });
        }
        self.identifiers = Some(identifiers);
        Ok(self)
    }

    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        self.schedule.ddim_timesteps(steps)?;
        self.steps = steps;
        Ok(self)
    }

    /// Adjacent-frame smoothing strength applied after every merge; 0 disables it.
    pub fn with_smoothing(mut self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        self.smoothing = lambda;
        Ok(self)
    }

    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        self.pool = build_pool(workers)?;
        Ok(self)
    }

    pub fn layout(&self) -> &ClipLayout {
        &self.layout
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Standard-normal `v_T` for the whole sequence from one seed.
    pub fn initial_noise(&self, frame_shape: &[usize], seed: u64) -> Result<LongSequence> {
        initial_noise(self.layout.total_frames(), frame_shape, seed)
    }

    /// Samples from seeded noise: `v_T ~ N(0, I)`, then the full ladder.
    pub fn sample_long(
        &self,
        conditions: &[ConditionEmbedding],
        frame_shape: &[usize],
        seed: u64,
    ) -> Result<LongSequence> {
        let noise = self.initial_noise(frame_shape, seed)?;
        self.sample_from(noise, conditions)
    }

    /// Runs the sampling ladder from a given `v_T`.
    pub fn sample_from(
        &self,
        noise: LongSequence,
        conditions: &[ConditionEmbedding],
    ) -> Result<LongSequence> {
        Ok(self.sample_from_timed(noise, conditions)?.0)
    }

    pub fn sample_from_timed(
        &self,
        noise: LongSequence,
        conditions: &[ConditionEmbedding],
    ) -> Result<(LongSequence, LadderTiming)> {
        let rungs = self.schedule.sampling_rungs(self.steps)?;
        self.run_ladder(noise, conditions, &rungs, Direction::Sample)
    }

    /// DDIM inversion of a clean sequence with unguided predictions.
    pub fn invert_long(
        &self,
        video: &LongSequence,
        conditions: &[ConditionEmbedding],
    ) -> Result<LongSequence> {
        let rungs = self.schedule.inversion_rungs(self.steps)?;
        Ok(self
            .run_ladder(video.clone(), conditions, &rungs, Direction::Invert)?
            .0)
    }

    /// Inverts under `old` conditions, then samples under `new` ones.
    pub fn edit_long(
        &self,
        video: &LongSequence,
        old: &[ConditionEmbedding],
        new: &[ConditionEmbedding],
    ) -> Result<LongSequence> {
        self.check_conditions(new)?;
        let noise = self.invert_long(video, old)?;
        self.sample_from(noise, new)
    }

    fn check_conditions(&self, conditions: &[ConditionEmbedding]) -> Result<()> {
        if conditions.len() != self.layout.clip_count() {
            return Err(Error::Dimension {
                what: "condition count",
                expected: self.layout.clip_count(),
                found: conditions.len(),
            });
        }
        Ok(())
    }

    /// Guided noise estimate for one clip.
    fn clip_noise(
        &self,
        clip: &Clip,
        condition: &ConditionEmbedding,
        scale: f64,
    ) -> Result<Array2<f64>> {
        if let Some(ids) = self.identifiers {
            return identifier_guided_noise(
                self.denoiser,
                clip,
                condition,
                ids.get(clip.clip_index),
                scale,
            );
        }
        let cond = self.denoiser.predict(clip, condition, None)?;
        if scale == 0.0 {
            return Ok(cond);
        }
        let null = if self.guidance.null_condition().dim() == condition.dim() {
            self.guidance.null_condition().clone()
        } else {
            ConditionEmbedding::null(condition.dim())
        };
        let uncond = self.denoiser.predict(clip, &null, None)?;
        cfg_combine(&cond, &uncond, scale)
    }

    fn run_ladder(
        &self,
        start: LongSequence,
        conditions: &[ConditionEmbedding],
        rungs: &[(usize, usize)],
        direction: Direction,
    ) -> Result<(LongSequence, LadderTiming)> {
        self.check_conditions(conditions)?;
        if start.num_frames() != self.layout.total_frames() {
            return Err(Error::Layout(format!(
                "sequence has {} frames, layout covers {}",
                start.num_frames(),
                self.layout.total_frames()
            )));
        }
        let scale = match direction {
            Direction::Sample => self.guidance.scale(),
            Direction::Invert => 0.0,
        };
        let mut timing = LadderTiming::default();
        let mut v = start;
        for &(t, t_to) in rungs {
            let clips = split(&v, &self.layout, t)?;
            let began = Instant::now();
            let stepped: Vec<Result<Clip>> = self.pool.install(|| {
                clips
                    .into_par_iter()
                    .map(|clip| {
                        let eps = self.clip_noise(&clip, &conditions[clip.clip_index], scale)?;
                        let next = match direction {
                            Direction::Sample => {
                                self.schedule.ddim_step(&clip.frames, &eps, t, t_to)?
                            }
                            Direction::Invert => {
                                self.schedule
                                    .ddim_invert_step(&clip.frames, &eps, t, t_to)?
                            }
                        };
                        Ok(Clip::new(next, clip.clip_index, t_to))
                    })
                    .collect()
            });
            timing.denoise += began.elapsed();
            let stepped = stepped.into_iter().collect::<Result<Vec<_>>>()?;

            let began = Instant::now();
            let mut merged = merge_weighted(&stepped, &self.layout, &self.weights)?;
            if self.smoothing > 0.0 {
                merged = smooth_frames(&merged, self.smoothing);
            }
            timing.merge += began.elapsed();
            if let Some(pos) = merged.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "non-finite value at frame {} after step {t} -> {t_to}",
                    pos / merged.ncols().max(1)
                )));
            }
            v = v.replace_frames(merged);
            timing.rungs += 1;
        }
        Ok((v, timing))
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::InvalidRange("worker count must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidRange(format!("cannot start {workers} workers: {e}")))
}

/// Standard-normal tensor of `total_frames` frames, filled row-major from a
/// ChaCha8 stream seeded by `seed`.
pub fn initial_noise(
    total_frames: usize,
    frame_shape: &[usize],
    seed: u64,
) -> Result<LongSequence> {
    let features: usize = frame_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = Array2::from_shape_simple_fn((total_frames, features), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    LongSequence::new(frames, frame_shape.to_vec())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidRange(format!(
            "smoothing lambda {lambda} outside [0, 1]"
        )));
    }
    Ok(())
}

fn smooth_frames(v: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let n = v.nrows();
    let mut out = v.clone();
    for j in 0..n {
        let mut row = out.row_mut(j);
        if j + 1 < n {
            row.zip_mut_with(&(&v.row(j) - &v.row(j + 1)), |x, d| *x -= 2.0 * lambda * d);
        }
        if j > 0 {
            row.zip_mut_with(&(&v.row(j) - &v.row(j - 1)), |x, d| *x -= 2.0 * lambda * d);
        }
    }
    out
}

/// One gradient step of size `lambda` on `sum_j ||v_j - v_{j+1}||^2`.
pub fn smooth_adjacent_frames(v: &LongSequence, lambda: f64) -> Result<LongSequence> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok(v.clone());
    }
    Ok(v.replace_frames(smooth_frames(v.frames(), lambda)))
}
