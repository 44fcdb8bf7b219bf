//! Frame tensors: the long sequence `v_t` and its windowed clips `v_t^i`.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// A long sequence stored as `frames x features`, each row one flattened frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LongSequence {
    frames: Array2<f64>,
    frame_shape: Vec<usize>,
    frame_rate: f64,
}

impl LongSequence {
    /// Wraps a `frames x features` array. `frame_shape` must multiply out to
    /// the feature count.
    pub fn new(frames: Array2<f64>, frame_shape: Vec<usize>) -> Result<Self> {
        let features: usize = frame_shape.iter().product();
        if features != frames.ncols() {
            return Err(Error::Dimension {
                what: "frame feature",
                expected: features,
                found: frames.ncols(),
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "sequence contains non-finite values".into(),
            ));
        }
        Ok(Self {
            frames,
            frame_shape,
            frame_rate: 1.0,
        })
    }

    /// Flat frames with a one-dimensional frame shape.
    pub fn from_flat(frames: Array2<f64>) -> Result<Self> {
        let d = frames.ncols();
        Self::new(frames, vec![d])
    }

    pub fn with_frame_rate(mut self, frame_rate: f64) -> Self {
        self.frame_rate = frame_rate;
        self
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn frame_len(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.frame_shape
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub(crate) fn replace_frames(&self, frames: Array2<f64>) -> Self {
        debug_assert_eq!(frames.ncols(), self.frame_len());
        Self {
            frames,
            frame_shape: self.frame_shape.clone(),
            frame_rate: self.frame_rate,
        }
    }

    /// Appends `count` copies of the last frame.
    pub fn pad_repeat_last(&self, count: usize) -> Self {
        if count == 0 || self.num_frames() == 0 {
            return self.clone();
        }
        let last = self.frames.row(self.num_frames() - 1).to_owned();
        let mut frames = self.frames.clone();
        for _ in 0..count {
            frames.push_row(last.view()).expect("row length matches");
        }
        self.replace_frames(frames)
    }

    /// Drops frames past `len`.
    pub fn truncate(&self, len: usize) -> Self {
        let len = len.min(self.num_frames());
        self.replace_frames(self.frames.slice(s![..len, ..]).to_owned())
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.num_frames() {
            return Err(Error::InvalidRange(format!(
                "frame range [{start}, {end}) outside sequence of {}",
                self.num_frames()
            )));
        }
        Ok(self.replace_frames(self.frames.slice(s![start..end, ..]).to_owned()))
    }

    /// Concatenates sequences with identical frame shapes.
    pub fn concat(parts: &[LongSequence]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidRange("nothing to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|p| p.frames.view()).collect();
        for p in parts {
            if p.frame_shape != first.frame_shape {
                return Err(Error::shape(&first.frame_shape, &p.frame_shape));
            }
        }
        let frames = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidRange(e.to_string()))?;
        Ok(first.replace_frames(frames))
    }
}

/// One window of a long sequence at a given diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Array2<f64>,
    pub clip_index: usize,
    pub time_step: usize,
}

impl Clip {
    pub fn new(frames: Array2<f64>, clip_index: usize, time_step: usize) -> Self {
        Self {
            frames,
            clip_index,
            time_step,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn at_step(mut self, t: usize) -> Self {
        self.time_step = t;
        self
    }
}
