//! Clip layout over a long sequence and the weighted least-squares merge.
//!
//! Clip `i` covers the half-open frame interval `[stride * i, stride * i + window)`.
//! Merging minimizes `sum_i || W_i * (F_i(v) - v^i) ||^2`, whose minimizer is
//! the per-element squared-weight average of every candidate covering that
//! element. [`merge_lsq_oracle`] solves the same problem through dense normal
//! equations and exists only to check [`merge_weighted`].

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{Clip, LongSequence};

/// Window length `M`, stride `S`, clip count `N` and the covered length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipLayout {
    window: usize,
    stride: usize,
    clip_count: usize,
    total_frames: usize,
}

impl ClipLayout {
    pub fn new(total_frames: usize, window: usize, stride: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Layout("window must be >= 1".into()));
        }
        if stride == 0 {
            return Err(Error::Layout("stride must be >= 1".into()));
        }
        if stride > window {
            return Err(Error::Layout(format!(
                "stride {stride} > window {window} leaves uncovered frames"
            )));
        }
        if total_frames < window {
            return Err(Error::Layout(format!(
                "{total_frames} frames is shorter than one window of {window}"
            )));
        }
        if (total_frames - window) % stride != 0 {
            return Err(Error::Layout(format!(
                "({total_frames} - {window}) is not divisible by stride {stride}; pad or trim the sequence"
            )));
        }
        Ok(Self {
            window,
            stride,
            clip_count: (total_frames - window) / stride + 1,
            total_frames,
        })
    }

    /// Smallest `total >= frames` that fits the window/stride grid, and the pad.
    pub fn padded_length(frames: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
        if window == 0 || stride == 0 || stride > window {
            return Err(Error::Layout(format!(
                "invalid window {window} / stride {stride}"
            )));
        }
        let total = if frames <= window {
            window
        } else {
            window + (frames - window).div_ceil(stride) * stride
        };
        Ok((total, total - frames))
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn clip_count(&self) -> usize {
        self.clip_count
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn clip_start(&self, clip: usize) -> usize {
        self.stride * clip
    }

    pub fn clip_range(&self, clip: usize) -> std::ops::Range<usize> {
        let start = self.clip_start(clip);
        start..start + self.window
    }

    pub fn covers(&self, clip: usize, frame: usize) -> bool {
        clip < self.clip_count && self.clip_range(clip).contains(&frame)
    }

    /// True when clips tile the sequence without overlap.
    pub fn is_isolated(&self) -> bool {
        self.stride == self.window
    }

    pub fn coverage(&self) -> CoverageIndex {
        let mut per_frame = vec![Vec::new(); self.total_frames];
        for clip in 0..self.clip_count {
            for (local, frame) in self.clip_range(clip).enumerate() {
                per_frame[frame].push((clip, local));
            }
        }
        CoverageIndex { per_frame }
    }
}

/// For each frame `j`, the `(clip, local frame)` pairs that contain it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageIndex {
    per_frame: Vec<Vec<(usize, usize)>>,
}

impl CoverageIndex {
    pub fn frame(&self, frame: usize) -> &[(usize, usize)] {
        &self.per_frame[frame]
    }

    pub fn num_frames(&self) -> usize {
        self.per_frame.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[(usize, usize)]> {
        self.per_frame.iter().map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Uniform,
    Tent,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
enum WeightTable {
    /// `clips x window`
    PerFrame(Array2<f64>),
    /// One `window x features` table per clip.
    PerElement(Vec<Array2<f64>>),
}

/// Nonnegative merge weights `W_i`, per frame or per element.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme {
    kind: WeightKind,
    table: WeightTable,
}

impl WeightScheme {
    pub fn uniform(layout: &ClipLayout) -> Self {
        Self {
            kind: WeightKind::Uniform,
            table: WeightTable::PerFrame(Array2::ones((layout.clip_count, layout.window))),
        }
    }

    /// Weights rising linearly from 1 at either clip edge toward the center.
    pub fn tent(layout: &ClipLayout) -> Self {
        let m = layout.window;
        let row: Vec<f64> = (0..m).map(|j| (j.min(m - 1 - j) + 1) as f64).collect();
        let table = Array2::from_shape_fn((layout.clip_count, m), |(_, j)| row[j]);
        Self {
            kind: WeightKind::Tent,
            table: WeightTable::PerFrame(table),
        }
    }

    pub fn from_kind(kind: WeightKind, layout: &ClipLayout) -> Result<Self> {
        match kind {
            WeightKind::Uniform => Ok(Self::uniform(layout)),
            WeightKind::Tent => Ok(Self::tent(layout)),
            WeightKind::Custom => Err(Error::Layout(
                "custom weights need an explicit table".into(),
            )),
        }
    }

    /// Per-frame weights, one row of length `window` per clip.
    pub fn custom(layout: &ClipLayout, table: Array2<f64>) -> Result<Self> {
        if table.dim() != (layout.clip_count, layout.window) {
            return Err(Error::shape(
                &[layout.clip_count, layout.window],
                table.shape(),
            ));
        }
        check_weights(table.iter())?;
        Ok(Self {
            kind: WeightKind::Custom,
            table: WeightTable::PerFrame(table),
        })
    }

    /// Per-element weights, one `window x features` table per clip.
    pub fn custom_per_element(layout: &ClipLayout, tables: Vec<Array2<f64>>) -> Result<Self> {
        if tables.len() != layout.clip_count {
            return Err(Error::Dimension {
                what: "weight table count",
                expected: layout.clip_count,
                found: tables.len(),
            });
        }
        let cols = tables.first().map(|t| t.ncols()).unwrap_or(0);
        for t in &tables {
            if t.dim() != (layout.window, cols) {
                return Err(Error::shape(&[layout.window, cols], t.shape()));
            }
            check_weights(t.iter())?;
        }
        Ok(Self {
            kind: WeightKind::Custom,
            table: WeightTable::PerElement(tables),
        })
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    /// Per-frame table, if the scheme is not per element.
    pub fn per_frame(&self) -> Option<&Array2<f64>> {
        match &self.table {
            WeightTable::PerFrame(t) => Some(t),
            WeightTable::PerElement(_) => None,
        }
    }

    #[inline]
    pub fn weight(&self, clip: usize, local: usize, feature: usize) -> f64 {
        match &self.table {
            WeightTable::PerFrame(t) => t[[clip, local]],
            WeightTable::PerElement(ts) => ts[clip][[local, feature]],
        }
    }

    /// Every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let table = match &self.table {
            WeightTable::PerFrame(t) => WeightTable::PerFrame(t * factor),
            WeightTable::PerElement(ts) => {
                WeightTable::PerElement(ts.iter().map(|t| t * factor).collect())
            }
        };
        Self {
            kind: self.kind,
            table,
        }
    }

    fn check_against(&self, layout: &ClipLayout, features: usize) -> Result<()> {
        match &self.table {
            WeightTable::PerFrame(t) => {
                if t.dim() != (layout.clip_count, layout.window) {
                    return Err(Error::shape(&[layout.clip_count, layout.window], t.shape()));
                }
            }
            WeightTable::PerElement(ts) => {
                if ts.len() != layout.clip_count {
                    return Err(Error::Dimension {
                        what: "weight table count",
                        expected: layout.clip_count,
                        found: ts.len(),
                    });
                }
                if let Some(t) = ts.iter().find(|t| t.dim() != (layout.window, features)) {
                    return Err(Error::shape(&[layout.window, features], t.shape()));
                }
            }
        }
        Ok(())
    }
}

fn check_weights<'a>(mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if let Some(w) = values.find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidRange(format!(
            "merge weight {w} is not a finite nonnegative number"
        )));
    }
    Ok(())
}

/// `F_i(v)` for every clip, copied out as [`Clip`]s at step `time_step`.
pub fn split(v: &LongSequence, layout: &ClipLayout, time_step: usize) -> Result<Vec<Clip>> {
    if v.num_frames() != layout.total_frames {
        return Err(Error::Dimension {
            what: "sequence frame count",
            expected: layout.total_frames,
            found: v.num_frames(),
        });
    }
    Ok((0..layout.clip_count)
        .map(|i| {
            let r = layout.clip_range(i);
            Clip::new(v.frames().slice(s![r, ..]).to_owned(), i, time_step)
        })
        .collect())
}

fn check_clips(clips: &[Clip], layout: &ClipLayout) -> Result<usize> {
    if clips.len() != layout.clip_count {
        return Err(Error::Dimension {
            what: "clip count",
            expected: layout.clip_count,
            found: clips.len(),
        });
    }
    let features = clips[0].frames.ncols();
    for c in clips {
        if c.frames.dim() != (layout.window, features) {
            return Err(Error::shape(&[layout.window, features], c.frames.shape()));
        }
    }
    Ok(features)
}

/// Closed-form minimizer of the weighted overlap objective.
///
/// Each element is `sum(W^2 * x) / sum(W^2)` over its covering clips, taken in
/// ascending clip order. The sum is accumulated as an offset from the first
/// candidate so unanimous candidates come back bit-for-bit.
pub fn merge_weighted(
    clips: &[Clip],
    layout: &ClipLayout,
    weights: &WeightScheme,
) -> Result<Array2<f64>> {
    let features = check_clips(clips, layout)?;
    weights.check_against(layout, features)?;
    let coverage = layout.coverage();
    let mut out = Array2::zeros((layout.total_frames, features));
    for (frame, cover) in coverage.iter().enumerate() {
        let &(first_clip, first_local) = cover.first().ok_or(Error::ZeroDenominator { frame })?;
        for d in 0..features {
            let base = clips[first_clip].frames[[first_local, d]];
            let (mut num, mut den) = (0.0, 0.0);
            for &(i, local) in cover {
                let w = weights.weight(i, local, d);
                let w2 = w * w;
                num += w2 * (clips[i].frames[[local, d]] - base);
                den += w2;
            }
            if den <= 0.0 {
                return Err(Error::ZeroDenominator { frame });
            }
            out[[frame, d]] = base + num / den;
        }
    }
    Ok(out)
}

/// `sum_i || W_i * (F_i(v) - clip_i) ||^2`.
pub fn merge_objective(
    v: &Array2<f64>,
    clips: &[Clip],
    layout: &ClipLayout,
    weights: &WeightScheme,
) -> Result<f64> {
    let features = check_clips(clips, layout)?;
    if v.dim() != (layout.total_frames, features) {
        return Err(Error::shape(&[layout.total_frames, features], v.shape()));
    }
    let mut total = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let start = layout.clip_start(i);
        for local in 0..layout.window {
            for d in 0..features {
                let r =
                    weights.weight(i, local, d) * (v[[start + local, d]] - clip.frames[[local, d]]);
                total += r * r;
            }
        }
    }
    Ok(total)
}

/// Verification oracle: assembles the stacked weighted design matrix per
/// feature and solves its normal equations with a dense LU factorization.
pub fn merge_lsq_oracle(
    clips: &[Clip],
    layout: &ClipLayout,
    weights: &WeightScheme,
) -> Result<Array2<f64>> {
    let features = check_clips(clips, layout)?;
    weights.check_against(layout, features)?;
    let n = layout.total_frames;
    let rows = layout.clip_count * layout.window;
    let mut out = Array2::zeros((n, features));
    for d in 0..features {
        let mut design = DMatrix::<f64>::zeros(rows, n);
        let mut rhs = DVector::<f64>::zeros(rows);
        for (i, clip) in clips.iter().enumerate() {
            let start = layout.clip_start(i);
            for local in 0..layout.window {
                let row = i * layout.window + local;
                let w = weights.weight(i, local, d);
                design[(row, start + local)] = w;
                rhs[row] = w * clip.frames[[local, d]];
            }
        }
        let normal = design.transpose() * &design;
        let target = design.transpose() * rhs;
        let solution = normal.lu().solve(&target).ok_or_else(|| {
            let frame = (0..n)
                .find(|&j| (0..rows).all(|r| design[(r, j)] == 0.0))
                .unwrap_or(0);
            Error::ZeroDenominator { frame }
        })?;
        for j in 0..n {
            out[[j, d]] = solution[j];
        }
    }
    Ok(out)
}
