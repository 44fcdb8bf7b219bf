//! Condition embeddings, sparse-anchor interpolation, multi-prompt clip
//! assignment and learned clip identifiers.

use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::cfg_combine;
use crate::sequence::Clip;
use crate::windowing::ClipLayout;

/// A fixed-dimension condition vector. The null condition is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub vector: Array1<f64>,
    pub label: Option<String>,
}

impl ConditionEmbedding {
    pub fn new(vector: Array1<f64>) -> Self {
        Self {
            vector,
            label: None,
        }
    }

    pub fn labeled(vector: Array1<f64>, label: impl Into<String>) -> Self {
        Self {
            vector,
            label: Some(label.into()),
        }
    }

    /// The null condition `∅` of dimension `dim`.
    pub fn null(dim: usize) -> Self {
        Self::new(Array1::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_null(&self) -> bool {
        self.vector.iter().all(|v| *v == 0.0)
    }

    fn blend(parts: &[(f64, &ConditionEmbedding)]) -> Self {
        let dim = parts[0].1.dim();
        let mut v = Array1::zeros(dim);
        for (w, c) in parts {
            v.scaled_add(*w, &c.vector);
        }
        Self::new(v)
    }
}

/// Sparse per-clip condition anchors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionTrack {
    pub anchors: Vec<(usize, ConditionEmbedding)>,
}

impl ConditionTrack {
    pub fn new(anchors: Vec<(usize, ConditionEmbedding)>) -> Self {
        Self { anchors }
    }

    /// A track that labels every clip with the same condition.
    pub fn constant(condition: ConditionEmbedding, clip_count: usize) -> Self {
        let mut anchors = vec![(0, condition.clone())];
        if clip_count > 1 {
            anchors.push((clip_count - 1, condition));
        }
        Self { anchors }
    }

    /// Parses `clip_index<TAB>label<TAB>v1,v2,...` lines. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut anchors = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: idx + 1,
                message,
            };
            let mut fields = line.split('\t');
            let (Some(index), Some(label), Some(values), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err("expected 3 tab-separated fields".into()));
            };
            let index = index
                .trim()
                .parse::<usize>()
                .map_err(|e| err(format!("clip index: {e}")))?;
            let vector = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(format!("values: {e}")))?;
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(err("non-finite value".into()));
            }
            let label = label.trim();
            let embedding = if label.is_empty() {
                ConditionEmbedding::new(Array1::from(vector))
            } else {
                ConditionEmbedding::labeled(Array1::from(vector), label)
            };
            anchors.push((index, embedding));
        }
        Ok(Self { anchors })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, c) in &self.anchors {
            let values: Vec<String> = c.vector.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                out,
                "{i}\t{}\t{}",
                c.label.as_deref().unwrap_or(""),
                values.join(",")
            );
        }
        out
    }

    pub fn dim(&self) -> Option<usize> {
        self.anchors.first().map(|(_, c)| c.dim())
    }
}

/// Dense per-clip conditions from sparse anchors by linear interpolation in
/// clip index. Anchors must start at clip 0, end at clip `clip_count - 1`,
/// and be strictly increasing; spacing may be irregular.
pub fn interpolate_conditions(
    track: &ConditionTrack,
    clip_count: usize,
) -> Result<Vec<ConditionEmbedding>> {
    let anchors = &track.anchors;
    let (Some(first), Some(last)) = (anchors.first(), anchors.last()) else {
        return Err(Error::Condition("condition track has no anchors".into()));
    };
    if clip_count == 0 {
        return Err(Error::Condition("clip count must be >= 1".into()));
    }
    if first.0 != 0 || last.0 != clip_count - 1 {
        return Err(Error::Condition(format!(
            "anchors must span clips 0..={}, found {}..={}",
            clip_count - 1,
            first.0,
            last.0
        )));
    }
    if anchors.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Condition(
            "anchor clip indices must be strictly increasing".into(),
        ));
    }
    let dim = first.1.dim();
    if let Some((_, c)) = anchors.iter().find(|(_, c)| c.dim() != dim) {
        return Err(Error::Dimension {
            what: "condition",
            expected: dim,
            found: c.dim(),
        });
    }
    let mut out = Vec::with_capacity(clip_count);
    out.push(first.1.clone());
    for pair in anchors.windows(2) {
        let ((lo, a), (hi, b)) = (&pair[0], &pair[1]);
        let span = (hi - lo) as f64;
        for j in 1..(hi - lo) {
            let frac = j as f64 / span;
            out.push(ConditionEmbedding::blend(&[(1.0 - frac, a), (frac, b)]));
        }
        out.push(b.clone());
    }
    Ok(out)
}

/// A prompt that applies to the frames in `frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrompt {
    pub frames: Range<usize>,
    pub condition: ConditionEmbedding,
}

impl FramePrompt {
    pub fn new(frames: Range<usize>, condition: ConditionEmbedding) -> Self {
        Self { frames, condition }
    }
}

fn sorted_partition(prompts: &[FramePrompt], total: usize) -> Result<Vec<&FramePrompt>> {
    let mut sorted: Vec<&FramePrompt> = prompts.iter().collect();
    sorted.sort_by_key(|p| p.frames.start);
    let mut cursor = 0;
    for p in &sorted {
        if p.frames.start != cursor || p.frames.end <= p.frames.start {
            return Err(Error::Condition(format!(
                "prompt regions must partition [0, {total}) without gaps or overlaps; \
                 region {:?} found at frame {cursor}",
                p.frames
            )));
        }
        cursor = p.frames.end;
    }
    if cursor != total {
        return Err(Error::Condition(format!(
            "prompt regions end at frame {cursor}, sequence has {total}"
        )));
    }
    if let Some(first) = sorted.first() {
        let dim = first.condition.dim();
        if let Some(p) = sorted.iter().find(|p| p.condition.dim() != dim) {
            return Err(Error::Dimension {
                what: "condition",
                expected: dim,
                found: p.condition.dim(),
            });
        }
    }
    Ok(sorted)
}

/// Per-clip conditions from frame-range prompts. A clip straddling several
/// regions gets the convex combination weighted by its frame count in each.
pub fn assign_clip_conditions(
    prompts: &[FramePrompt],
    layout: &ClipLayout,
) -> Result<Vec<ConditionEmbedding>> {
    assign_clip_conditions_with(prompts, layout, |p, _| p.condition.clone())
}

/// Like [`assign_clip_conditions`], but each region's embedding for a clip is
/// produced by `embed(region, clip_start)`, for conditions that depend on
/// where the clip starts (e.g. a moving object's position).
pub fn assign_clip_conditions_with<F>(
    prompts: &[FramePrompt],
    layout: &ClipLayout,
    embed: F,
) -> Result<Vec<ConditionEmbedding>>
where
    F: Fn(&FramePrompt, usize) -> ConditionEmbedding,
{
    let sorted = sorted_partition(prompts, layout.total_frames())?;
    let window = layout.window() as f64;
    let mut out = Vec::with_capacity(layout.clip_count());
    for clip in 0..layout.clip_count() {
        let range = layout.clip_range(clip);
        let start = range.start;
        let parts: Vec<(f64, ConditionEmbedding)> = sorted
            .iter()
            .filter_map(|p| {
                let lo = p.frames.start.max(range.start);
                let hi = p.frames.end.min(range.end);
                (hi > lo).then(|| ((hi - lo) as f64 / window, embed(p, start)))
            })
            .collect();
        if let [(_, only)] = parts.as_slice() {
            out.push(only.clone());
        } else {
            let refs: Vec<(f64, &ConditionEmbedding)> =
                parts.iter().map(|(w, c)| (*w, c)).collect();
            out.push(ConditionEmbedding::blend(&refs));
        }
    }
    Ok(out)
}

/// Per-clip learned identifier vectors `e^i` and their training drop rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipIdentifiers {
    vectors: Array2<f64>,
    drop_probability: f64,
}

impl ClipIdentifiers {
    pub const DEFAULT_DROP_PROBABILITY: f64 = 0.1;

    pub fn new(vectors: Array2<f64>, drop_probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_probability) {
            return Err(Error::InvalidRange(format!(
                "drop probability {drop_probability} outside [0, 1]"
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("identifier entries must be finite".into()));
        }
        Ok(Self {
            vectors,
            drop_probability,
        })
    }

    /// Small random initialization, seeded.
    pub fn random(clip_count: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = Array2::from_shape_simple_fn((clip_count, dim), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            vectors,
            drop_probability: Self::DEFAULT_DROP_PROBABILITY,
        }
    }

    pub fn with_drop_probability(mut self, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidRange(format!(
                "drop probability {p} outside [0, 1]"
            )));
        }
        self.drop_probability = p;
        Ok(self)
    }

    pub fn clip_count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn drop_probability(&self) -> f64 {
        self.drop_probability
    }

    pub fn get(&self, clip: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(clip)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.vectors
    }
}

/// `(1 + w) * eps(v, t, c, e) - w * eps(v, t, ∅, ∅)`: the unconditional
/// branch drops the condition and the identifier together.
pub fn identifier_guided_noise<D: Denoiser + ?Sized>(
    denoiser: &D,
    clip: &Clip,
    condition: &ConditionEmbedding,
    identifier: ArrayView1<'_, f64>,
    scale: f64,
) -> Result<Array2<f64>> {
    match denoiser.identifier_dim() {
        Some(dim) if dim == identifier.len() => {}
        Some(dim) => {
            return Err(Error::Dimension {
                what: "clip identifier",
                expected: dim,
                found: identifier.len(),
            })
        }
        None => {
            return Err(Error::Condition(
                "denoiser has no clip identifier input".into(),
            ))
        }
    }
    if !(scale >= 0.0) {
        return Err(Error::InvalidRange(format!("guidance scale {scale} < 0")));
    }
    let cond = denoiser.predict(clip, condition, Some(identifier))?;
    if scale == 0.0 {
        return Ok(cond);
    }
    let null = ConditionEmbedding::null(condition.dim());
    let uncond = denoiser.predict(clip, &null, None)?;
    cfg_combine(&cond, &uncond, scale)
}
