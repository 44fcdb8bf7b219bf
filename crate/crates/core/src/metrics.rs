//! Frame-consistency and condition-alignment scores on embedded frames,
//! plus the CSV row format they are reported in.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::sequence::LongSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// The raw flattened frame.
    #[default]
    Flatten,
    /// A fixed Gaussian projection drawn from `seed`.
    RandomProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub seed: u64,
    /// Ignored by [`EmbedderKind::Flatten`].
    pub output_dim: usize,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self::flatten()
    }
}

impl EmbedderSpec {
    pub fn flatten() -> Self {
        Self {
            kind: EmbedderKind::Flatten,
            seed: 0,
            output_dim: 0,
        }
    }

    pub fn random_projection(output_dim: usize, seed: u64) -> Self {
        Self {
            kind: EmbedderKind::RandomProjection,
            seed,
            output_dim,
        }
    }

    pub fn build(&self, input_dim: usize) -> Result<Embedder> {
        let projection = match self.kind {
            EmbedderKind::Flatten => None,
            EmbedderKind::RandomProjection => {
                if self.output_dim == 0 {
                    return Err(Error::Metric("projection output_dim must be >= 1".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let scale = 1.0 / (self.output_dim as f64).sqrt();
                Some(Array2::from_shape_simple_fn(
                    (self.output_dim, input_dim),
                    || scale * rng.sample::<f64, _>(StandardNormal),
                ))
            }
        };
        Ok(Embedder {
            input_dim,
            projection,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Embedder {
    input_dim: usize,
    projection: Option<Array2<f64>>,
}

impl Embedder {
    pub fn embed(&self, frame: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if frame.len() != self.input_dim {
            return Err(Error::Dimension {
                what: "embedder input",
                expected: self.input_dim,
                found: frame.len(),
            });
        }
        Ok(match &self.projection {
            None => frame.to_owned(),
            Some(p) => p.dot(&frame),
        })
    }

    /// One embedding per row.
    pub fn embed_rows(&self, frames: &Array2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.input_dim {
            return Err(Error::Dimension {
                what: "embedder input",
                expected: self.input_dim,
                found: frames.ncols(),
            });
        }
        Ok(match &self.projection {
            None => frames.clone(),
            Some(p) => frames.dot(&p.t()),
        })
    }
}

fn unit_rows(emb: Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let mut emb = emb;
    for (j, mut row) in emb.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Metric(format!(
                "{what} {j} has zero or non-finite norm"
            )));
        }
        row /= norm;
    }
    Ok(emb)
}

/// Mean cosine similarity over all unordered frame pairs.
pub fn frame_consistency(v: &LongSequence, spec: &EmbedderSpec) -> Result<f64> {
    let n = v.num_frames();
    if n < 2 {
        return Err(Error::Metric(
            "frame consistency needs at least 2 frames".into(),
        ));
    }
    let unit = unit_rows(spec.build(v.frame_len())?.embed_rows(v.frames())?, "frame")?;
    let row_sums: Vec<f64> = (0..n - 1)
        .into_par_iter()
        .map(|a| (a + 1..n).map(|b| unit.row(a).dot(&unit.row(b))).sum())
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(row_sums.iter().sum::<f64>() / pairs)
}

/// Single-pass mean and population variance.
pub fn mean_and_variance(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Metric("no values".into()));
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((mean, m2 / values.len() as f64))
}

/// Per-frame cosine between each frame and its target, both embedded.
/// Targets live in frame space.
pub fn alignment_scores(
    v: &LongSequence,
    targets: &[ConditionEmbedding],
    spec: &EmbedderSpec,
) -> Result<Vec<f64>> {
    if targets.len() != v.num_frames() {
        return Err(Error::Dimension {
            what: "per-frame target count",
            expected: v.num_frames(),
            found: targets.len(),
        });
    }
    let embedder = spec.build(v.frame_len())?;
    let frames = unit_rows(embedder.embed_rows(v.frames())?, "frame")?;
    let mut target_rows = Array2::zeros((targets.len(), v.frame_len()));
    for (j, t) in targets.iter().enumerate() {
        if t.dim() != v.frame_len() {
            return Err(Error::Dimension {
                what: "alignment target",
                expected: v.frame_len(),
                found: t.dim(),
            });
        }
        target_rows.row_mut(j).assign(&t.vector);
    }
    let targets = unit_rows(embedder.embed_rows(&target_rows)?, "target")?;
    Ok(frames
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(a, b)| a.dot(&b))
        .collect())
}

/// `(mean, population variance)` of the per-frame alignment scores.
pub fn textual_alignment(
    v: &LongSequence,
    targets: &[ConditionEmbedding],
    spec: &EmbedderSpec,
) -> Result<(f64, f64)> {
    mean_and_variance(&alignment_scores(v, targets, spec)?)
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub method: String,
    pub frame_consistency: f64,
    pub align_mean: f64,
    /// Population variance times 100.
    pub align_var_x100: f64,
    pub seed: u64,
}

impl MetricRow {
    pub fn new(
        run_id: impl Into<String>,
        method: impl Into<String>,
        frame_consistency: f64,
        alignment: (f64, f64),
        seed: u64,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            method: method.into(),
            frame_consistency,
            align_mean: alignment.0,
            align_var_x100: 100.0 * alignment.1,
            seed,
        }
    }
}

pub fn write_rows<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Metric(format!("csv write: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = [
        "run_id",
        "method",
        "frame_consistency",
        "align_mean",
        "align_var_x100",
        "seed",
    ];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<MetricRow>() {
        let row = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}
