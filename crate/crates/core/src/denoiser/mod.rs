//! The noise-prediction contract used by the co-denoising orchestrator, plus
//! the cross-frame attention rule shared by the learned denoiser and the
//! attention-graph analysis.

mod analytic;
mod checkpoint;
mod learned;
mod train;

pub use analytic::{AnalyticGaussianDenoiser, MeanModel};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use learned::{LearnedConfig, LearnedParams, TinyLearnedDenoiser};
pub use train::{
    convergence_epoch, gradient_norm, repeated_conditions, train_one_shot, TrainConfig,
    TrainReport, TrainedModel,
};

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::sequence::Clip;
use crate::windowing::ClipLayout;

/// Predicts the noise in a clip: `eps(v_t^i, t, c^i, e^i)`.
///
/// `clip.time_step` carries `t`; `t = 0` must be accepted because inversion
/// starts from clean data. `identifier = None` is the null identifier.
/// Implementations must be deterministic and shape-preserving.
pub trait Denoiser: Sync {
    fn predict(
        &self,
        clip: &Clip,
        condition: &ConditionEmbedding,
        identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<Array2<f64>>;

    /// Required clip length, if fixed.
    fn window(&self) -> Option<usize> {
        None
    }

    /// Dimension of the clip identifier slot, if the denoiser has one.
    fn identifier_dim(&self) -> Option<usize> {
        None
    }
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn predict(
        &self,
        clip: &Clip,
        condition: &ConditionEmbedding,
        identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<Array2<f64>> {
        (**self).predict(clip, condition, identifier)
    }

    fn window(&self) -> Option<usize> {
        (**self).window()
    }

    fn identifier_dim(&self) -> Option<usize> {
        (**self).identifier_dim()
    }
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn predict(
        &self,
        clip: &Clip,
        condition: &ConditionEmbedding,
        identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<Array2<f64>> {
        (**self).predict(clip, condition, identifier)
    }

    fn window(&self) -> Option<usize> {
        (**self).window()
    }

    fn identifier_dim(&self) -> Option<usize> {
        (**self).identifier_dim()
    }
}

/// Which frames supply keys and values for each query frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Anchor is the middle frame `floor(M/2)`; other frames read their
    /// inward neighbour and the anchor.
    #[default]
    Bidirectional,
    /// Anchor is frame 0; other frames read the previous frame and frame 0.
    SparseCausal,
}

impl AttentionMode {
    pub fn anchor(self, window: usize) -> usize {
        match self {
            AttentionMode::Bidirectional => window / 2,
            AttentionMode::SparseCausal => 0,
        }
    }
}

/// Local frame indices whose features form the key/value sequence of frame
/// `j` in a clip of `window` frames. Duplicates are kept as written, so a
/// frame next to the anchor reads `[anchor, anchor]`.
pub fn kv_indices(mode: AttentionMode, j: usize, window: usize) -> Result<Vec<usize>> {
    if j >= window {
        return Err(Error::InvalidRange(format!(
            "frame {j} outside clip of {window} frames"
        )));
    }
    let anchor = mode.anchor(window);
    Ok(match mode {
        AttentionMode::Bidirectional => {
            if j > anchor {
                vec![j - 1, anchor]
            } else if j < anchor {
                vec![j + 1, anchor]
            } else {
                vec![anchor]
            }
        }
        AttentionMode::SparseCausal => {
            if j == 0 {
                vec![0]
            } else {
                vec![j - 1, 0]
            }
        }
    })
}

/// The key/value rows `z^{i,*}_j` gathered from per-frame features.
pub fn crossframe_kv(
    features: ArrayView2<'_, f64>,
    j: usize,
    mode: AttentionMode,
) -> Result<Array2<f64>> {
    let idx = kv_indices(mode, j, features.nrows())?;
    Ok(features.select(ndarray::Axis(0), &idx))
}

/// Directed information-flow graph over the frames of a long sequence:
/// an edge `s -> j` exists when some clip's frame `j` attends to frame `s`.
/// Frames shared by overlapping clips are one node, since merging makes them
/// one value.
#[derive(Debug, Clone)]
pub struct AttentionGraph {
    successors: Vec<Vec<usize>>,
}

impl AttentionGraph {
    pub fn build(layout: &ClipLayout, mode: AttentionMode) -> Self {
        let n = layout.total_frames();
        let mut successors = vec![Vec::new(); n];
        for clip in 0..layout.clip_count() {
            let start = layout.clip_start(clip);
            for j in 0..layout.window() {
                for s in kv_indices(mode, j, layout.window()).expect("j < window") {
                    let (src, dst) = (start + s, start + j);
                    if src != dst && !successors[src].contains(&dst) {
                        successors[src].push(dst);
                    }
                }
            }
        }
        Self { successors }
    }

    pub fn num_frames(&self) -> usize {
        self.successors.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.successors
            .iter()
            .enumerate()
            .flat_map(|(s, ds)| ds.iter().map(move |&d| (s, d)))
    }

    /// Frames whose features can influence `from`'s downstream frames,
    /// including `from` itself.
    pub fn reachable_from(&self, from: usize) -> Vec<bool> {
        let mut seen = vec![false; self.num_frames()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(s) = queue.pop_front() {
            for &d in &self.successors[s] {
                if !seen[d] {
                    seen[d] = true;
                    queue.push_back(d);
                }
            }
        }
        seen
    }

    pub fn has_path(&self, from: usize, to: usize) -> bool {
        self.reachable_from(from)[to]
    }

    /// Frames `> target` with a path into `target`.
    pub fn later_sources_of(&self, target: usize) -> Vec<usize> {
        (target + 1..self.num_frames())
            .filter(|&s| self.has_path(s, target))
            .collect()
    }

    /// Ordered pairs `(a, b)`, `a != b`, with no path from `a` to `b`.
    pub fn unreachable_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.num_frames();
        let mut out = Vec::new();
        for a in 0..n {
            let seen = self.reachable_from(a);
            out.extend((0..n).filter(|&b| b != a && !seen[b]).map(|b| (a, b)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn bidirectional_kv_examples() {
        let z = Array2::from_shape_fn((5, 2), |(j, k)| (10 * j + k) as f64);
        let at = |j| crossframe_kv(z.view(), j, AttentionMode::Bidirectional).unwrap();
        assert_eq!(at(2), z.select(ndarray::Axis(0), &[2]));
        assert_eq!(at(4), z.select(ndarray::Axis(0), &[3, 2]));
        assert_eq!(at(1), z.select(ndarray::Axis(0), &[2, 2]));
        assert_eq!(at(0), z.select(ndarray::Axis(0), &[1, 2]));
        assert!(crossframe_kv(z.view(), 5, AttentionMode::Bidirectional).is_err());
    }

    #[test]
    fn even_window_anchor_is_floor_half() {
        assert_eq!(AttentionMode::Bidirectional.anchor(16), 8);
        assert_eq!(
            kv_indices(AttentionMode::Bidirectional, 8, 16).unwrap(),
            vec![8]
        );
        assert_eq!(
            kv_indices(AttentionMode::Bidirectional, 9, 16).unwrap(),
            vec![8, 8]
        );
        assert_eq!(
            kv_indices(AttentionMode::Bidirectional, 7, 16).unwrap(),
            vec![8, 8]
        );
    }

    #[test]
    fn sparse_causal_kv() {
        assert_eq!(
            kv_indices(AttentionMode::SparseCausal, 0, 5).unwrap(),
            vec![0]
        );
        assert_eq!(
            kv_indices(AttentionMode::SparseCausal, 3, 5).unwrap(),
            vec![2, 0]
        );
    }

    #[test]
    fn single_clip_anchor_reaches_every_frame() {
        let layout = ClipLayout::new(9, 9, 9).unwrap();
        let g = AttentionGraph::build(&layout, AttentionMode::Bidirectional);
        assert!(g.reachable_from(4).iter().all(|&r| r));
        let causal = AttentionGraph::build(&layout, AttentionMode::SparseCausal);
        assert!(causal.reachable_from(0).iter().all(|&r| r));
        assert!(causal.later_sources_of(0).is_empty());
    }

    #[test]
    fn overlapping_anchors_influence_each_other() {
        let layout = ClipLayout::new(64, 16, 4).unwrap();
        let g = AttentionGraph::build(&layout, AttentionMode::Bidirectional);
        let anchors: Vec<usize> = (0..layout.clip_count()).map(|i| 4 * i + 8).collect();
        for &a in &anchors {
            for &b in &anchors {
                assert!(g.has_path(a, b), "anchor {a} -> {b}");
            }
        }
        assert!(!g.later_sources_of(0).is_empty());
        let causal = AttentionGraph::build(&layout, AttentionMode::SparseCausal);
        assert!(causal.later_sources_of(0).is_empty());
    }
}
