//! One-shot tuning of the learned denoiser on a single long sequence.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::learned::{LearnedConfig, LearnedParams, TinyLearnedDenoiser};
use super::AttentionMode;
use crate::conditions::{ClipIdentifiers, ConditionEmbedding};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::sequence::LongSequence;
use crate::windowing::{split, ClipLayout};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Per-sample learning rate; the step size is `base_lr * batch`.
    pub base_lr: f64,
    pub batch: usize,
    /// Null-condition rate used when no identifiers are trained; with
    /// identifiers their own drop probability applies.
    pub drop_probability: f64,
    pub hidden: usize,
    pub time_features: usize,
    pub attention: AttentionMode,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    /// Fixed noise levels per clip in the probe set evaluated after every
    /// epoch; 0 disables probing.
    pub probe_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 3e-5,
            batch: 5,
            drop_probability: ClipIdentifiers::DEFAULT_DROP_PROBABILITY,
            hidden: 32,
            time_features: 16,
            attention: AttentionMode::Bidirectional,
            schedule: NoiseSchedule::default(),
            seed: 0,
            probe_steps: 8,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.base_lr * self.batch as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-clip training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean per-clip loss on the fixed probe set after each epoch.
    pub probe_losses: Vec<f64>,
    pub updates: usize,
    /// Judged on the probe losses when present, else the epoch losses.
    pub convergence_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: TinyLearnedDenoiser,
    pub identifiers: Option<ClipIdentifiers>,
    pub report: TrainReport,
}

/// First epoch (1-based) from which the 10-epoch moving average of the loss
/// stays within 5% of its final value. `None` with fewer than 10 epochs.
pub fn convergence_epoch(losses: &[f64]) -> Option<usize> {
    const WINDOW: usize = 10;
    const TOLERANCE: f64 = 0.05;
    if losses.len() < WINDOW {
        return None;
    }
    let averages: Vec<f64> = losses
        .windows(WINDOW)
        .map(|w| w.iter().sum::<f64>() / WINDOW as f64)
        .collect();
    let last = *averages.last()?;
    let settled = averages
        .iter()
        .rposition(|a| (a - last).abs() > TOLERANCE * last.abs())
        .map_or(0, |k| k + 1);
    Some(settled + WINDOW)
}

fn rms_or_one(video: &LongSequence) -> f64 {
    let rms = video.frames().mapv(|v| v * v).mean().unwrap_or(0.0).sqrt();
    if rms > 0.0 && rms.is_finite() {
        rms
    } else {
        1.0
    }
}

pub fn train_one_shot(
    video: &LongSequence,
    layout: &ClipLayout,
    conditions: &[ConditionEmbedding],
    identifiers: Option<ClipIdentifiers>,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    if video.num_frames() != layout.total_frames() {
        return Err(Error::Layout(format!(
            "video has {} frames, layout expects {}",
            video.num_frames(),
            layout.total_frames()
        )));
    }
    let n = layout.clip_count();
    if conditions.len() != n {
        return Err(Error::Dimension {
            what: "condition count",
            expected: n,
            found: conditions.len(),
        });
    }
    let cond_dim = conditions[0].dim();
    if let Some(c) = conditions.iter().find(|c| c.dim() != cond_dim) {
        return Err(Error::Dimension {
            what: "condition",
            expected: cond_dim,
            found: c.dim(),
        });
    }
    if let Some(ids) = &identifiers {
        if ids.clip_count() != n {
            return Err(Error::Dimension {
                what: "identifier count",
                expected: n,
                found: ids.clip_count(),
            });
        }
        if ids.dim() != cond_dim {
            return Err(Error::Dimension {
                what: "clip identifier",
                expected: cond_dim,
                found: ids.dim(),
            });
        }
    }
    if config.batch == 0 {
        return Err(Error::InvalidRange("batch must be >= 1".into()));
    }
    if !(config.base_lr >= 0.0 && config.base_lr.is_finite()) {
        return Err(Error::InvalidRange(
            "learning rate must be finite and >= 0".into(),
        ));
    }

    let model_config = LearnedConfig {
        window: layout.window(),
        frame_len: video.frame_len(),
        cond_dim,
        hidden: config.hidden,
        time_features: config.time_features,
        attention: config.attention,
        data_scale: rms_or_one(video),
    };
    let mut model = TinyLearnedDenoiser::new(model_config, config.schedule.clone(), config.seed)?;
    let mut identifiers = identifiers;
    let drop_probability = identifiers
        .as_ref()
        .map_or(config.drop_probability, |i| i.drop_probability());
    if !(0.0..=1.0).contains(&drop_probability) {
        return Err(Error::InvalidRange(
            "drop probability outside [0, 1]".into(),
        ));
    }

    let clips = split(video, layout, 0)?;
    let null = ConditionEmbedding::null(cond_dim);
    let lr = config.learning_rate();
    let steps = config.schedule.num_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut probe_losses = Vec::new();
    let mut updates = 0;

    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e0b_e5e7);
    let mut probes = Vec::with_capacity(n * config.probe_steps);
    for (i, clip) in clips.iter().enumerate() {
        for k in 0..config.probe_steps {
            let t = (((k as f64 + 0.5) / config.probe_steps as f64 * steps as f64).round()
                as usize)
                .clamp(1, steps);
            let eps = Array2::from_shape_simple_fn(clip.frames.dim(), || {
                probe_rng.sample::<f64, _>(StandardNormal)
            });
            let x_t = config.schedule.forward_diffuse(&clip.frames, t, &eps)?;
            probes.push((i, t, x_t, eps));
        }
    }

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let mut grad = LearnedParams::zeros(model.config());
            let mut id_grad = Array2::<f64>::zeros((n, cond_dim));
            for &i in chunk {
                let t = rng.random_range(1..=steps);
                let eps = Array2::from_shape_simple_fn(clips[i].frames.dim(), || {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let dropped = rng.random::<f64>() < drop_probability;
                let x_t = config.schedule.forward_diffuse(&clips[i].frames, t, &eps)?;
                let (condition, ident) = if dropped {
                    (&null, None)
                } else {
                    (&conditions[i], identifiers.as_ref().map(|ids| ids.get(i)))
                };
                let (loss, g, de) = model.loss_and_grad(
                    x_t.view(),
                    t,
                    condition.vector.view(),
                    ident,
                    eps.view(),
                )?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {loss} at epoch {} batch {b} clip {i}",
                        epoch + 1
                    )));
                }
                epoch_loss += loss;
                grad.add_scaled(&g, 1.0 / chunk.len() as f64);
                if ident.is_some() {
                    id_grad.row_mut(i).scaled_add(1.0 / chunk.len() as f64, &de);
                }
            }
            model.params_mut().add_scaled(&grad, -lr);
            if let Some(ids) = identifiers.as_mut() {
                ids.vectors_mut().scaled_add(-lr, &id_grad);
            }
            if !model.params().all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters diverged at epoch {} batch {b}",
                    epoch + 1
                )));
            }
            updates += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
        if !probes.is_empty() {
            let mut total = 0.0;
            for (i, t, x_t, eps) in &probes {
                let ident = identifiers.as_ref().map(|ids| ids.get(*i));
                total += model.loss(
                    x_t.view(),
                    *t,
                    conditions[*i].vector.view(),
                    ident,
                    eps.view(),
                )?;
            }
            probe_losses.push(total / probes.len() as f64);
        }
    }

    let report = TrainReport {
        convergence_epoch: convergence_epoch(if probe_losses.is_empty() {
            &epoch_losses
        } else {
            &probe_losses
        }),
        epoch_losses,
        probe_losses,
        updates,
    };
    Ok(TrainedModel {
        model,
        identifiers,
        report,
    })
}

/// Per-clip conditions all equal to `condition`.
pub fn repeated_conditions(
    condition: &ConditionEmbedding,
    clip_count: usize,
) -> Vec<ConditionEmbedding> {
    vec![condition.clone(); clip_count]
}

/// Euclidean norm of a parameter gradient, for diagnostics.
pub fn gradient_norm(grad: &LearnedParams) -> f64 {
    grad.slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_scene, spec_to_condition, Motion, SceneSpec};

    fn toy() -> (LongSequence, ClipLayout, Vec<ConditionEmbedding>) {
        let spec =
            SceneSpec::new(Motion::Linear, 0.5, [2.0, 4.0], 1.5, 1.0).with_frame_shape([6, 6]);
        let video = render_scene(&spec, 20, 0).unwrap();
        let layout = ClipLayout::new(20, 8, 4).unwrap();
        let conds = repeated_conditions(&spec_to_condition(&spec), layout.clip_count());
        (video, layout, conds)
    }

    fn small_config(epochs: usize, base_lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            base_lr,
            hidden: 8,
            time_features: 4,
            schedule: NoiseSchedule::linear(100, 1e-4, 0.05).unwrap(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (video, layout, conds) = toy();
        let ids = ClipIdentifiers::random(layout.clip_count(), conds[0].dim(), 0.3, 1);
        let cfg = small_config(4, 0.0);
        let trained = train_one_shot(&video, &layout, &conds, Some(ids.clone()), &cfg).unwrap();
        let fresh =
            TinyLearnedDenoiser::new(*trained.model.config(), cfg.schedule.clone(), cfg.seed)
                .unwrap();
        assert_eq!(trained.model.params(), fresh.params());
        assert_eq!(trained.identifiers.unwrap(), ids);
        assert_eq!(trained.report.epoch_losses.len(), 4);
    }

    #[test]
    fn always_dropped_identifiers_get_no_gradient() {
        let (video, layout, conds) = toy();
        let ids = ClipIdentifiers::random(layout.clip_count(), conds[0].dim(), 0.3, 1)
            .with_drop_probability(1.0)
            .unwrap();
        let trained = train_one_shot(
            &video,
            &layout,
            &conds,
            Some(ids.clone()),
            &small_config(3, 1e-3),
        )
        .unwrap();
        assert_eq!(trained.identifiers.unwrap(), ids);
        assert!(trained.report.updates > 0);
    }

    #[test]
    fn loss_goes_down() {
        let (video, layout, conds) = toy();
        let trained =
            train_one_shot(&video, &layout, &conds, None, &small_config(60, 2e-4)).unwrap();
        let l = &trained.report.epoch_losses;
        let head: f64 = l[..10].iter().sum();
        let tail: f64 = l[l.len() - 10..].iter().sum();
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn divergence_is_reported() {
        let (video, layout, conds) = toy();
        let err =
            train_one_shot(&video, &layout, &conds, None, &small_config(50, 1e6)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (video, layout, conds) = toy();
        let cfg = small_config(1, 1e-4);
        assert!(train_one_shot(&video, &layout, &conds[1..], None, &cfg).is_err());
        let ids = ClipIdentifiers::random(layout.clip_count() + 1, conds[0].dim(), 0.3, 1);
        assert!(train_one_shot(&video, &layout, &conds, Some(ids), &cfg).is_err());
        let short = video.truncate(12);
        assert!(train_one_shot(&short, &layout, &conds, None, &cfg).is_err());
    }

    #[test]
    fn convergence_epoch_examples() {
        assert_eq!(convergence_epoch(&[1.0; 5]), None);
        assert_eq!(convergence_epoch(&[2.0; 30]), Some(10));
        let mut losses = vec![10.0; 20];
        losses.extend(vec![1.0; 30]);
        // the last average with a 10.0 in it ends at epoch 29
        assert_eq!(convergence_epoch(&losses), Some(30));
    }
}
