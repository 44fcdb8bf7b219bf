//! Closed-form noise predictor for Gaussian clip data.
//!
//! Each clip is modeled as `x0 = mu(c) + a + b`, where `b` has independent
//! per-element variance and `a` is one draw per feature shared by every frame
//! of the clip. For each feature the clip covariance across frames is
//! therefore `diag(sigma^2) + s * 1 1^T`, and
//!
//! ```text
//! E[eps | x_t] = sqrt(1 - ab) * (ab * Sigma + (1 - ab) I)^-1 (x_t - sqrt(ab) * mu)
//! ```
//!
//! which Sherman-Morrison evaluates per feature in `O(M)`. With `s = 0` it is
//! the element-wise `(x_t - sqrt(ab) mu) sqrt(1 - ab) / ((1 - ab) + ab sigma^2)`.

use ndarray::{Array1, Array2, ArrayView1};

use super::Denoiser;
use crate::conditions::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::sequence::Clip;
use crate::synthdata::render_condition;

/// How the clip mean depends on the condition.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanModel {
    /// Exact-match lookup of registered condition vectors.
    Table(Vec<(Array1<f64>, Array2<f64>)>),
    /// Rendered blob scene for any scene condition vector.
    Scene { frame_shape: [usize; 2] },
}

#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    means: MeanModel,
    /// Per-element variance, `window x features`.
    variance: Array2<f64>,
    /// Variance of the component shared by all frames of a clip.
    shared_variance: f64,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(
        means: MeanModel,
        variance: Array2<f64>,
        shared_variance: f64,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidRange(
                "variance entries must be positive".into(),
            ));
        }
        if !(shared_variance >= 0.0 && shared_variance.is_finite()) {
            return Err(Error::InvalidRange("shared variance must be >= 0".into()));
        }
        match &means {
            MeanModel::Table(entries) => {
                if let Some((_, m)) = entries.iter().find(|(_, m)| m.dim() != variance.dim()) {
                    return Err(Error::shape(variance.shape(), m.shape()));
                }
            }
            MeanModel::Scene { frame_shape } => {
                let d = frame_shape[0] * frame_shape[1];
                if variance.ncols() != d {
                    return Err(Error::Dimension {
                        what: "frame feature",
                        expected: d,
                        found: variance.ncols(),
                    });
                }
            }
        }
        Ok(Self {
            means,
            variance,
            shared_variance,
            schedule,
        })
    }

    /// Scene-conditioned model with the same variance everywhere.
    pub fn scene(
        frame_shape: [usize; 2],
        window: usize,
        variance: f64,
        shared_variance: f64,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        let d = frame_shape[0] * frame_shape[1];
        Self::new(
            MeanModel::Scene { frame_shape },
            Array2::from_elem((window, d), variance),
            shared_variance,
            schedule,
        )
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn variance(&self) -> &Array2<f64> {
        &self.variance
    }

    pub fn shared_variance(&self) -> f64 {
        self.shared_variance
    }

    /// Clip mean `mu(c)`.
    pub fn mean_for(&self, condition: &ConditionEmbedding) -> Result<Array2<f64>> {
        match &self.means {
            MeanModel::Table(entries) => entries
                .iter()
                .find(|(key, _)| *key == condition.vector)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| {
                    Error::Condition(format!(
                        "unknown condition{}",
                        condition
                            .label
                            .as_deref()
                            .map(|l| format!(" `{l}`"))
                            .unwrap_or_default()
                    ))
                }),
            MeanModel::Scene { frame_shape } => {
                render_condition(condition, *frame_shape, self.variance.nrows())
            }
        }
    }

    /// Posterior mean of the injected noise given `x_t`.
    pub fn analytic_predict(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        condition: &ConditionEmbedding,
    ) -> Result<Array2<f64>> {
        if x_t.dim() != self.variance.dim() {
            return Err(Error::shape(self.variance.shape(), x_t.shape()));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let mean = self.mean_for(condition)?;
        let noise_std = (1.0 - ab).sqrt();
        let mut out = Array2::zeros(x_t.dim());
        if noise_std == 0.0 {
            return Ok(out);
        }
        let sa = ab.sqrt();
        let shared = ab * self.shared_variance;
        let (frames, features) = x_t.dim();
        let mut inv_c = vec![0.0; frames];
        let mut resid = vec![0.0; frames];
        for d in 0..features {
            let (mut sum_r, mut sum_inv) = (0.0, 0.0);
            for j in 0..frames {
                let c = ab * self.variance[[j, d]] + (1.0 - ab);
                inv_c[j] = 1.0 / c;
                resid[j] = x_t[[j, d]] - sa * mean[[j, d]];
                sum_r += resid[j] * inv_c[j];
                sum_inv += inv_c[j];
            }
            let correction = shared * sum_r / (1.0 + shared * sum_inv);
            for j in 0..frames {
                out[[j, d]] = noise_std * inv_c[j] * (resid[j] - correction);
            }
        }
        Ok(out)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict(
        &self,
        clip: &Clip,
        condition: &ConditionEmbedding,
        _identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<Array2<f64>> {
        self.analytic_predict(&clip.frames, clip.time_step, condition)
    }

    fn window(&self) -> Option<usize> {
        Some(self.variance.nrows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn table_model(mean: Array2<f64>, var: Array2<f64>, shared: f64) -> AnalyticGaussianDenoiser {
        AnalyticGaussianDenoiser::new(
            MeanModel::Table(vec![(arr1(&[1.0]), mean)]),
            var,
            shared,
            NoiseSchedule::default(),
        )
        .unwrap()
    }

    fn key() -> ConditionEmbedding {
        ConditionEmbedding::new(arr1(&[1.0]))
    }

    #[test]
    fn point_mass_limit_returns_exact_noise() {
        let mean = Array2::from_shape_fn((3, 2), |(j, d)| j as f64 - d as f64);
        let m = table_model(mean.clone(), Array2::from_elem((3, 2), 1e-14), 0.0);
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Array2::from_shape_simple_fn((3, 2), || rng.sample(StandardNormal));
        let t = 420;
        let x = s.forward_diffuse(&mean, t, &eps).unwrap();
        let pred = m.analytic_predict(&x, t, &key()).unwrap();
        for (p, e) in pred.iter().zip(eps.iter()) {
            assert!((p - e).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_input_predicts_zero() {
        let mean = Array2::from_elem((4, 3), 0.7);
        let m = table_model(mean.clone(), Array2::from_elem((4, 3), 0.3), 0.2);
        let ab = m.schedule().alpha_bar(100).unwrap();
        let pred = m
            .analytic_predict(&(mean * ab.sqrt()), 100, &key())
            .unwrap();
        assert!(pred.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unknown_condition_and_shape_errors() {
        let m = table_model(Array2::zeros((2, 2)), Array2::ones((2, 2)), 0.0);
        let other = ConditionEmbedding::labeled(arr1(&[2.0]), "other");
        assert!(matches!(
            m.analytic_predict(&Array2::zeros((2, 2)), 5, &other),
            Err(Error::Condition(_))
        ));
        assert!(m
            .analytic_predict(&Array2::zeros((3, 2)), 5, &key())
            .is_err());
        assert!(AnalyticGaussianDenoiser::new(
            MeanModel::Table(vec![]),
            Array2::zeros((2, 2)),
            0.0,
            NoiseSchedule::default()
        )
        .is_err());
    }

    #[test]
    fn shared_component_matches_dense_solve() {
        let (frames, features) = (5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean = Array2::from_shape_simple_fn((frames, features), || rng.random::<f64>());
        let var = Array2::from_shape_simple_fn((frames, features), || 0.1 + rng.random::<f64>());
        let shared = 0.4;
        let m = table_model(mean.clone(), var.clone(), shared);
        let t = 250;
        let ab = m.schedule().alpha_bar(t).unwrap();
        let x = Array2::from_shape_simple_fn((frames, features), || rng.sample(StandardNormal));
        let pred = m.analytic_predict(&x, t, &key()).unwrap();
        for d in 0..features {
            let cov = DMatrix::from_fn(frames, frames, |a, b| {
                let diag = if a == b {
                    ab * var[[a, d]] + 1.0 - ab
                } else {
                    0.0
                };
                diag + ab * shared
            });
            let r = DVector::from_fn(frames, |j, _| x[[j, d]] - ab.sqrt() * mean[[j, d]]);
            let sol = cov.lu().solve(&r).unwrap() * (1.0 - ab).sqrt();
            for j in 0..frames {
                assert!((sol[j] - pred[[j, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn agrees_with_monte_carlo_posterior() {
        // Sample (x0, eps) jointly, keep draws whose x_t lands in a narrow
        // bin, and compare the empirical mean of eps in that bin.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..3 {
            let mu = rng.random_range(-1.0..1.0);
            let var = rng.random_range(0.05..1.5);
            let t = rng.random_range(50..950);
            let m = table_model(
                Array2::from_elem((1, 1), mu),
                Array2::from_elem((1, 1), var),
                0.0,
            );
            let ab = m.schedule().alpha_bar(t).unwrap();
            let x_query = ab.sqrt() * mu + 0.3;
            let half_width = 0.02;
            let mut kept = Vec::new();
            while kept.len() < 100_000 {
                let x0 = mu + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let eps: f64 = rng.sample(StandardNormal);
                let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
                if (xt - x_query).abs() < half_width {
                    kept.push(eps);
                }
            }
            let n = kept.len() as f64;
            let mean = kept.iter().sum::<f64>() / n;
            let sd = (kept.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let analytic = m
                .analytic_predict(&Array2::from_elem((1, 1), x_query), t, &key())
                .unwrap()[[0, 0]];
            // the bin width biases the estimate by O(half_width^2); far below 1 SE here
            assert!(
                (mean - analytic).abs() < 3.0 * sd / n.sqrt(),
                "mc {mean} vs analytic {analytic}"
            );
        }
    }
}
