//! Noise schedules and the single-tensor diffusion primitives built on them.
//!
//! Step indices follow the DDPM convention: `t = 1..=T` index the tables, and
//! `t = 0` denotes clean data with `alpha_bar(0) = 1`.

use std::fmt::Write as _;

use ndarray::{Array, ArrayBase, Data, Dimension, Zip};

use crate::conditions::ConditionEmbedding;
use crate::error::{Error, Result};

/// Beta/alpha tables of a discrete diffusion process, all in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidRange("num_steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| beta_start + span * (i as f64) / last)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds the derived tables from an explicit beta sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("empty beta table".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_betas = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i]
                }
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_betas,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_betas(&self) -> &[f64] {
        &self.posterior_betas
    }

    /// Cumulative product at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.num_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(self.out_of_range(t, 0)),
        }
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    fn out_of_range(&self, t: usize, min: usize) -> Error {
        Error::StepOutOfRange {
            t,
            min,
            max: self.num_steps(),
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            Err(self.out_of_range(t, 1))
        } else {
            Ok(())
        }
    }

    /// Sampling sub-sequence: `steps` timesteps spaced uniformly over
    /// `[1, T]` with both endpoints included, in ascending order.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidRange(format!(
                "sampler steps must be in [1, {total}], got {steps}"
            )));
        }
        if steps == 1 {
            return Ok(vec![total]);
        }
        let spacing = (total - 1) as f64 / (steps - 1) as f64;
        Ok((0..steps)
            .map(|i| 1 + (i as f64 * spacing).round() as usize)
            .collect())
    }

    /// Descending `(t, t_prev)` rungs of a sampling ladder ending at `t = 0`.
    pub fn sampling_rungs(&self, steps: usize) -> Result<Vec<(usize, usize)>> {
        let ts = self.ddim_timesteps(steps)?;
        let mut rungs = Vec::with_capacity(ts.len());
        for k in (0..ts.len()).rev() {
            let prev = if k == 0 { 0 } else { ts[k - 1] };
            rungs.push((ts[k], prev));
        }
        Ok(rungs)
    }

    /// Ascending `(t, t_next)` rungs of an inversion ladder starting at `t = 0`.
    pub fn inversion_rungs(&self, steps: usize) -> Result<Vec<(usize, usize)>> {
        let mut rungs: Vec<_> = self
            .sampling_rungs(steps)?
            .into_iter()
            .map(|(t, prev)| (prev, t))
            .collect();
        rungs.reverse();
        Ok(rungs)
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_diffuse<S1, S2, D>(
        &self,
        x0: &ArrayBase<S1, D>,
        t: usize,
        eps: &ArrayBase<S2, D>,
    ) -> Result<Array<f64, D>>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        same_shape(x0, eps)?;
        self.check_step(t)?;
        let ab = self.alpha_bars[t - 1];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
    }

    /// DDPM posterior mean expressed through the injected noise.
    pub fn ddpm_posterior_mean<S1, S2, D>(
        &self,
        x_t: &ArrayBase<S1, D>,
        eps: &ArrayBase<S2, D>,
        t: usize,
    ) -> Result<Array<f64, D>>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        same_shape(x_t, eps)?;
        self.check_step(t)?;
        let alpha = self.alphas[t - 1];
        let ab = self.alpha_bars[t - 1];
        let scale = 1.0 / alpha.sqrt();
        let coef = (1.0 - alpha) / ((1.0 - ab).sqrt() * alpha.sqrt());
        Ok(Zip::from(x_t)
            .and(eps)
            .map_collect(|&x, &e| scale * x - coef * e))
    }

    /// Deterministic DDIM update from `t` down to `t_prev` (`t_prev = 0` lands on data).
    pub fn ddim_step<S1, S2, D>(
        &self,
        x_t: &ArrayBase<S1, D>,
        eps_hat: &ArrayBase<S2, D>,
        t: usize,
        t_prev: usize,
    ) -> Result<Array<f64, D>>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        same_shape(x_t, eps_hat)?;
        if t_prev >= t {
            return Err(Error::StepOrder {
                from: t,
                to: t_prev,
            });
        }
        self.check_step(t)?;
        let ab_t = self.alpha_bars[t - 1];
        let ab_prev = self.alpha_bar(t_prev)?;
        let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let (sa_p, sb_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Ok(Zip::from(x_t).and(eps_hat).map_collect(|&x, &e| {
            let x0 = (x - sb_t * e) / sa_t;
            sa_p * x0 + sb_p * e
        }))
    }

    /// DDIM inversion update from `t` up to `t_next`, using cumulative alphas.
    pub fn ddim_invert_step<S1, S2, D>(
        &self,
        x_t: &ArrayBase<S1, D>,
        eps_hat: &ArrayBase<S2, D>,
        t: usize,
        t_next: usize,
    ) -> Result<Array<f64, D>>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        same_shape(x_t, eps_hat)?;
        if t_next <= t {
            return Err(Error::StepOrder {
                from: t,
                to: t_next,
            });
        }
        self.check_step(t_next)?;
        let ab_t = self.alpha_bar(t)?;
        let ab_n = self.alpha_bars[t_next - 1];
        let sa_n = ab_n.sqrt();
        let inv_sa_t = 1.0 / ab_t.sqrt();
        let delta = ((1.0 - ab_n) / ab_n).sqrt() - ((1.0 - ab_t) / ab_t).sqrt();
        Ok(Zip::from(x_t)
            .and(eps_hat)
            .map_collect(|&x, &e| sa_n * (x * inv_sa_t + delta * e)))
    }

    /// Flat key-value text: one `key=v1,v2,...` line per table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "num_steps={}", self.num_steps());
        for (key, values) in [
            ("betas", &self.betas),
            ("alphas", &self.alphas),
            ("alpha_bars", &self.alpha_bars),
            ("posterior_betas", &self.posterior_betas),
        ] {
            let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{key}={}", joined.join(","));
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output. Derived tables are rebuilt
    /// from the betas and must agree with any that are present.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut num_steps = None;
        let mut betas = None;
        let mut derived = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: idx + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key=value".into()))?;
            match key.trim() {
                "num_steps" => {
                    num_steps = Some(
                        value
                            .trim()
                            .parse::<usize>()
                            .map_err(|e| parse_err(e.to_string()))?,
                    )
                }
                k @ ("betas" | "alphas" | "alpha_bars" | "posterior_betas") => {
                    let values = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| parse_err(e.to_string()))?;
                    if k == "betas" {
                        betas = Some(values);
                    } else {
                        derived.push((idx + 1, k.to_string(), values));
                    }
                }
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        let betas = betas.ok_or(Error::Parse {
            line: 0,
            message: "missing betas".into(),
        })?;
        if let Some(n) = num_steps {
            if n != betas.len() {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("num_steps {n} but {} betas", betas.len()),
                });
            }
        }
        let sched = Self::from_betas(betas)?;
        for (line, key, values) in derived {
            let expected = match key.as_str() {
                "alphas" => &sched.alphas,
                "alpha_bars" => &sched.alpha_bars,
                _ => &sched.posterior_betas,
            };
            if values != *expected {
                return Err(Error::Parse {
                    line,
                    message: format!("{key} inconsistent with betas"),
                });
            }
        }
        Ok(sched)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

fn same_shape<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Classifier-free guidance settings: scale `w >= 0` and the null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    scale: f64,
    null_condition: ConditionEmbedding,
}

impl GuidanceConfig {
    pub fn new(scale: f64, null_condition: ConditionEmbedding) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "guidance scale must be finite and >= 0, got {scale}"
            )));
        }
        Ok(Self {
            scale,
            null_condition,
        })
    }

    /// Guidance disabled, with the all-zero null condition of dimension `dim`.
    pub fn unguided(dim: usize) -> Self {
        Self {
            scale: 0.0,
            null_condition: ConditionEmbedding::null(dim),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn null_condition(&self) -> &ConditionEmbedding {
        &self.null_condition
    }
}

/// `(1 + w) * eps_cond - w * eps_uncond`.
pub fn cfg_combine<S1, S2, D>(
    eps_cond: &ArrayBase<S1, D>,
    eps_uncond: &ArrayBase<S2, D>,
    scale: f64,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    same_shape(eps_cond, eps_uncond)?;
    let hi = 1.0 + scale;
    Ok(Zip::from(eps_cond)
        .and(eps_uncond)
        .map_collect(|&c, &u| hi * c - scale * u))
}
