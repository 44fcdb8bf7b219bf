//! A tiny trainable clip denoiser with cross-frame attention.
//!
//! Per clip of `M` frames (each a flattened frame of `D` features):
//!
//! ```text
//! h0_j = tanh(W_in c_in x_j + b_in + W_time tau(t) + pos_j)
//! h1_j = h0_j + Attn(W_Q h0_j, W_K h0[kv(j)], W_V h0[kv(j)])      cross-frame
//! h2_j = h1_j + Attn(W_Qc h1_j, W_Kc [c; e], W_Vc [c; e])          condition
//! h3_j = tanh(W_mix h2_j + b_mix)
//! y_j  = c_out (W_out h3_j + b_out) + c_skip x_j
//! ```
//!
//! With data scale `s` and `d = abar s^2 + 1 - abar`, the fixed
//! coefficients are `c_in = 1 / sqrt(d)`, `c_skip = sqrt(1 - abar) / d` and
//! `c_out = s sqrt(abar / d)`. `c_skip x` is the best linear noise guess for
//! data of second moment `s^2`, so the network only learns a residual whose
//! target has unit scale at every step.
//!
//! `kv(j)` follows [`kv_indices`](super::kv_indices). The condition `c` and
//! identifier `e` form a two-token sequence; the null condition and a missing
//! identifier are zero tokens. The output head (`W_out`, `b_out`) starts at
//! zero. Gradients are written out by hand.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{kv_indices, AttentionMode, Denoiser};
use crate::conditions::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::sequence::Clip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnedConfig {
    /// Frames per clip, `M`.
    pub window: usize,
    /// Features per frame, `D`.
    pub frame_len: usize,
    /// Condition dimension; the identifier has the same dimension.
    pub cond_dim: usize,
    pub hidden: usize,
    /// Length of the time embedding: `sqrt(abar)`, `sqrt(1 - abar)` and
    /// sinusoid pairs.
    pub time_features: usize,
    pub attention: AttentionMode,
    /// Root mean square of clean frame values.
    pub data_scale: f64,
}

impl LearnedConfig {
    pub const MAX_HIDDEN: usize = 64;

    pub fn new(window: usize, frame_len: usize, cond_dim: usize) -> Self {
        Self {
            window,
            frame_len,
            cond_dim,
            hidden: 32,
            time_features: 16,
            attention: AttentionMode::Bidirectional,
            data_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidRange(m.to_string()));
        if self.window == 0 || self.frame_len == 0 || self.cond_dim == 0 {
            return bad("window, frame_len and cond_dim must be >= 1");
        }
        if self.hidden == 0 || self.hidden > Self::MAX_HIDDEN {
            return bad("hidden width must be in [1, 64]");
        }
        if self.time_features < 2 || self.time_features % 2 != 0 {
            return bad("time_features must be even and >= 2");
        }
        if !(self.data_scale.is_finite() && self.data_scale > 0.0) {
            return bad("data_scale must be positive and finite");
        }
        Ok(())
    }
}

/// Parameters in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedParams {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_time: Array2<f64>,
    pub pos: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_qc: Array2<f64>,
    pub w_kc: Array2<f64>,
    pub w_vc: Array2<f64>,
    pub w_mix: Array2<f64>,
    pub b_mix: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl LearnedParams {
    pub fn zeros(cfg: &LearnedConfig) -> Self {
        let (h, d, m, f, c) = (
            cfg.hidden,
            cfg.frame_len,
            cfg.window,
            cfg.time_features,
            cfg.cond_dim,
        );
        Self {
            w_in: Array2::zeros((h, d)),
            b_in: Array1::zeros(h),
            w_time: Array2::zeros((h, f)),
            pos: Array2::zeros((m, h)),
            w_q: Array2::zeros((h, h)),
            w_k: Array2::zeros((h, h)),
            w_v: Array2::zeros((h, h)),
            w_qc: Array2::zeros((h, h)),
            w_kc: Array2::zeros((h, c)),
            w_vc: Array2::zeros((h, c)),
            w_mix: Array2::zeros((h, h)),
            b_mix: Array1::zeros(h),
            w_out: Array2::zeros((d, h)),
            b_out: Array1::zeros(d),
        }
    }

    /// Scaled-normal initialization with a zero output head.
    pub fn init(cfg: &LearnedConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        let mut fill = |a: &mut Array2<f64>, scale: f64| {
            a.mapv_inplace(|_| scale * rng.sample::<f64, _>(StandardNormal));
        };
        let h = cfg.hidden as f64;
        fill(&mut p.w_in, 1.0 / (cfg.frame_len as f64).sqrt());
        fill(&mut p.w_time, 1.0 / (cfg.time_features as f64).sqrt());
        fill(&mut p.pos, 0.5);
        for w in [
            &mut p.w_q,
            &mut p.w_k,
            &mut p.w_v,
            &mut p.w_qc,
            &mut p.w_mix,
        ] {
            fill(w, 1.0 / h.sqrt());
        }
        fill(&mut p.w_kc, 1.0 / (cfg.cond_dim as f64).sqrt());
        fill(&mut p.w_vc, 1.0 / (cfg.cond_dim as f64).sqrt());
        p
    }

    pub fn slices(&self) -> [&[f64]; 14] {
        fn sl<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("parameters are contiguous")
        }
        [
            sl(&self.w_in),
            sl(&self.b_in),
            sl(&self.w_time),
            sl(&self.pos),
            sl(&self.w_q),
            sl(&self.w_k),
            sl(&self.w_v),
            sl(&self.w_qc),
            sl(&self.w_kc),
            sl(&self.w_vc),
            sl(&self.w_mix),
            sl(&self.b_mix),
            sl(&self.w_out),
            sl(&self.b_out),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 14] {
        fn sl<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("parameters are contiguous")
        }
        [
            sl(&mut self.w_in),
            sl(&mut self.b_in),
            sl(&mut self.w_time),
            sl(&mut self.pos),
            sl(&mut self.w_q),
            sl(&mut self.w_k),
            sl(&mut self.w_v),
            sl(&mut self.w_qc),
            sl(&mut self.w_kc),
            sl(&mut self.w_vc),
            sl(&mut self.w_mix),
            sl(&mut self.b_mix),
            sl(&mut self.w_out),
            sl(&mut self.b_out),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Entry `index` of the concatenation of [`slices`](Self::slices).
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &LearnedParams, factor: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }

    fn into_standard_layout(self) -> Self {
        fn std2(a: Array2<f64>) -> Array2<f64> {
            if a.is_standard_layout() {
                a
            } else {
                a.as_standard_layout().into_owned()
            }
        }
        Self {
            w_in: std2(self.w_in),
            w_time: std2(self.w_time),
            pos: std2(self.pos),
            w_q: std2(self.w_q),
            w_k: std2(self.w_k),
            w_v: std2(self.w_v),
            w_qc: std2(self.w_qc),
            w_kc: std2(self.w_kc),
            w_vc: std2(self.w_vc),
            w_mix: std2(self.w_mix),
            w_out: std2(self.w_out),
            ..self
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Cache {
    x_in: Array2<f64>,
    tau: Array1<f64>,
    c_out: f64,
    h0: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<(Vec<usize>, Vec<f64>)>,
    h1: Array2<f64>,
    tokens: Array2<f64>,
    qc: Array2<f64>,
    kc: Array2<f64>,
    vc: Array2<f64>,
    bm: Array2<f64>,
    h2: Array2<f64>,
    h3: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TinyLearnedDenoiser {
    config: LearnedConfig,
    schedule: NoiseSchedule,
    params: LearnedParams,
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl TinyLearnedDenoiser {
    pub fn new(config: LearnedConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = LearnedParams::init(&config, seed);
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    pub fn from_parts(
        config: LearnedConfig,
        schedule: NoiseSchedule,
        params: LearnedParams,
    ) -> Result<Self> {
        config.validate()?;
        let expected = LearnedParams::zeros(&config);
        for (a, b) in params.slices().iter().zip(expected.slices()) {
            if a.len() != b.len() {
                return Err(Error::Checkpoint(
                    "parameter shapes do not match config".into(),
                ));
            }
        }
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    pub fn config(&self) -> &LearnedConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &LearnedParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LearnedParams {
        &mut self.params
    }

    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        self.config.attention = mode;
        self
    }

    pub fn time_embedding(&self, t: usize) -> Result<Array1<f64>> {
        let ab = self.schedule.alpha_bar(t)?;
        let f = self.config.time_features;
        let pairs = (f - 2) / 2;
        let mut tau = Array1::zeros(f);
        tau[0] = ab.sqrt();
        tau[1] = (1.0 - ab).sqrt();
        for k in 0..pairs {
            let freq = (-(10_000f64.ln()) * k as f64 / pairs as f64).exp();
            tau[2 + 2 * k] = (t as f64 * freq).sin();
            tau[3 + 2 * k] = (t as f64 * freq).cos();
        }
        Ok(tau)
    }

    fn check_inputs(
        &self,
        x: ArrayView2<'_, f64>,
        condition: ArrayView1<'_, f64>,
        identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<()> {
        let cfg = &self.config;
        if x.dim() != (cfg.window, cfg.frame_len) {
            return Err(Error::shape(&[cfg.window, cfg.frame_len], x.shape()));
        }
        if condition.len() != cfg.cond_dim {
            return Err(Error::Dimension {
                what: "condition",
                expected: cfg.cond_dim,
                found: condition.len(),
            });
        }
        if let Some(e) = identifier {
            if e.len() != cfg.cond_dim {
                return Err(Error::Dimension {
                    what: "clip identifier",
                    expected: cfg.cond_dim,
                    found: e.len(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        t: usize,
        condition: ArrayView1<'_, f64>,
        identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<(Array2<f64>, Cache)> {
        self.check_inputs(x, condition, identifier)?;
        let p = &self.params;
        let cfg = &self.config;
        let scale = 1.0 / (cfg.hidden as f64).sqrt();
        let tau = self.time_embedding(t)?;
        let ab = self.schedule.alpha_bar(t)?;
        let s2 = cfg.data_scale * cfg.data_scale;
        let d = ab * s2 + 1.0 - ab;
        let c_in = 1.0 / d.sqrt();
        let c_out = cfg.data_scale * (ab / d).sqrt();
        let skip = (1.0 - ab).sqrt() / d;
        let x_in = x.mapv(|v| v * c_in);

        let bias = &p.b_in + &p.w_time.dot(&tau);
        let mut h0 = x_in.dot(&p.w_in.t()) + &p.pos;
        h0 += &bias;
        h0.mapv_inplace(f64::tanh);

        let q = h0.dot(&p.w_q.t());
        let k = h0.dot(&p.w_k.t());
        let v = h0.dot(&p.w_v.t());
        let mut h1 = h0.clone();
        let mut attn = Vec::with_capacity(cfg.window);
        for j in 0..cfg.window {
            let idx = kv_indices(cfg.attention, j, cfg.window)?;
            let mut a: Vec<f64> = idx
                .iter()
                .map(|&s| q.row(j).dot(&k.row(s)) * scale)
                .collect();
            softmax_in_place(&mut a);
            let mut row = h1.row_mut(j);
            for (&s, &w) in idx.iter().zip(&a) {
                row.scaled_add(w, &v.row(s));
            }
            attn.push((idx, a));
        }

        let mut tokens = Array2::zeros((2, cfg.cond_dim));
        tokens.row_mut(0).assign(&condition);
        if let Some(e) = identifier {
            tokens.row_mut(1).assign(&e);
        }
        let qc = h1.dot(&p.w_qc.t());
        let kc = tokens.dot(&p.w_kc.t());
        let vc = tokens.dot(&p.w_vc.t());
        let mut bm = qc.dot(&kc.t()) * scale;
        for mut row in bm.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        let h2 = &h1 + &bm.dot(&vc);
        let mut h3 = h2.dot(&p.w_mix.t());
        h3 += &p.b_mix;
        h3.mapv_inplace(f64::tanh);

        let mut y = h3.dot(&p.w_out.t());
        y += &p.b_out;
        y *= c_out;
        y.scaled_add(skip, &x);

        let cache = Cache {
            x_in,
            tau,
            c_out,
            h0,
            q,
            k,
            v,
            attn,
            h1,
            tokens,
            qc,
            kc,
            vc,
            bm,
            h2,
            h3,
        };
        Ok((y, cache))
    }

    /// Parameter gradients and identifier gradient for upstream gradient `dy`.
    pub(crate) fn backward(&self, cache: &Cache, dy: &Array2<f64>) -> (LearnedParams, Array1<f64>) {
        let p = &self.params;
        let cfg = &self.config;
        let scale = 1.0 / (cfg.hidden as f64).sqrt();
        let mut g = LearnedParams::zeros(cfg);

        let dy = dy * cache.c_out;
        g.w_out = dy.t().dot(&cache.h3);
        g.b_out = dy.sum_axis(Axis(0));

        let dh3 = dy.dot(&p.w_out);
        let dz3 = dh3 * &cache.h3.mapv(|h| 1.0 - h * h);
        g.w_mix = dz3.t().dot(&cache.h2);
        g.b_mix = dz3.sum_axis(Axis(0));
        let dh2 = dz3.dot(&p.w_mix);

        let dvc = cache.bm.t().dot(&dh2);
        let dbm = dh2.dot(&cache.vc.t());
        let mut ds = Array2::zeros(cache.bm.dim());
        for j in 0..cfg.window {
            let inner: f64 = (0..2).map(|m| dbm[[j, m]] * cache.bm[[j, m]]).sum();
            for m in 0..2 {
                ds[[j, m]] = cache.bm[[j, m]] * (dbm[[j, m]] - inner);
            }
        }
        let dqc = ds.dot(&cache.kc) * scale;
        let dkc = ds.t().dot(&cache.qc) * scale;
        g.w_qc = dqc.t().dot(&cache.h1);
        g.w_kc = dkc.t().dot(&cache.tokens);
        g.w_vc = dvc.t().dot(&cache.tokens);
        let dtokens = dkc.dot(&p.w_kc) + dvc.dot(&p.w_vc);
        let d_identifier = dtokens.row(1).to_owned();

        let dh1 = dh2 + dqc.dot(&p.w_qc);
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for (j, (idx, a)) in cache.attn.iter().enumerate() {
            let datt = dh1.row(j);
            let da: Vec<f64> = idx.iter().map(|&s| datt.dot(&cache.v.row(s))).collect();
            let inner: f64 = a.iter().zip(&da).map(|(w, d)| w * d).sum();
            for ((&s, &w), &d) in idx.iter().zip(a).zip(&da) {
                dv.row_mut(s).scaled_add(w, &datt);
                let dscore = w * (d - inner) * scale;
                dq.row_mut(j).scaled_add(dscore, &cache.k.row(s));
                dk.row_mut(s).scaled_add(dscore, &cache.q.row(j));
            }
        }
        g.w_q = dq.t().dot(&cache.h0);
        g.w_k = dk.t().dot(&cache.h0);
        g.w_v = dv.t().dot(&cache.h0);
        let dh0 = dh1 + dq.dot(&p.w_q) + dk.dot(&p.w_k) + dv.dot(&p.w_v);
        let dz0 = dh0 * &cache.h0.mapv(|h| 1.0 - h * h);
        g.w_in = dz0.t().dot(&cache.x_in);
        g.b_in = dz0.sum_axis(Axis(0));
        let col = g.b_in.view().insert_axis(Axis(1));
        let row = cache.tau.view().insert_axis(Axis(0));
        g.w_time = col.dot(&row);
        g.pos = dz0;
        (g.into_standard_layout(), d_identifier)
    }

    /// Summed squared error `||eps - y||^2` for one clip, with gradients.
    pub fn loss_and_grad(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: usize,
        condition: ArrayView1<'_, f64>,
        identifier: Option<ArrayView1<'_, f64>>,
        eps: ArrayView2<'_, f64>,
    ) -> Result<(f64, LearnedParams, Array1<f64>)> {
        let (y, cache) = self.forward(x_t, t, condition, identifier)?;
        if eps.dim() != y.dim() {
            return Err(Error::shape(y.shape(), eps.shape()));
        }
        let resid = &y - &eps;
        let loss = resid.iter().map(|r| r * r).sum();
        let dy = resid * 2.0;
        let (g, de) = self.backward(&cache, &dy);
        Ok((loss, g, de))
    }

    pub fn loss(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: usize,
        condition: ArrayView1<'_, f64>,
        identifier: Option<ArrayView1<'_, f64>>,
        eps: ArrayView2<'_, f64>,
    ) -> Result<f64> {
        let (y, _) = self.forward(x_t, t, condition, identifier)?;
        Ok(y.iter()
            .zip(eps.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Prediction with a raw array input.
    pub fn learned_predict(
        &self,
        x: ArrayView2<'_, f64>,
        t: usize,
        condition: ArrayView1<'_, f64>,
        identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(x, t, condition, identifier)?.0)
    }

    /// Number of leading frames of `x` used by the prediction (all of them).
    pub fn frames_used(&self) -> usize {
        self.config.window
    }
}

impl Denoiser for TinyLearnedDenoiser {
    fn predict(
        &self,
        clip: &Clip,
        condition: &ConditionEmbedding,
        identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<Array2<f64>> {
        if clip.len() != self.config.window {
            return Err(Error::Dimension {
                what: "clip window",
                expected: self.config.window,
                found: clip.len(),
            });
        }
        self.learned_predict(
            clip.frames.slice(s![.., ..]),
            clip.time_step,
            condition.vector.view(),
            identifier,
        )
    }

    fn window(&self) -> Option<usize> {
        Some(self.config.window)
    }

    fn identifier_dim(&self) -> Option<usize> {
        Some(self.config.cond_dim)
    }
}
