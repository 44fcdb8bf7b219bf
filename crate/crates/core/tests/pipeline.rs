use codenoise::denoiser::{AnalyticGaussianDenoiser, MeanModel};
use codenoise::synthdata::{
    render_prompts, scene_clip_conditions, Motion, ScenePrompt, SceneSpec, CONDITION_DIM,
};
use codenoise::*;
use ndarray::{s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Returns the noise that was actually injected, looked up by clip position.
struct ExactNoise {
    noise: Array2<f64>,
    layout: ClipLayout,
}

impl Denoiser for ExactNoise {
    fn predict(
        &self,
        clip: &Clip,
        _condition: &ConditionEmbedding,
        _identifier: Option<ArrayView1<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let r = self.layout.clip_range(clip.clip_index);
        Ok(self.noise.slice(s![r, ..]).to_owned())
    }
}

fn key(v: f64) -> ConditionEmbedding {
    ConditionEmbedding::new(Array1::from(vec![v]))
}

fn table_model(
    entries: Vec<(f64, Array2<f64>)>,
    variance: Array2<f64>,
) -> AnalyticGaussianDenoiser {
    let table = entries
        .into_iter()
        .map(|(k, m)| (Array1::from(vec![k]), m))
        .collect();
    AnalyticGaussianDenoiser::new(
        MeanModel::Table(table),
        variance,
        0.0,
        NoiseSchedule::default(),
    )
    .unwrap()
}

fn relative_l2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (num / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
}

#[test]
fn full_inversion_with_exact_noise_recovers_terminal_noise() {
    let schedule = NoiseSchedule::default();
    let layout = ClipLayout::new(20, 8, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Array2::from_shape_simple_fn((20, 6), || rng.sample::<f64, _>(StandardNormal));
    let noise = Array2::from_shape_simple_fn((20, 6), || rng.sample::<f64, _>(StandardNormal));
    let oracle = ExactNoise {
        noise: noise.clone(),
        layout,
    };
    let pipe = CoDenoiser::new(&oracle, &schedule, layout)
        .unwrap()
        .with_steps(1000)
        .unwrap();
    let video = LongSequence::from_flat(x0.clone()).unwrap();
    let conds = vec![key(0.0); layout.clip_count()];
    let terminal = pipe.invert_long(&video, &conds).unwrap();
    let expected = schedule.forward_diffuse(&x0, 1000, &noise).unwrap();
    for (a, b) in terminal.frames().iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    let back = pipe.sample_from(terminal, &conds).unwrap();
    for (a, b) in back.frames().iter().zip(x0.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

/// With no shared component every element is an independent affine map of
/// its terminal noise, so two deterministic runs give the exact law of the
/// discretized sampler: offset from zero noise, gain from unit noise.
fn ladder_law(
    pipe: &CoDenoiser<'_, AnalyticGaussianDenoiser>,
    cond: &ConditionEmbedding,
) -> (Array2<f64>, Array2<f64>) {
    let zero = Array2::zeros((4, 2));
    let offset = pipe
        .sample_from(
            LongSequence::new(zero.clone(), vec![1, 2]).unwrap(),
            std::slice::from_ref(cond),
        )
        .unwrap();
    let unit = pipe
        .sample_from(
            LongSequence::new(zero + 1.0, vec![1, 2]).unwrap(),
            std::slice::from_ref(cond),
        )
        .unwrap();
    let gain = unit.frames() - offset.frames();
    (offset.into_frames(), gain)
}

#[test]
fn samples_match_the_target_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mean = Array2::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0));
    let variance = Array2::from_shape_simple_fn((4, 2), || rng.random_range(0.2..1.0));
    let model = table_model(vec![(1.0, mean.clone())], variance.clone());
    let schedule = NoiseSchedule::default();
    let layout = ClipLayout::new(4, 4, 4).unwrap();
    let pipe = |steps| {
        CoDenoiser::new(&model, &schedule, layout)
            .unwrap()
            .with_steps(steps)
            .unwrap()
    };

    // the discretized law approaches the target as the ladder refines
    let worst_gap = |steps| {
        let (offset, gain) = ladder_law(&pipe(steps), &key(1.0));
        let mean_gap = (&offset - &mean)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        let var_gap = (&gain.mapv(|g| g * g) - &variance)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        mean_gap.max(var_gap)
    };
    let (coarse, fine) = (worst_gap(100), worst_gap(1000));
    assert!(
        fine < coarse / 5.0 && fine < 1e-2,
        "gap {coarse} at 100 steps, {fine} at 1000"
    );

    // 10^4 seeded runs agree with the exact law of the 100-step sampler
    let coarse_pipe = pipe(100);
    let (offset, gain) = ladder_law(&coarse_pipe, &key(1.0));
    let runs = 10_000;
    let mut sum = Array2::<f64>::zeros((4, 2));
    let mut sum_sq = Array2::<f64>::zeros((4, 2));
    for seed in 0..runs {
        let out = coarse_pipe
            .sample_long(&[key(1.0)], &[1, 2], seed)
            .unwrap()
            .into_frames();
        sum += &out;
        sum_sq += &out.mapv(|v| v * v);
    }
    let n = runs as f64;
    for ((&m, &g), (&s1, &s2)) in offset
        .iter()
        .zip(gain.iter())
        .zip(sum.iter().zip(sum_sq.iter()))
    {
        let v = g * g;
        let sample_mean = s1 / n;
        let sample_var = (s2 - n * sample_mean * sample_mean) / (n - 1.0);
        assert!(
            (sample_mean - m).abs() < 3.0 * (v / n).sqrt(),
            "mean {sample_mean} vs {m}"
        );
        assert!(
            (sample_var - v).abs() < 3.0 * v * (2.0 / (n - 1.0)).sqrt(),
            "variance {sample_var} vs {v}"
        );
    }
}

#[test]
fn overlapping_samples_keep_the_target_mean() {
    let model = table_model(
        vec![(1.0, Array2::from_elem((4, 1), 0.7))],
        Array2::from_elem((4, 1), 0.5),
    );
    let schedule = NoiseSchedule::default();
    let layout = ClipLayout::new(10, 4, 2).unwrap();
    let pipe = CoDenoiser::new(&model, &schedule, layout)
        .unwrap()
        .with_steps(50)
        .unwrap();
    let conds = vec![key(1.0); layout.clip_count()];
    let runs = 10_000;
    let mut sum = Array2::<f64>::zeros((10, 1));
    for seed in 0..runs {
        sum += pipe.sample_long(&conds, &[1, 1], seed).unwrap().frames();
    }
    // merging averages clip estimates, so the spread is at most the clip variance
    let se = (0.5 / runs as f64).sqrt();
    for m in sum.iter().map(|s| s / runs as f64) {
        assert!((m - 0.7).abs() < 3.0 * se, "mean {m}");
    }
}

fn scene_video() -> (LongSequence, Vec<ScenePrompt>) {
    let spec = SceneSpec::new(Motion::Linear, 0.25, [1.0, 4.0], 1.5, 1.0).with_frame_shape([8, 8]);
    let video = render_prompts(
        &[ScenePrompt::new(0..48, spec.clone().with_noise_floor(0.05))],
        6,
    )
    .unwrap();
    (video, vec![ScenePrompt::new(0..48, spec)])
}

#[test]
fn identity_edit_reconstructs_input() {
    let schedule = NoiseSchedule::default();
    let model = AnalyticGaussianDenoiser::scene([8, 8], 16, 0.05, 0.5, schedule.clone()).unwrap();
    let (video, prompts) = scene_video();
    let layout = ClipLayout::new(48, 16, 4).unwrap();
    let conds = scene_clip_conditions(&prompts, &layout).unwrap();
    let pipe = CoDenoiser::new(&model, &schedule, layout)
        .unwrap()
        .with_guidance(GuidanceConfig::unguided(CONDITION_DIM))
        .with_steps(50)
        .unwrap();
    let out = pipe.edit_long(&video, &conds, &conds).unwrap();
    assert!(relative_l2(out.frames(), video.frames()) < 5e-2);
}

#[test]
fn edit_moves_statistics_toward_new_mean() {
    let old_mean = Array2::from_elem((4, 3), -1.0);
    let new_mean = Array2::from_elem((4, 3), 2.0);
    let model = table_model(
        vec![(1.0, old_mean), (2.0, new_mean)],
        Array2::from_elem((4, 3), 0.1),
    );
    let schedule = NoiseSchedule::default();
    let layout = ClipLayout::new(12, 4, 2).unwrap();
    let pipe = CoDenoiser::new(&model, &schedule, layout)
        .unwrap()
        .with_steps(50)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let video = Array2::from_shape_simple_fn((12, 3), || {
        -1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal)
    });
    let video = LongSequence::from_flat(video).unwrap();
    let old = vec![key(1.0); layout.clip_count()];
    let new = vec![key(2.0); layout.clip_count()];
    let out = pipe.edit_long(&video, &old, &new).unwrap();
    let before = video.frames().mean().unwrap();
    let after = out.frames().mean().unwrap();
    assert!(
        (after - 2.0).abs() < (before - 2.0).abs() / 4.0,
        "{before} -> {after}"
    );
}

#[test]
fn multi_prompt_edit_aligns_each_segment_with_its_prompt() {
    use codenoise::metrics::{alignment_scores, EmbedderSpec};
    use codenoise::synthdata::{scene_frame_targets, spec_to_condition};

    let schedule = NoiseSchedule::default();
    let model = AnalyticGaussianDenoiser::scene([8, 8], 8, 0.05, 0.5, schedule.clone()).unwrap();
    let source = SceneSpec::new(Motion::Linear, 0.2, [1.0, 4.0], 1.5, 1.0).with_frame_shape([8, 8]);
    let video = render_prompts(&[ScenePrompt::new(0..32, source.clone())], 0).unwrap();
    let first = SceneSpec::new(Motion::Static, 0.0, [2.0, 2.0], 1.5, 1.0).with_frame_shape([8, 8]);
    let second = SceneSpec::new(Motion::Static, 0.0, [6.0, 6.0], 1.5, 1.0).with_frame_shape([8, 8]);
    let prompts = [
        ScenePrompt::new(0..16, first.clone()),
        ScenePrompt::new(16..32, second.clone()),
    ];
    let layout = ClipLayout::new(32, 8, 4).unwrap();
    let old = scene_clip_conditions(&[ScenePrompt::new(0..32, source)], &layout).unwrap();
    let new = scene_clip_conditions(&prompts, &layout).unwrap();
    let pipe = CoDenoiser::new(&model, &schedule, layout)
        .unwrap()
        .with_guidance(GuidanceConfig::new(3.0, ConditionEmbedding::null(CONDITION_DIM)).unwrap())
        .with_steps(30)
        .unwrap();
    let out = pipe.edit_long(&video, &old, &new).unwrap();
    let embedder = EmbedderSpec::flatten();
    let own =
        alignment_scores(&out, &scene_frame_targets(&prompts, 32).unwrap(), &embedder).unwrap();
    let swapped = [
        ScenePrompt::new(0..16, second),
        ScenePrompt::new(16..32, first),
    ];
    let other =
        alignment_scores(&out, &scene_frame_targets(&swapped, 32).unwrap(), &embedder).unwrap();
    let segment_mean =
        |v: &[f64], r: std::ops::Range<usize>| v[r.clone()].iter().sum::<f64>() / r.len() as f64;
    for r in [0..16, 16..32] {
        assert!(segment_mean(&own, r.clone()) > segment_mean(&other, r));
    }
    assert_eq!(new[0], spec_to_condition(&prompts[0].scene));
}
