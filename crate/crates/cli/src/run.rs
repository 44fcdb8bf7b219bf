use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use codenoise::conditions::interpolate_conditions;
use codenoise::denoiser::{
    load_checkpoint, save_checkpoint, train_one_shot, AnalyticGaussianDenoiser,
    TinyLearnedDenoiser, TrainConfig,
};
use codenoise::io::{load_tensor, save_tensor, write_pgm_frames};
use codenoise::metrics::{
    frame_consistency, textual_alignment, write_rows, EmbedderSpec, MetricRow,
};
use codenoise::synthdata::{
    render_condition, render_prompts, scene_clip_conditions, scene_frame_targets, ScenePrompt,
};
use codenoise::{
    AttentionMode, ClipIdentifiers, ClipLayout, CoDenoiser, ConditionEmbedding, ConditionTrack,
    Denoiser, GuidanceConfig, LongSequence, NoiseSchedule, WeightScheme,
};

use crate::manifest::{ConditionSource, DenoiserSection, Mode, RunManifest};
use crate::CliError;

/// Command-line overrides applied on top of the manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub repeat: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub rows: Vec<MetricRow>,
    pub summary: String,
}

enum Loaded {
    Analytic(AnalyticGaussianDenoiser),
    Learned(TinyLearnedDenoiser, Option<ClipIdentifiers>),
}

struct Context {
    manifest: RunManifest,
    out: PathBuf,
    frames: usize,
    padded: usize,
    frame_shape: Vec<usize>,
    embedder: EmbedderSpec,
    summary: String,
    timing: String,
}

/// Loads, resolves and runs a manifest, writing every artifact into `out`.
/// A numerical failure leaves `diagnostic.txt` behind.
pub fn run(config: &Path, out: &Path, overrides: &Overrides) -> Result<RunOutcome, CliError> {
    let mut manifest = RunManifest::load(config)?;
    if let Some(w) = overrides.workers {
        manifest.workers = w;
    }
    if let Some(s) = overrides.seed {
        manifest.seed = s;
    }
    if let Some(r) = overrides.repeat {
        manifest.repeat = r;
    }
    let manifest = manifest.resolve()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("manifest.toml"), manifest.to_toml()?)?;

    let padded = manifest.padded_frames()?;
    let mut ctx = Context {
        frames: manifest.layout.frames,
        padded,
        frame_shape: manifest.layout.frame_shape.to_vec(),
        embedder: manifest.metrics.spec(),
        out: out.to_path_buf(),
        summary: String::new(),
        timing: String::new(),
        manifest,
    };
    let _ = writeln!(
        ctx.summary,
        "mode {}\nframes {} (pad {})\nwindow {} stride {}",
        ctx.manifest.mode,
        ctx.frames,
        ctx.padded - ctx.frames,
        ctx.manifest.layout.window,
        ctx.manifest.layout.stride
    );

    let result = match ctx.manifest.mode {
        Mode::Generate => generate(&mut ctx),
        Mode::Ablate => ablate(&mut ctx),
        Mode::Invert => invert(&mut ctx),
        Mode::Edit => edit(&mut ctx),
        Mode::TrainOneShot => train(&mut ctx),
    };
    let rows = match result {
        Ok(rows) => rows,
        Err(e) => {
            if let CliError::Core(codenoise::Error::NonFinite(msg)) = &e {
                let text = format!(
                    "numerical failure: {msg}\nmode {} seed {} repeat {}\n\n{}",
                    ctx.manifest.mode, ctx.manifest.seed, ctx.manifest.repeat, ctx.summary
                );
                std::fs::write(out.join("diagnostic.txt"), text)?;
            }
            return Err(e);
        }
    };
    if !rows.is_empty() {
        write_rows(std::fs::File::create(out.join("metrics.csv"))?, &rows)?;
    }
    std::fs::write(out.join("summary.txt"), &ctx.summary)?;
    std::fs::write(out.join("timing.txt"), &ctx.timing)?;
    Ok(RunOutcome {
        manifest: ctx.manifest,
        rows,
        summary: ctx.summary,
    })
}

impl Context {
    fn layout(&self, stride: usize) -> Result<ClipLayout, CliError> {
        Ok(ClipLayout::new(
            self.padded,
            self.manifest.layout.window,
            stride,
        )?)
    }

    fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        self.manifest.schedule.build()
    }

    fn load_denoiser(&self, schedule: &NoiseSchedule) -> Result<Loaded, CliError> {
        let section = self.manifest.denoiser.as_ref().expect("checked by resolve");
        let l = &self.manifest.layout;
        match section {
            DenoiserSection::Analytic {
                variance,
                shared_variance,
            } => Ok(Loaded::Analytic(AnalyticGaussianDenoiser::scene(
                l.frame_shape,
                l.window,
                *variance,
                *shared_variance,
                schedule.clone(),
            )?)),
            DenoiserSection::Learned { checkpoint, .. } => {
                let (model, ids) = load_checkpoint(checkpoint)?;
                let cfg = model.config();
                if cfg.window != l.window || cfg.frame_len != l.frame_shape[0] * l.frame_shape[1] {
                    return Err(CliError::Config(format!(
                        "checkpoint expects {}-frame clips of {} features, layout has {} and {:?}",
                        cfg.window, cfg.frame_len, l.window, l.frame_shape
                    )));
                }
                if model.schedule() != schedule {
                    return Err(CliError::Config(
                        "the [schedule] section differs from the checkpoint's schedule".into(),
                    ));
                }
                Ok(Loaded::Learned(model, ids))
            }
        }
    }

    /// Scene prompts with the last region stretched over the padding.
    fn padded_scenes(&self, scenes: &[ScenePrompt]) -> Vec<ScenePrompt> {
        let mut out = scenes.to_vec();
        if let Some(last) = out.iter_mut().max_by_key(|p| p.end) {
            last.end = last.end.max(self.padded);
        }
        out
    }

    fn clip_conditions(
        &self,
        source: &ConditionSource,
        layout: &ClipLayout,
    ) -> Result<Vec<ConditionEmbedding>, CliError> {
        if let Some(text) = &source.track {
            let track = ConditionTrack::parse(text)?;
            if track.anchors.len() == 1 {
                return Ok(vec![track.anchors[0].1.clone(); layout.clip_count()]);
            }
            return Ok(interpolate_conditions(&track, layout.clip_count())?);
        }
        Ok(scene_clip_conditions(
            &self.padded_scenes(&source.scenes),
            layout,
        )?)
    }

    /// Frame-space alignment targets for the requested (unpadded) frames.
    fn targets(
        &self,
        source: &ConditionSource,
        layout: &ClipLayout,
    ) -> Result<Vec<ConditionEmbedding>, CliError> {
        if !source.scenes.is_empty() {
            return Ok(scene_frame_targets(
                &self.padded_scenes(&source.scenes),
                self.frames,
            )?);
        }
        let conds = self.clip_conditions(source, layout)?;
        let coverage = layout.coverage();
        let mut rendered = Vec::with_capacity(conds.len());
        for c in &conds {
            rendered.push(render_condition(
                c,
                self.manifest.layout.frame_shape,
                layout.window(),
            )?);
        }
        Ok((0..self.frames)
            .map(|j| {
                let (clip, local) = coverage.frame(j)[0];
                ConditionEmbedding::new(rendered[clip].row(local).to_owned())
            })
            .collect())
    }

    fn codenoiser<'a, D: Denoiser + ?Sized>(
        &self,
        denoiser: &'a D,
        schedule: &'a NoiseSchedule,
        layout: ClipLayout,
        cond_dim: usize,
    ) -> Result<CoDenoiser<'a, D>, CliError> {
        let s = &self.manifest.sampler;
        Ok(CoDenoiser::new(denoiser, schedule, layout)?
            .with_weights(WeightScheme::from_kind(
                self.manifest.layout.weights,
                &layout,
            )?)
            .with_guidance(GuidanceConfig::new(
                s.guidance_scale,
                ConditionEmbedding::null(cond_dim),
            )?)
            .with_steps(s.steps)?
            .with_smoothing(s.smoothing)?
            .with_workers(self.manifest.workers)?)
    }

    fn input_video(&self) -> Result<LongSequence, CliError> {
        let input = self.manifest.input.as_ref().expect("checked by resolve");
        let video = match &input.video {
            Some(path) => load_tensor(path)?,
            None => render_prompts(&self.manifest.conditions.scenes, input.render_seed)?,
        };
        if video.num_frames() != self.frames || video.frame_shape() != self.frame_shape.as_slice() {
            return Err(CliError::Config(format!(
                "input video is {} frames of {:?}, layout expects {} frames of {:?}",
                video.num_frames(),
                video.frame_shape(),
                self.frames,
                self.frame_shape
            )));
        }
        Ok(video.pad_repeat_last(self.padded - self.frames))
    }

    fn metric_row(
        &self,
        video: &LongSequence,
        targets: &[ConditionEmbedding],
        method: &str,
        seed: u64,
    ) -> Result<MetricRow, CliError> {
        let fc = frame_consistency(video, &self.embedder)?;
        let alignment = textual_alignment(video, targets, &self.embedder)?;
        Ok(MetricRow::new(
            format!("{method}-{seed}"),
            method,
            fc,
            alignment,
            seed,
        ))
    }

    fn save(&self, name: &str, video: &LongSequence) -> Result<(), CliError> {
        save_tensor(&self.out.join(format!("{name}.tensor")), video)?;
        if self.manifest.output.dump_pgm {
            write_pgm_frames(&self.out.join("pgm"), video, name)?;
        }
        Ok(())
    }

    fn seeds(&self) -> impl Iterator<Item = u64> {
        let start = self.manifest.seed;
        (0..self.manifest.repeat as u64).map(move |r| start + r)
    }

    fn note(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.summary, "{}", line.as_ref());
    }
}

fn identifiers_for<'a>(
    ids: &'a Option<ClipIdentifiers>,
    layout: &ClipLayout,
) -> Option<&'a ClipIdentifiers> {
    ids.as_ref()
        .filter(|i| i.clip_count() == layout.clip_count())
}

fn row_line(r: &MetricRow) -> String {
    format!(
        "{} seed {}: frame_consistency {:.6} align_mean {:.6} align_var_x100 {:.6}",
        r.method, r.seed, r.frame_consistency, r.align_mean, r.align_var_x100
    )
}

/// Samples with one denoiser over one layout for every seed.
fn sample_runs<D: Denoiser + ?Sized>(
    ctx: &mut Context,
    denoiser: &D,
    identifiers: Option<&ClipIdentifiers>,
    schedule: &NoiseSchedule,
    layout: ClipLayout,
    method: &str,
) -> Result<Vec<MetricRow>, CliError> {
    let conditions = ctx.clip_conditions(&ctx.manifest.conditions.clone(), &layout)?;
    let targets = ctx.targets(&ctx.manifest.conditions.clone(), &layout)?;
    let cond_dim = conditions[0].dim();
    let mut co = ctx.codenoiser(denoiser, schedule, layout, cond_dim)?;
    if let Some(ids) = identifiers {
        co = co.with_identifiers(ids)?;
    }
    let mut rows = Vec::new();
    for seed in ctx.seeds().collect::<Vec<_>>() {
        let noise = co.initial_noise(&ctx.frame_shape, seed)?;
        let start = Instant::now();
        let (video, timing) = co.sample_from_timed(noise, &conditions)?;
        let _ = writeln!(
            ctx.timing,
            "{method} seed {seed}: total {:?} denoise {:?} merge {:?}",
            start.elapsed(),
            timing.denoise,
            timing.merge
        );
        let video = video.truncate(ctx.frames);
        ctx.save(&format!("{method}_seed{seed}"), &video)?;
        let row = ctx.metric_row(&video, &targets, method, seed)?;
        ctx.note(row_line(&row));
        rows.push(row);
    }
    Ok(rows)
}

fn generate(ctx: &mut Context) -> Result<Vec<MetricRow>, CliError> {
    let schedule = ctx.schedule()?;
    let layout = ctx.layout(ctx.manifest.layout.stride)?;
    ctx.note(format!("clips {}", layout.clip_count()));
    match ctx.load_denoiser(&schedule)? {
        Loaded::Analytic(d) => sample_runs(ctx, &d, None, &schedule, layout, "co_denoised"),
        Loaded::Learned(model, ids) => {
            if ids.is_some() && identifiers_for(&ids, &layout).is_none() {
                return Err(CliError::Config(format!(
                    "checkpoint identifiers cover {} clips, layout has {}",
                    ids.as_ref().map_or(0, |i| i.clip_count()),
                    layout.clip_count()
                )));
            }
            sample_runs(ctx, &model, ids.as_ref(), &schedule, layout, "co_denoised")
        }
    }
}

fn ablate(ctx: &mut Context) -> Result<Vec<MetricRow>, CliError> {
    let schedule = ctx.schedule()?;
    let co_layout = ctx.layout(ctx.manifest.layout.stride)?;
    let isolated = ctx.layout(ctx.manifest.layout.window)?;
    ctx.note(format!(
        "clips co_denoised {} isolated {}",
        co_layout.clip_count(),
        isolated.clip_count()
    ));
    let mut rows = Vec::new();
    match ctx.load_denoiser(&schedule)? {
        Loaded::Analytic(d) => {
            rows.extend(sample_runs(
                ctx,
                &d,
                None,
                &schedule,
                co_layout,
                "co_denoised",
            )?);
            rows.extend(sample_runs(ctx, &d, None, &schedule, isolated, "isolated")?);
            ctx.note("sparse_causal skipped: the analytic denoiser has no attention");
        }
        Loaded::Learned(model, ids) => {
            for (layout, name) in [(co_layout, "co_denoised"), (isolated, "isolated")] {
                let use_ids = identifiers_for(&ids, &layout);
                if ids.is_some() && use_ids.is_none() {
                    ctx.note(format!("{name}: identifiers ignored (clip count differs)"));
                }
                rows.extend(sample_runs(ctx, &model, use_ids, &schedule, layout, name)?);
            }
            let sparse = model.clone().with_attention(AttentionMode::SparseCausal);
            let use_ids = identifiers_for(&ids, &co_layout);
            rows.extend(sample_runs(
                ctx,
                &sparse,
                use_ids,
                &schedule,
                co_layout,
                "sparse_causal",
            )?);
        }
    }
    Ok(rows)
}

fn relative_error(a: &LongSequence, b: &LongSequence) -> f64 {
    let num: f64 = a
        .frames()
        .iter()
        .zip(b.frames().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let den: f64 = b.frames().iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Inverts the input, then samples it back under the same conditions.
fn invert(ctx: &mut Context) -> Result<Vec<MetricRow>, CliError> {
    let schedule = ctx.schedule()?;
    let layout = ctx.layout(ctx.manifest.layout.stride)?;
    let video = ctx.input_video()?;
    let source = ctx.manifest.conditions.clone();
    let conditions = ctx.clip_conditions(&source, &layout)?;
    let targets = ctx.targets(&source, &layout)?;
    let loaded = ctx.load_denoiser(&schedule)?;
    let (noise, recon) = match &loaded {
        Loaded::Analytic(d) => {
            let co = ctx.codenoiser(d, &schedule, layout, conditions[0].dim())?;
            let noise = co.invert_long(&video, &conditions)?;
            let recon = co.sample_from(noise.clone(), &conditions)?;
            (noise, recon)
        }
        Loaded::Learned(model, ids) => {
            let mut co = ctx.codenoiser(model, &schedule, layout, conditions[0].dim())?;
            if let Some(i) = identifiers_for(ids, &layout) {
                co = co.with_identifiers(i)?;
            }
            let noise = co.invert_long(&video, &conditions)?;
            let recon = co.sample_from(noise.clone(), &conditions)?;
            (noise, recon)
        }
    };
    save_tensor(&ctx.out.join("noise.tensor"), &noise)?;
    let recon = recon.truncate(ctx.frames);
    let input = video.truncate(ctx.frames);
    ctx.save("reconstruction", &recon)?;
    ctx.note(format!(
        "relative reconstruction error {:.6e}",
        relative_error(&recon, &input)
    ));
    let row = ctx.metric_row(&recon, &targets, "reconstruction", ctx.manifest.seed)?;
    ctx.note(row_line(&row));
    Ok(vec![row])
}

fn edit(ctx: &mut Context) -> Result<Vec<MetricRow>, CliError> {
    let schedule = ctx.schedule()?;
    let layout = ctx.layout(ctx.manifest.layout.stride)?;
    let video = ctx.input_video()?;
    let old = ctx.clip_conditions(&ctx.manifest.conditions.clone(), &layout)?;
    let new_source = ctx.manifest.edit.clone().expect("checked by resolve");
    let new = ctx.clip_conditions(&new_source, &layout)?;
    let targets = ctx.targets(&new_source, &layout)?;
    let edited = match ctx.load_denoiser(&schedule)? {
        Loaded::Analytic(d) => ctx
            .codenoiser(&d, &schedule, layout, old[0].dim())?
            .edit_long(&video, &old, &new)?,
        Loaded::Learned(model, ids) => {
            let mut co = ctx.codenoiser(&model, &schedule, layout, old[0].dim())?;
            if let Some(i) = identifiers_for(&ids, &layout) {
                co = co.with_identifiers(i)?;
            }
            co.edit_long(&video, &old, &new)?
        }
    };
    let edited = edited.truncate(ctx.frames);
    ctx.save("edited", &edited)?;
    let row = ctx.metric_row(&edited, &targets, "edit", ctx.manifest.seed)?;
    ctx.note(row_line(&row));
    Ok(vec![row])
}

fn train(ctx: &mut Context) -> Result<Vec<MetricRow>, CliError> {
    let schedule = ctx.schedule()?;
    let layout = ctx.layout(ctx.manifest.layout.stride)?;
    let video = ctx.input_video()?;
    let conditions = ctx.clip_conditions(&ctx.manifest.conditions.clone(), &layout)?;
    let t = ctx.manifest.train.clone().expect("filled by resolve");
    let identifiers = if t.identifiers {
        Some(
            ClipIdentifiers::random(
                layout.clip_count(),
                conditions[0].dim(),
                t.identifier_scale,
                t.seed,
            )
            .with_drop_probability(t.drop_probability)?,
        )
    } else {
        None
    };
    let config = TrainConfig {
        epochs: t.epochs,
        base_lr: t.base_lr,
        batch: t.batch,
        drop_probability: t.drop_probability,
        hidden: t.hidden,
        time_features: t.time_features,
        attention: t.attention,
        schedule,
        seed: t.seed,
        probe_steps: t.probe_steps,
    };
    let start = Instant::now();
    let trained = train_one_shot(&video, &layout, &conditions, identifiers, &config)?;
    let _ = writeln!(ctx.timing, "training {:?}", start.elapsed());
    let path = ctx.out.join("model.ckpt");
    save_checkpoint(&path, &trained.model, trained.identifiers.as_ref())?;

    let report = &trained.report;
    let mut losses = String::from("epoch train_loss probe_loss\n");
    for (k, l) in report.epoch_losses.iter().enumerate() {
        let probe = report.probe_losses.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(losses, "{} {:.17e} {:.17e}", k + 1, l, probe);
    }
    std::fs::write(ctx.out.join("losses.dat"), losses)?;
    ctx.note(format!(
        "clips {} updates {}",
        layout.clip_count(),
        report.updates
    ));
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        ctx.note(format!("train loss first {first:.6} last {last:.6}"));
    }
    if let (Some(first), Some(last)) = (report.probe_losses.first(), report.probe_losses.last()) {
        ctx.note(format!("probe loss first {first:.6} last {last:.6}"));
    }
    ctx.note(format!("convergence epoch {:?}", report.convergence_epoch));
    let hash = crate::manifest::sha256_hex(&std::fs::read(&path)?);
    ctx.note(format!("checkpoint {} sha256 {hash}", path.display()));
    Ok(Vec::new())
}
