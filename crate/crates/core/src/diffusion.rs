//! Forward process, classifier-free guidance, DDIM sampling and 2D training.
//!
//! Noise levels are indexed `t = 0..=T` with `alpha_bar(0) = 1` (clean data)
//! and `alpha_bar(t) = prod_{s=1..t} (1 - beta_s)`. The denoiser sees the
//! network index `t - 1`, so the noisiest level maps to `T - 1`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dreamview_tensor::optim::clip_global_norm;
use dreamview_tensor::{ops, AdamW, AdamWConfig, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{self, Metadata};
use crate::denoiser::{Denoiser, DenoiserInput, IMAGE_SIZE, TIMESTEPS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inject::{sample_training_margin, RoutingDecision, RoutingPolicy};
use crate::params::Bound;
use crate::rng::{stream, Domain};
use crate::scenegen::{camera_for_view, CameraPose, LoadedScene, SIDES};
use crate::textenc::{tokenize, ConditionVars, TokenSequence};

pub const VIEWS: usize = 4;
const IMAGE_LEN: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` levels.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Domain(format!(
                "need 0 < beta_start <= beta_end < 1 and steps > 0, got {beta_start}, {beta_end}, {steps}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + (beta_end - beta_start) * frac
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Domain(format!("noise level {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(TIMESTEPS, 1e-4, 0.02).expect("default schedule is valid")
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`, with `x0` already in `[-1, 1]`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "q_sample")?;
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect();
    Ok(Tensor::new(x0.shape(), data))
}

/// `x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`, clamped to `[-1, 1]`.
pub fn predict_x0(xt: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(xt, eps, "predict_x0")?;
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = xt
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| ((x as f64 - b * e as f64) / a).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Tensor::new(xt.shape(), data))
}

fn std_dev(xs: &[f32]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    (xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Guided noise `uncond + scale (cond - uncond)`, optionally rescaled per image
/// (leading axis) toward the conditional branch's standard deviation.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, scale: f64, rescale: f64) -> Result<Tensor> {
    same_shape(cond, uncond, "cfg_combine")?;
    if !(scale >= 1.0) || !(0.0..=1.0).contains(&rescale) {
        return Err(Error::Domain(format!("cfg scale {scale} must be >= 1 and rescale {rescale} in [0, 1]")));
    }
    let mut out: Vec<f32> = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| (u as f64 + scale * (c as f64 - u as f64)) as f32)
        .collect();
    if rescale > 0.0 && !out.is_empty() {
        let per = out.len() / cond.shape().first().copied().unwrap_or(1).max(1);
        for (img, c) in out.chunks_exact_mut(per).zip(cond.data().chunks_exact(per)) {
            let s_cfg = std_dev(img);
            if s_cfg < 1e-12 {
                continue;
            }
            let ratio = std_dev(c) / s_cfg;
            for v in img.iter_mut() {
                let x = *v as f64;
                *v = (rescale * x * ratio + (1.0 - rescale) * x) as f32;
            }
        }
    }
    Ok(Tensor::new(cond.shape(), out))
}

/// Deterministic (eta = 0) DDIM update from level `t` to `t_prev < t`.
pub fn ddim_step(xt: &Tensor, eps: &Tensor, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Domain(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
    }
    schedule.check(t)?;
    let x0 = predict_x0(xt, eps, t, schedule)?;
    let ab = schedule.alpha_bar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect();
    Ok(Tensor::new(xt.shape(), data))
}

/// Evenly spaced levels `T, T - T/n, ..., T/n, 0` (`n + 1` entries, `n` jumps).
/// In network indices the first jump evaluates `T - 1`; the last lands on clean data.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Domain(format!("{steps} sampling steps over {total} levels")));
    }
    Ok((0..=steps).map(|i| total * (steps - i) / steps).collect())
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn canonical_cameras() -> Vec<CameraPose> {
    SIDES.iter().map(|&s| camera_for_view(s)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSettings {
    pub policy: RoutingPolicy,
    pub steps: usize,
    pub cfg_scale: f64,
    pub rescale: f64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            policy: RoutingPolicy::Adaptive { margin: crate::inject::INFERENCE_MARGIN },
            steps: 50,
            cfg_scale: 7.5,
            rescale: 0.0,
        }
    }
}

/// One object: an overall prompt and view prompts in front/right/back/left order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleJob {
    pub overall: String,
    pub views: [String; 4],
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub images: Vec<Image>,
    /// Routing decisions of the conditional branch.
    pub decisions: Vec<RoutingDecision>,
}

/// Samples every job in one batch; each job's result depends only on its own
/// prompts and seed.
pub fn sample_batch(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    jobs: &[SampleJob],
    settings: &SampleSettings,
) -> Result<Vec<SampleOutput>> {
    let groups = jobs.len();
    if groups == 0 {
        return Ok(Vec::new());
    }
    let n_cond = groups * VIEWS;
    let mut conds = Vec::with_capacity(2 * n_cond);
    for job in jobs {
        for view in &job.views {
            conds.push(model.text.encode_pair(&job.overall, view, &model.params)?.to_vars());
        }
    }
    let null = model.text.null_pair(&model.params)?.to_vars();
    conds.extend(std::iter::repeat_n(null, n_cond));
    let cameras: Vec<CameraPose> = (0..2 * groups).flat_map(|_| canonical_cameras()).collect();

    let mut x = Vec::with_capacity(n_cond * IMAGE_LEN);
    for job in jobs {
        x.extend(gaussian(&mut stream(job.seed, Domain::SampleNoise, 0), VIEWS * IMAGE_LEN));
    }
    let mut x = Tensor::new(&[n_cond, 3, IMAGE_SIZE, IMAGE_SIZE], x);
    let mut decisions: Vec<Vec<RoutingDecision>> = vec![Vec::new(); groups];
    let levels = ddim_timesteps(schedule.steps(), settings.steps)?;
    let mut log = Vec::new();
    for pair in levels.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let mut doubled = Vec::with_capacity(2 * x.numel());
        doubled.extend_from_slice(x.data());
        doubled.extend_from_slice(x.data());
        let input = Tensor::new(&[2 * n_cond, 3, IMAGE_SIZE, IMAGE_SIZE], doubled);
        log.clear();
        let eps = model.predict(&input, &conds, &cameras, &vec![t; 2 * groups], VIEWS, settings.policy, Some(&mut log))?;
        // the log holds one entry per image per site, images in batch order
        for (i, d) in log.iter().enumerate() {
            let image = i % (2 * n_cond);
            if image < n_cond {
                decisions[image / VIEWS].push(d.clone());
            }
        }
        let shape = [n_cond, 3, IMAGE_SIZE, IMAGE_SIZE];
        let cond = Tensor::new(&shape, eps.data()[..n_cond * IMAGE_LEN].to_vec());
        let uncond = Tensor::new(&shape, eps.data()[n_cond * IMAGE_LEN..].to_vec());
        let guided = cfg_combine(&cond, &uncond, settings.cfg_scale, settings.rescale)?;
        x = ddim_step(&x, &guided, t, t_prev, schedule)?;
    }
    let images: Vec<Image> = x
        .data()
        .chunks_exact(IMAGE_LEN)
        .map(|chw| Image::from_signed_chw(chw, IMAGE_SIZE, IMAGE_SIZE))
        .collect();
    Ok(images
        .chunks_exact(VIEWS)
        .zip(decisions)
        .map(|(imgs, decisions)| SampleOutput { images: imgs.to_vec(), decisions })
        .collect())
}

pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    job: &SampleJob,
    settings: &SampleSettings,
) -> Result<SampleOutput> {
    Ok(sample_batch(model, schedule, std::slice::from_ref(job), settings)?.remove(0))
}

/// A dataset scene ready for training: clean views in `[-1, 1]` and token ids.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub x0: Vec<f32>,
    pub overall: TokenSequence,
    pub views: [TokenSequence; 4],
}

impl PreparedScene {
    pub fn new(scene: &LoadedScene, model: &Denoiser) -> Self {
        let vocab = &model.text.vocab;
        let mut x0 = Vec::with_capacity(VIEWS * IMAGE_LEN);
        for img in &scene.images {
            x0.extend(img.to_signed_chw());
        }
        Self {
            x0,
            overall: tokenize(&scene.overall_caption, vocab),
            views: std::array::from_fn(|i| tokenize(&scene.captions[i], vocab)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossInfo {
    pub timesteps: Vec<usize>,
    pub dropped: Vec<bool>,
}

/// Random draws for one scene in one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDraw {
    pub scene: usize,
    /// Noise level in `1..=T`, shared by the scene's views.
    pub t: usize,
    /// Both texts replaced by the null condition.
    pub dropped: bool,
    pub eps: Vec<f32>,
}

/// Everything random about one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub margin: f64,
    pub draws: Vec<SceneDraw>,
}

impl StepPlan {
    /// Draws for `step`, from streams keyed by `(seed, step)` only.
    pub fn new(config: &TrainConfig, step: u64, num_scenes: usize, schedule: &NoiseSchedule) -> Self {
        let seed = config.seed;
        let margin = sample_training_margin(&mut stream(seed, Domain::Margin, step));
        let mut rng = stream(seed, Domain::TrainStep, step);
        let draws = (0..config.scenes_per_batch)
            .map(|_| SceneDraw {
                scene: rng.random_range(0..num_scenes),
                t: rng.random_range(1..=schedule.steps()),
                dropped: rng.random_bool(config.dropout),
                eps: gaussian(&mut rng, VIEWS * IMAGE_LEN),
            })
            .collect();
        Self { margin, draws }
    }
}

/// Mean squared noise-prediction error over a batch of scenes.
///
/// Each draw noises its scene's views at one level `t`; dropped scenes see
/// the null condition for both texts.
pub fn training_loss(
    model: &Denoiser,
    bound: &Bound,
    scenes: &[PreparedScene],
    plan: &StepPlan,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let mut xt = Vec::with_capacity(plan.draws.len() * VIEWS * IMAGE_LEN);
    let mut noise = Vec::with_capacity(plan.draws.len() * VIEWS * IMAGE_LEN);
    let mut conds: Vec<ConditionVars> = Vec::with_capacity(plan.draws.len() * VIEWS);
    let null = TokenSequence::null();
    for draw in &plan.draws {
        let scene = scenes
            .get(draw.scene)
            .ok_or_else(|| Error::Shape(format!("scene {} of {}", draw.scene, scenes.len())))?;
        let x0 = Tensor::new(&[scene.x0.len()], scene.x0.clone());
        let eps = Tensor::new(&[draw.eps.len()], draw.eps.clone());
        xt.extend_from_slice(q_sample(&x0, draw.t, &eps, schedule)?.data());
        noise.extend_from_slice(&draw.eps);
        for v in 0..VIEWS {
            conds.push(if draw.dropped {
                model.text.condition_vars(&null, &null, bound)
            } else {
                model.text.condition_vars(&scene.overall, &scene.views[v], bound)
            });
        }
    }
    let n = plan.draws.len() * VIEWS;
    let shape = [n, 3, IMAGE_SIZE, IMAGE_SIZE];
    let x = Var::constant(Tensor::new(&shape, xt));
    let cameras: Vec<CameraPose> = plan.draws.iter().flat_map(|_| canonical_cameras()).collect();
    let timesteps: Vec<usize> = plan.draws.iter().map(|d| d.t).collect();
    let input = DenoiserInput { x: &x, conds: &conds, cameras: &cameras, timesteps: &timesteps, views: VIEWS };
    let pred = model.forward(bound, &input, RoutingPolicy::adaptive(plan.margin)?, None)?;
    Ok(ops::mse(&pred, &Tensor::new(&shape, noise)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub scenes_per_batch: usize,
    pub dropout: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            scenes_per_batch: 1,
            dropout: 0.1,
            total_steps: 20_000,
            seed: 0,
            checkpoint_every: 1_000,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        if self.scenes_per_batch == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("scenes_per_batch and lr must be positive, weight_decay non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr as f32, weight_decay: self.weight_decay as f32, ..AdamWConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub margin: f64,
    pub dropped: usize,
}

/// Model plus optimizer state; step `k` draws its randomness from streams keyed
/// by `k`, so resuming reproduces the uninterrupted run bit for bit.
pub struct Trainer {
    pub model: Denoiser,
    pub optim: AdamW,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub step: u64,
    scenes: Vec<PreparedScene>,
}

pub const MODEL_CKPT: &str = "model.ckpt";
pub const OPTIM_CKPT: &str = "optim.ckpt";
pub const LOSS_LOG: &str = "loss.csv";

impl Trainer {
    pub fn new(config: TrainConfig, scenes: &[LoadedScene]) -> Result<Self> {
        let model = Denoiser::new(config.seed, config.seed);
        Self::with_model(config, scenes, model, None, 0)
    }

    fn with_model(
        config: TrainConfig,
        scenes: &[LoadedScene],
        model: Denoiser,
        optim: Option<AdamW>,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::Config("training needs at least one scene".into()));
        }
        let prepared = scenes.iter().map(|s| PreparedScene::new(s, &model)).collect();
        let optim = optim.unwrap_or_else(|| AdamW::new(config.adamw(), model.params.tensors().iter().map(Tensor::numel)));
        Ok(Self { model, optim, schedule: NoiseSchedule::default(), config, step, scenes: prepared })
    }

    /// Continues from `model.ckpt` and `optim.ckpt` in `dir`.
    pub fn resume(config: TrainConfig, scenes: &[LoadedScene], dir: &Path) -> Result<Self> {
        let (model, step) = checkpoint::load_model(&dir.join(MODEL_CKPT))?;
        let (index, tensors) = checkpoint::load(&dir.join(OPTIM_CKPT))?;
        let count = model.params.len();
        if tensors.len() != 2 * count || index.metadata.train_step != step {
            return Err(Error::Checkpoint("optimizer state does not match the model checkpoint".into()));
        }
        let mut optim = AdamW::new(config.adamw(), model.params.tensors().iter().map(Tensor::numel));
        optim.step = step;
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let expected = format!("{}.{}", if i < count { "m" } else { "v" }, model.params.names()[i % count]);
            if name != expected || t.numel() != model.params.tensors()[i % count].numel() {
                return Err(Error::Checkpoint(format!("optimizer tensor {name}, expected {expected}")));
            }
            let slot = if i < count { &mut optim.m[i] } else { &mut optim.v[i - count] };
            *slot = t.into_vec();
        }
        Self::with_model(config, scenes, model, Some(optim), step)
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let plan = StepPlan::new(&self.config, self.step, self.scenes.len(), &self.schedule);
        let bound = self.model.params.bind(true);
        let loss = training_loss(&self.model, &bound, &self.scenes, &plan, &self.schedule)?;
        loss.backward();
        let mut grads = bound.grads();
        drop(bound);
        if let Some(max) = self.config.grad_clip {
            clip_global_norm(&mut grads, max as f32);
        }
        self.optim.update(self.model.params.tensors_mut(), &grads);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: loss.value().item() as f64,
            margin: plan.margin,
            dropped: plan.draws.iter().filter(|d| d.dropped).count(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_model(&dir.join(MODEL_CKPT), &self.model, self.step)?;
        let names = self.model.params.names();
        let shapes: Vec<_> = self.model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let mut owned = Vec::with_capacity(2 * names.len());
        for (prefix, moments) in [("m", &self.optim.m), ("v", &self.optim.v)] {
            for ((name, shape), data) in names.iter().zip(&shapes).zip(moments) {
                owned.push((format!("{prefix}.{name}"), Tensor::new(shape, data.clone())));
            }
        }
        let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let meta = Metadata {
            architecture_hash: self.model.architecture_hash(),
            vocabulary: Vec::new(),
            probe_seed: self.model.probe_seed,
            train_step: self.step,
        };
        checkpoint::save(&dir.join(OPTIM_CKPT), &refs, &meta)
    }

    /// Runs until `config.total_steps`, appending to `loss.csv` and
    /// checkpointing every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, out: &Path, mut progress: impl FnMut(&StepRecord)) -> Result<PathBuf> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join(LOSS_LOG);
        let mut log = open_loss_log(&log_path, self.step)?;
        while self.step < self.config.total_steps {
            let rec = self.train_step()?;
            if !rec.loss.is_finite() {
                return Err(Error::Domain(format!("loss diverged at step {}", rec.step)));
            }
            writeln!(log, "{},{},{},{}", rec.step, rec.loss, rec.margin, rec.dropped).map_err(|e| Error::io(&log_path, e))?;
            progress(&rec);
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                self.save(out)?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        self.save(out)?;
        Ok(out.join(MODEL_CKPT))
    }
}

/// Opens the loss log for appending after `step`, dropping any rows past it.
fn open_loss_log(path: &Path, step: u64) -> Result<BufWriter<File>> {
    let header = "step,loss,margin,dropped";
    let mut kept = vec![header.to_string()];
    if step > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
                    .map(str::to_string),
            );
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Parses `loss.csv` rows into step records.
pub fn parse_loss_log(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,loss,margin,dropped") {
        return Err(Error::Format("loss log header missing".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("loss log line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [step, loss, margin, dropped] = f.as_slice() else { return Err(bad()) };
            Ok(StepRecord {
                step: step.parse().map_err(|_| bad())?,
                loss: loss.parse().map_err(|_| bad())?,
                margin: margin.parse().map_err(|_| bad())?,
                dropped: dropped.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
