//! Command implementations shared by the binary and the acceptance harness.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dreamview_core::checkpoint::load_model;
use dreamview_core::denoiser::Denoiser;
use dreamview_core::diffusion::{sample, NoiseSchedule, SampleJob, Trainer, MODEL_CKPT};
use dreamview_core::evalkit::{evaluate, margin_sweep, EvalReport, SweepResult};
use dreamview_core::inject::write_decision_log;
use dreamview_core::lift3d::{optimize, LiftPrompts};
use dreamview_core::rng::splitmix64;
use dreamview_core::scenegen::{build_dataset, caption_view, load_dataset, merge_captions, scene_at, SceneSpec, SIDES};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

pub const SIDECAR: &str = "sidecar.json";
pub const REPORT: &str = "report.json";
pub const DECISIONS: &str = "decisions.jsonl";

/// Writes `sidecar.json` recording the command, its paths, the resolved config and outputs.
pub fn write_sidecar(out: &Path, command: &str, paths: Value, config: &RunConfig, outputs: Value) -> Result<()> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        command: &'a str,
        paths: Value,
        config: &'a RunConfig,
        seed: u64,
        outputs: Value,
    }
    let doc = Sidecar { command, paths, config, seed: config.seed, outputs };
    let path = out.join(SIDECAR);
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Accepts either a training output directory or the `model.ckpt` directory itself.
pub fn load_teacher(ckpt: &Path) -> Result<(Denoiser, u64)> {
    let dir = if ckpt.join(MODEL_CKPT).is_dir() { ckpt.join(MODEL_CKPT) } else { ckpt.to_path_buf() };
    load_model(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

pub fn dataset(config: &RunConfig, out: &Path) -> Result<()> {
    let manifest = build_dataset(config.scenes, config.seed, out)?;
    write_sidecar(out, "dataset", json!({ "out": out }), config, json!({ "scenes": manifest.scenes.len() }))
}

pub fn train2d(config: &RunConfig, data: &Path, out: &Path, resume: bool, mut progress: impl FnMut(u64, f64)) -> Result<()> {
    let (_, scenes) = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let tc = config.train_config();
    let mut trainer = if resume && out.join(MODEL_CKPT).is_dir() {
        Trainer::resume(tc, &scenes, out)?
    } else {
        Trainer::new(tc, &scenes)?
    };
    trainer.run(out, |r| progress(r.step, r.loss))?;
    write_sidecar(
        out,
        "train2d",
        json!({ "data": data, "out": out }),
        config,
        json!({ "checkpoint": MODEL_CKPT, "loss_log": "loss.csv", "steps": trainer.step }),
    )
}

/// View prompts in front/right/back/left order; empty ones fall back to the overall text.
pub fn prompt_views(config: &RunConfig) -> [String; 4] {
    [&config.front, &config.right, &config.back, &config.left]
        .map(|v| if v.is_empty() { config.overall.clone() } else { v.clone() })
}

pub fn sample2d(config: &RunConfig, ckpt: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    if config.overall.is_empty() {
        bail!("--overall is required");
    }
    let (model, _) = load_teacher(ckpt)?;
    let job = SampleJob { overall: config.overall.clone(), views: prompt_views(config), seed: config.seed };
    let settings = config.sample_settings()?;
    let result = sample(&model, &NoiseSchedule::default(), &job, &settings)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = Vec::new();
    for (side, img) in SIDES.iter().zip(&result.images) {
        let path = out.join(format!("job0_{side}.png"));
        img.save_png(&path)?;
        files.push(path);
    }
    let log = out.join(DECISIONS);
    write_decision_log(BufWriter::new(fs::File::create(&log)?), &result.decisions)?;
    let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    write_sidecar(
        out,
        "sample2d",
        json!({ "ckpt": ckpt, "out": out }),
        config,
        json!({
            "images": names,
            "decisions": DECISIONS,
            "prompts": { "overall": job.overall, "views": job.views },
            "policy": settings.policy.name(),
            "margin": settings.policy.margin(),
        }),
    )?;
    Ok(files)
}

pub fn lift3d(config: &RunConfig, ckpt: &Path, out: &Path, mut progress: impl FnMut(u64, f64)) -> Result<()> {
    if config.overall.is_empty() {
        bail!("--overall is required");
    }
    let (teacher, _) = load_teacher(ckpt)?;
    let prompts = LiftPrompts { overall: config.overall.clone(), views: prompt_views(config) };
    optimize(&prompts, &teacher, &config.lift_config(), out, |s| progress(s.step, s.loss))?;
    write_sidecar(
        out,
        "lift3d",
        json!({ "ckpt": ckpt, "out": out }),
        config,
        json!({ "field": "field.ckpt", "renders": "renders", "turntable": "turntable", "run": "run.json" }),
    )
}

/// Overall text naming only the body colour.
pub fn stripped_overall(scene: &SceneSpec) -> String {
    format!("a {} cube", scene.body)
}

/// Held-out prompt sets: `scenes` objects drawn from `prompt_seed`, each with `seeds` sampling seeds.
pub fn eval_jobs(config: &RunConfig, scenes: usize, seeds: usize) -> Result<Vec<SampleJob>> {
    let stripped = match config.prompt_mode.as_str() {
        "full" => false,
        "stripped" => true,
        other => bail!("prompt_mode must be \"full\" or \"stripped\", got {other:?}"),
    };
    let mut jobs = Vec::with_capacity(scenes * seeds);
    for i in 0..scenes {
        let scene = scene_at(config.prompt_seed, i);
        let overall = if stripped { stripped_overall(&scene) } else { merge_captions(&scene) };
        let views = SIDES.map(|s| caption_view(&scene, s));
        for k in 0..seeds {
            let seed = splitmix64(config.seed ^ splitmix64((i * seeds + k) as u64));
            jobs.push(SampleJob { overall: overall.clone(), views: views.clone(), seed });
        }
    }
    Ok(jobs)
}

pub fn eval(config: &RunConfig, ckpt: &Path, out: &Path, save_images: bool) -> Result<EvalReport> {
    let (model, _) = load_teacher(ckpt)?;
    let jobs = eval_jobs(config, config.eval_scenes, config.eval_seeds)?;
    let settings = config.sample_settings()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut index = 0usize;
    let mut failure = None;
    let report = evaluate(&model, &NoiseSchedule::default(), &jobs, &settings, config.eval_batch, |_, outputs| {
        for o in outputs {
            if save_images && failure.is_none() {
                for (side, img) in SIDES.iter().zip(&o.images) {
                    if let Err(e) = img.save_png(&out.join(format!("job{index}_{side}.png"))) {
                        failure = Some(e);
                    }
                }
            }
            index += 1;
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    write_json(&out.join(REPORT), &report)?;
    write_sidecar(out, "eval", json!({ "ckpt": ckpt, "out": out }), config, json!({ "report": REPORT }))?;
    Ok(report)
}

pub fn sweep(config: &RunConfig, ckpt: &Path, out: &Path, mut progress: impl FnMut(&EvalReport)) -> Result<SweepResult> {
    let (model, _) = load_teacher(ckpt)?;
    let jobs = eval_jobs(config, config.sweep_scenes, config.sweep_seeds)?;
    let base = config.sample_settings()?;
    let result =
        margin_sweep(&model, &NoiseSchedule::default(), &config.sweep_margins, &jobs, &base, config.eval_batch, |r| progress(r))?;
    result.write(out)?;
    write_sidecar(
        out,
        "sweep",
        json!({ "ckpt": ckpt, "out": out }),
        config,
        json!({ "csv": "sweep.csv", "plot": "sweep.json" }),
    )?;
    Ok(result)
}
