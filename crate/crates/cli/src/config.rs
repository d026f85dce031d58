//! Run configuration: defaults, then a config file, then command-line flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dreamview_core::diffusion::{SampleSettings, TrainConfig};
use dreamview_core::inject::{RoutingPolicy, INFERENCE_MARGIN};
use dreamview_core::lift3d::{AzimuthIntervals, LiftConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub scenes: usize,

    pub overall: String,
    pub front: String,
    pub right: String,
    pub back: String,
    pub left: String,

    pub policy: String,
    pub margin: f64,
    pub cfg_scale: f64,
    pub cfg_rescale: f64,
    pub sample_steps: usize,

    pub train_steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub scenes_per_batch: usize,
    pub checkpoint_every: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,

    pub lift_steps: u64,
    pub lift_lr: f64,
    pub lift_weight_decay: f64,
    pub lift_cfg_scale: f64,
    pub lift_rescale: f64,
    pub lift_margin: f64,
    pub anneal_fraction: f64,
    pub anneal_start: f64,
    pub anneal_min_end: f64,
    pub anneal_max_end: f64,
    pub front_interval: [f64; 2],
    pub back_interval: [f64; 2],
    pub grid: usize,
    pub render_low: usize,
    pub render_high: usize,
    pub samples_per_ray: usize,
    pub background: f64,
    pub lift_views: usize,
    pub negative_prompt: String,

    pub prompt_seed: u64,
    pub eval_scenes: usize,
    pub eval_seeds: usize,
    pub eval_batch: usize,
    /// `full` or `stripped` (overall text reduced to the body colour).
    pub prompt_mode: String,
    pub sweep_margins: Vec<f64>,
    pub sweep_scenes: usize,
    pub sweep_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sample = SampleSettings::default();
        let lift = LiftConfig::default();
        Self {
            seed: 0,
            scenes: 256,
            overall: String::new(),
            front: String::new(),
            right: String::new(),
            back: String::new(),
            left: String::new(),
            policy: "adaptive".into(),
            margin: INFERENCE_MARGIN,
            cfg_scale: sample.cfg_scale,
            cfg_rescale: sample.rescale,
            sample_steps: sample.steps,
            train_steps: train.total_steps,
            lr: train.lr,
            weight_decay: train.weight_decay,
            dropout: train.dropout,
            scenes_per_batch: train.scenes_per_batch,
            checkpoint_every: train.checkpoint_every,
            grad_clip: train.grad_clip.unwrap_or(0.0),
            lift_steps: lift.total_steps,
            lift_lr: lift.lr,
            lift_weight_decay: lift.weight_decay,
            lift_cfg_scale: lift.cfg_scale,
            lift_rescale: lift.rescale,
            lift_margin: lift.margin,
            anneal_fraction: lift.anneal_fraction,
            anneal_start: lift.anneal_start,
            anneal_min_end: lift.anneal_min_end,
            anneal_max_end: lift.anneal_max_end,
            front_interval: lift.intervals.front,
            back_interval: lift.intervals.back,
            grid: lift.grid,
            render_low: lift.resolutions[0],
            render_high: lift.resolutions[1],
            samples_per_ray: lift.samples_per_ray,
            background: lift.background,
            lift_views: lift.views_per_step,
            negative_prompt: String::new(),
            prompt_seed: 1_000_003,
            eval_scenes: 32,
            eval_seeds: 8,
            eval_batch: 8,
            prompt_mode: "full".into(),
            sweep_margins: vec![-0.1, -0.05, -0.025, 0.0, 0.025, 0.05, 0.1],
            sweep_scenes: 16,
            sweep_seeds: 1,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            scenes_per_batch: self.scenes_per_batch,
            dropout: self.dropout,
            total_steps: self.train_steps,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn routing_policy(&self) -> Result<RoutingPolicy> {
        Ok(RoutingPolicy::parse(&self.policy, self.margin)?)
    }

    pub fn sample_settings(&self) -> Result<SampleSettings> {
        Ok(SampleSettings {
            policy: self.routing_policy()?,
            steps: self.sample_steps,
            cfg_scale: self.cfg_scale,
            rescale: self.cfg_rescale,
        })
    }

    pub fn lift_config(&self) -> LiftConfig {
        LiftConfig {
            total_steps: self.lift_steps,
            lr: self.lift_lr,
            weight_decay: self.lift_weight_decay,
            cfg_scale: self.lift_cfg_scale,
            rescale: self.lift_rescale,
            margin: self.lift_margin,
            anneal_fraction: self.anneal_fraction,
            anneal_start: self.anneal_start,
            anneal_min_end: self.anneal_min_end,
            anneal_max_end: self.anneal_max_end,
            intervals: AzimuthIntervals { front: self.front_interval, back: self.back_interval },
            grid: self.grid,
            resolutions: [self.render_low, self.render_high],
            samples_per_ray: self.samples_per_ray,
            background: self.background,
            views_per_step: self.lift_views,
            negative_prompt: (!self.negative_prompt.is_empty()).then(|| self.negative_prompt.clone()),
            seed: self.seed,
        }
    }
}

/// Parses a config document into raw key/value overrides.
///
/// JSON objects are taken as-is. Otherwise each non-blank line not starting
/// with `#` must be `key = value`, where the value is read as JSON when it
/// parses and as a bare string otherwise; comma-separated values are accepted
/// for list keys.
pub fn parse_config_text(text: &str) -> Result<Map<String, Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let Value::Object(mut map) = value else { bail!("config JSON must be an object") };
        // a run sidecar carries its resolved config under "config"
        if let (Some(Value::Object(inner)), Some(Value::String(_))) = (map.get("config"), map.get("command")) {
            return Ok(inner.clone());
        }
        map.remove("$comment");
        return Ok(map);
    }
    let defaults = serde_json::to_value(RunConfig::default())?;
    let mut map = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key = value", i + 1))?;
        let (key, raw) = (key.trim(), raw.trim());
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        let value = match serde_json::from_str::<Value>(raw) {
            Ok(v) => v,
            Err(_) if defaults.get(key).is_some_and(Value::is_array) => {
                let items: Result<Vec<Value>> = raw
                    .split(',')
                    .map(|s| serde_json::from_str(s.trim()).with_context(|| format!("config key {key:?}: bad list item {s:?}")))
                    .collect();
                Value::Array(items?)
            }
            Err(_) => Value::String(raw.to_string()),
        };
        if map.insert(key.to_string(), value).is_some() {
            bail!("config line {}: duplicate key {key:?}", i + 1);
        }
    }
    Ok(map)
}

/// Applies `layers` in order over the defaults, naming the offending key on error.
pub fn resolve(layers: &[Map<String, Value>]) -> Result<RunConfig> {
    let Value::Object(mut merged) = serde_json::to_value(RunConfig::default())? else { unreachable!() };
    for layer in layers {
        for (key, value) in layer {
            let Some(slot) = merged.get_mut(key) else { bail!("unknown config key {key:?}") };
            let mut probe = serde_json::to_value(RunConfig::default())?;
            probe[key] = value.clone();
            if let Err(e) = serde_json::from_value::<RunConfig>(probe) {
                bail!("config key {key:?}: {e}");
            }
            *slot = value.clone();
        }
    }
    Ok(serde_json::from_value(Value::Object(merged))?)
}

/// Defaults, then `file` (if any), then `flags`.
pub fn resolve_with_file(file: Option<&Path>, flags: Map<String, Value>) -> Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        layers.push(parse_config_text(&text).with_context(|| format!("in {}", path.display()))?);
    }
    layers.push(flags);
    resolve(&layers)
}
