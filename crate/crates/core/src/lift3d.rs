//! Score-distillation lifting of the multi-view teacher into a voxel radiance field.

use std::fs;
use std::path::Path;

use dreamview_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Metadata};
use crate::denoiser::{Denoiser, IMAGE_SIZE};
use crate::diffusion::{cfg_combine, predict_x0, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inject::{RoutingPolicy, INFERENCE_MARGIN};
use crate::rng::{stream, Domain};
use crate::scenegen::{CameraPose, Side, CAMERA_RADIUS};

pub const FOV_DEGREES: f64 = 45.0;
pub const SAMPLES_PER_RAY: usize = 64;
pub const FIELD_FILE: &str = "field.ckpt";
pub const RUN_FILE: &str = "run.json";
pub const TURNTABLE_FRAMES: usize = 12;
pub const EXPORT_AZIMUTHS: [u32; 4] = [90, 180, 270, 0];
const TURNTABLE_ELEVATION: f64 = 15.0;

/// Explicit grid of `n³` nodes spanning `[-0.5, 0.5]³`, stored pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    pub n: usize,
    /// Softplus gives the density.
    pub density: Vec<f64>,
    /// Channel-major `[3, n, n, n]`; sigmoid gives the colour.
    pub color: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl VoxelField {
    pub fn zeros(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("grid needs at least 2 nodes per axis, got {n}")));
        }
        Ok(Self { n, density: vec![0.0; n * n * n], color: vec![0.0; 3 * n * n * n] })
    }

    /// A soft density ball at the centre with small random colour offsets.
    pub fn init(n: usize, seed: u64) -> Result<Self> {
        let mut field = Self::zeros(n)?;
        let mut rng = stream(seed, Domain::LiftInit, 0);
        for (i, d) in field.density.iter_mut().enumerate() {
            let r = field_norm(node_position(n, i));
            *d = 6.0 * (1.0 - r / 0.5);
        }
        for c in &mut field.color {
            *c = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(field)
    }

    pub fn nodes(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn parameter_count(&self) -> usize {
        self.density.len() + self.color.len()
    }

    pub fn activated_density(&self) -> Vec<f64> {
        self.density.iter().map(|&x| softplus(x)).collect()
    }

    pub fn activated_color(&self) -> Vec<f64> {
        self.color.iter().map(|&x| sigmoid(x)).collect()
    }

    /// Flat parameter view: density first, then colour.
    pub fn param(&self, i: usize) -> f64 {
        if i < self.density.len() {
            self.density[i]
        } else {
            self.color[i - self.density.len()]
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nd = self.density.len();
        if i < nd {
            &mut self.density[i]
        } else {
            &mut self.color[i - nd]
        }
    }

    /// Saves as an f32 checkpoint directory with tensors `density` and `color`.
    pub fn save(&self, dir: &Path, step: u64) -> Result<()> {
        let n = self.n;
        let density = Tensor::new(&[n, n, n], self.density.iter().map(|&v| v as f32).collect());
        let color = Tensor::new(&[3, n, n, n], self.color.iter().map(|&v| v as f32).collect());
        let meta = Metadata {
            architecture_hash: field_hash(n),
            vocabulary: Vec::new(),
            probe_seed: 0,
            train_step: step,
        };
        checkpoint::save(dir, &[("density", &density), ("color", &color)], &meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, u64)> {
        let (index, tensors) = checkpoint::load(dir)?;
        let mut density = None;
        let mut color = None;
        for (name, t) in tensors {
            match name.as_str() {
                "density" => density = Some(t),
                "color" => color = Some(t),
                other => return Err(Error::Format(format!("unexpected field tensor {other:?}"))),
            }
        }
        let (Some(density), Some(color)) = (density, color) else {
            return Err(Error::Format("field checkpoint lacks density or color".into()));
        };
        let n = density.shape().first().copied().unwrap_or(0);
        if density.shape() != [n, n, n] || color.shape() != [3, n, n, n] || index.metadata.architecture_hash != field_hash(n)
        {
            return Err(Error::Format(format!("field shapes {:?} / {:?} do not match", density.shape(), color.shape())));
        }
        let field = Self {
            n,
            density: density.data().iter().map(|&v| v as f64).collect(),
            color: color.data().iter().map(|&v| v as f64).collect(),
        };
        Ok((field, index.metadata.train_step))
    }
}

fn field_hash(n: usize) -> String {
    hex::encode(Sha256::digest(format!("dreamview-voxel-field-v1:{n}")))
}

fn node_position(n: usize, i: usize) -> [f64; 3] {
    let step = 1.0 / (n - 1) as f64;
    let (x, y, z) = (i % n, (i / n) % n, i / (n * n));
    [x as f64 * step - 0.5, y as f64 * step - 0.5, z as f64 * step - 0.5]
}

fn field_norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Gradient with the same layout as [`VoxelField`] (with respect to pre-activation values).
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros(field: &VoxelField) -> Self {
        Self { density: vec![0.0; field.density.len()], color: vec![0.0; field.color.len()] }
    }

    pub fn get(&self, i: usize) -> f64 {
        if i < self.density.len() {
            self.density[i]
        } else {
            self.color[i - self.density.len()]
        }
    }

    pub fn norm(&self) -> f64 {
        self.density.iter().chain(&self.color).map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Closed front and back azimuth intervals; right lies strictly between them
/// and left covers the rest of the circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AzimuthIntervals {
    pub front: [f64; 2],
    pub back: [f64; 2],
}

impl Default for AzimuthIntervals {
    fn default() -> Self {
        Self { front: [10.0, 170.0], back: [190.0, 350.0] }
    }
}

impl AzimuthIntervals {
    pub fn validate(&self) -> Result<()> {
        let [f0, f1] = self.front;
        let [b0, b1] = self.back;
        if !(0.0 <= f0 && f0 <= f1 && f1 < b0 && b0 <= b1 && b1 < 360.0) {
            return Err(Error::Domain(format!("azimuth intervals {:?} / {:?} are not ordered in [0, 360)", self.front, self.back)));
        }
        Ok(())
    }

    pub fn side(&self, azimuth: f64) -> Side {
        let az = azimuth.rem_euclid(360.0);
        if (self.front[0]..=self.front[1]).contains(&az) {
            Side::Front
        } else if az > self.front[1] && az < self.back[0] {
            Side::Right
        } else if (self.back[0]..=self.back[1]).contains(&az) {
            Side::Back
        } else {
            Side::Left
        }
    }
}

/// Side whose view text applies at `azimuth` degrees under the default intervals.
pub fn view_text_for_azimuth(azimuth: f64) -> Side {
    AzimuthIntervals::default().side(azimuth)
}

/// Azimuth uniform in `[0, 360)`, elevation uniform in `[0, 30]`, fixed radius.
pub fn sample_camera(rng: &mut ChaCha8Rng) -> CameraPose {
    let azimuth = rng.random_range(0.0..360.0);
    let elevation = rng.random_range(0.0..=30.0);
    CameraPose::from_spherical(azimuth, elevation, CAMERA_RADIUS).expect("sampled pose is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftConfig {
    pub total_steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub cfg_scale: f64,
    pub rescale: f64,
    pub margin: f64,
    /// Fraction of `total_steps` over which the timestep range anneals.
    pub anneal_fraction: f64,
    /// Both bounds start here (fraction of the schedule).
    pub anneal_start: f64,
    pub anneal_min_end: f64,
    pub anneal_max_end: f64,
    pub intervals: AzimuthIntervals,
    pub grid: usize,
    /// Render resolution for the first half of the run, then the second.
    pub resolutions: [usize; 2],
    pub samples_per_ray: usize,
    pub background: f64,
    /// Orthogonal views rendered per step (1 or 4).
    pub views_per_step: usize,
    pub negative_prompt: Option<String>,
    pub seed: u64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            lr: 0.01,
            weight_decay: 0.01,
            cfg_scale: 50.0,
            rescale: 0.5,
            margin: INFERENCE_MARGIN,
            anneal_fraction: 0.8,
            anneal_start: 0.98,
            anneal_min_end: 0.02,
            anneal_max_end: 0.5,
            intervals: AzimuthIntervals::default(),
            grid: 32,
            resolutions: [16, 32],
            samples_per_ray: SAMPLES_PER_RAY,
            background: 0.5,
            views_per_step: 4,
            negative_prompt: None,
            seed: 0,
        }
    }
}

impl LiftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.anneal_fraction > 0.0 && self.anneal_fraction <= 1.0) {
            return bad(format!("anneal_fraction {} outside (0, 1]", self.anneal_fraction));
        }
        for r in self.resolutions {
            if r == 0 || IMAGE_SIZE % r != 0 {
                return bad(format!("render resolution {r} must divide {IMAGE_SIZE}"));
            }
        }
        let (s, lo, hi) = (self.anneal_start, self.anneal_min_end, self.anneal_max_end);
        if !(0.0 < lo && lo <= hi && hi <= s && s <= 1.0) {
            return bad(format!("anneal bounds start {s}, min {lo}, max {hi} must satisfy 0 < min <= max <= start <= 1"));
        }
        self.intervals.validate()?;
        if self.grid < 2 || self.samples_per_ray == 0 {
            return bad("grid and samples_per_ray must be positive".into());
        }
        if !matches!(self.views_per_step, 1 | 4) {
            return bad(format!("views_per_step must be 1 or 4, got {}", self.views_per_step));
        }
        if !(self.lr > 0.0) || self.cfg_scale < 1.0 || !(0.0..=1.0).contains(&self.rescale) {
            return bad("lr, cfg_scale or rescale out of range".into());
        }
        if !(0.0..=1.0).contains(&self.background) || !self.margin.is_finite() {
            return bad("background or margin out of range".into());
        }
        Ok(())
    }

    pub fn horizon(&self) -> u64 {
        ((self.total_steps as f64 * self.anneal_fraction).round() as u64).max(1)
    }

    pub fn resolution_at(&self, step: u64) -> usize {
        if step < self.total_steps / 2 {
            self.resolutions[0]
        } else {
            self.resolutions[1]
        }
    }
}

/// `(t_min, t_max)` as fractions of the schedule length.
pub fn anneal_timestep(step: u64, config: &LiftConfig) -> (f64, f64) {
    let p = (step as f64 / config.horizon() as f64).min(1.0);
    let s = config.anneal_start;
    (s + (config.anneal_min_end - s) * p, s + (config.anneal_max_end - s) * p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub resolution: usize,
    /// Row-major RGB in `[0, 1]`.
    pub pixels: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
}

impl RenderOutput {
    pub fn to_image(&self) -> Image {
        let mut img = Image::filled(self.resolution, self.resolution, [0.0; 3]);
        for (i, p) in self.pixels.iter().enumerate() {
            img.set_pixel(i % self.resolution, i / self.resolution, p.map(|v| v as f32));
        }
        img
    }

    pub fn mean_opacity(&self) -> f64 {
        self.opacity.iter().sum::<f64>() / self.opacity.len() as f64
    }
}

/// Compositing record of one ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayTrace {
    /// `T_i` before each sample, then `T_end` last.
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    pub delta: f64,
}

/// Pinhole camera at `pose`, looking at the origin with +Z up.
#[derive(Clone, Copy, Debug)]
struct Camera {
    origin: [f64; 3],
    forward: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    tan_half: f64,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = field_norm(v);
    v.map(|x| x / n)
}

impl Camera {
    fn new(pose: &CameraPose) -> Result<Self> {
        let origin = pose.position;
        if !(field_norm(origin) > 1e-12) {
            return Err(Error::Domain("camera at the origin".into()));
        }
        let forward = normalize(origin.map(|v| -v));
        let side = cross(forward, [0.0, 0.0, 1.0]);
        if field_norm(side) < 1e-9 {
            return Err(Error::Domain("camera looks along the up axis".into()));
        }
        let right = normalize(side);
        let up = cross(right, forward);
        Ok(Self { origin, forward, right, up, tan_half: (FOV_DEGREES / 2.0).to_radians().tan() })
    }

    fn ray(&self, px: usize, py: usize, res: usize) -> [f64; 3] {
        let sx = ((px as f64 + 0.5) / res as f64 * 2.0 - 1.0) * self.tan_half;
        let sy = (1.0 - (py as f64 + 0.5) / res as f64 * 2.0) * self.tan_half;
        normalize([0, 1, 2].map(|k| self.forward[k] + sx * self.right[k] + sy * self.up[k]))
    }
}

/// Entry and exit distances of a ray through `[-0.5, 0.5]³`.
fn box_hit(origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k].abs() > 0.5 {
                return None;
            }
            continue;
        }
        let a = (-0.5 - origin[k]) / dir[k];
        let b = (0.5 - origin[k]) / dir[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 > t0).then_some((t0, t1))
}

/// Trilinear corner indices and weights for a point inside the grid.
fn corners(n: usize, p: [f64; 3]) -> ([usize; 8], [f64; 8]) {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for k in 0..3 {
        let g = ((p[k] + 0.5) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let i = (g.floor() as usize).min(n - 2);
        base[k] = i;
        frac[k] = g - i as f64;
    }
    let mut idx = [0usize; 8];
    let mut w = [0.0f64; 8];
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        idx[c] = (base[0] + dx) + n * ((base[1] + dy) + n * (base[2] + dz));
        let pick = |d: usize, f: f64| if d == 1 { f } else { 1.0 - f };
        w[c] = pick(dx, frac[0]) * pick(dy, frac[1]) * pick(dz, frac[2]);
    }
    (idx, w)
}

struct Activated {
    sigma: Vec<f64>,
    color: Vec<f64>,
}

struct Sample {
    idx: [usize; 8],
    w: [f64; 8],
    sigma: f64,
    rgb: [f64; 3],
}

fn march(field: &VoxelField, act: &Activated, origin: [f64; 3], dir: [f64; 3], samples: usize, out: &mut Vec<Sample>) -> f64 {
    out.clear();
    let Some((t0, t1)) = box_hit(origin, dir) else { return 0.0 };
    let delta = (t1 - t0) / samples as f64;
    let nodes = field.nodes();
    for i in 0..samples {
        let t = t0 + (i as f64 + 0.5) * delta;
        let p = [0, 1, 2].map(|k| origin[k] + t * dir[k]);
        let (idx, w) = corners(field.n, p);
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for c in 0..8 {
            sigma += w[c] * act.sigma[idx[c]];
            for (ch, v) in rgb.iter_mut().enumerate() {
                *v += w[c] * act.color[ch * nodes + idx[c]];
            }
        }
        out.push(Sample { idx, w, sigma, rgb });
    }
    delta
}

/// Composites one ray; returns `(rgb, T_end)` and optionally the trace.
fn composite(samples: &[Sample], delta: f64, background: f64, trace: Option<&mut RayTrace>) -> ([f64; 3], f64) {
    let mut transmittance = 1.0;
    let mut rgb = [0.0; 3];
    let mut ts = Vec::new();
    let mut ws = Vec::new();
    for s in samples {
        let decay = (-s.sigma * delta).exp();
        let w = transmittance * (1.0 - decay);
        (0..3).for_each(|k| rgb[k] += w * s.rgb[k]);
        if trace.is_some() {
            ts.push(transmittance);
            ws.push(w);
        }
        transmittance *= decay;
    }
    (0..3).for_each(|k| rgb[k] += transmittance * background);
    if let Some(trace) = trace {
        ts.push(transmittance);
        *trace = RayTrace { transmittance: ts, weights: ws, delta };
    }
    (rgb, transmittance)
}

fn activate(field: &VoxelField) -> Activated {
    Activated { sigma: field.activated_density(), color: field.activated_color() }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution == 0 {
        return Err(Error::Domain("render resolution must be positive".into()));
    }
    Ok(())
}

/// Emission-absorption render of the field from `pose`.
pub fn render(field: &VoxelField, pose: &CameraPose, resolution: usize, samples: usize, background: f64) -> Result<RenderOutput> {
    check_resolution(resolution)?;
    let cam = Camera::new(pose)?;
    let act = activate(field);
    let mut scratch = Vec::with_capacity(samples);
    let mut pixels = Vec::with_capacity(resolution * resolution);
    let mut opacity = Vec::with_capacity(resolution * resolution);
    for py in 0..resolution {
        for px in 0..resolution {
            let delta = march(field, &act, cam.origin, cam.ray(px, py, resolution), samples, &mut scratch);
            let (rgb, t_end) = composite(&scratch, delta, background, None);
            pixels.push(rgb);
            opacity.push(1.0 - t_end);
        }
    }
    Ok(RenderOutput { resolution, pixels, opacity })
}

/// Compositing trace of pixel `(px, py)`.
pub fn trace_ray(field: &VoxelField, pose: &CameraPose, resolution: usize, samples: usize, px: usize, py: usize) -> Result<RayTrace> {
    check_resolution(resolution)?;
    let cam = Camera::new(pose)?;
    let act = activate(field);
    let mut scratch = Vec::new();
    let delta = march(field, &act, cam.origin, cam.ray(px, py, resolution), samples, &mut scratch);
    let mut trace = RayTrace::default();
    composite(&scratch, delta, 0.0, Some(&mut trace));
    Ok(trace)
}

/// Accumulates `∂L/∂field` given `∂L/∂pixel` for one render.
pub fn render_backward(
    field: &VoxelField,
    pose: &CameraPose,
    resolution: usize,
    samples: usize,
    background: f64,
    grad_pixels: &[[f64; 3]],
    grad: &mut FieldGrad,
) -> Result<()> {
    check_resolution(resolution)?;
    if grad_pixels.len() != resolution * resolution {
        return Err(Error::Shape(format!("{} pixel gradients for a {resolution}² render", grad_pixels.len())));
    }
    let cam = Camera::new(pose)?;
    let act = activate(field);
    let nodes = field.nodes();
    let mut d_sigma = vec![0.0; nodes];
    let mut d_color = vec![0.0; 3 * nodes];
    let mut scratch = Vec::with_capacity(samples);
    let mut decays = Vec::with_capacity(samples);
    let mut trans = Vec::with_capacity(samples);
    for py in 0..resolution {
        for px in 0..resolution {
            let g = grad_pixels[py * resolution + px];
            if g == [0.0; 3] {
                continue;
            }
            let delta = march(field, &act, cam.origin, cam.ray(px, py, resolution), samples, &mut scratch);
            decays.clear();
            trans.clear();
            let mut t = 1.0;
            for s in &scratch {
                let decay = (-s.sigma * delta).exp();
                trans.push(t);
                decays.push(decay);
                t *= decay;
            }
            // `behind` is g · (radiance composited after sample i, incl. background)
            let mut behind = t * (g[0] + g[1] + g[2]) * background;
            for (i, s) in scratch.iter().enumerate().rev() {
                let w = trans[i] * (1.0 - decays[i]);
                let gc = g[0] * s.rgb[0] + g[1] * s.rgb[1] + g[2] * s.rgb[2];
                let ds = delta * (trans[i] * decays[i] * gc - behind);
                behind += w * gc;
                for c in 0..8 {
                    let node = s.idx[c];
                    d_sigma[node] += s.w[c] * ds;
                    for ch in 0..3 {
                        d_color[ch * nodes + node] += s.w[c] * w * g[ch];
                    }
                }
            }
        }
    }
    for i in 0..nodes {
        grad.density[i] += d_sigma[i] * sigmoid(field.density[i]);
    }
    for i in 0..3 * nodes {
        let c = act.color[i];
        grad.color[i] += d_color[i] * c * (1.0 - c);
    }
    Ok(())
}

/// Nearest-neighbour upsampling of a render to `IMAGE_SIZE`, in `[-1, 1]` CHW.
fn to_teacher_input(render: &RenderOutput) -> Vec<f32> {
    let f = IMAGE_SIZE / render.resolution;
    let mut out = vec![0.0f32; 3 * IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let p = render.pixels[(y / f) * render.resolution + x / f];
            for ch in 0..3 {
                out[ch * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x] = (2.0 * p[ch] - 1.0) as f32;
            }
        }
    }
    out
}

/// `‖x − x̂0‖²` in the teacher's `[-1, 1]` space with `x̂0` held constant, and
/// its gradient with respect to the render pixels.
pub fn reconstruction_loss(render: &RenderOutput, x0_hat: &[f32]) -> Result<(f64, Vec<[f64; 3]>)> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    if x0_hat.len() != 3 * plane {
        return Err(Error::Shape(format!("x0 estimate has {} values, expected {}", x0_hat.len(), 3 * plane)));
    }
    let res = render.resolution;
    let f = IMAGE_SIZE / res;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; res * res];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let i = (y / f) * res + x / f;
            for ch in 0..3 {
                let diff = 2.0 * render.pixels[i][ch] - 1.0 - x0_hat[ch * plane + y * IMAGE_SIZE + x] as f64;
                loss += diff * diff;
                grad[i][ch] += 4.0 * diff;
            }
        }
    }
    Ok((loss, grad))
}

/// The five prompts of one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftPrompts {
    pub overall: String,
    /// Front, right, back, left.
    pub views: [String; 4],
}

impl LiftPrompts {
    pub fn view(&self, side: Side) -> &str {
        &self.views[side.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdsStep {
    pub loss: f64,
    pub t: usize,
    pub cameras: Vec<CameraPose>,
    pub sides: Vec<Side>,
    pub grad: FieldGrad,
}

/// Cameras for one step: a sampled pose plus its orthogonal companions.
pub fn step_cameras(config: &LiftConfig, rng: &mut ChaCha8Rng) -> Vec<CameraPose> {
    let first = sample_camera(rng);
    (0..config.views_per_step)
        .map(|k| {
            CameraPose::from_spherical(first.azimuth + 90.0 * k as f64, first.elevation, first.radius)
                .expect("rotated pose is valid")
        })
        .collect()
}

/// One score-distillation step; the teacher is only read.
pub fn sds_step(
    field: &VoxelField,
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    prompts: &LiftPrompts,
    config: &LiftConfig,
    step: u64,
) -> Result<SdsStep> {
    let mut rng = stream(config.seed, Domain::LiftStep, step);
    let cameras = step_cameras(config, &mut rng);
    let (lo, hi) = anneal_timestep(step, config);
    let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let t = ((frac * schedule.steps() as f64).round() as usize).clamp(1, schedule.steps());
    let v = cameras.len();
    let resolution = config.resolution_at(step);

    let renders = cameras
        .iter()
        .map(|pose| render(field, pose, resolution, config.samples_per_ray, config.background))
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f32> = renders.iter().flat_map(to_teacher_input).collect();
    let shape = [v, 3, IMAGE_SIZE, IMAGE_SIZE];
    let x = Tensor::new(&shape, x);
    let eps: Vec<f32> = (0..x.numel()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let xt = q_sample(&x, t, &Tensor::new(&shape, eps), schedule)?;

    let sides: Vec<Side> = cameras.iter().map(|c| config.intervals.side(c.azimuth)).collect();
    let mut conds = Vec::with_capacity(2 * v);
    for &side in &sides {
        conds.push(teacher.text.encode_pair(&prompts.overall, prompts.view(side), &teacher.params)?.to_vars());
    }
    let uncond = match &config.negative_prompt {
        Some(neg) => teacher.text.encode_pair(neg, neg, &teacher.params)?,
        None => teacher.text.null_pair(&teacher.params)?,
    }
    .to_vars();
    conds.extend(std::iter::repeat_n(uncond, v));
    let mut doubled = Vec::with_capacity(2 * xt.numel());
    doubled.extend_from_slice(xt.data());
    doubled.extend_from_slice(xt.data());
    let input = Tensor::new(&[2 * v, 3, IMAGE_SIZE, IMAGE_SIZE], doubled);
    let cams2: Vec<CameraPose> = cameras.iter().chain(&cameras).copied().collect();
    let policy = RoutingPolicy::adaptive(config.margin)?;
    let eps_hat = teacher.predict(&input, &conds, &cams2, &[t, t], v, policy, None)?;
    let half = v * 3 * IMAGE_SIZE * IMAGE_SIZE;
    let cond = Tensor::new(&shape, eps_hat.data()[..half].to_vec());
    let uncond = Tensor::new(&shape, eps_hat.data()[half..].to_vec());
    let guided = cfg_combine(&cond, &uncond, config.cfg_scale, config.rescale)?;
    let x0_hat = predict_x0(&xt, &guided, t, schedule)?;

    let mut grad = FieldGrad::zeros(field);
    let mut loss = 0.0;
    let plane = 3 * IMAGE_SIZE * IMAGE_SIZE;
    for (k, (pose, r)) in cameras.iter().zip(&renders).enumerate() {
        let (l, g) = reconstruction_loss(r, &x0_hat.data()[k * plane..(k + 1) * plane])?;
        loss += l;
        render_backward(field, pose, resolution, config.samples_per_ray, config.background, &g, &mut grad)?;
    }
    Ok(SdsStep { loss, t, cameras, sides, grad })
}

/// AdamW over the field's flat parameter vector.
#[derive(Clone, Debug)]
pub struct FieldAdam {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl FieldAdam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(field: &VoxelField) -> Self {
        let n = field.parameter_count();
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, field: &mut VoxelField, grad: &FieldGrad, lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for i in 0..field.parameter_count() {
            let g = grad.get(i);
            let p = field.param_mut(i);
            *p -= lr * weight_decay * *p;
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub t: usize,
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: LiftConfig,
    pub prompts: LiftPrompts,
    pub seed: u64,
    pub teacher_hash: String,
    pub loss_curve: Vec<StepLog>,
}

/// Renders at the interval centres (elevation 0) at the final resolution.
pub fn side_renders(field: &VoxelField, config: &LiftConfig) -> Result<Vec<(u32, RenderOutput)>> {
    EXPORT_AZIMUTHS
        .iter()
        .map(|&az| {
            let pose = CameraPose::from_spherical(az as f64, 0.0, CAMERA_RADIUS)?;
            Ok((az, render(field, &pose, IMAGE_SIZE, config.samples_per_ray, config.background)?))
        })
        .collect()
}

/// Runs the full optimization and writes every artefact into `out`.
pub fn optimize(
    prompts: &LiftPrompts,
    teacher: &Denoiser,
    config: &LiftConfig,
    out: &Path,
    mut progress: impl FnMut(&StepLog),
) -> Result<VoxelField> {
    config.validate()?;
    let schedule = NoiseSchedule::default();
    let mut field = VoxelField::init(config.grid, config.seed)?;
    let mut adam = FieldAdam::new(&field);
    let mut curve = Vec::with_capacity(config.total_steps as usize);
    for step in 0..config.total_steps {
        let s = sds_step(&field, teacher, &schedule, prompts, config, step)?;
        adam.update(&mut field, &s.grad, config.lr, config.weight_decay);
        let log = StepLog { step, loss: s.loss, t: s.t, azimuth: s.cameras[0].azimuth, elevation: s.cameras[0].elevation };
        progress(&log);
        curve.push(log);
    }
    export(&field, config, out)?;
    let record = RunRecord {
        config: config.clone(),
        prompts: prompts.clone(),
        seed: config.seed,
        teacher_hash: teacher.architecture_hash(),
        loss_curve: curve,
    };
    let path = out.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(field)
}

/// Writes `field.ckpt`, side renders and the turntable.
pub fn export(field: &VoxelField, config: &LiftConfig, out: &Path) -> Result<()> {
    let renders = out.join("renders");
    let turntable = out.join("turntable");
    for dir in [out, &renders, &turntable] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    field.save(&out.join(FIELD_FILE), config.total_steps)?;
    for (az, r) in side_renders(field, config)? {
        r.to_image().save_png(&renders.join(format!("az{az}.png")))?;
    }
    for i in 0..TURNTABLE_FRAMES {
        let az = 360.0 * i as f64 / TURNTABLE_FRAMES as f64;
        let pose = CameraPose::from_spherical(az, TURNTABLE_ELEVATION, CAMERA_RADIUS)?;
        let r = render(field, &pose, IMAGE_SIZE, config.samples_per_ray, config.background)?;
        r.to_image().save_png(&turntable.join(format!("frame_{i:02}.png")))?;
    }
    Ok(())
}
