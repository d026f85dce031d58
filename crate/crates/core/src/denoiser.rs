//! Pixel-space U-Net `eps_theta(x_t; y, c, t)`.
//!
//! Layout (channels 32/64/128 at 32x32/16x16/8x8, two residual blocks per
//! level). Attention blocks (expanded self-attention over all views of an
//! object, then routed cross-attention) sit at 16x16 and 8x8 on the way
//! down, at the 8x8 bottleneck, and at 8x8 and 16x16 on the way up, giving
//! five routing sites numbered in that order.

use dreamview_tensor::{ops, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inject::{route, RoutingDecision, RoutingPolicy, SimilarityProbes};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::rng::{stream, Domain};
use crate::scenegen::CameraPose;
use crate::textenc::{ConditionVars, TextEncoder, MAX_TOKENS, TEXT_DIM};

pub const TIMESTEPS: usize = 1000;
pub const EMB_DIM: usize = 128;
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: [usize; 3] = [32, 64, 128];
pub const SITE_CHANNELS: [usize; 5] = [64, 128, 128, 128, 64];
const FREQ_DIM: usize = 64;
const GROUPS: usize = 8;
const GN_EPS: f32 = 1e-5;
const ARCHITECTURE: &str = "dreamview-unet-v1";

struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct SelfAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

struct CrossAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

struct AttentionBlock {
    site: usize,
    channels: usize,
    self_attn: SelfAttention,
    cross_attn: CrossAttention,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let fan_in = cin * k * k;
        let w = if zero { Tensor::zeros(&[cout, cin, k, k]) } else { fan_in_uniform(self.rng, &[cout, cin, k, k], fan_in) };
        let b = if zero { Tensor::zeros(&[cout]) } else { fan_in_uniform(self.rng, &[cout], fan_in) };
        Conv { w: self.store.add(format!("{name}.weight"), w), b: self.store.add(format!("{name}.bias"), b), stride, pad: k / 2 }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, zero: bool) -> Linear {
        let w = if zero { Tensor::zeros(&[cout, cin]) } else { fan_in_uniform(self.rng, &[cout, cin], cin) };
        let b = if zero { Tensor::zeros(&[cout]) } else { fan_in_uniform(self.rng, &[cout], cin) };
        Linear { w: self.store.add(format!("{name}.weight"), w), b: self.store.add(format!("{name}.bias"), b) }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            emb: self.linear(&format!("{name}.emb"), EMB_DIM, cout, false),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn attention(&mut self, name: &str, site: usize, c: usize) -> AttentionBlock {
        AttentionBlock {
            site,
            channels: c,
            self_attn: SelfAttention {
                norm: self.norm(&format!("{name}.self.norm"), c),
                q: self.linear(&format!("{name}.self.q"), c, c, false),
                k: self.linear(&format!("{name}.self.k"), c, c, false),
                v: self.linear(&format!("{name}.self.v"), c, c, false),
                out: self.linear(&format!("{name}.self.out"), c, c, true),
            },
            cross_attn: CrossAttention {
                norm: self.norm(&format!("{name}.cross.norm"), c),
                q: self.linear(&format!("{name}.cross.q"), c, c, false),
                k: self.linear(&format!("{name}.cross.k"), TEXT_DIM, c, false),
                v: self.linear(&format!("{name}.cross.v"), TEXT_DIM, c, false),
                out: self.linear(&format!("{name}.cross.out"), c, c, true),
            },
        }
    }
}

/// Layer structure; parameter values live in the [`ParamStore`].
pub struct UNet {
    time_fc1: Linear,
    time_fc2: Linear,
    cam_fc1: Linear,
    cam_fc2: Linear,
    context_pos: ParamId,
    conv_in: Conv,
    down0: [ResBlock; 2],
    downsample0: Conv,
    down1: [ResBlock; 2],
    attn_down1: AttentionBlock,
    downsample1: Conv,
    down2: [ResBlock; 2],
    attn_down2: AttentionBlock,
    mid: ResBlock,
    attn_mid: AttentionBlock,
    up2: [ResBlock; 2],
    attn_up2: AttentionBlock,
    upsample2: Conv,
    up1: [ResBlock; 2],
    attn_up1: AttentionBlock,
    upsample1: Conv,
    up0: [ResBlock; 2],
    norm_out: Norm,
    conv_out: Conv,
}

impl UNet {
    fn build(b: &mut Builder<'_>) -> Self {
        let [c0, c1, c2] = CHANNELS;
        UNet {
            time_fc1: b.linear("unet.time.fc1", FREQ_DIM, EMB_DIM, false),
            time_fc2: b.linear("unet.time.fc2", EMB_DIM, EMB_DIM, false),
            cam_fc1: b.linear("unet.camera.fc1", 16, EMB_DIM, false),
            cam_fc2: b.linear("unet.camera.fc2", EMB_DIM, EMB_DIM, false),
            context_pos: b.store.add("unet.context_pos", Tensor::zeros(&[2 * MAX_TOKENS, TEXT_DIM])),
            conv_in: b.conv("unet.conv_in", 3, c0, 3, 1, false),
            down0: [b.res("unet.down0.res0", c0, c0), b.res("unet.down0.res1", c0, c0)],
            downsample0: b.conv("unet.down0.downsample", c0, c0, 3, 2, false),
            down1: [b.res("unet.down1.res0", c0, c1), b.res("unet.down1.res1", c1, c1)],
            attn_down1: b.attention("unet.down1.attn", 0, c1),
            downsample1: b.conv("unet.down1.downsample", c1, c1, 3, 2, false),
            down2: [b.res("unet.down2.res0", c1, c2), b.res("unet.down2.res1", c2, c2)],
            attn_down2: b.attention("unet.down2.attn", 1, c2),
            mid: b.res("unet.mid.res", c2, c2),
            attn_mid: b.attention("unet.mid.attn", 2, c2),
            up2: [b.res("unet.up2.res0", c2, c2), b.res("unet.up2.res1", c2, c2)],
            attn_up2: b.attention("unet.up2.attn", 3, c2),
            upsample2: b.conv("unet.up2.upsample", c2, c1, 3, 1, false),
            up1: [b.res("unet.up1.res0", c1, c1), b.res("unet.up1.res1", c1, c1)],
            attn_up1: b.attention("unet.up1.attn", 4, c1),
            upsample1: b.conv("unet.up1.upsample", c1, c0, 3, 1, false),
            up0: [b.res("unet.up0.res0", c0, c0), b.res("unet.up0.res1", c0, c0)],
            norm_out: b.norm("unet.norm_out", c0),
            conv_out: b.conv("unet.conv_out", c0, 3, 3, 1, true),
        }
    }
}

/// Inputs for one denoiser evaluation over `N = groups * views` images.
pub struct DenoiserInput<'a> {
    /// `[N, 3, 32, 32]` noisy images in `[-1, 1]` scale.
    pub x: &'a Var,
    pub conds: &'a [ConditionVars],
    pub cameras: &'a [CameraPose],
    /// Noise level `t` in `1..=TIMESTEPS`, one per group.
    pub timesteps: &'a [usize],
    /// Views per object; expanded attention spans exactly one group.
    pub views: usize,
}

struct Pass<'a> {
    bound: &'a Bound,
    model: &'a Denoiser,
    conds: &'a [ConditionVars],
    timesteps: &'a [usize],
    views: usize,
    policy: RoutingPolicy,
    log: Option<&'a mut Vec<RoutingDecision>>,
}

impl Pass<'_> {
    fn p(&self, id: ParamId) -> &Var {
        self.bound.get(id)
    }

    fn conv(&self, c: &Conv, x: &Var) -> Var {
        ops::conv2d(x, self.p(c.w), self.p(c.b), c.stride, c.pad)
    }

    fn linear(&self, l: &Linear, x: &Var) -> Var {
        ops::linear(x, self.p(l.w), Some(self.p(l.b)))
    }

    fn norm(&self, n: &Norm, x: &Var) -> Var {
        ops::group_norm(x, self.p(n.gamma), self.p(n.beta), GROUPS, GN_EPS)
    }

    fn res(&self, r: &ResBlock, x: &Var, emb_act: &Var) -> Var {
        let h = self.conv(&r.conv1, &ops::silu(&self.norm(&r.norm1, x)));
        let h = ops::add_channel_bias(&h, &self.linear(&r.emb, emb_act));
        let h = self.conv(&r.conv2, &ops::silu(&self.norm(&r.norm2, &h)));
        let skip = match &r.skip {
            Some(c) => self.conv(c, x),
            None => x.clone(),
        };
        ops::add(&skip, &h)
    }

    fn attention(&mut self, a: &AttentionBlock, x: &Var) -> Result<Var> {
        let shape = x.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let groups = n / self.views;

        // expanded self-attention: all views of one object form one sequence
        let sa = &a.self_attn;
        let tokens = ops::to_tokens(&self.norm(&sa.norm, x));
        let q = ops::reshape(&self.linear(&sa.q, &tokens), &[groups, self.views * hw, c]);
        let k = ops::reshape(&self.linear(&sa.k, &tokens), &[groups, self.views * hw, c]);
        let v = ops::reshape(&self.linear(&sa.v, &tokens), &[groups, self.views * hw, c]);
        let attended = ops::reshape(&ops::attention(&q, &k, &v), &[n, hw, c]);
        let x = ops::add(x, &ops::from_tokens(&self.linear(&sa.out, &attended), h, w));

        // routed cross-attention on the feature entering this sublayer
        let probe = self.model.probes.site(a.site);
        let mut contexts = Vec::with_capacity(n);
        for (i, cond) in self.conds.iter().enumerate() {
            let feat = &x.data()[i * c * hw..(i + 1) * c * hw];
            let t = self.timesteps[i / self.views];
            let (ctx, decision) = route(feat, a.channels, cond, self.policy, probe, a.site, i % self.views, t)?;
            contexts.push(ctx);
            if let Some(log) = self.log.as_deref_mut() {
                log.push(decision);
            }
        }
        let context = ops::add_positional(&ops::stack(&contexts), self.p(self.model.net.context_pos));
        let ca = &a.cross_attn;
        let tokens = ops::to_tokens(&self.norm(&ca.norm, &x));
        let q = self.linear(&ca.q, &tokens);
        let k = self.linear(&ca.k, &context);
        let v = self.linear(&ca.v, &context);
        let attended = ops::attention(&q, &k, &v);
        Ok(ops::add(&x, &ops::from_tokens(&self.linear(&ca.out, &attended), h, w)))
    }
}

/// The full 2D model: U-Net, text encoder, and frozen similarity probes.
pub struct Denoiser {
    pub params: ParamStore,
    pub text: TextEncoder,
    pub net: UNet,
    pub probes: SimilarityProbes,
    pub probe_seed: u64,
}

/// `sin`/`cos` features of a step index at geometrically spaced frequencies.
pub fn sinusoidal_features(t: usize) -> Vec<f32> {
    let half = FREQ_DIM / 2;
    let mut out = vec![0.0; FREQ_DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

/// Flattened camera-to-world matrix looking at the origin from the unit position (up = +Z).
pub fn camera_matrix(pose: &CameraPose) -> Result<[f32; 16]> {
    let p = pose.unit_position;
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::Domain("camera position has zero norm".into()));
    }
    let p = p.map(|v| v / norm);
    let forward = p.map(|v| -v);
    let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let normalize = |v: [f64; 3]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.map(|x| x / n)
    };
    let mut right = cross(forward, [0.0, 0.0, 1.0]);
    if right.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
        right = cross(forward, [0.0, 1.0, 0.0]);
    }
    let right = normalize(right);
    let up = cross(right, forward);
    let back = p;
    let mut m = [0.0f32; 16];
    for r in 0..3 {
        m[r * 4] = right[r] as f32;
        m[r * 4 + 1] = up[r] as f32;
        m[r * 4 + 2] = back[r] as f32;
        m[r * 4 + 3] = p[r] as f32;
    }
    m[15] = 1.0;
    Ok(m)
}

impl Denoiser {
    pub fn new(init_seed: u64, probe_seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = stream(init_seed, Domain::Init, 0);
        let mut probe_rng = stream(probe_seed, Domain::Probe, 0);
        let text = TextEncoder::new(&mut params, &mut init, &mut probe_rng);
        let net = UNet::build(&mut Builder { store: &mut params, rng: &mut init });
        let probes = SimilarityProbes::new(probe_seed, &SITE_CHANNELS);
        Self { params, text, net, probes, probe_seed }
    }

    /// Replaces every parameter value; names and shapes must match this architecture.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", self.params.len(), named.len())));
        }
        for (name, tensor) in named {
            let id = self.params.id(&name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let slot = self.params.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", tensor.shape(), slot.shape())));
            }
            *slot = tensor;
        }
        Ok(())
    }

    /// Hash of the vocabulary and every `(name, shape)` pair.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(ARCHITECTURE.as_bytes());
        for token in self.text.vocab.tokens() {
            h.update(token.as_bytes());
            h.update([0]);
        }
        for (name, t) in self.params.iter() {
            h.update(format!("{name}:{:?};", t.shape()).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn time_embedding_var(&self, bound: &Bound, timesteps: &[usize]) -> Result<Var> {
        let mut feats = Vec::with_capacity(timesteps.len() * FREQ_DIM);
        for &t in timesteps {
            if t >= TIMESTEPS {
                return Err(Error::Domain(format!("timestep index {t} outside [0, {TIMESTEPS})")));
            }
            feats.extend(sinusoidal_features(t));
        }
        let x = Var::constant(Tensor::new(&[timesteps.len(), FREQ_DIM], feats));
        let net = &self.net;
        let h = ops::silu(&ops::linear(&x, bound.get(net.time_fc1.w), Some(bound.get(net.time_fc1.b))));
        Ok(ops::linear(&h, bound.get(net.time_fc2.w), Some(bound.get(net.time_fc2.b))))
    }

    fn camera_embedding_var(&self, bound: &Bound, cameras: &[CameraPose]) -> Result<Var> {
        let mut mats = Vec::with_capacity(cameras.len() * 16);
        for pose in cameras {
            mats.extend(camera_matrix(pose)?);
        }
        let x = Var::constant(Tensor::new(&[cameras.len(), 16], mats));
        let net = &self.net;
        let h = ops::silu(&ops::linear(&x, bound.get(net.cam_fc1.w), Some(bound.get(net.cam_fc1.b))));
        Ok(ops::linear(&h, bound.get(net.cam_fc2.w), Some(bound.get(net.cam_fc2.b))))
    }

    /// Timestep embedding for step index `t` in `[0, TIMESTEPS)`.
    pub fn embed_time(&self, t: usize) -> Result<Vec<f32>> {
        Ok(self.time_embedding_var(&self.params.bind(false), &[t])?.data().to_vec())
    }

    pub fn embed_camera(&self, pose: &CameraPose) -> Result<Vec<f32>> {
        Ok(self.camera_embedding_var(&self.params.bind(false), std::slice::from_ref(pose))?.data().to_vec())
    }

    /// Predicts the noise in `input.x`.
    pub fn forward(
        &self,
        bound: &Bound,
        input: &DenoiserInput<'_>,
        policy: RoutingPolicy,
        log: Option<&mut Vec<RoutingDecision>>,
    ) -> Result<Var> {
        let xs = input.x.shape();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != IMAGE_SIZE || xs[3] != IMAGE_SIZE {
            return Err(Error::Shape(format!("expected [N, 3, {IMAGE_SIZE}, {IMAGE_SIZE}], got {xs:?}")));
        }
        let n = xs[0];
        let v = input.views;
        if v == 0 || n == 0 || n % v != 0 {
            return Err(Error::Shape(format!("{n} images do not split into groups of {v} views")));
        }
        if input.conds.len() != n || input.cameras.len() != n || input.timesteps.len() != n / v {
            return Err(Error::Shape(format!(
                "{n} images with {} conditions, {} cameras, {} timesteps for {} groups",
                input.conds.len(),
                input.cameras.len(),
                input.timesteps.len(),
                n / v
            )));
        }
        let len = input.conds[0].overall.shape()[0];
        for cond in input.conds {
            for e in [&cond.overall, &cond.view] {
                if e.shape() != [len, TEXT_DIM] || len > MAX_TOKENS {
                    return Err(Error::Shape(format!("text embedding shape {:?}", e.shape())));
                }
            }
        }
        let mut per_image_t = Vec::with_capacity(n);
        for &t in input.timesteps {
            if !(1..=TIMESTEPS).contains(&t) {
                return Err(Error::Domain(format!("noise level {t} outside 1..={TIMESTEPS}")));
            }
            per_image_t.extend(std::iter::repeat_n(t - 1, v));
        }
        let temb = self.time_embedding_var(bound, &per_image_t)?;
        let cemb = self.camera_embedding_var(bound, input.cameras)?;
        let emb = ops::silu(&ops::add(&temb, &cemb));

        let net = &self.net;
        let mut pass =
            Pass { bound, model: self, conds: input.conds, timesteps: input.timesteps, views: v, policy, log };
        let h = pass.conv(&net.conv_in, input.x);
        let h = pass.res(&net.down0[0], &h, &emb);
        let skip0 = pass.res(&net.down0[1], &h, &emb);
        let h = pass.conv(&net.downsample0, &skip0);
        let h = pass.res(&net.down1[0], &h, &emb);
        let h = pass.res(&net.down1[1], &h, &emb);
        let skip1 = pass.attention(&net.attn_down1, &h)?;
        let h = pass.conv(&net.downsample1, &skip1);
        let h = pass.res(&net.down2[0], &h, &emb);
        let h = pass.res(&net.down2[1], &h, &emb);
        let skip2 = pass.attention(&net.attn_down2, &h)?;
        let h = pass.res(&net.mid, &skip2, &emb);
        let h = pass.attention(&net.attn_mid, &h)?;
        let h = ops::add(&h, &skip2);
        let h = pass.res(&net.up2[0], &h, &emb);
        let h = pass.res(&net.up2[1], &h, &emb);
        let h = pass.attention(&net.attn_up2, &h)?;
        let h = ops::upsample2x(&pass.conv(&net.upsample2, &h));
        let h = ops::add(&h, &skip1);
        let h = pass.res(&net.up1[0], &h, &emb);
        let h = pass.res(&net.up1[1], &h, &emb);
        let h = pass.attention(&net.attn_up1, &h)?;
        let h = ops::upsample2x(&pass.conv(&net.upsample1, &h));
        let h = ops::add(&h, &skip0);
        let h = pass.res(&net.up0[0], &h, &emb);
        let h = pass.res(&net.up0[1], &h, &emb);
        let h = ops::silu(&pass.norm(&net.norm_out, &h));
        Ok(pass.conv(&net.conv_out, &h))
    }

    /// Inference-only forward on plain tensors.
    pub fn predict(
        &self,
        x: &Tensor,
        conds: &[ConditionVars],
        cameras: &[CameraPose],
        timesteps: &[usize],
        views: usize,
        policy: RoutingPolicy,
        log: Option<&mut Vec<RoutingDecision>>,
    ) -> Result<Tensor> {
        let bound = self.params.bind(false);
        let x = Var::constant(x.clone());
        let input = DenoiserInput { x: &x, conds, cameras, timesteps, views };
        Ok(self.forward(&bound, &input, policy, log)?.value().clone())
    }
}
