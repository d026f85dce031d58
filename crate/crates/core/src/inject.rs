//! Adaptive guidance injection.
//!
//! At every cross-attention site the pooled image feature is compared with
//! the class tokens of the overall and the view-specific prompt. The
//! view-specific embedding is injected when the overall prompt is already
//! the better match by more than the margin `m`; otherwise the overall
//! embedding is injected. Static baselines (fixed, alternating, and
//! concatenated contexts) share the same entry point.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use dreamview_tensor::{ops, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::textenc::{orthonormal_rows, ConditionVars, TEXT_DIM};

/// Below this norm a pooled vector is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;
pub const TRAINING_MARGIN_RANGE: (f64, f64) = (-0.1, 0.1);
pub const INFERENCE_MARGIN: f64 = -0.025;

/// Frozen per-site projections `P_b: C_b -> TEXT_DIM` with orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityProbes {
    probes: Vec<Tensor>,
}

impl SimilarityProbes {
    pub fn new(probe_seed: u64, site_channels: &[usize]) -> Self {
        let probes = site_channels
            .iter()
            .enumerate()
            .map(|(site, &c)| orthonormal_rows(&mut stream(probe_seed, Domain::Probe, 1 + site as u64), TEXT_DIM, c))
            .collect();
        Self { probes }
    }

    pub fn site(&self, site: usize) -> &Tensor {
        &self.probes[site]
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.probes.iter().flat_map(Tensor::to_le_bytes).collect()
    }
}

/// Spatial mean of a `C x (h*w)` feature map.
pub fn global_average_pool(feat: &[f32], channels: usize) -> Vec<f32> {
    let hw = feat.len() / channels;
    feat.chunks_exact(hw).map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `cos(P_b * GAP(feat), cls)`; zero when either vector is degenerate.
///
/// `feat` is one view's `C x (h*w)` map with `C` equal to the probe's input width.
pub fn pooled_similarity(feat: &[f32], channels: usize, cls: &[f32], probe: &Tensor) -> Result<f64> {
    let (rows, cols) = (probe.shape()[0], probe.shape()[1]);
    if channels != cols || channels == 0 || feat.len() % channels != 0 || feat.is_empty() {
        return Err(Error::Shape(format!("feature with {channels} channels vs probe {:?}", probe.shape())));
    }
    if cls.len() != rows {
        return Err(Error::Shape(format!("class token width {} vs probe {:?}", cls.len(), probe.shape())));
    }
    let pooled = global_average_pool(feat, channels);
    let p = probe.data();
    let projected: Vec<f64> =
        (0..rows).map(|r| (0..cols).map(|c| p[r * cols + c] as f64 * pooled[c] as f64).sum()).collect();
    let cls: Vec<f64> = cls.iter().map(|&v| v as f64).collect();
    Ok(cosine(&projected, &cls))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    Overall,
    View,
    Both,
}

/// View guidance iff `sim_o - sim_v > margin` (strict).
pub fn select_guidance(sim_o: f64, sim_v: f64, margin: f64) -> Guidance {
    if sim_o - sim_v > margin {
        Guidance::View
    } else {
        Guidance::Overall
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RoutingPolicy {
    Adaptive { margin: f64 },
    OverallOnly,
    ViewOnly,
    /// View guidance at odd site indices, overall at even ones.
    Alternate,
    /// Overall and view tokens concatenated into one context.
    Concatenate,
}

impl RoutingPolicy {
    pub fn adaptive(margin: f64) -> Result<Self> {
        if !margin.is_finite() {
            return Err(Error::Domain(format!("margin must be finite, got {margin}")));
        }
        Ok(Self::Adaptive { margin })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Adaptive { .. } => "adaptive",
            Self::OverallOnly => "overall_only",
            Self::ViewOnly => "view_only",
            Self::Alternate => "alternate",
            Self::Concatenate => "concatenate",
        }
    }

    pub fn margin(&self) -> Option<f64> {
        match self {
            Self::Adaptive { margin } => Some(*margin),
            _ => None,
        }
    }

    /// Parses a policy kind; `margin` is only used by `adaptive`.
    pub fn parse(kind: &str, margin: f64) -> Result<Self> {
        match kind {
            "adaptive" => Self::adaptive(margin),
            "overall_only" => Ok(Self::OverallOnly),
            "view_only" => Ok(Self::ViewOnly),
            "alternate" => Ok(Self::Alternate),
            "concatenate" => Ok(Self::Concatenate),
            other => Err(Error::Domain(format!("unknown routing policy {other:?}"))),
        }
    }

    /// Context length the policy produces from `tokens`-long embeddings.
    pub fn context_len(&self, tokens: usize) -> usize {
        match self {
            Self::Concatenate => 2 * tokens,
            _ => tokens,
        }
    }
}

impl fmt::Display for RoutingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Adaptive { margin } => write!(f, "adaptive(m={margin})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for RoutingPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, INFERENCE_MARGIN)
    }
}

/// One routing choice at one site for one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingDecision {
    pub t: usize,
    pub site: usize,
    pub view: usize,
    pub sim_o: f64,
    pub sim_v: f64,
    pub margin: Option<f64>,
    pub chosen: Guidance,
}

impl RoutingDecision {
    /// The recorded choice agrees with the threshold rule under its margin.
    pub fn is_sound(&self) -> bool {
        match (self.margin, self.chosen) {
            (Some(m), Guidance::View) => self.sim_o - self.sim_v > m,
            (Some(m), Guidance::Overall) => self.sim_o - self.sim_v <= m,
            (Some(_), Guidance::Both) => false,
            (None, _) => true,
        }
    }
}

/// Chooses the cross-attention context for one view at one site.
///
/// `feat` is the view's `C x (h*w)` feature entering the cross-attention sublayer.
pub fn route(
    feat: &[f32],
    channels: usize,
    cond: &ConditionVars,
    policy: RoutingPolicy,
    probe: &Tensor,
    site: usize,
    view: usize,
    t: usize,
) -> Result<(Var, RoutingDecision)> {
    let sim_o = pooled_similarity(feat, channels, &cond.cls_overall, probe)?;
    let sim_v = pooled_similarity(feat, channels, &cond.cls_view, probe)?;
    let chosen = match policy {
        RoutingPolicy::Adaptive { margin } => {
            if !margin.is_finite() {
                return Err(Error::Domain(format!("margin must be finite, got {margin}")));
            }
            select_guidance(sim_o, sim_v, margin)
        }
        RoutingPolicy::OverallOnly => Guidance::Overall,
        RoutingPolicy::ViewOnly => Guidance::View,
        RoutingPolicy::Alternate if site % 2 == 1 => Guidance::View,
        RoutingPolicy::Alternate => Guidance::Overall,
        RoutingPolicy::Concatenate => Guidance::Both,
    };
    let context = match chosen {
        Guidance::Overall => cond.overall.clone(),
        Guidance::View => cond.view.clone(),
        Guidance::Both => ops::concat(&[cond.overall.clone(), cond.view.clone()]),
    };
    let decision = RoutingDecision { t, site, view, sim_o, sim_v, margin: policy.margin(), chosen };
    Ok((context, decision))
}

/// Uniform margin in [`TRAINING_MARGIN_RANGE`], drawn once per iteration.
pub fn sample_training_margin<R: Rng>(rng: &mut R) -> f64 {
    let (lo, hi) = TRAINING_MARGIN_RANGE;
    rng.random_range(lo..=hi)
}

/// Writes one JSON object per line.
pub fn write_decision_log<W: Write>(mut out: W, decisions: &[RoutingDecision]) -> std::io::Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a decision log; blank lines are skipped, errors name the 1-based line.
pub fn parse_decision_log(text: &str) -> Result<Vec<RoutingDecision>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: RoutingDecision =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("decision log line {}: {e}", i + 1)))?;
        if !(d.sim_o.is_finite() && d.sim_v.is_finite()) || d.margin.is_some_and(|m| !m.is_finite()) {
            return Err(Error::Format(format!("decision log line {}: non-finite value", i + 1)));
        }
        out.push(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{prop_assert, proptest};

    fn probe(c: usize) -> Tensor {
        SimilarityProbes::new(11, &[c]).site(0).clone()
    }

    fn cond(cls_o: Vec<f32>, cls_v: Vec<f32>) -> ConditionVars {
        ConditionVars {
            overall: Var::constant(Tensor::full(&[48, TEXT_DIM], 1.0)),
            view: Var::constant(Tensor::full(&[48, TEXT_DIM], 2.0)),
            cls_overall: cls_o,
            cls_view: cls_v,
        }
    }

    fn feature(c: usize, hw: usize, seed: u64) -> Vec<f32> {
        let mut r = stream(seed, Domain::Eval, 0);
        (0..c * hw).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn project(p: &Tensor, v: &[f32]) -> Vec<f32> {
        let (rows, cols) = (p.shape()[0], p.shape()[1]);
        (0..rows).map(|r| (0..cols).map(|c| p.data()[r * cols + c] * v[c]).sum()).collect()
    }

    #[test]
    fn probes_are_orthonormal_and_seeded() {
        let probes = SimilarityProbes::new(3, &[64, 128, 128, 128, 64]);
        for site in 0..probes.len() {
            let p = probes.site(site);
            let (r, c) = (p.shape()[0], p.shape()[1]);
            for i in 0..r {
                for j in 0..r {
                    let dot: f32 = (0..c).map(|k| p.data()[i * c + k] * p.data()[j * c + k]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
                }
            }
        }
        assert_eq!(probes, SimilarityProbes::new(3, &[64, 128, 128, 128, 64]));
        assert_ne!(probes, SimilarityProbes::new(4, &[64, 128, 128, 128, 64]));
    }

    #[test]
    fn similarity_examples() {
        let p = probe(128);
        let zero = vec![0.0f32; 128 * 16];
        assert_eq!(pooled_similarity(&zero, 128, &[1.0; TEXT_DIM], &p).unwrap(), 0.0);
        let feat = feature(128, 16, 1);
        let cls = project(&p, &global_average_pool(&feat, 128)).iter().map(|v| v * 3.0).collect::<Vec<_>>();
        assert!((pooled_similarity(&feat, 128, &cls, &p).unwrap() - 1.0).abs() < 1e-6);
        let other: Vec<f32> = (0..TEXT_DIM).map(|i| (i as f32).sin()).collect();
        let neg: Vec<f32> = other.iter().map(|v| -v).collect();
        let s = pooled_similarity(&feat, 128, &other, &p).unwrap();
        assert_eq!(pooled_similarity(&feat, 128, &neg, &p).unwrap(), -s);
        assert!(matches!(pooled_similarity(&feat, 64, &other, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(select_guidance(0.5, 0.3, -0.025), Guidance::View);
        assert_eq!(select_guidance(0.5, 0.3, 0.25), Guidance::Overall);
        assert_eq!(select_guidance(0.4, 0.4, 0.0), Guidance::Overall);
    }

    #[test]
    fn route_policies() {
        let p = probe(64);
        let feat = feature(64, 64, 2);
        let c = cond((0..64).map(|i| i as f32).collect(), (0..64).map(|i| -(i as f32)).collect());
        for site in 0..5 {
            let (ctx, d) = route(&feat, 64, &c, RoutingPolicy::Adaptive { margin: 10.0 }, &p, site, 0, 1).unwrap();
            assert_eq!(d.chosen, Guidance::Overall);
            assert!(ctx.ptr_eq(&c.overall));
            let (ctx, d) = route(&feat, 64, &c, RoutingPolicy::Adaptive { margin: -10.0 }, &p, site, 0, 1).unwrap();
            assert_eq!(d.chosen, Guidance::View);
            assert!(ctx.ptr_eq(&c.view));
            let (_, d) = route(&feat, 64, &c, RoutingPolicy::Alternate, &p, site, 0, 1).unwrap();
            assert_eq!(d.chosen, if site % 2 == 1 { Guidance::View } else { Guidance::Overall });
        }
        let (ctx, d) = route(&feat, 64, &c, RoutingPolicy::Concatenate, &p, 0, 0, 1).unwrap();
        assert_eq!(ctx.shape(), [96, TEXT_DIM]);
        assert_eq!(d.chosen, Guidance::Both);
        assert!(route(&feat, 64, &c, RoutingPolicy::Adaptive { margin: f64::NAN }, &p, 0, 0, 1).is_err());
        assert!(RoutingPolicy::parse("sometimes", 0.0).is_err());
        assert_eq!("view_only".parse::<RoutingPolicy>().unwrap(), RoutingPolicy::ViewOnly);
    }

    #[test]
    fn training_margins() {
        let mut rng = stream(5, Domain::Margin, 0);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_training_margin(&mut rng)).collect();
        assert!(draws.iter().all(|m| (-0.1..=0.1).contains(m)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.003, "mean {mean}");
        let mut again = stream(5, Domain::Margin, 0);
        assert!(draws[..10].iter().all(|&m| m == sample_training_margin(&mut again)));
    }

    #[test]
    fn decision_log_roundtrip_and_errors() {
        let d = RoutingDecision { t: 3, site: 1, view: 2, sim_o: 0.2, sim_v: -0.1, margin: Some(-0.025), chosen: Guidance::View };
        let mut buf = Vec::new();
        write_decision_log(&mut buf, &[d.clone(), d.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(parse_decision_log(&text).unwrap(), vec![d.clone(), d]);
        let err = parse_decision_log(&format!("{text}{{\"t\": 1}}\n")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    proptest! {
        #[test]
        fn view_count_is_monotone_in_margin(seed in 0u64..500, m1 in -1.0f64..1.0, dm in 0.0f64..1.0) {
            let p = probe(64);
            let feats: Vec<Vec<f32>> = (0..5).map(|s| feature(64, 16, seed * 7 + s)).collect();
            let mut r = stream(seed, Domain::Eval, 9);
            let c = cond((0..64).map(|_| r.random_range(-1.0..1.0)).collect(), (0..64).map(|_| r.random_range(-1.0..1.0)).collect());
            let count = |m: f64| feats.iter().enumerate().filter(|(site, f)| {
                let (_, d) = route(f, 64, &c, RoutingPolicy::Adaptive { margin: m }, &p, *site, 0, 0).unwrap();
                assert!(d.is_sound());
                d.chosen == Guidance::View
            }).count();
            prop_assert!(count(m1 + dm) <= count(m1));
        }

        #[test]
        fn similarity_is_bounded(seed in 0u64..1000) {
            let p = probe(64);
            let f = feature(64, 4, seed);
            let mut r = stream(seed, Domain::Eval, 1);
            let cls: Vec<f32> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
            let s = pooled_similarity(&f, 64, &cls, &p).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
