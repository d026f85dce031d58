//! Pixel-domain probes standing in for CLIP scores, margin sweeps and
//! routing statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{sample_batch, NoiseSchedule, SampleJob, SampleOutput, SampleSettings};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inject::{Guidance, RoutingDecision, RoutingPolicy};
use crate::scenegen::{glyph_contains, parse_view_caption, Color, Shape, RESOLUTION};

const WINDOW_MIN: usize = 10;
const WINDOW: usize = 12;
const GLYPH_MIN: usize = 12;
const GLYPH_MAX: usize = 20;
const FACE_MIN: usize = 6;
const FACE_MAX: usize = 26;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphReading {
    pub shape: Shape,
    pub color: Color,
    /// Normalized cross-correlation of the winning template.
    pub confidence: f64,
}

/// Binary mask of `shape` over the classification window, row-major.
fn template(shape: Shape) -> Vec<f64> {
    let mut mask = vec![0.0; WINDOW * WINDOW];
    for y in 0..WINDOW {
        for x in 0..WINDOW {
            let (u, v) = ((WINDOW_MIN + x) as f32 + 0.5, (WINDOW_MIN + y) as f32 + 0.5);
            let inside_box = (GLYPH_MIN as f32..GLYPH_MAX as f32).contains(&u) && (GLYPH_MIN as f32..GLYPH_MAX as f32).contains(&v);
            if inside_box && glyph_contains(shape, u - GLYPH_MIN as f32, v - GLYPH_MIN as f32) {
                mask[y * WINDOW + x] = 1.0;
            }
        }
    }
    mask
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    let den = (va * vb).sqrt();
    if den < 1e-12 {
        0.0
    } else {
        num / den
    }
}

fn check_size(img: &Image) -> Result<()> {
    if img.width != RESOLUTION || img.height != RESOLUTION {
        return Err(Error::Shape(format!("expected {RESOLUTION}x{RESOLUTION} image, got {}x{}", img.width, img.height)));
    }
    Ok(())
}

fn mean_color(img: &Image, pixels: impl Iterator<Item = (usize, usize)>) -> [f32; 3] {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for (x, y) in pixels {
        let p = img.pixel(x, y);
        (0..3).for_each(|c| sum[c] += p[c] as f64);
        count += 1;
    }
    sum.map(|s| (s / count.max(1) as f64) as f32)
}

/// Reads the glyph at the face centre.
///
/// The shape signal is each window pixel's RGB distance from the mean colour
/// of the window's outer ring (the face body around the glyph box); the colour
/// is the nearest palette entry to the mean over the winning template's pixels.
pub fn classify_glyph(img: &Image) -> Result<GlyphReading> {
    check_size(img)?;
    let ring = (0..WINDOW * WINDOW).map(|i| (i % WINDOW, i / WINDOW)).filter(|&(x, y)| {
        let (u, v) = (WINDOW_MIN + x, WINDOW_MIN + y);
        !((GLYPH_MIN..GLYPH_MAX).contains(&u) && (GLYPH_MIN..GLYPH_MAX).contains(&v))
    });
    let ring_mean = mean_color(img, ring.map(|(x, y)| (WINDOW_MIN + x, WINDOW_MIN + y)));
    let signal: Vec<f64> = (0..WINDOW * WINDOW)
        .map(|i| {
            let p = img.pixel(WINDOW_MIN + i % WINDOW, WINDOW_MIN + i / WINDOW);
            (0..3).map(|c| ((p[c] - ring_mean[c]) as f64).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let mut best = (Shape::ALL[0], f64::NEG_INFINITY, Vec::new());
    for &shape in Shape::ALL {
        let mask = template(shape);
        let score = ncc(&signal, &mask);
        if score > best.1 {
            best = (shape, score, mask);
        }
    }
    let (shape, confidence, mask) = best;
    let inked = (0..WINDOW * WINDOW).filter(|&i| mask[i] > 0.0).map(|i| (WINDOW_MIN + i % WINDOW, WINDOW_MIN + i / WINDOW));
    Ok(GlyphReading { shape, color: Color::nearest(mean_color(img, inked)), confidence })
}

/// Nearest palette colour to the face mean outside the glyph box.
pub fn classify_body(img: &Image) -> Result<Color> {
    check_size(img)?;
    let face = (FACE_MIN..FACE_MAX)
        .flat_map(|y| (FACE_MIN..FACE_MAX).map(move |x| (x, y)))
        .filter(|&(x, y)| !((GLYPH_MIN..GLYPH_MAX).contains(&x) && (GLYPH_MIN..GLYPH_MAX).contains(&y)));
    Ok(Color::nearest(mean_color(img, face)))
}

/// Body colour named by a prompt of the form `a <color> cube ...`.
pub fn prompt_body(prompt: &str) -> Option<Color> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    match words.as_slice() {
        ["a", color, "cube", ..] => color.parse().ok(),
        _ => None,
    }
}

/// A generated 4-view set with the prompts that produced it.
#[derive(Clone, Debug)]
pub struct GeneratedSet<'a> {
    pub job: &'a SampleJob,
    pub images: &'a [Image],
}

/// Fraction of views whose glyph matches the one named in that view's prompt.
pub fn view_alignment_score(sets: &[GeneratedSet<'_>]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for set in sets {
        for (prompt, img) in set.job.views.iter().zip(set.images) {
            let (_, color, shape) = parse_view_caption(prompt)
                .ok_or_else(|| Error::Domain(format!("view prompt {prompt:?} does not name a glyph")))?;
            let reading = classify_glyph(img)?;
            hits += usize::from(reading.shape == shape && reading.color == color);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Fraction of sets whose four body colours agree with each other and with the overall prompt.
pub fn overall_consistency_score(sets: &[GeneratedSet<'_>]) -> Result<f64> {
    let mut hits = 0usize;
    for set in sets {
        let body = prompt_body(&set.job.overall)
            .ok_or_else(|| Error::Domain(format!("overall prompt {:?} does not name a body colour", set.job.overall)))?;
        let bodies = set.images.iter().map(classify_body).collect::<Result<Vec<_>>>()?;
        hits += usize::from(bodies.iter().all(|&b| b == body));
    }
    Ok(if sets.is_empty() { 0.0 } else { hits as f64 / sets.len() as f64 })
}

fn injected(d: &RoutingDecision) -> bool {
    matches!(d.chosen, Guidance::View | Guidance::Both)
}

/// View-injection rates by site and by noise-level decile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub overall_rate: f64,
    pub by_site: BTreeMap<usize, f64>,
    /// Decile `k` covers noise levels `(100k, 100(k+1)]`.
    pub by_t_decile: BTreeMap<usize, f64>,
    pub count: usize,
}

pub fn routing_stats(decisions: &[RoutingDecision]) -> RoutingStats {
    let mut by_site: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut by_decile: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut hits = 0usize;
    for d in decisions {
        let hit = usize::from(injected(d));
        hits += hit;
        let s = by_site.entry(d.site).or_default();
        s.0 += hit;
        s.1 += 1;
        let decile = (d.t.saturating_sub(1) / 100).min(9);
        let e = by_decile.entry(decile).or_default();
        e.0 += hit;
        e.1 += 1;
    }
    let rate = |(h, n): (usize, usize)| h as f64 / n as f64;
    RoutingStats {
        overall_rate: if decisions.is_empty() { 0.0 } else { hits as f64 / decisions.len() as f64 },
        by_site: by_site.into_iter().map(|(k, v)| (k, rate(v))).collect(),
        by_t_decile: by_decile.into_iter().map(|(k, v)| (k, rate(v))).collect(),
        count: decisions.len(),
    }
}

/// Spearman rank correlation (average ranks for ties); `None` if either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Scores and routing statistics for one policy over a set of jobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub margin: Option<f64>,
    pub view_alignment: f64,
    pub overall_consistency: f64,
    pub routing: RoutingStats,
    pub jobs: usize,
}

/// Samples every job (in batches of `batch` jobs) and scores the outputs.
pub fn evaluate(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    jobs: &[SampleJob],
    settings: &SampleSettings,
    batch: usize,
    mut on_batch: impl FnMut(&[SampleJob], &[SampleOutput]),
) -> Result<EvalReport> {
    let mut outputs = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(batch.max(1)) {
        let out = sample_batch(model, schedule, chunk, settings)?;
        on_batch(chunk, &out);
        outputs.extend(out);
    }
    let sets: Vec<GeneratedSet<'_>> =
        jobs.iter().zip(&outputs).map(|(job, out)| GeneratedSet { job, images: &out.images }).collect();
    let decisions: Vec<RoutingDecision> = outputs.iter().flat_map(|o| o.decisions.iter().cloned()).collect();
    Ok(EvalReport {
        policy: settings.policy.name().to_string(),
        margin: settings.policy.margin(),
        view_alignment: view_alignment_score(&sets)?,
        overall_consistency: overall_consistency_score(&sets)?,
        routing: routing_stats(&decisions),
        jobs: jobs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub margins: Vec<f64>,
    pub view_alignment: Vec<f64>,
    pub overall_consistency: Vec<f64>,
    pub mean_injection_rate: Vec<f64>,
    pub per_site_rates: Vec<BTreeMap<usize, f64>>,
}

impl SweepResult {
    pub fn alignment_trend(&self) -> Option<f64> {
        spearman(&self.view_alignment, &self.margins)
    }

    pub fn consistency_trend(&self) -> Option<f64> {
        spearman(&self.overall_consistency, &self.margins)
    }

    pub fn injection_strictly_decreasing(&self) -> bool {
        self.mean_injection_rate.windows(2).all(|w| w[1] < w[0])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("margin,view_alignment,overall_consistency,mean_injection_rate,per_site_rates\n");
        for i in 0..self.margins.len() {
            let sites = serde_json::to_string(&self.per_site_rates[i]).expect("rates serialize");
            out.push_str(&format!(
                "{},{},{},{},\"{}\"\n",
                self.margins[i],
                self.view_alignment[i],
                self.overall_consistency[i],
                self.mean_injection_rate[i],
                sites.replace('"', "\"\"")
            ));
        }
        out
    }

    /// Writes `sweep.csv` and `sweep.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("sweep.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("sweep.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// Evaluates the adaptive policy at each margin with identical jobs and seeds.
pub fn margin_sweep(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    margins: &[f64],
    jobs: &[SampleJob],
    base: &SampleSettings,
    batch: usize,
    mut progress: impl FnMut(&EvalReport),
) -> Result<SweepResult> {
    if margins.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain("sweep margins must be strictly increasing".into()));
    }
    let mut result = SweepResult {
        margins: margins.to_vec(),
        view_alignment: Vec::new(),
        overall_consistency: Vec::new(),
        mean_injection_rate: Vec::new(),
        per_site_rates: Vec::new(),
    };
    for &m in margins {
        let settings = SampleSettings { policy: RoutingPolicy::adaptive(m)?, ..*base };
        let report = evaluate(model, schedule, jobs, &settings, batch, |_, _| {})?;
        progress(&report);
        result.view_alignment.push(report.view_alignment);
        result.overall_consistency.push(report.overall_consistency);
        result.mean_injection_rate.push(report.routing.overall_rate);
        result.per_site_rates.push(report.routing.by_site);
    }
    Ok(result)
}
