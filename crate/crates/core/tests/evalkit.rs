use dreamview_core::diffusion::SampleJob;
use dreamview_core::evalkit::{
    classify_body, classify_glyph, overall_consistency_score, routing_stats, spearman, view_alignment_score,
    GeneratedSet, SweepResult,
};
use dreamview_core::image::Image;
use dreamview_core::inject::{select_guidance, Guidance, RoutingDecision};
use dreamview_core::scenegen::{
    caption_view, merge_captions, rasterize_view, scene_at, Color, Glyph, SceneSpec, Shape, Side, RESOLUTION, SIDES,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn job_for(scene: &SceneSpec) -> SampleJob {
    SampleJob { overall: merge_captions(scene), views: SIDES.map(|s| caption_view(scene, s)), seed: 0 }
}

fn noise_image(rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::filled(RESOLUTION, RESOLUTION, [0.0; 3]);
    for y in 0..RESOLUTION {
        for x in 0..RESOLUTION {
            img.set_pixel(x, y, [rng.random(), rng.random(), rng.random()]);
        }
    }
    img
}

#[test]
fn classifier_inverts_every_rendered_glyph() {
    let mut checked = 0;
    for &side in &SIDES {
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &body in Color::ALL.iter().filter(|&&b| b != color) {
                    let glyphs = SIDES.map(|s| Glyph { side: s, shape, color });
                    let scene = SceneSpec { body, glyphs };
                    let img = rasterize_view(&scene, side, RESOLUTION);
                    let reading = classify_glyph(&img).unwrap();
                    assert_eq!((reading.shape, reading.color), (shape, color), "{side} {body} body");
                    assert!((reading.confidence - 1.0).abs() < 1e-9, "confidence {}", reading.confidence);
                    assert_eq!(classify_body(&img).unwrap(), body);
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 4 * 4 * 8 * 7);
}

#[test]
fn uniform_image_still_yields_a_reading() {
    let img = Image::filled(RESOLUTION, RESOLUTION, [0.5; 3]);
    let reading = classify_glyph(&img).unwrap();
    assert!(reading.confidence.abs() < 1e-9);
    assert!(Shape::ALL.contains(&reading.shape));
}

#[test]
fn wrong_size_is_rejected() {
    let img = Image::filled(16, 16, [0.5; 3]);
    assert!(classify_glyph(&img).is_err());
    assert!(classify_body(&img).is_err());
}

#[test]
fn ground_truth_sets_score_one() {
    let scenes: Vec<SceneSpec> = (0..16).map(|i| scene_at(3, i)).collect();
    let jobs: Vec<SampleJob> = scenes.iter().map(job_for).collect();
    let images: Vec<Vec<Image>> =
        scenes.iter().map(|s| SIDES.iter().map(|&side| rasterize_view(s, side, RESOLUTION)).collect()).collect();
    let sets: Vec<GeneratedSet<'_>> =
        jobs.iter().zip(&images).map(|(job, images)| GeneratedSet { job, images }).collect();
    assert_eq!(view_alignment_score(&sets).unwrap(), 1.0);
    assert_eq!(overall_consistency_score(&sets).unwrap(), 1.0);
}

#[test]
fn random_images_score_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scenes: Vec<SceneSpec> = (0..256).map(|i| scene_at(5, i)).collect();
    let jobs: Vec<SampleJob> = scenes.iter().map(job_for).collect();
    let images: Vec<Vec<Image>> = scenes.iter().map(|_| (0..4).map(|_| noise_image(&mut rng)).collect()).collect();
    let sets: Vec<GeneratedSet<'_>> =
        jobs.iter().zip(&images).map(|(job, images)| GeneratedSet { job, images }).collect();
    let alignment = view_alignment_score(&sets).unwrap();
    assert!((alignment - 1.0 / 32.0).abs() <= 0.05, "alignment {alignment}");
}

#[test]
fn independent_random_views_rarely_agree() {
    let scenes: Vec<SceneSpec> = (0..512).map(|i| scene_at(5, i)).collect();
    let jobs: Vec<SampleJob> = scenes.iter().map(job_for).collect();
    let images: Vec<Vec<Image>> = (0..scenes.len())
        .map(|i| SIDES.iter().enumerate().map(|(k, &side)| rasterize_view(&scene_at(9, 4 * i + k), side, RESOLUTION)).collect())
        .collect();
    let sets: Vec<GeneratedSet<'_>> =
        jobs.iter().zip(&images).map(|(job, images)| GeneratedSet { job, images }).collect();
    let consistency = overall_consistency_score(&sets).unwrap();
    assert!(consistency <= 1.0 / 64.0, "consistency {consistency}");
    let alignment = view_alignment_score(&sets).unwrap();
    assert!((alignment - 1.0 / 32.0).abs() <= 0.05, "alignment {alignment}");
}

fn decision(t: usize, site: usize, sim_o: f64, sim_v: f64, margin: f64) -> RoutingDecision {
    RoutingDecision { t, site, view: 0, sim_o, sim_v, margin: Some(margin), chosen: select_guidance(sim_o, sim_v, margin) }
}

fn synthetic_log(margin: f64, seed: u64) -> Vec<RoutingDecision> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2000)
        .map(|i| decision(1 + (i * 37) % 1000, i % 5, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), margin))
        .collect()
}

#[test]
fn extreme_margins_saturate_rates() {
    for (margin, expected) in [(-10.0, 1.0), (10.0, 0.0)] {
        let stats = routing_stats(&synthetic_log(margin, 1));
        assert_eq!(stats.overall_rate, expected);
        assert_eq!(stats.by_site.len(), 5);
        assert_eq!(stats.by_t_decile.len(), 10);
        assert!(stats.by_site.values().chain(stats.by_t_decile.values()).all(|&r| r == expected));
    }
}

#[test]
fn identical_logs_give_identical_stats() {
    assert_eq!(routing_stats(&synthetic_log(0.0, 4)), routing_stats(&synthetic_log(0.0, 4)));
}

#[test]
fn deciles_split_at_hundreds() {
    let log: Vec<RoutingDecision> =
        [1, 100, 101, 1000].iter().map(|&t| decision(t, 0, 1.0, 0.0, 0.0)).collect();
    let stats = routing_stats(&log);
    assert_eq!(stats.by_t_decile.keys().copied().collect::<Vec<_>>(), vec![0, 1, 9]);
}

#[test]
fn both_counts_as_injection() {
    let mut d = decision(5, 0, 0.0, 0.0, 1.0);
    d.chosen = Guidance::Both;
    assert_eq!(routing_stats(&[d]).overall_rate, 1.0);
}

#[test]
fn spearman_matches_textbook_cases() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    // d = (0, -1, 1, 0, 0): 1 - 6*2/(5*24) = 0.9
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap();
    assert!((rho - 0.9).abs() < 1e-12);
    // ties take average ranks: [1.5, 1.5, 3] vs [1, 2, 3]
    let rho = spearman(&[0.0, 0.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((rho - 0.75f64.sqrt()).abs() < 1e-12);
}

#[test]
fn sweep_csv_has_documented_columns() {
    let sweep = SweepResult {
        margins: vec![-0.1, 0.1],
        view_alignment: vec![0.5, 0.25],
        overall_consistency: vec![0.1, 0.2],
        mean_injection_rate: vec![0.9, 0.1],
        per_site_rates: vec![[(0, 0.9)].into(), [(0, 0.1)].into()],
    };
    let csv = sweep.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("margin,view_alignment,overall_consistency,mean_injection_rate,per_site_rates"));
    assert_eq!(lines.next(), Some("-0.1,0.5,0.1,0.9,\"{\"\"0\"\":0.9}\""));
    assert!(sweep.injection_strictly_decreasing());
    assert_eq!(sweep.alignment_trend(), Some(-1.0));
    assert_eq!(sweep.consistency_trend(), Some(1.0));
    let dir = tempfile::tempdir().unwrap();
    sweep.write(dir.path()).unwrap();
    let back: SweepResult = serde_json::from_slice(&std::fs::read(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(back, sweep);
}

proptest! {
    #[test]
    fn injection_count_non_increasing_in_margin(
        sims in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..64),
        mut margins in prop::collection::vec(-0.5f64..0.5, 2..8),
    ) {
        margins.sort_by(f64::total_cmp);
        let counts: Vec<f64> = margins.iter().map(|&m| {
            let log: Vec<_> = sims.iter().enumerate().map(|(i, &(o, v))| decision(1 + i, i % 5, o, v, m)).collect();
            routing_stats(&log).overall_rate
        }).collect();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn scores_stay_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = scene_at(seed, 0);
        let job = job_for(&scene);
        let images: Vec<Image> = (0..4).map(|_| noise_image(&mut rng)).collect();
        let sets = [GeneratedSet { job: &job, images: &images }];
        let a = view_alignment_score(&sets).unwrap();
        let c = overall_consistency_score(&sets).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&c));
        let r = classify_glyph(&images[0]).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r.confidence));
    }

    #[test]
    fn glyph_reading_ignores_side(side_idx in 0usize..4, seed in any::<u64>()) {
        let scene = scene_at(seed, 1);
        let side: Side = SIDES[side_idx];
        let reading = classify_glyph(&rasterize_view(&scene, side, RESOLUTION)).unwrap();
        let g = scene.glyph(side);
        prop_assert_eq!((reading.shape, reading.color), (g.shape, g.color));
    }
}
