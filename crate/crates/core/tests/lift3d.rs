use dreamview_core::denoiser::{Denoiser, IMAGE_SIZE};
use dreamview_core::diffusion::NoiseSchedule;
use dreamview_core::lift3d::{
    anneal_timestep, optimize, reconstruction_loss, render, render_backward, sample_camera, sds_step, trace_ray,
    view_text_for_azimuth, FieldGrad, LiftConfig, LiftPrompts, VoxelField, FIELD_FILE,
};
use dreamview_core::rng::{stream, Domain};
use dreamview_core::scenegen::{CameraPose, Side};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pose(az: f64, el: f64) -> CameraPose {
    CameraPose::from_spherical(az, el, 2.0).unwrap()
}

fn random_field(n: usize, seed: u64) -> VoxelField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = VoxelField::zeros(n).unwrap();
    f.density.iter_mut().for_each(|d| *d = rng.random_range(-1.0..2.5));
    f.color.iter_mut().for_each(|c| *c = rng.random_range(-2.0..2.0));
    f
}

/// Pre-activation value whose softplus is `sigma`.
fn inv_softplus(sigma: f64) -> f64 {
    sigma.exp_m1().ln()
}

#[test]
fn azimuth_intervals_match_quoted_bounds() {
    let cases = [
        (90.0, Side::Front),
        (180.0, Side::Right),
        (270.0, Side::Back),
        (0.0, Side::Left),
        (10.0, Side::Front),
        (170.0, Side::Front),
        (190.0, Side::Back),
        (350.0, Side::Back),
        (5.0, Side::Left),
        (355.0, Side::Left),
        (170.0001, Side::Right),
        (189.9999, Side::Right),
        (9.9999, Side::Left),
        (350.0001, Side::Left),
        (360.0, Side::Left),
        (-270.0, Side::Front),
    ];
    for (az, side) in cases {
        assert_eq!(view_text_for_azimuth(az), side, "azimuth {az}");
    }
}

#[test]
fn sampled_cameras_cover_intervals_by_measure() {
    let mut rng = stream(3, Domain::LiftStep, 0);
    let n = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let p = sample_camera(&mut rng);
        assert!((0.0..=30.0).contains(&p.elevation));
        assert!((0.0..360.0).contains(&p.azimuth));
        assert!((p.radius - 2.0).abs() < 1e-12);
        counts[view_text_for_azimuth(p.azimuth).index()] += 1;
    }
    let expect = [160.0, 20.0, 160.0, 20.0].map(|m| m / 360.0);
    for (side, &c) in counts.iter().enumerate() {
        let freq = c as f64 / n as f64;
        assert!((freq - expect[side]).abs() < 0.02, "side {side}: {freq}");
    }
    let a: Vec<_> = (0..5).map(|_| 0).scan(stream(9, Domain::LiftStep, 4), |r, _| Some(sample_camera(r))).collect();
    let b: Vec<_> = (0..5).map(|_| 0).scan(stream(9, Domain::LiftStep, 4), |r, _| Some(sample_camera(r))).collect();
    assert_eq!(a, b);
}

#[test]
fn anneal_endpoints() {
    let config = LiftConfig::default();
    assert_eq!(config.horizon(), 800);
    let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
    assert!(close(anneal_timestep(0, &config), (0.98, 0.98)));
    assert!(close(anneal_timestep(800, &config), (0.02, 0.5)));
    assert!(close(anneal_timestep(400, &config), (0.5, 0.74)));
    assert!(close(anneal_timestep(999, &config), (0.02, 0.5)));
    assert_eq!(config.resolution_at(499), 16);
    assert_eq!(config.resolution_at(500), 32);
}

#[test]
fn empty_field_renders_background() {
    let mut f = VoxelField::zeros(8).unwrap();
    f.density.iter_mut().for_each(|d| *d = -1000.0);
    let out = render(&f, &pose(37.0, 12.0), 8, 64, 0.5).unwrap();
    assert!(out.pixels.iter().all(|p| *p == [0.5; 3]));
    assert!(out.opacity.iter().all(|&o| o == 0.0));
}

#[test]
fn two_segment_ray_matches_closed_form() {
    let sigma = 1.7;
    let mut f = VoxelField::zeros(4).unwrap();
    f.density.iter_mut().for_each(|d| *d = inv_softplus(sigma));
    let trace = trace_ray(&f, &pose(90.0, 0.0), 1, 2, 0, 0).unwrap();
    // the centre ray crosses the unit cube head-on
    assert!((trace.delta - 0.5).abs() < 1e-12);
    let e = (-sigma * trace.delta).exp();
    assert!((trace.weights[0] - (1.0 - e)).abs() < 1e-12);
    assert!((trace.weights[1] - e * (1.0 - e)).abs() < 1e-12);
}

#[test]
fn opaque_limit_shows_surface_colour() {
    let mut f = VoxelField::zeros(4).unwrap();
    f.density.iter_mut().for_each(|d| *d = 200.0);
    let logits = [1.0, -0.5, 0.25];
    for ch in 0..3 {
        f.color[ch * 64..(ch + 1) * 64].iter_mut().for_each(|c| *c = logits[ch]);
    }
    let out = render(&f, &pose(90.0, 0.0), 1, 64, 0.5).unwrap();
    for ch in 0..3 {
        let c = 1.0 / (1.0 + (-logits[ch]).exp());
        assert!((out.pixels[0][ch] - c).abs() < 1e-12);
    }
    assert!((out.opacity[0] - 1.0).abs() < 1e-12);
}

#[test]
fn render_gradient_matches_central_differences() {
    let field = random_field(8, 5);
    let cam = pose(63.0, 21.0);
    let (res, samples, bg) = (4, 64, 0.5);
    let loss = |f: &VoxelField| -> f64 {
        render(f, &cam, res, samples, bg).unwrap().pixels.iter().flat_map(|p| p.iter()).map(|v| v * v).sum()
    };
    let out = render(&field, &cam, res, samples, bg).unwrap();
    let upstream: Vec<[f64; 3]> = out.pixels.iter().map(|p| p.map(|v| 2.0 * v)).collect();
    let mut grad = FieldGrad::zeros(&field);
    render_backward(&field, &cam, res, samples, bg, &upstream, &mut grad).unwrap();

    // half the checks on parameters the rays actually touch
    let touched: Vec<usize> = (0..field.parameter_count()).filter(|&i| grad.get(i).abs() > 1e-8).collect();
    assert!(touched.len() > 100);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut picks: Vec<usize> = (0..30).map(|_| touched[rng.random_range(0..touched.len())]).collect();
    picks.extend((0..30).map(|_| rng.random_range(0..field.parameter_count())));
    let h = 1e-4;
    for i in picks {
        let mut plus = field.clone();
        *plus.param_mut(i) += h;
        let mut minus = field.clone();
        *minus.param_mut(i) -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = grad.get(i);
        let scale = analytic.abs().max(numeric.abs());
        assert!(
            (analytic - numeric).abs() <= 1e-3 * scale || scale < 1e-9,
            "param {i}: analytic {analytic} numeric {numeric}"
        );
    }
}

#[test]
fn reconstruction_gradient_matches_central_differences() {
    let field = random_field(8, 8);
    let cam = pose(200.0, 10.0);
    let (res, samples, bg) = (4, 32, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target: Vec<f32> = (0..3 * IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |f: &VoxelField| reconstruction_loss(&render(f, &cam, res, samples, bg).unwrap(), &target).unwrap().0;
    let (_, upstream) = reconstruction_loss(&render(&field, &cam, res, samples, bg).unwrap(), &target).unwrap();
    let mut grad = FieldGrad::zeros(&field);
    render_backward(&field, &cam, res, samples, bg, &upstream, &mut grad).unwrap();
    let touched: Vec<usize> = (0..field.parameter_count()).filter(|&i| grad.get(i).abs() > 1e-6).collect();
    let h = 1e-4;
    for k in 0..50 {
        let i = touched[(k * 7919) % touched.len()];
        let mut plus = field.clone();
        *plus.param_mut(i) += h;
        let mut minus = field.clone();
        *minus.param_mut(i) -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = grad.get(i);
        assert!((analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()), "param {i}: {analytic} vs {numeric}");
    }
}

#[test]
fn matching_estimate_gives_zero_loss_and_gradient() {
    let field = random_field(8, 2);
    let cam = pose(120.0, 5.0);
    let out = render(&field, &cam, 16, 32, 0.5).unwrap();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut x = vec![0.0f32; 3 * plane];
    for y in 0..IMAGE_SIZE {
        for xx in 0..IMAGE_SIZE {
            let p = out.pixels[(y / 2) * 16 + xx / 2];
            (0..3).for_each(|ch| x[ch * plane + y * IMAGE_SIZE + xx] = (2.0 * p[ch] - 1.0) as f32);
        }
    }
    let (loss, g) = reconstruction_loss(&out, &x).unwrap();
    assert!(loss < 1e-10, "loss {loss}");
    let mut grad = FieldGrad::zeros(&field);
    render_backward(&field, &cam, 16, 32, 0.5, &g, &mut grad).unwrap();
    assert!(grad.norm() < 1e-5, "gradient norm {}", grad.norm());
}

#[test]
fn invalid_render_requests_fail() {
    let f = VoxelField::zeros(4).unwrap();
    assert!(render(&f, &pose(0.0, 0.0), 0, 8, 0.5).is_err());
    assert!(VoxelField::zeros(1).is_err());
    let up = CameraPose::from_spherical(0.0, 90.0, 2.0).unwrap();
    assert!(render(&f, &up, 4, 8, 0.5).is_err());
    let mut grad = FieldGrad::zeros(&f);
    assert!(render_backward(&f, &pose(0.0, 0.0), 4, 8, 0.5, &[[0.0; 3]; 3], &mut grad).is_err());
}

fn small_config() -> LiftConfig {
    LiftConfig { total_steps: 4, grid: 8, resolutions: [8, 16], samples_per_ray: 16, seed: 5, ..LiftConfig::default() }
}

fn prompts() -> LiftPrompts {
    LiftPrompts {
        overall: "a red cube with a blue square on the front and a green circle on the right and a white cross on the back and a yellow triangle on the left".into(),
        views: [
            "a red cube with a blue square on this side".into(),
            "a red cube with a green circle on this side".into(),
            "a red cube with a white cross on this side".into(),
            "a red cube with a yellow triangle on this side".into(),
        ],
    }
}

fn teacher_bytes(m: &Denoiser) -> Vec<u8> {
    let mut out: Vec<u8> = m.params.tensors().iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect();
    out.extend(m.probes.to_le_bytes());
    out
}

#[test]
fn teacher_is_untouched_by_distillation() {
    let teacher = Denoiser::new(1, 1);
    let before = teacher_bytes(&teacher);
    let schedule = NoiseSchedule::default();
    let config = LiftConfig { total_steps: 100, resolutions: [8, 8], ..small_config() };
    let mut field = VoxelField::init(config.grid, config.seed).unwrap();
    let mut adam = dreamview_core::lift3d::FieldAdam::new(&field);
    for step in 0..100 {
        let s = sds_step(&field, &teacher, &schedule, &prompts(), &config, step).unwrap();
        assert!(s.loss.is_finite());
        assert_eq!(s.cameras.len(), 4);
        assert_eq!(s.sides, s.cameras.iter().map(|c| view_text_for_azimuth(c.azimuth)).collect::<Vec<_>>());
        adam.update(&mut field, &s.grad, config.lr, config.weight_decay);
    }
    assert_eq!(teacher_bytes(&teacher), before);
}

#[test]
fn optimization_is_deterministic_and_exports_artifacts() {
    let teacher = Denoiser::new(2, 2);
    let config = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = optimize(&prompts(), &teacher, &config, a.path(), |_| {}).unwrap();
    let fb = optimize(&prompts(), &teacher, &config, b.path(), |_| {}).unwrap();
    assert_eq!(fa, fb);
    for rel in ["run.json", "renders/az90.png", "renders/az0.png", "turntable/frame_00.png", "turntable/frame_11.png"] {
        let (x, y) = (std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        assert_eq!(x, y, "{rel}");
    }
    let (loaded, step) = VoxelField::load(&a.path().join(FIELD_FILE)).unwrap();
    assert_eq!(step, 4);
    assert!(loaded.density.iter().zip(&fa.density).all(|(l, f)| *l == (*f as f32) as f64));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transmittance_is_monotone_and_weights_sum(seed in any::<u64>(), az in 0.0f64..360.0, el in 0.0f64..30.0, px in 0usize..6, py in 0usize..6) {
        let f = random_field(8, seed);
        let trace = trace_ray(&f, &pose(az, el), 6, 64, px, py).unwrap();
        let t = &trace.transmittance;
        prop_assert!(t.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let t_end = t.last().copied().unwrap_or(1.0);
        let total: f64 = trace.weights.iter().sum();
        prop_assert!((total - (1.0 - t_end)).abs() < 1e-10);
    }

    #[test]
    fn render_stays_in_range(seed in any::<u64>(), az in 0.0f64..360.0) {
        let f = random_field(6, seed);
        let out = render(&f, &pose(az, 15.0), 5, 24, 0.5).unwrap();
        for (p, o) in out.pixels.iter().zip(&out.opacity) {
            prop_assert!((0.0..=1.0).contains(o));
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn view_selection_is_periodic(az in -720.0f64..720.0) {
        prop_assert_eq!(view_text_for_azimuth(az), view_text_for_azimuth(az + 360.0));
    }
}
