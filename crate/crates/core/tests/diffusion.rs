use dreamview_core::checkpoint;
use dreamview_core::denoiser::{Denoiser, DenoiserInput};
use dreamview_core::diffusion::{
    canonical_cameras, cfg_combine, ddim_step, ddim_timesteps, parse_loss_log, predict_x0, q_sample, sample,
    sample_batch, training_loss, NoiseSchedule, PreparedScene, SampleJob, SampleSettings, StepPlan, TrainConfig,
    Trainer, LOSS_LOG, MODEL_CKPT,
};
use dreamview_core::inject::RoutingPolicy;
use dreamview_core::scenegen::{build_dataset, load_dataset, LoadedScene};
use dreamview_core::Error;
use dreamview_tensor::{ops, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

#[test]
fn schedule_identities() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 1000);
    assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    for t in 1..=1000 {
        assert!((s.alpha_bar(t) / s.alpha_bar(t - 1) - (1.0 - s.beta(t))).abs() < 1e-12);
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
    }
    // direct product over the linear betas
    let oracle: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
    assert!((s.alpha_bar(1000) - oracle).abs() < 1e-7);
    assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 1e-7, "{}", s.alpha_bar(1000));
}

#[test]
fn schedule_rejects_bad_ranges() {
    for (a, b) in [(0.0, 0.02), (0.03, 0.02), (1e-4, 1.0), (-1e-4, 0.02)] {
        assert!(matches!(NoiseSchedule::new(1000, a, b), Err(Error::Domain(_))));
    }
    assert!(matches!(NoiseSchedule::new(0, 1e-4, 0.02), Err(Error::Domain(_))));
}

#[test]
fn q_sample_cases() {
    let s = NoiseSchedule::default();
    let x0 = uniform(&[2, 3, 4, 4], 1);
    let zero = Tensor::zeros(x0.shape());
    let xt = q_sample(&x0, 300, &zero, &s).unwrap();
    let a = s.alpha_bar(300).sqrt();
    for (y, x) in xt.data().iter().zip(x0.data()) {
        assert!((y - (a * *x as f64) as f32).abs() < 1e-7);
    }
    let eps = randn(x0.shape(), 2);
    let noisy = q_sample(&x0, 1000, &eps, &s).unwrap();
    for (y, e) in noisy.data().iter().zip(eps.data()) {
        assert!((y - e).abs() < 0.02);
    }
    assert!(matches!(q_sample(&x0, 10, &randn(&[3], 1), &s), Err(Error::Shape(_))));
}

#[test]
fn q_sample_variance_monte_carlo() {
    let s = NoiseSchedule::default();
    let n = 100_000;
    let x0 = Tensor::zeros(&[n]);
    for t in [10, 250, 600, 1000] {
        let xt = q_sample(&x0, t, &randn(&[n], t as u64), &s).unwrap();
        let mean = xt.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let expected = 1.0 - s.alpha_bar(t);
        assert!((var / expected - 1.0).abs() < 0.02, "t={t}: {var} vs {expected}");
    }
}

#[test]
fn predict_x0_inverts_q_sample() {
    let s = NoiseSchedule::default();
    let x0 = uniform(&[4, 3, 8, 8], 3);
    let eps = randn(x0.shape(), 4);
    for t in [1, 50, 500, 999] {
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let back = predict_x0(&xt, &eps, t, &s).unwrap();
        let err = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-6 * (1.0 / s.alpha_bar(t).sqrt()) as f32 + 1e-6, "t={t}: {err}");
    }
    let xt = Tensor::new(&[4], vec![0.5, -0.2, 3.0, -3.0]);
    let out = predict_x0(&xt, &Tensor::zeros(&[4]), 100, &s).unwrap();
    let a = s.alpha_bar(100).sqrt();
    assert_eq!(out.data()[0], ((0.5 / a).clamp(-1.0, 1.0)) as f32);
    assert_eq!(out.data()[2], 1.0);
    assert_eq!(out.data()[3], -1.0);
}

#[test]
fn cfg_combine_cases() {
    let cond = randn(&[2, 3, 4, 4], 5);
    let uncond = randn(&[2, 3, 4, 4], 6);
    for r in [0.0, 0.5, 1.0] {
        let out = cfg_combine(&cond, &uncond, 1.0, r).unwrap();
        for (a, b) in out.data().iter().zip(cond.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let out = cfg_combine(&cond, &Tensor::zeros(cond.shape()), 7.5, 0.0).unwrap();
    for (a, b) in out.data().iter().zip(cond.data()) {
        assert!((a - 7.5 * b).abs() < 1e-5);
    }
    // cond == uncond: guided noise equals cond, so the rescale ratio is 1
    let out = cfg_combine(&cond, &cond, 3.0, 0.7).unwrap();
    for (a, b) in out.data().iter().zip(cond.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    let flat = Tensor::full(&[1, 4], 2.0);
    assert_eq!(cfg_combine(&flat, &flat, 7.5, 0.5).unwrap().data(), flat.data());
    assert!(matches!(cfg_combine(&cond, &uncond, 0.5, 0.0), Err(Error::Domain(_))));
    assert!(matches!(cfg_combine(&cond, &uncond, 2.0, 1.5), Err(Error::Domain(_))));
}

#[test]
fn cfg_rescale_matches_formula() {
    let cond = randn(&[1, 48], 7);
    let uncond = randn(&[1, 48], 8);
    let std = |v: &[f32]| {
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let plain = cfg_combine(&cond, &uncond, 7.5, 0.0).unwrap();
    let mixed = cfg_combine(&cond, &uncond, 7.5, 0.5).unwrap();
    let ratio = std(cond.data()) / std(plain.data());
    for (m, p) in mixed.data().iter().zip(plain.data()) {
        let expected = 0.5 * (*p as f64) * ratio + 0.5 * (*p as f64);
        assert!((*m as f64 - expected).abs() < 1e-5);
    }
}

#[test]
fn ddim_cases() {
    let s = NoiseSchedule::default();
    let x0 = uniform(&[2, 3, 4, 4], 9);
    let eps = randn(x0.shape(), 10);
    let xt = q_sample(&x0, 1000, &eps, &s).unwrap();
    let direct = ddim_step(&xt, &eps, 1000, 0, &s).unwrap();
    let mid = ddim_step(&xt, &eps, 1000, 500, &s).unwrap();
    let composed = ddim_step(&mid, &eps, 500, 0, &s).unwrap();
    for ((d, c), x) in direct.data().iter().zip(composed.data()).zip(x0.data()) {
        assert!((d - x).abs() < 2e-3, "{d} vs {x}");
        assert!((d - c).abs() < 2e-3);
    }
    let xt = q_sample(&x0, 400, &eps, &s).unwrap();
    let once = ddim_step(&xt, &eps, 400, 0, &s).unwrap();
    for (d, x) in once.data().iter().zip(x0.data()) {
        assert!((d - x).abs() < 1e-5);
    }
    assert_eq!(once.data(), ddim_step(&xt, &eps, 400, 0, &s).unwrap().data());
    assert!(matches!(ddim_step(&xt, &eps, 400, 400, &s), Err(Error::Domain(_))));
    assert!(matches!(ddim_step(&xt, &eps, 300, 400, &s), Err(Error::Domain(_))));
}

#[test]
fn ddim_timesteps_are_evenly_spaced() {
    let ts = ddim_timesteps(1000, 50).unwrap();
    assert_eq!(ts.len(), 51);
    assert_eq!(ts[0], 1000);
    assert_eq!(*ts.last().unwrap(), 0);
    assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
    assert!(ddim_timesteps(1000, 0).is_err());
}

fn job(seed: u64) -> SampleJob {
    SampleJob {
        overall: "a red cube with a blue square on the front".into(),
        views: [
            "a red cube with a blue square on this side".into(),
            "a red cube with a green circle on this side".into(),
            "a red cube with a white cross on this side".into(),
            "a red cube with a black triangle on this side".into(),
        ],
        seed,
    }
}

#[test]
fn sampling_is_deterministic_and_batch_independent() {
    let model = Denoiser::new(3, 4);
    let s = NoiseSchedule::default();
    let settings = SampleSettings { steps: 3, ..SampleSettings::default() };
    let a = sample(&model, &s, &job(11), &settings).unwrap();
    let b = sample(&model, &s, &job(11), &settings).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.images.len(), 4);
    assert_eq!(a.decisions.len(), 3 * 5 * 4);
    assert_ne!(a.images[0], a.images[1], "views start from independent noise");
    let batch = sample_batch(&model, &s, &[job(12), job(11)], &settings).unwrap();
    assert_eq!(batch[1].images, a.images);
    assert_eq!(batch[1].decisions, a.decisions);
    assert_ne!(batch[0].images, a.images);
}

fn tiny_dataset(n: usize) -> (tempfile::TempDir, Vec<LoadedScene>) {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(n, 5, dir.path()).unwrap();
    let (_, scenes) = load_dataset(dir.path()).unwrap();
    (dir, scenes)
}

#[test]
fn loss_is_invariant_to_view_permutation() {
    let model = Denoiser::new(1, 2);
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let (_dir, scenes) = tiny_dataset(1);
    let scene = PreparedScene::new(&scenes[0], &model);
    let s = NoiseSchedule::default();
    let config = TrainConfig { seed: 4, ..TrainConfig::default() };
    let plan = StepPlan::new(&config, 0, 1, &s);
    let bound = model.params.bind(false);
    let base = training_loss(&model, &bound, std::slice::from_ref(&scene), &plan, &s).unwrap().value().item();

    // permute images, captions, cameras and noise together
    let perm = [3, 1, 0, 2];
    let draw = &plan.draws[0];
    let chunk = 3 * 32 * 32;
    let x0 = Tensor::new(&[4 * chunk], scene.x0.clone());
    let xt = q_sample(&x0, draw.t, &Tensor::new(&[4 * chunk], draw.eps.clone()), &s).unwrap();
    let gather = |src: &[f32]| perm.iter().flat_map(|&p| src[p * chunk..(p + 1) * chunk].to_vec()).collect::<Vec<_>>();
    let x = Var::constant(Tensor::new(&[4, 3, 32, 32], gather(xt.data())));
    let cams: Vec<_> = perm.iter().map(|&p| canonical_cameras()[p]).collect();
    let conds: Vec<_> = perm.iter().map(|&p| model.text.condition_vars(&scene.overall, &scene.views[p], &bound)).collect();
    let input = DenoiserInput { x: &x, conds: &conds, cameras: &cams, timesteps: &[draw.t], views: 4 };
    let pred = model.forward(&bound, &input, RoutingPolicy::adaptive(plan.margin).unwrap(), None).unwrap();
    let permuted = ops::mse(&pred, &Tensor::new(&[4, 3, 32, 32], gather(&draw.eps))).value().item();
    assert!((base - permuted).abs() < 1e-5 * base.abs().max(1.0), "{base} vs {permuted}");

    // a perfect predictor has zero loss
    let eps = Tensor::new(&[4, 3, 32, 32], draw.eps.clone());
    assert_eq!(ops::mse(&Var::constant(eps.clone()), &eps).value().item(), 0.0);
}

#[test]
fn dropout_rate_over_five_thousand_steps() {
    let s = NoiseSchedule::default();
    let config = TrainConfig { seed: 9, ..TrainConfig::default() };
    let dropped = (0..5000).filter(|&k| StepPlan::new(&config, k, 64, &s).draws[0].dropped).count();
    let rate = dropped as f64 / 5000.0;
    assert!((rate - 0.1).abs() <= 0.02, "dropout rate {rate}");
    let plan = StepPlan::new(&config, 17, 64, &s);
    assert!((-0.1..=0.1).contains(&plan.margin));
    assert_eq!(plan, StepPlan::new(&config, 17, 64, &s));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (_data, scenes) = tiny_dataset(4);
    let config = TrainConfig { total_steps: 4, checkpoint_every: 0, seed: 2, ..TrainConfig::default() };

    let straight = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(config.clone(), &scenes).unwrap();
    let probes_before = trainer.model.probes.to_le_bytes();
    trainer.run(straight.path(), |_| {}).unwrap();
    assert_eq!(trainer.model.probes.to_le_bytes(), probes_before);

    let split = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(TrainConfig { total_steps: 2, ..config.clone() }, &scenes).unwrap();
    first.run(split.path(), |_| {}).unwrap();
    let mut second = Trainer::resume(config, &scenes, split.path()).unwrap();
    assert_eq!(second.step, 2);
    second.run(split.path(), |_| {}).unwrap();

    let log_a = std::fs::read_to_string(straight.path().join(LOSS_LOG)).unwrap();
    let log_b = std::fs::read_to_string(split.path().join(LOSS_LOG)).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(parse_loss_log(&log_a).unwrap().len(), 4);
    let bytes = |dir: &std::path::Path| std::fs::read(dir.join(MODEL_CKPT).join(checkpoint::PARAMS_FILE)).unwrap();
    assert_eq!(bytes(straight.path()), bytes(split.path()));
}

#[test]
fn loss_log_rejects_malformed_rows() {
    assert!(parse_loss_log("step,loss,margin,dropped\n1,0.5,0.01,0\n").is_ok());
    assert!(parse_loss_log("step,loss\n").is_err());
    assert!(parse_loss_log("step,loss,margin,dropped\n1,x,0,0\n").is_err());
}

#[test]
fn two_hundred_steps_reduce_loss() {
    let (_data, scenes) = tiny_dataset(64);
    let config = TrainConfig { total_steps: 200, checkpoint_every: 0, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(config, &scenes).unwrap();
    let mut losses = Vec::new();
    while trainer.step < 200 {
        losses.push(trainer.train_step().unwrap().loss);
    }
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[180..].iter().sum::<f64>() / 20.0;
    eprintln!("loss first 20 {head:.4} last 20 {tail:.4} initial {:.4}", losses[0]);
    assert!(tail <= 0.7 * losses[0], "initial {} final window {tail}", losses[0]);
}
