//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Failing criteria are reported
//! but only turn into a non-zero exit status when `ACCEPTANCE_STRICT` is set.
//! `ACCEPTANCE_ONLY=1,5,7` restricts the run to the listed criteria.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use handpose::cli::{bench_patch, run, Cli};
use handpose::data::{synth_frames, SynthConfig};
use handpose::engine::ops::{conv2d_backward, fully_connected_backward, maxpool2d_backward, relu_backward};
use handpose::engine::{
    conv2d, fully_connected, huber_loss, huber_loss_batch, maxpool2d, relu, train_epochs, ExecMode, Graph,
    OptimConfig, Tensor, TrainSet,
};
use handpose::metrics::{avg_joint_error, evaluate, fraction_within, EvalReport};
use handpose::netzoo::{batch_inputs, build, build_uninitialized, predict, ArchSpec, RECONSTRUCTION};
use handpose::pipeline::{evaluate_model, prepare_samples, train_pose_model, PoseModel, Sample};
use handpose::pose::{Pose, PoseFrame};
use handpose::preprocess::{
    denormalize_pose, detect_hand, extract_patch, normalize_pose, DepthFrame, Intrinsics, PreprocessConfig,
};
use handpose::prior::fit_pca;
use handpose::refine::{RefineTrainConfig, RefinerKind};

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

const SEEDS: [u64; 3] = [1, 2, 3];
const TRAIN_N: usize = 5000;
const TEST_N: usize = 500;
const PATCH: usize = 64;
const JOINTS: usize = 16;
/// Fully connected widths of the study nets, narrowed from the default so
/// that nine trainings fit the time budget on one core.
const STUDY_HIDDEN: [usize; 2] = [512, 512];
const EPOCHS: usize = 30;
const PRIOR_DIMS: [usize; 2] = [8, 30];
const CURVE_THRESHOLDS: [f64; 3] = [10.0, 20.0, 30.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

// ---------------------------------------------------------------- gradients

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `x`.
fn fd_check(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn grad_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Alternate between the narrow (im2col) and wide (direct) kernels.
    let (h, w) = if seed.is_multiple_of(2) { (7, 9) } else { (6, 31) };
    let x = randn(&mut rng, &[2, h, w]);
    let k = randn(&mut rng, &[3, 2, 3, 3]);
    let b = randn(&mut rng, &[3]);
    let proj = randn(&mut rng, &[3, h - 2, w - 2]);
    let (dx, dk, db) = conv2d_backward(&x, &k, &b, &proj).unwrap();
    let fx = fd_check(&x, &dx, |x| dot(&conv2d(x, &k, &b).unwrap(), &proj));
    let fk = fd_check(&k, &dk, |k| dot(&conv2d(&x, k, &b).unwrap(), &proj));
    let fb = fd_check(&b, &db, |b| dot(&conv2d(&x, &k, b).unwrap(), &proj));
    fx.max(fk).max(fb)
}

fn grad_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[3, 8, 9]);
    let proj = randn(&mut rng, &[3, 4, 4]);
    let (_, arg) = maxpool2d(&x, 2).unwrap();
    let dx = maxpool2d_backward(x.shape(), &arg, &proj).unwrap();
    fd_check(&x, &dx, |x| dot(&maxpool2d(x, 2).unwrap().0, &proj))
}

fn grad_fc(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[2, 3, 4]);
    let w = randn(&mut rng, &[7, 24]);
    let b = randn(&mut rng, &[7]);
    let proj = randn(&mut rng, &[7]);
    let (dx, dw, db) = fully_connected_backward(&x, &w, &b, &proj).unwrap();
    let fx = fd_check(&x, &dx, |x| dot(&fully_connected(x, &w, &b).unwrap(), &proj));
    let fw = fd_check(&w, &dw, |w| dot(&fully_connected(&x, w, &b).unwrap(), &proj));
    let fb = fd_check(&b, &db, |b| dot(&fully_connected(&x, &w, b).unwrap(), &proj));
    fx.max(fw).max(fb)
}

fn grad_relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep inputs clear of the kink so the finite difference is smooth.
    let x = Tensor::from_fn(&[40], |_| {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() < 1e-2 {
            0.5
        } else {
            v
        }
    });
    let proj = randn(&mut rng, &[40]);
    let dx = relu_backward(&x, &proj);
    fd_check(&x, &dx, |x| dot(&relu(x), &proj))
}

fn grad_huber(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = rng.random_range(0.2..2.0);
    let target = randn(&mut rng, &[30]);
    // Residuals in both the quadratic and the linear regime, away from |r| = delta.
    let pred = Tensor::from_fn(&[30], |i| {
        let r = if i % 2 == 0 {
            rng.random_range(-0.8..0.8) * delta
        } else {
            rng.random_range(1.2..3.0) * delta * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        };
        target.data()[i] + r
    });
    let (_, g) = huber_loss(&pred, &target, delta).unwrap();
    fd_check(&pred, &g, |p| huber_loss(p, &target, delta).unwrap().0)
}

/// Whole prior network: every parameter gradient, including the trainable
/// reconstruction layer, against finite differences of the batch Huber loss.
fn grad_prior_net(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ArchSpec::shallow(16, 3).with_prior(4).with_hidden(vec![12]);
    let poses: Vec<Pose> = (0..40)
        .map(|_| {
            let flat: Vec<f64> = (0..9).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect();
            Pose::from_flat(&flat, PoseFrame::Normalized).unwrap()
        })
        .collect();
    let prior = fit_pca(&poses, 4).unwrap();
    let mut graph: Graph<f64> = build(&spec, seed, Some(&prior)).unwrap();
    let x = Tensor::from_fn(&[3, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
    let target = Tensor::from_fn(&[3, 9], |_| rng.sample::<f64, _>(StandardNormal) * 0.5);
    let delta = 0.3;
    let loss = |g: &Graph<f64>| huber_loss_batch(&g.eval(&[&x]).unwrap(), &target, delta).unwrap().0;
    let out = graph.forward(&[&x]).unwrap().clone();
    let (_, seed_grad) = huber_loss_batch(&out, &target, delta).unwrap();
    graph.backward(&seed_grad).unwrap();
    let mut worst = 0.0f64;
    let names: Vec<String> = graph.params().iter().map(|p| p.name.clone()).collect();
    assert!(names.iter().any(|n| n.starts_with(RECONSTRUCTION)));
    for name in names {
        let analytic = graph.param(&name).unwrap().grad.clone();
        let len = analytic.len();
        // Every entry of small tensors, a random subset of large ones.
        let picks: Vec<usize> = if len <= 40 {
            (0..len).collect()
        } else {
            (0..40).map(|_| rng.random_range(0..len)).collect()
        };
        for i in picks {
            let orig = graph.param(&name).unwrap().value.data()[i];
            graph.param_mut(&name).unwrap().value.data_mut()[i] = orig + FD_STEP;
            let up = loss(&graph);
            graph.param_mut(&name).unwrap().value.data_mut()[i] = orig - FD_STEP;
            let down = loss(&graph);
            graph.param_mut(&name).unwrap().value.data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn criterion_gradients() -> Outcome {
    let checks: [(&str, fn(u64) -> f64); 6] = [
        ("conv", grad_conv),
        ("pool", grad_pool),
        ("fc", grad_fc),
        ("relu", grad_relu),
        ("huber", grad_huber),
        ("prior-net", grad_prior_net),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, check) in checks {
        let worst = (0..GRAD_SEEDS).map(check).fold(0.0f64, f64::max);
        pass &= worst <= GRAD_TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    outcome(pass, format!("worst rel. error over {GRAD_SEEDS} seeds: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------- PCA

fn criterion_pca() -> Outcome {
    let joints = 5;
    let dims = 3 * joints;
    let mut worst_oracle = 0.0f64;
    let mut monotone = true;
    let mut worst_full = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // Anisotropic data with a random rotation and offset.
        let scales: Vec<f64> = (0..dims).map(|i| 2.0 / (1.0 + i as f64)).collect();
        let mix = DMatrix::from_fn(dims, dims, |_, _| rng.sample::<f64, _>(StandardNormal));
        let offset: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let poses: Vec<Pose> = (0..200)
            .map(|_| {
                let z = nalgebra::DVector::from_fn(dims, |i, _| scales[i] * rng.sample::<f64, _>(StandardNormal));
                let v = &mix * z;
                let flat: Vec<f64> = (0..dims).map(|i| v[i] + offset[i]).collect();
                Pose::from_flat(&flat, PoseFrame::Normalized).unwrap()
            })
            .collect();

        let n = poses.len() as f64;
        let data = DMatrix::from_fn(poses.len(), dims, |r, c| poses[r].to_flat()[c]);
        let mean = data.row_mean();
        let centered = DMatrix::from_fn(poses.len(), dims, |r, c| data[(r, c)] - mean[c]);
        let cov = centered.transpose() * &centered / (n - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dims).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let mut prev = f64::INFINITY;
        for d in 1..=dims {
            let model = fit_pca(&poses, d).unwrap();
            for c in 0..d {
                let ours = model.component(c);
                let oracle = eig.eigenvectors.column(order[c]);
                let same: f64 = (0..dims).map(|i| (ours[i] - oracle[i]).abs()).fold(0.0, f64::max);
                let flip: f64 = (0..dims).map(|i| (ours[i] + oracle[i]).abs()).fold(0.0, f64::max);
                worst_oracle = worst_oracle.max(same.min(flip));
            }
            for i in 0..dims {
                worst_oracle = worst_oracle.max((model.mean[i] - mean[i]).abs());
            }
            let err: f64 = poses
                .iter()
                .map(|p| {
                    let c = handpose::prior::embed(&model, p).unwrap();
                    let r = handpose::prior::reconstruct(&model, &c).unwrap();
                    p.to_flat().iter().zip(r.to_flat()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / n;
            monotone &= err <= prev + 1e-12;
            prev = err;
            if d == dims {
                worst_full = worst_full.max(err);
            }
        }
    }
    let pass = worst_oracle <= 1e-8 && monotone && worst_full <= 1e-20;
    outcome(
        pass,
        format!("max deviation from eigen oracle {worst_oracle:.1e}, error monotone {monotone}, error at d=3J {worst_full:.1e}"),
    )
}

// --------------------------------------------------------- training study

struct Study {
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn study_data(seed: u64) -> Study {
    let cfg = SynthConfig::with_size(TRAIN_N + TEST_N, seed, 2 * PATCH);
    let frames = synth_frames(&cfg, ExecMode::Parallel).unwrap();
    let pp = PreprocessConfig {
        patch_size: PATCH,
        ..PreprocessConfig::default()
    };
    let mut samples = prepare_samples(&frames, &pp, ExecMode::Parallel).unwrap();
    let test = samples.split_off(TRAIN_N);
    Study { train: samples, test }
}

fn study_spec(prior: usize) -> ArchSpec {
    ArchSpec::deep(PATCH, JOINTS).with_hidden(STUDY_HIDDEN.to_vec()).with_prior(prior)
}

fn study_optim(seed: u64) -> OptimConfig {
    OptimConfig {
        epochs: EPOCHS,
        seed,
        ..OptimConfig::default()
    }
}

struct SeedRun {
    direct: EvalReport,
    priors: Vec<EvalReport>,
    /// The d = 30 model, kept for the refinement criterion.
    prior30: PoseModel,
}

fn curve_at(report: &EvalReport, t: f64) -> f64 {
    report.curve.iter().find(|(th, _)| *th == t).expect("threshold on the curve").1
}

fn run_seed(seed: u64, study: &Study) -> SeedRun {
    let pp = PreprocessConfig {
        patch_size: PATCH,
        ..PreprocessConfig::default()
    };
    let thresholds = handpose::metrics::default_thresholds();
    let train = |prior| {
        train_pose_model(&study_spec(prior), &pp, &study.train, &study_optim(seed), ExecMode::Parallel)
            .unwrap()
            .0
    };
    let direct = evaluate_model(&train(0), &[], 1, &study.test, &thresholds).unwrap();
    let mut priors = Vec::new();
    let mut prior30 = None;
    for d in PRIOR_DIMS {
        let model = train(d);
        priors.push(evaluate_model(&model, &[], 1, &study.test, &thresholds).unwrap());
        if d == 30 {
            prior30 = Some(model);
        }
    }
    SeedRun {
        direct,
        priors,
        prior30: prior30.expect("d = 30 is part of the study"),
    }
}

fn criterion_prior(runs: &[(SeedRun, Study)]) -> Outcome {
    let direct: Vec<f64> = runs.iter().map(|(r, _)| r.direct.overall).collect();
    let direct_med = median(&direct);
    let mut pass = true;
    let mut parts = vec![format!("direct median {direct_med:.2} mm")];
    for (v, d) in PRIOR_DIMS.iter().enumerate() {
        let errs: Vec<f64> = runs.iter().map(|(r, _)| r.priors[v].overall).collect();
        let med = median(&errs);
        pass &= med <= direct_med;
        let mut dominated = true;
        for t in CURVE_THRESHOLDS {
            let ours = median(&runs.iter().map(|(r, _)| curve_at(&r.priors[v], t)).collect::<Vec<_>>());
            let base = median(&runs.iter().map(|(r, _)| curve_at(&r.direct, t)).collect::<Vec<_>>());
            dominated &= ours >= base;
        }
        pass &= dominated;
        parts.push(format!("prior{d} median {med:.2} mm, curve dominates {dominated}"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_refine(runs: &[(SeedRun, Study)]) -> Outcome {
    let start = Instant::now();
    let thresholds = handpose::metrics::default_thresholds();
    let joints: Vec<usize> = (0..JOINTS).collect();
    let (mut stage1, mut once, mut twice) = (Vec::new(), Vec::new(), Vec::new());
    for (seed, (run, study)) in SEEDS.iter().zip(runs) {
        let model = &run.prior30;
        let mut cfg = RefineTrainConfig::default();
        cfg.optim.seed = *seed;
        let refiners = handpose::pipeline::train_refiners(
            model,
            RefinerKind::OrRef,
            &joints,
            &study.train,
            &cfg,
            ExecMode::Parallel,
        )
        .unwrap();
        let eval = |it| evaluate_model(model, &refiners, it, &study.test, &thresholds).unwrap().overall;
        stage1.push(evaluate_model(model, &[], 1, &study.test, &thresholds).unwrap().overall);
        once.push(eval(1));
        twice.push(eval(2));
    }
    let (s, o, t) = (median(&stage1), median(&once), median(&twice));
    let secs = start.elapsed().as_secs_f64();
    outcome(
        o < s && t <= o && secs <= 20.0 * 60.0,
        format!(
            "median error stage 1 {s:.3} mm, 1 iteration {o:.3} mm, 2 iterations {t:.3} mm; refiner time {secs:.0} s (budget 1200 s)"
        ),
    )
}

// --------------------------------------------------------------- subspace

/// Largest least-squares residual of `outputs - bias` against the columns of
/// the reconstruction weight.
fn span_residual(graph: &Graph<f64>, outputs: &Tensor<f64>) -> f64 {
    let w = &graph.param(&format!("{RECONSTRUCTION}.weight")).unwrap().value;
    let b = &graph.param(&format!("{RECONSTRUCTION}.bias")).unwrap().value;
    let (m, d) = (w.shape()[0], w.shape()[1]);
    let a = DMatrix::from_row_slice(m, d, w.data());
    let svd = a.clone().svd(true, true);
    let mut worst = 0.0f64;
    for i in 0..outputs.shape()[0] {
        let y = nalgebra::DVector::from_fn(m, |r, _| outputs.row(i)[r] - b.data()[r]);
        let coef = svd.solve(&y, 1e-12).unwrap();
        let resid = (&y - &a * coef).norm();
        worst = worst.max(resid);
    }
    worst
}

fn criterion_subspace() -> Outcome {
    let frames = synth_frames(&SynthConfig::with_size(300, 77, 2 * PATCH), ExecMode::Parallel).unwrap();
    let pp = PreprocessConfig {
        patch_size: PATCH,
        ..PreprocessConfig::default()
    };
    let samples = prepare_samples(&frames, &pp, ExecMode::Parallel).unwrap();
    let poses: Vec<Pose> = samples.iter().map(|s| s.pose_norm.clone()).collect();
    let spec = study_spec(8);
    let prior = fit_pca(&poses, 8).unwrap();
    let mut graph: Graph<f64> = build(&spec, 5, Some(&prior)).unwrap();
    graph.set_mode(ExecMode::Parallel);
    let patches: Vec<_> = samples.iter().map(|s| &s.patch).collect();
    let inputs = batch_inputs::<f64>(&spec, &patches).unwrap();
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let before = span_residual(&graph, &graph.eval(&refs).unwrap());
    let flat: Vec<f64> = poses.iter().flat_map(Pose::to_flat).collect();
    let targets = Tensor::from_f64(&[poses.len(), spec.output_len()], &flat).unwrap();
    let data = TrainSet::new(inputs.clone(), targets).unwrap();
    let cfg = OptimConfig {
        epochs: 3,
        seed: 5,
        ..OptimConfig::default()
    };
    train_epochs(&mut graph, &data, &cfg).unwrap();
    let moved = graph.param(&format!("{RECONSTRUCTION}.bias")).unwrap().value.data()
        != Tensor::<f64>::from_f64(&[prior.mean.len()], &prior.mean).unwrap().data();
    let after = span_residual(&graph, &graph.eval(&refs).unwrap());
    outcome(
        before <= 1e-6 && after <= 1e-6 && moved,
        format!("max residual before training {before:.1e}, after {after:.1e} (reconstruction layer updated: {moved})"),
    )
}

// ---------------------------------------------------------- preprocessing

fn random_frame(rng: &mut ChaCha8Rng, i: usize) -> DepthFrame {
    let (w, h) = (rng.random_range(40..160), rng.random_range(40..160));
    let k = Intrinsics {
        fx: rng.random_range(0.8..1.5) * w as f64,
        fy: rng.random_range(0.8..1.5) * w as f64,
        cx: rng.random_range(0.3..0.7) * w as f64,
        cy: rng.random_range(0.3..0.7) * h as f64,
    };
    let hole = rng.random_range(0.0..0.5);
    let (near, far) = (rng.random_range(150.0..600.0), rng.random_range(700.0..2000.0));
    let (bu, bv, br) = (
        rng.random_range(0.2..0.8) * w as f64,
        rng.random_range(0.2..0.8) * h as f64,
        rng.random_range(5.0..30.0),
    );
    let depth = Tensor::from_fn(&[h, w], |p| {
        if rng.random_bool(hole) {
            return 0.0;
        }
        let (u, v) = ((p % w) as f64, (p / w) as f64);
        let r2 = (u - bu).powi(2) + (v - bv).powi(2);
        let d = if r2 < br * br {
            near + rng.random_range(0.0..60.0)
        } else {
            far + rng.random_range(-50.0..50.0)
        };
        d as f32
    });
    DepthFrame::new(depth, k, format!("r{i}")).unwrap()
}

fn criterion_preprocess() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut in_range, mut missing_ok, mut checked_missing) = (true, true, 0usize);
    let mut worst_roundtrip = 0.0f64;
    let mut processed = 0;
    for i in 0..1000 {
        let frame = random_frame(&mut rng, i);
        let cfg = PreprocessConfig {
            cube_side: rng.random_range(150.0..400.0),
            patch_size: [16, 32, 64, 128][i % 4],
            ..PreprocessConfig::default()
        };
        let Ok(cube) = detect_hand(&frame, &cfg) else { continue };
        let Ok(patch) = extract_patch(&frame, &cube, cfg.patch_size) else {
            continue;
        };
        processed += 1;
        let s = cfg.patch_size;
        let (du, dv) = ((patch.crop.u1 - patch.crop.u0) / s as f64, (patch.crop.v1 - patch.crop.v0) / s as f64);
        for r in 0..s {
            for c in 0..s {
                let v = patch.values.data()[r * s + c];
                in_range &= (-1.0..=1.0).contains(&v);
                // Independent nearest-neighbor lookup of the source pixel.
                let u = (patch.crop.u0 + (c as f64 + 0.5) * du).round();
                let vv = (patch.crop.v0 + (r as f64 + 0.5) * dv).round();
                let inside = u >= 0.0 && vv >= 0.0 && u < frame.width() as f64 && vv < frame.height() as f64;
                if !inside || frame.at(u as usize, vv as usize) <= 0.0 {
                    checked_missing += 1;
                    missing_ok &= v == 1.0;
                }
            }
        }
        let pose = Pose::new(
            (0..JOINTS)
                .map(|_| std::array::from_fn(|k| cube.center[k] + rng.random_range(-200.0..200.0)))
                .collect(),
            PoseFrame::Millimeters,
        );
        let back = denormalize_pose(&normalize_pose(&pose, &cube).unwrap(), &cube).unwrap();
        for (a, b) in pose.joints.iter().zip(&back.joints) {
            for k in 0..3 {
                worst_roundtrip = worst_roundtrip.max((a[k] - b[k]).abs());
            }
        }
    }
    outcome(
        processed == 1000 && in_range && missing_ok && checked_missing > 0 && worst_roundtrip <= 1e-9,
        format!(
            "{processed}/1000 frames processed, values in [-1,1] {in_range}, {checked_missing} missing pixels all 1 {missing_ok}, round trip {worst_roundtrip:.1e} mm"
        ),
    )
}

// ----------------------------------------------------------------- metrics

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (frames, joints) = (50, JOINTS);
    let truth: Vec<Pose> = (0..frames)
        .map(|_| {
            Pose::new(
                (0..joints).map(|_| std::array::from_fn(|_| rng.random_range(-100.0..600.0))).collect(),
                PoseFrame::Millimeters,
            )
        })
        .collect();
    let thresholds: Vec<f64> = (0..=150).map(f64::from).collect();

    let mut props = true;
    for _ in 0..20 {
        let pred: Vec<Pose> = truth
            .iter()
            .map(|t| {
                let s = rng.random_range(0.0..60.0);
                Pose::new(
                    t.joints.iter().map(|j| std::array::from_fn(|k| j[k] + s * rng.sample::<f64, _>(StandardNormal))).collect(),
                    PoseFrame::Millimeters,
                )
            })
            .collect();
        let curve = fraction_within(&pred, &truth, &thresholds).unwrap();
        props &= curve.iter().all(|(_, f)| (0.0..=1.0).contains(f));
        props &= curve.windows(2).all(|w| w[0].1 <= w[1].1);
    }

    let base = avg_joint_error(&truth, &truth).unwrap().overall;
    let plant = |affected: usize| {
        let mut pred = truth.clone();
        for p in pred.iter_mut().take(affected) {
            p.joints[3][0] += 100.0;
        }
        let report = evaluate(&pred, &truth, &thresholds).unwrap();
        let below = report.curve.iter().filter(|(t, _)| *t < 100.0).map(|(_, f)| *f).fold(0.0, f64::max);
        let at = curve_at(&report, 100.0);
        let shift = report.overall - base;
        (below, at, shift)
    };
    // Every frame carries one outlier: the curve is 0 below 100 mm.
    let (below_all, at_all, shift_all) = plant(frames);
    let bound = 100.0 / (joints * frames) as f64;
    let all_ok = below_all == 0.0 && at_all == 1.0 && shift_all <= bound * frames as f64 + 1e-9;
    // A single affected frame: only that frame leaves the curve.
    let (below_one, _, shift_one) = plant(1);
    let one_ok = (below_one - (frames - 1) as f64 / frames as f64).abs() < 1e-12 && shift_one <= bound + 1e-9;
    outcome(
        props && all_ok && one_ok,
        format!(
            "monotone and bounded {props}; outlier in every frame: curve below 100 mm {below_all}, mean shift {shift_all:.3} mm; \
             single outlier: curve below 100 mm {below_one:.2}, mean shift {shift_one:.4} mm (bound {bound:.4})"
        ),
    )
}

// ----------------------------------------------------------------- latency

fn criterion_latency() -> Outcome {
    const S: usize = 128;
    const RUNS: usize = 1000;
    const WARMUP: usize = 50;
    let patch = bench_patch(S);
    let specs = [
        ArchSpec::shallow(S, JOINTS),
        ArchSpec::deep(S, JOINTS),
        ArchSpec::deep(S, JOINTS).with_prior(30),
        ArchSpec::multiscale(S, JOINTS),
    ];
    let graphs: Vec<Graph<f32>> = specs.iter().map(|s| build_uninitialized(s, 1).unwrap()).collect();
    let once = |i: usize| std::hint::black_box(predict(&graphs[i], &specs[i], &patch).unwrap());
    for i in 0..specs.len() {
        for _ in 0..WARMUP {
            once(i);
        }
    }
    // Round-robin so that drift in machine load hits every model alike.
    let mut times = vec![Vec::with_capacity(RUNS); specs.len()];
    for _ in 0..RUNS {
        for (i, t) in times.iter_mut().enumerate() {
            let start = Instant::now();
            once(i);
            t.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let [shallow, deep, prior, multi] = [0, 1, 2, 3].map(|i| median(&times[i]));
    let ratio = multi / prior;
    outcome(
        shallow < deep && prior < multi && ratio >= 2.0,
        format!(
            "median ms over {RUNS} runs: shallow {shallow:.3}, deep {deep:.3}, deep-prior {prior:.3}, multiscale {multi:.3}; multiscale/deep-prior {ratio:.2}"
        ),
    )
}

// ------------------------------------------------------------- determinism

fn cli(args: &[&str]) {
    use clap::Parser;
    let mut full = vec!["handpose"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full).unwrap()).unwrap();
}

fn pipeline_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let d = |p: &str| dir.join(p).to_str().unwrap().to_owned();
    cli(&["synth", "--n", "60", "--seed", "4", "--size", "128", "--holes", "0.3", "--label-noise", "1", "--out", &d("data")]);
    cli(&[
        "train", "--data", &d("data"), "--out", &d("model.dpck"), "--arch", "deep", "--prior-dim", "8", "--patch-size",
        "64", "--epochs", "2", "--seed", "3", "--parallel",
    ]);
    cli(&[
        "refine-train", "--model", &d("model.dpck"), "--data", &d("data"), "--out", &d("refine"), "--joint", "2",
        "--epochs", "1", "--parallel",
    ]);
    cli(&["eval", "--model", &d("model.dpck"), "--data", &d("data"), "--out", &d("eval"), "--refine", &d("refine")]);
    let mut files = Vec::new();
    for rel in [
        "data/index.json",
        "model.dpck",
        "model.dpck.loss.csv",
        "refine/joint_2.dpck",
        "eval/joints.csv",
        "eval/curve.csv",
    ] {
        files.push((rel.to_owned(), std::fs::read(dir.join(rel)).unwrap()));
    }
    files
}

fn criterion_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (fa, fb) = (pipeline_outputs(a.path()), pipeline_outputs(b.path()));
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", fa.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

// -------------------------------------------------------------------- main

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(id) {
            let t = Instant::now();
            let o = f();
            let secs = t.elapsed().as_secs_f64();
            println!(
                "criterion {id} [{}] {name}: {} ({secs:.1} s)",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            results.push((id, name, o, secs));
        }
    };

    timed(1, "gradient suite", &mut criterion_gradients);
    timed(2, "PCA oracle", &mut criterion_pca);

    let mut studies: Vec<(SeedRun, Study)> = Vec::new();
    let run_studies = |studies: &mut Vec<(SeedRun, Study)>| {
        for &seed in &SEEDS {
            let study = study_data(seed);
            studies.push((run_seed(seed, &study), study));
        }
    };
    if wanted(3) {
        timed(3, "prior beats direct regression", &mut || {
            let t = Instant::now();
            run_studies(&mut studies);
            let secs = t.elapsed().as_secs_f64();
            let o = criterion_prior(&studies);
            let within = secs <= 15.0 * 60.0;
            outcome(o.pass && within, format!("{}; study time {secs:.0} s (budget 900 s)", o.detail))
        });
    } else if wanted(4) {
        run_studies(&mut studies);
    }
    if wanted(4) {
        timed(4, "refinement helps", &mut || criterion_refine(&studies));
    }
    timed(5, "subspace invariant", &mut criterion_subspace);
    timed(6, "preprocessing contract", &mut criterion_preprocess);
    timed(7, "metric properties", &mut criterion_metrics);
    timed(8, "latency ordering", &mut criterion_latency);
    timed(9, "determinism", &mut criterion_determinism);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {failed:?}")
        }
    );
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
