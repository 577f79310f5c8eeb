use super::*;
use crate::autograd::Graph;
use crate::dsnt::CoordinateTrack;
use crate::model::{build_model, ArchConfig, StageConfig, TaskSet};
use crate::synthdata::{generate_dataset, Split, SynthConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

#[test]
fn triangular_schedule() {
    let cfg = TrainConfig::default();
    assert!(close(cyclical_lr(0.0, &cfg), 5e-4));
    assert!(close(cyclical_lr(10.0, &cfg), 5e-3));
    assert!(close(cyclical_lr(20.0, &cfg), 5e-4));
    assert!(close(cyclical_lr(25.0, &cfg), 2.75e-3));
    assert!(close(cyclical_lr(5.0, &cfg), 2.75e-3));
    assert!(close(cyclical_lr(15.0, &cfg), 2.75e-3));
    assert!(close(cyclical_lr(2.5, &cfg), 5e-4 + 0.25 * 4.5e-3));
    assert!(close(cyclical_lr(17.5, &cfg), 5e-4 + 0.25 * 4.5e-3));
}

fn scalar_param(v: f64, g: f64) -> Tensor<f64> {
    let mut t = Tensor::from_vec(&[1], vec![v]).unwrap();
    t.set_requires_grad(true);
    t.accumulate_grad(&[g]);
    t
}

#[test]
fn nesterov_step_cases() {
    let mut st = OptimizerState::new();
    let mut p = scalar_param(1.5, 0.0);
    sgd_nesterov_step(std::iter::once(("w", &mut p)), &mut st, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(p.data(), &[1.5]);

    let mut st = OptimizerState::new();
    let mut p = scalar_param(1.0, 2.0);
    sgd_nesterov_step(std::iter::once(("w", &mut p)), &mut st, 0.1, 0.9, 0.0).unwrap();
    assert!((p.data()[0] - (1.0 - 0.1 * 1.9 * 2.0)).abs() < 1e-15);

    // f(w) = 0.5·a·w², two steps against a hand simulation with decay
    let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 0.01);
    let mut st = OptimizerState::new();
    let mut p = scalar_param(2.0, 0.0);
    let (mut w, mut v) = (2.0f64, 0.0f64);
    for _ in 0..2 {
        p.zero_grad();
        let g = a * p.data()[0];
        p.accumulate_grad(&[g]);
        sgd_nesterov_step(std::iter::once(("w", &mut p)), &mut st, lr, mu, wd).unwrap();
        let g2 = a * w + wd * w;
        v = mu * v + g2;
        w -= lr * (g2 + mu * v);
    }
    assert!((p.data()[0] - w).abs() < 1e-7);
    assert!((st.velocity("w").unwrap().data()[0] - v).abs() < 1e-7);

    st.insert("w", Tensor::zeros(&[2]));
    let err = sgd_nesterov_step(std::iter::once(("w", &mut p)), &mut st, lr, mu, wd).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

proptest! {
    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point(vals in proptest::collection::vec(-5.0f64..5.0, 1..6), vel in -1.0f64..1.0) {
        let mut p = Tensor::from_vec(&[vals.len()], vals.clone()).unwrap();
        p.set_requires_grad(true);
        let mut st = OptimizerState::new();
        st.insert("p", Tensor::full(&[vals.len()], 0.0));
        for _ in 0..3 {
            sgd_nesterov_step(std::iter::once(("p", &mut p)), &mut st, 0.1, 0.9, 0.0).unwrap();
        }
        prop_assert_eq!(p.data(), vals.as_slice());
        let _ = vel;
    }

    #[test]
    fn training_clip_stays_in_segment(seg in 1usize..200, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample_training_clip(seg, 16, 32, &mut rng);
        prop_assert_eq!(idx.len(), 16);
        prop_assert!(idx.iter().all(|&i| i < seg));
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        if seg >= 32 {
            prop_assert!(idx[0] <= seg - 32);
        }
    }
}

#[test]
fn clip_sampling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let even: Vec<usize> = (0..16).map(|i| 2 * i).collect();
    assert_eq!(sample_training_clip(32, 16, 32, &mut rng), even);
    let short = sample_training_clip(8, 16, 32, &mut rng);
    assert_eq!(short, [0, 2, 4, 6, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7]);
    for _ in 0..200 {
        let idx = sample_training_clip(100, 16, 32, &mut rng);
        assert!(idx[0] <= 68 && idx.iter().all(|&i| i <= 99));
    }
    let mid: Vec<usize> = (0..16).map(|i| 16 + 2 * i).collect();
    assert_eq!(sample_eval_clip(64, 16, 32), mid);
    assert_eq!(sample_eval_clip(32, 16, 32), even);
    assert_eq!(sample_eval_clip(77, 16, 32), sample_eval_clip(77, 16, 32));
}

fn track(points: Vec<[f32; 2]>) -> CoordinateTrack {
    let n = points.len();
    CoordinateTrack::new(1, points, vec![true; n]).unwrap()
}

#[test]
fn identity_augment_is_a_no_op() {
    let cfg = TrainConfig { train_scale: 6, crop_size: 6, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames: Vec<f32> = (0..2 * 6 * 6 * 3).map(|i| (i % 17) as f32 / 17.0).collect();
    let tr = track(vec![[0.3, -0.6], [-0.9, 0.1]]);
    for mode in [AugmentMode::Train, AugmentMode::Eval] {
        let a = augment(&frames, [2, 6, 6], &[&tr], &cfg, &mut rng, mode).unwrap();
        for t in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    for c in 0..3 {
                        assert_eq!(a.frames[((c * 2 + t) * 6 + i) * 6 + j], frames[((t * 6 + i) * 6 + j) * 3 + c]);
                    }
                }
            }
        }
        assert_eq!(a.tracks[0], tr);
    }
}

#[test]
fn center_crop_keeps_center_and_bad_crop_fails() {
    let cfg = TrainConfig::default();
    let frames = vec![0.5; 32 * 32 * 3];
    let tr = track(vec![[0.0, 0.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = augment(&frames, [1, 32, 32], &[&tr], &cfg, &mut rng, AugmentMode::Eval).unwrap();
    assert_eq!(a.tracks[0].point(0, 0), [0.0, 0.0]);
    assert!(a.frames.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    let bad = TrainConfig { crop_size: 40, ..TrainConfig::default() };
    assert!(matches!(augment(&frames, [1, 32, 32], &[&tr], &bad, &mut rng, AugmentMode::Eval), Err(Error::Config(_))));
}

#[test]
fn random_crop_matches_pixel_space_oracle() {
    let cfg = TrainConfig::default();
    let (w, s, c) = (32.0f64, 37.0, 32.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames = vec![0.0; 32 * 32 * 3];
    let pts: Vec<[f32; 2]> = (0..20).map(|i| [(i as f32 / 10.0) - 0.97, 0.8 - i as f32 / 13.0]).collect();
    let tr = track(pts.clone());
    for _ in 0..10 {
        let a = augment(&frames, [1, 32, 32], &[&tr], &cfg, &mut rng, AugmentMode::Train).unwrap();
        let [ox, oy] = a.offset;
        assert!(ox.fract() == 0.0 && (0.0..=5.0).contains(&ox));
        for (k, p) in pts.iter().enumerate() {
            // pixel-center coordinate in the source, then the resized frame, then the crop
            let oracle = |v: f32, o: f64| {
                let src = (v as f64 + 1.0) * w / 2.0 - 0.5;
                let scaled = (src + 0.5) * s / w - 0.5;
                let cropped = scaled - o;
                (2.0 * cropped + 1.0) / c - 1.0
            };
            let (ex, ey) = (oracle(p[0], ox), oracle(p[1], oy));
            let inside = ex.abs() <= 1.0 && ey.abs() <= 1.0;
            assert_eq!(a.tracks[0].valid[k], inside);
            if inside {
                let q = a.tracks[0].points[k];
                assert!((q[0] as f64 - ex).abs() < 1e-6 && (q[1] as f64 - ey).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn bilinear_resize_preserves_linear_ramps() {
    // a horizontal ramp stays a ramp in the interior
    let cfg = TrainConfig { train_scale: 16, crop_size: 16, ..TrainConfig::default() };
    let frames: Vec<f32> = (0..8 * 8).flat_map(|i| { let x = (i % 8) as f32; [x, x, x] }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = augment(&frames, [1, 8, 8], &[], &cfg, &mut rng, AugmentMode::Eval).unwrap();
    for j in 1..15 {
        let expect = ((j as f32 + 0.5) * 0.5 - 0.5).clamp(0.0, 7.0);
        assert!((a.frames[3 * 16 + j] - expect).abs() < 1e-6);
    }
}

fn tiny() -> (crate::synthdata::Dataset, TrainConfig, ArchConfig) {
    let ds = generate_dataset(&SynthConfig { num_clips: 24, frames_per_clip: 8, frame_size: 16, seed: 3, ..SynthConfig::default() }).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 3,
        clip_len: 4,
        window_len: 8,
        train_scale: 18,
        crop_size: 16,
        cycle_epochs: 2.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let arch = ArchConfig {
        in_channels: 3,
        frames: 4,
        height: 16,
        width: 16,
        stages: vec![
            StageConfig { out_channels: 4, kernel: [3, 3, 3], stride: [1, 2, 2], residual: false },
            StageConfig { out_channels: 6, kernel: [1, 3, 3], stride: [2, 2, 2], residual: false },
        ],
    };
    (ds, cfg, arch)
}

fn run(ds: &crate::synthdata::Dataset, cfg: &TrainConfig, arch: &ArchConfig) -> (Vec<u8>, FitResult, MultitaskModel<f32>) {
    let tasks = TaskSet::parse("A+H+G", ds.label_space(), None).unwrap();
    let mut model = build_model::<f32>(arch, &tasks, cfg.seed).unwrap();
    let mut log = Vec::new();
    let res = fit(&mut model, &ds.split(Split::Train), &ds.split(Split::Val), None, cfg, &mut log).unwrap();
    (log, res, model)
}

use crate::model::MultitaskModel;

#[test]
fn fit_is_deterministic_and_logs_the_schedule() {
    let (ds, cfg, arch) = tiny();
    let (log_a, res_a, _) = run(&ds, &cfg, &arch);
    let (log_b, res_b, _) = run(&ds, &cfg, &arch);
    assert_eq!(log_a, log_b);
    assert_eq!(res_a.best_checkpoint.to_bytes().unwrap(), res_b.best_checkpoint.to_bytes().unwrap());

    let text = String::from_utf8(log_a).unwrap();
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut best = f64::NEG_INFINITY;
    for r in &recs {
        let e = r["epoch"].as_u64().unwrap() as f64;
        assert_eq!(r["lr"].as_f64().unwrap(), cyclical_lr(e, &cfg));
        if r["kind"] == "step" {
            let per = r["per_task"].as_object().unwrap();
            let keys: Vec<&str> = per.keys().map(String::as_str).collect();
            assert!(keys.contains(&"action"));
            let sum: f64 = ["action", "hands", "gaze"].iter().filter_map(|k| per.get(*k)).map(|v| v.as_f64().unwrap()).sum();
            assert!((sum - r["total"].as_f64().unwrap()).abs() < 1e-5);
        } else {
            best = best.max(r["main_metric"].as_f64().unwrap());
        }
    }
    assert_eq!(recs.iter().filter(|r| r["kind"] == "epoch").count(), 3);
    assert_eq!(recs.iter().filter(|r| r["kind"] == "step").count(), 3 * 5);
    assert_eq!(res_a.best_metric, best);
    let stored = res_a.best_checkpoint.get(BEST_METRIC_ENTRY).unwrap().item();
    assert_eq!(stored, best as f32);
    assert_eq!(res_a.best_checkpoint.optimizer_entries().count(), res_a.best_checkpoint.model_entries().filter(|(n, _)| !n.starts_with("meta.") && !n.contains("running")).count());
}

#[test]
fn best_checkpoint_reproduces_logged_metric() {
    let (ds, cfg, arch) = tiny();
    let (_, res, _) = run(&ds, &cfg, &arch);
    let tasks = TaskSet::parse("A+H+G", ds.label_space(), None).unwrap();
    let mut m = build_model::<f32>(&arch, &tasks, 0).unwrap();
    m.load_checkpoint(&Checkpoint::from_bytes(&res.best_checkpoint.to_bytes().unwrap()).unwrap()).unwrap();
    let rep = evaluate(&m, &ds.split(Split::Val), &cfg, None, "val").unwrap();
    assert_eq!(rep.classification("action").unwrap().top1, res.best_metric);
    let gaze = rep.coordinate("gaze").unwrap();
    let frames: usize = ds.split(Split::Val).len() * 2;
    assert_eq!(gaze.evaluated_frames + gaze.skipped_frames, frames);
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let (ds, cfg, arch) = tiny();
    let tasks = TaskSet::parse("A", ds.label_space(), None).unwrap();
    let mut model = build_model::<f32>(&arch, &tasks, 1).unwrap();
    model.param_mut("head.action.bias").unwrap().data_mut()[0] = f32::NAN;
    let mut log = Vec::new();
    let err = fit(&mut model, &ds.split(Split::Train), &ds.split(Split::Val), None, &cfg, &mut log).unwrap_err();
    match err {
        Error::NonFinite { epoch: 0, step: 0, losses } => assert!(losses.contains("action")),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn shuffled_batches_cover_each_sample_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = epoch_batches(23, 4, &mut rng);
    let b = epoch_batches(23, 4, &mut rng);
    assert_ne!(a, b);
    for bs in [a, b] {
        let mut all: Vec<usize> = bs.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(bs.last().unwrap().len(), 3);
    }
}

#[test]
fn batch_gradients_flow_from_made_batches() {
    let (ds, cfg, arch) = tiny();
    let tasks = TaskSet::parse("A+H", ds.label_space(), None).unwrap();
    let mut model = build_model::<f32>(&arch, &tasks, 1).unwrap();
    let train = ds.split(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = make_batch::<f32>(&train[..4], &cfg, &mut rng, AugmentMode::Train).unwrap();
    assert_eq!(batch.clips.shape(), &[4, 3, 4, 16, 16]);
    assert_eq!(batch.hands[0].frames(), 4);
    let mut g = Graph::new();
    let (_, l) = crate::losses::total_loss(&mut g, &mut model, &batch, crate::model::Mode::Train, &cfg.coord_loss).unwrap();
    g.backward(l.total).unwrap();
}
