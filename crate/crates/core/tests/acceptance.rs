//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach stdout.
//! The desk-scale training runs only happen with `ACCEPTANCE_FULL=1`.

mod common;

use std::collections::HashMap;
use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use egomtl::autograd::Graph;
use egomtl::dsnt::{dsnt, normalize_heatmap, HeatmapStack};
use egomtl::gradcheck::{MODEL_FD_STEP, REL_TOL};
use egomtl::losses::total_loss;
use egomtl::metrics::{aae, auc_saliency, mean_class_accuracy, many_hot_precision_recall, topk_accuracy};
use egomtl::model::{build_model, ArchConfig, Mode, TaskSet};
use egomtl::synthdata::{gaze_floor, generate_dataset, Dataset, Split, SynthConfig};
use egomtl::trainer::{cyclical_lr, evaluate, fit, make_batch, AugmentMode, EpochRecord, TrainConfig};
use egomtl::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    name: &'static str,
    pass: Option<bool>,
    primary: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { name, pass: Some(pass), primary: true, detail: detail.into() }
}

// Reported alongside the criteria but does not decide the exit status.
fn advisory(mut v: Verdict) -> Verdict {
    v.primary = false;
    v
}

fn print(v: &Verdict) {
    let tag = match v.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    let note = if v.primary { "" } else { " (advisory)" };
    println!("[{tag}] {}{note}: {}", v.name, v.detail);
}

fn main() {
    // The nine desk-scale training runs take most of an hour; they are opt-in.
    let quick = std::env::var_os("ACCEPTANCE_FULL").is_none();
    let mut all = Vec::new();
    let mut run = |v: Verdict| {
        print(&v);
        all.push(v);
    };
    run(dsnt_analytic());
    run(gradient_fidelity());
    let (routing, composition) = gradient_routing_and_composition();
    run(routing);
    run(composition);
    run(scheduler());
    run(metric_oracles());
    run(determinism());
    if quick {
        for name in ["desk-scale learning", "convergence smoke (trainer property)", "MTL trend"] {
            let v = Verdict { name, pass: None, primary: true, detail: "skipped (set ACCEPTANCE_FULL=1)".into() };
            run(if name.starts_with("convergence") { advisory(v) } else { v });
        }
    } else {
        let (learning, smoke, trend) = desk_runs();
        run(learning);
        run(advisory(smoke));
        run(trend);
    }
    let count = |p: Option<bool>| all.iter().filter(|v| v.primary && v.pass == p).count();
    let failed = count(Some(false));
    let advisory_failed = all.iter().filter(|v| !v.primary && v.pass == Some(false)).count();
    println!("acceptance: {} passed, {failed} failed, {} skipped; {advisory_failed} advisory failed", count(Some(true)), count(None));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn point_of(values: Vec<f64>, m: usize, n: usize) -> [f64; 2] {
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::from_vec(&[1, 1, 1, m, n], values).unwrap());
    let c = dsnt(&mut g, &HeatmapStack { values: v, normalized: true }).unwrap();
    let d = g.value(c).data();
    [d[0], d[1]]
}

fn dsnt_analytic() -> Verdict {
    let mut g = Graph::<f64>::new();
    let raw = g.leaf(Tensor::zeros(&[1, 1, 1, 3, 5]));
    let hm = normalize_heatmap(&mut g, HeatmapStack::raw(raw)).unwrap();
    let c = dsnt(&mut g, &hm).unwrap();
    let uniform = [g.value(c).data()[0], g.value(c).data()[1]];

    let one_hot = point_of(vec![0.0, 1.0, 0.0, 0.0], 2, 2);

    // smooth blob with a zero border, shifted one cell right
    let (m, n) = (6, 7);
    let blob = |shift: usize| {
        let mut v = vec![0.0; m * n];
        for (k, w) in [(8usize, 0.1), (9, 0.3), (15, 0.25), (16, 0.2), (22, 0.15)] {
            v[k + shift] = w;
        }
        v
    };
    let (a, b) = (point_of(blob(0), m, n), point_of(blob(1), m, n));
    let shift_err = ((b[0] - a[0]) - 2.0 / n as f64).abs().max((b[1] - a[1]).abs());

    let errs = [uniform[0].abs(), uniform[1].abs(), (one_hot[0] - 0.5).abs(), (one_hot[1] + 0.5).abs(), shift_err];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    verdict(
        "DSNT analytic suite",
        worst <= 1e-6,
        format!("uniform → ({:.1e}, {:.1e}); one-hot (0,1) of 2×2 → ({}, {}); one-cell shift error {:.1e}; max error {worst:.1e} (tol 1e-6)", uniform[0], uniform[1], one_hot[0], one_hot[1], shift_err),
    )
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let probes = common::gradcheck::desk_probes(9, MODEL_FD_STEP);
    let elapsed = start.elapsed();
    let worst = probes.iter().max_by(|a, b| a.rel.total_cmp(&b.rel)).unwrap();
    let per_loss = probes.len() / 2;
    verdict(
        "gradient fidelity",
        worst.rel <= REL_TOL && per_loss >= 20 && elapsed < Duration::from_secs(120),
        format!(
            "{per_loss} parameters × {{cross-entropy, coordinate}} through the desk model at f64, step {MODEL_FD_STEP:e}; worst rel. err {:.2e} ({} {}[{}]) (tol {REL_TOL:e}); {:.1}s (limit 120s)",
            worst.rel,
            worst.loss,
            worst.param,
            worst.index,
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_routing_and_composition() -> (Verdict, Verdict) {
    let ds = generate_dataset(&SynthConfig { num_clips: 6, ..SynthConfig::default() }).unwrap();
    let tasks = TaskSet::parse("A+V+H+G", ds.label_space(), None).unwrap();
    let mut model = build_model::<f64>(&ArchConfig::desk_default(), &tasks, 21).unwrap();
    let samples: Vec<_> = ds.samples.iter().take(2).collect();
    let batch = make_batch::<f64>(&samples, &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(5), AugmentMode::Train).unwrap();
    let head_names: Vec<String> = tasks.tasks().iter().map(|t| t.name.clone()).collect();

    let mut grads_for = |root: Option<&str>| {
        model.zero_grads();
        let mut g = Graph::new();
        let (_, lg) = total_loss(&mut g, &mut model, &batch, Mode::Train, &Default::default()).unwrap();
        g.backward(root.map_or(lg.total, |t| lg.task(t).unwrap())).unwrap();
        model.collect_grads(&g);
        let grads: Vec<(String, Vec<f64>)> = model.params().map(|(n, p)| (n.to_string(), p.grad().unwrap().to_vec())).collect();
        (grads, lg, g)
    };

    let (total_grads, lg, g) = grads_for(None);
    // composition, read off the total graph
    let rep = lg.report(&g);
    let summed = rep.per_task.iter().skip(1).fold(rep.per_task[0].1, |acc, (_, v)| acc + v);
    let mut coord_exact = true;
    let mut coord_detail = Vec::new();
    for (task, parts) in &lg.coordinate_parts {
        let (t, e, r) = (g.value(parts.total).item(), g.value(parts.euclidean).item(), g.value(parts.regularizer).item());
        coord_exact &= t == 0.5 * e + 0.5 * r;
        coord_detail.push(format!("{task} {t:.6} = 0.5·{e:.6} + 0.5·{r:.6}"));
    }
    let composition = verdict(
        "loss composition",
        rep.total == summed && coord_exact && rep.per_task.len() == 4,
        format!("total {:.9} vs ordered sum {:.9} (diff {:e}); {}", rep.total, summed, rep.total - summed, coord_detail.join("; ")),
    );

    let mut leaks = Vec::new();
    let mut backbone_sum: HashMap<String, Vec<f64>> = HashMap::new();
    for task in &head_names {
        let (grads, _, _) = grads_for(Some(task));
        for (name, grad) in grads {
            if let Some(head) = name.strip_prefix("head.").and_then(|r| r.split('.').next()) {
                if head != task && grad.iter().any(|&v| v != 0.0) {
                    leaks.push(format!("{task}→{name}"));
                }
            } else {
                let acc = backbone_sum.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
                acc.iter_mut().zip(&grad).for_each(|(a, v)| *a += v);
            }
        }
    }
    let mut max_diff: f64 = 0.0;
    for (name, grad) in total_grads.iter().filter(|(n, _)| n.starts_with("backbone.")) {
        for (a, b) in grad.iter().zip(&backbone_sum[name]) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    let routing = verdict(
        "gradient routing",
        leaks.is_empty() && max_diff <= 1e-5,
        format!(
            "A+V+H+G desk model: {} cross-head leaks over {} per-task backward passes; max |∇total − Σ∇task| on backbone {max_diff:.1e} (tol 1e-5)",
            leaks.len(),
            head_names.len()
        ),
    );
    (routing, composition)
}

fn scheduler() -> Verdict {
    let cfg = TrainConfig::default();
    let expect = [(0.0, 5e-4), (5.0, 2.75e-3), (10.0, 5e-3), (15.0, 2.75e-3), (20.0, 5e-4)];
    let worst = expect.iter().map(|&(e, v)| (cyclical_lr(e, &cfg) - v).abs()).fold(0.0, f64::max);
    let shown: Vec<String> = expect.iter().map(|&(e, _)| format!("lr({e})={:.3e}", cyclical_lr(e, &cfg))).collect();
    verdict("scheduler", cfg.cycle_epochs == 20.0 && worst <= 1e-12, format!("{}; max error {worst:.1e}", shown.join(", ")))
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (n, k) = (1000, 12);
    let mut checks: Vec<(String, f64, f64)> = Vec::new(); // (name, error, tolerance)

    // top-k with deliberate ties
    let logits: Vec<f64> = (0..n * k).map(|_| (rng.gen_range(0.0..1.0f64) * 8.0).round() / 8.0).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    for kk in [1, 5] {
        let mut hit = 0;
        for (i, &l) in labels.iter().enumerate() {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| logits[i * k + b].total_cmp(&logits[i * k + a]).then(a.cmp(&b)));
            hit += usize::from(order[..kk].contains(&l));
        }
        let got = topk_accuracy(&logits, k, &labels, kk).unwrap();
        checks.push((format!("top{kk}"), (got - hit as f64 / n as f64).abs(), 1e-12));
    }

    // mean class accuracy over a label set with an absent class
    let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let skewed: Vec<usize> = labels.iter().map(|&l| if l == 3 { 4 } else { l }).collect();
    let mut tally: HashMap<usize, (usize, usize)> = HashMap::new();
    for (&p, &l) in preds.iter().zip(&skewed) {
        let e = tally.entry(l).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    let oracle = tally.values().map(|&(r, t)| r as f64 / t as f64).sum::<f64>() / tally.len() as f64;
    let got = mean_class_accuracy(&preds, &skewed, k).unwrap();
    checks.push(("mean-class".into(), (got.value - oracle).abs() + (got.absent_classes as f64 - 1.0).abs(), 1e-12));

    // many-hot over a filtered class list
    let classes = vec![0, 2, 5, 7, 11];
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for &c in &classes {
        let (mut tp, mut pred_c, mut true_c) = (0, 0, 0);
        for i in 0..n {
            if !classes.contains(&skewed[i]) {
                continue;
            }
            tp += usize::from(preds[i] == c && skewed[i] == c);
            pred_c += usize::from(preds[i] == c);
            true_c += usize::from(skewed[i] == c);
        }
        p_sum += if pred_c > 0 { tp as f64 / pred_c as f64 } else { 0.0 };
        r_sum += if true_c > 0 { tp as f64 / true_c as f64 } else { 0.0 };
    }
    let got = many_hot_precision_recall(&preds, &skewed, &classes).unwrap();
    let nc = classes.len() as f64;
    checks.push(("many-hot".into(), (got.precision - p_sum / nc).abs().max((got.recall - r_sum / nc).abs()), 1e-12));

    // AAE against the normalized dot-product angle
    let pts = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> { (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect() };
    let (pred, gt) = (pts(&mut rng), pts(&mut rng));
    let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.9)).collect();
    let f = 1.0 / 30f64.to_radians().tan();
    let (mut sum, mut cnt) = (0.0, 0);
    for i in (0..n).filter(|&i| valid[i]) {
        let (a, b) = ([pred[i][0], pred[i][1], f], [gt[i][0], gt[i][1], f]);
        let dot: f64 = (0..3).map(|d| a[d] * b[d]).sum();
        let na = (0..3).map(|d| a[d] * a[d]).sum::<f64>().sqrt();
        let nb = (0..3).map(|d| b[d] * b[d]).sum::<f64>().sqrt();
        sum += (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees();
        cnt += 1;
    }
    let got = aae(&pred, &gt, &valid, 60.0).unwrap();
    checks.push(("AAE (deg)".into(), (got - sum / cnt as f64).abs(), 1e-6));

    // AUC against an exhaustive ROC threshold sweep
    let (m, w, frames) = (6, 8, 200);
    let maps: Vec<f64> = (0..frames * m * w).map(|_| (rng.gen_range(0.0..1.0f64) * 16.0).floor()).collect();
    let gts = &gt[..frames];
    let fvalid = &valid[..frames];
    let mut total = 0.0;
    let mut used = 0;
    for fr in (0..frames).filter(|&f| fvalid[f]) {
        let map = &maps[fr * m * w..(fr + 1) * m * w];
        let col = (((gts[fr][0] + 1.0) / 2.0 * w as f64).floor() as usize).min(w - 1);
        let row = (((gts[fr][1] + 1.0) / 2.0 * m as f64).floor() as usize).min(m - 1);
        let pos = row * w + col;
        let mut thresholds: Vec<f64> = map.to_vec();
        thresholds.push(f64::INFINITY);
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let negs = (m * w - 1) as f64;
        let roc: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&t| {
                let fp = (0..m * w).filter(|&i| i != pos && map[i] >= t).count() as f64 / negs;
                let tp = if map[pos] >= t { 1.0 } else { 0.0 };
                (fp, tp)
            })
            .collect();
        total += roc.windows(2).map(|s| (s[1].0 - s[0].0) * (s[1].1 + s[0].1) / 2.0).sum::<f64>();
        used += 1;
    }
    let got = auc_saliency(&maps, m, w, gts, fvalid).unwrap();
    checks.push(("AUC".into(), (got - total / used as f64).abs(), 1e-9));

    let uniform = auc_saliency(&vec![0.25; m * w], m, w, &[[0.1, -0.3]], &[true]).unwrap();
    let mut perfect_map = vec![0.0; m * w];
    perfect_map[egomtl::metrics::cell_of([0.1, -0.3], m, w)] = 1.0;
    let perfect = auc_saliency(&perfect_map, m, w, &[[0.1, -0.3]], &[true]).unwrap();

    let fails: Vec<&str> = checks.iter().filter(|(_, e, t)| e > t).map(|(n, _, _)| n.as_str()).collect();
    let shown: Vec<String> = checks.iter().map(|(n, e, t)| format!("{n} {e:.1e}≤{t:e}")).collect();
    verdict(
        "metric oracles",
        fails.is_empty() && uniform == 0.5 && perfect == 1.0,
        format!("{} samples: {}; uniform AUC {uniform}, perfect AUC {perfect}", n, shown.join(", ")),
    )
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::write_config(tmp.path(), common::TINY_CONFIG);
    let bin = env!("CARGO_BIN_EXE_egomtl");
    let go = |args: &[&str]| {
        let out = Command::new(bin).args(args).arg("--config").arg(&cfg).env("MTL_THREADS", "1").output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    go(&["synth"]);
    let dirs = [tmp.path().join("run1"), tmp.path().join("run2")];
    for d in &dirs {
        go(&["train", "--out", d.to_str().unwrap()]);
    }
    let read = |f: &str| dirs.iter().map(|d| fs::read(d.join(f)).unwrap()).collect::<Vec<_>>();
    let (logs, cks) = (read("train_log.jsonl"), read("best.mtlw"));
    verdict(
        "determinism",
        logs[0] == logs[1] && cks[0] == cks[1],
        format!(
            "two `train` runs with MTL_THREADS=1: log {} bytes {}, checkpoint {} bytes {}",
            logs[0].len(),
            if logs[0] == logs[1] { "identical" } else { "DIFFER" },
            cks[0].len(),
            if cks[0] == cks[1] { "identical" } else { "DIFFER" }
        ),
    )
}

struct DeskRun {
    tasks: &'static str,
    seed: u64,
    top1: f64,
    gaze_error: Option<f64>,
    best_epoch: usize,
    elapsed: Duration,
    epochs: Vec<EpochRecord>,
}

fn desk_run(ds: &Dataset, tasks: &'static str, seed: u64) -> DeskRun {
    let start = Instant::now();
    let ts = TaskSet::parse(tasks, ds.label_space(), Some("A")).unwrap();
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let mut model = build_model::<f32>(&ArchConfig::desk_default(), &ts, seed).unwrap();
    let res = fit(&mut model, &ds.split(Split::Train), &ds.split(Split::Val), None, &cfg, &mut std::io::sink()).unwrap();
    model.load_checkpoint(&res.best_checkpoint).unwrap();
    let report = evaluate(&model, &ds.split(Split::Test), &cfg, None, "test").unwrap();
    let run = DeskRun {
        tasks,
        seed,
        top1: report.classification("action").unwrap().top1,
        gaze_error: report.coordinate("gaze").and_then(|c| c.mean_normalized_error),
        best_epoch: res.best_epoch,
        elapsed: start.elapsed(),
        epochs: res.epochs,
    };
    eprintln!(
        "  desk run {:<6} seed {}: test top1 {:.3}, gaze error {:?}, best epoch {}, {:.0}s",
        run.tasks,
        run.seed,
        run.top1,
        run.gaze_error,
        run.best_epoch,
        run.elapsed.as_secs_f64()
    );
    run
}

fn desk_runs() -> (Verdict, Verdict, Verdict) {
    let ds = generate_dataset(&SynthConfig::default()).unwrap();
    let floor = gaze_floor(&ds.split(Split::Test), ds.config.coord_jitter_sigma).unwrap().empirical;
    let limit = 2.5 * floor;
    let seeds = [0u64, 1, 2];
    let runs: Vec<DeskRun> =
        ["A+H+G", "A", "A+H"].iter().flat_map(|&t| seeds.iter().map(|&s| (t, s)).collect::<Vec<_>>()).map(|(t, s)| desk_run(&ds, t, s)).collect();
    let of = |t: &str| runs.iter().filter(|r| r.tasks == t).collect::<Vec<_>>();
    let mean = |t: &str| of(t).iter().map(|r| r.top1).sum::<f64>() / seeds.len() as f64;

    let ahg = of("A+H+G");
    let passing = ahg
        .iter()
        .filter(|r| r.top1 >= 0.70 && r.gaze_error.is_some_and(|e| e <= limit) && r.elapsed <= Duration::from_secs(1800))
        .count();
    let per_seed: Vec<String> = ahg
        .iter()
        .map(|r| format!("seed {}: top1 {:.3}, gaze {:.4}, {:.0}s", r.seed, r.top1, r.gaze_error.unwrap_or(f64::NAN), r.elapsed.as_secs_f64()))
        .collect();
    let learning = verdict(
        "desk-scale learning",
        passing >= 2,
        format!("A+H+G, 30 epochs, test split: {} | need top1 ≥ 0.70 and gaze ≤ 2.5 × floor {floor:.4} = {limit:.4}; {passing}/3 seeds pass (need 2)", per_seed.join("; ")),
    );

    let ratios: Vec<f64> = ahg
        .iter()
        .map(|r| {
            let loss = |e: &EpochRecord| e.train.get("action").unwrap();
            loss(&r.epochs[10]) / loss(&r.epochs[0])
        })
        .collect();
    let smoke = verdict(
        "convergence smoke (trainer property)",
        ratios.iter().all(|&q| q <= 0.5),
        format!("A+H+G action train loss epoch 10 / epoch 0 per seed: {:.3?} (need ≤ 0.5)", ratios),
    );

    let (a, ah, ahg_mean) = (mean("A"), mean("A+H"), mean("A+H+G"));
    let best_mtl = ah.max(ahg_mean);
    let trend = verdict(
        "MTL trend",
        ah >= a - 0.01 && best_mtl > a,
        format!("mean test top1 over seeds {seeds:?}: A {a:.4}, A+H {ah:.4}, A+H+G {ahg_mean:.4} | need A+H ≥ A − 0.01 and best multitask > A"),
    );
    (learning, smoke, trend)
}
