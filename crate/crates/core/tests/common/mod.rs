#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub const TINY_CONFIG: &str = "\
seed = 4
tasks = A+H+G

[synth]
num_clips = 24
frames_per_clip = 8
frame_size = 16

[train]
epochs = 2
batch_size = 4
clip_len = 4
window_len = 8
train_scale = 18
crop_size = 16

[arch]
stages = 4@3x3x3/1x2x2, 6@1x3x3/2x2x2

[paths]
dataset = data
out = run
";

/// Writes `text` as `config.ini` in `dir` and returns its path.
pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.ini");
    std::fs::write(&p, text).unwrap();
    p
}

pub mod gradcheck {
    use egomtl::autograd::Graph;
    use egomtl::gradcheck::{central_difference_with, relative_error};
    use egomtl::losses::{total_loss, Batch};
    use egomtl::model::{build_model, ArchConfig, Mode, TaskSet};
    use egomtl::synthdata::{generate_dataset, SynthConfig};
    use egomtl::trainer::{make_batch, AugmentMode, TrainConfig};
    use egomtl::CheckModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct Probe {
        pub loss: &'static str,
        pub param: String,
        pub index: usize,
        pub analytic: f64,
        pub numeric: f64,
        pub rel: f64,
    }

    fn loss_of(model: &mut CheckModel, batch: &Batch<f64>, task: &str) -> f64 {
        let mut g = Graph::new();
        let (_, lg) = total_loss(&mut g, model, batch, Mode::Train, &Default::default()).unwrap();
        g.value(lg.task(task).unwrap()).item()
    }

    /// Compares analytic and central-difference gradients of the action cross-entropy and the gaze
    /// coordinate loss through the desk-scale model, at one entry of every parameter tensor plus
    /// `extra` random entries.
    pub fn desk_probes(extra: usize, step: f64) -> Vec<Probe> {
        let synth = SynthConfig { num_clips: 8, ..SynthConfig::default() };
        let ds = generate_dataset(&synth).unwrap();
        let tasks = TaskSet::parse("A+H+G", ds.label_space(), None).unwrap();
        let mut model = build_model::<f64>(&ArchConfig::desk_default(), &tasks, 11).unwrap();
        let cfg = TrainConfig::default();
        let samples: Vec<_> = ds.samples.iter().take(2).collect();
        let batch = make_batch::<f64>(&samples, &cfg, &mut ChaCha8Rng::seed_from_u64(3), AugmentMode::Train).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let names: Vec<(String, usize)> = model.params().map(|(n, p)| (n.to_string(), p.len())).collect();
        let mut picks: Vec<(String, usize)> = names.iter().map(|(n, len)| (n.clone(), rng.gen_range(0..*len))).collect();
        for _ in 0..extra {
            let (n, len) = &names[rng.gen_range(0..names.len())];
            picks.push((n.clone(), rng.gen_range(0..*len)));
        }

        let mut out = Vec::new();
        for (loss, task) in [("cross-entropy", "action"), ("coordinate", "gaze")] {
            model.zero_grads();
            let mut g = Graph::new();
            let (_, lg) = total_loss(&mut g, &mut model, &batch, Mode::Train, &Default::default()).unwrap();
            g.backward(lg.task(task).unwrap()).unwrap();
            model.collect_grads(&g);
            let grads: Vec<(String, Vec<f64>)> =
                model.params().map(|(n, p)| (n.to_string(), p.grad().unwrap().to_vec())).collect();
            for (name, index) in &picks {
                let analytic = grads.iter().find(|(n, _)| n == name).unwrap().1[*index];
                let at = model.param(name).unwrap().data()[*index];
                let numeric = central_difference_with(
                    |v| {
                        model.param_mut(name).unwrap().data_mut()[*index] = v;
                        loss_of(&mut model, &batch, task)
                    },
                    at,
                    step,
                );
                model.param_mut(name).unwrap().data_mut()[*index] = at;
                let rel = relative_error(analytic, numeric);
                out.push(Probe { loss, param: name.clone(), index: *index, analytic, numeric, rel });
            }
        }
        out
    }
}
