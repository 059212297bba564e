//! Training loop behaviour: loss trend, frozen encoder, checkpoints, seeds.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vist_core::model::{Example, VistModel};
use vist_core::train::{encoder_checksum, load_checkpoint, run_training, save_checkpoint, Checkpoint, TrainConfig, TrainData};

const SEP: usize = 100;

/// `x1..xk SEP x1..xk`: the second half is predictable from the first.
fn copy_examples(n: usize, k: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let xs: Vec<usize> = (0..k).map(|_| rng.gen_range(0..16)).collect();
            let seq: Vec<usize> = xs.iter().copied().chain([SEP]).chain(xs.iter().copied()).collect();
            Example {
                images: Vec::new(),
                encoder_tokens: Vec::new(),
                decoder_tokens: seq[..seq.len() - 1].to_vec(),
                targets: seq[1..].to_vec(),
            }
        })
        .collect()
}

fn copy_setup(steps: usize) -> (VistModel, vist_core::nn::ParamStore<f32>, TrainConfig) {
    let cfg = common::config(&[
        "decoder.vocab_size=270",
        "decoder.dim=32",
        "decoder.layers=2",
        "decoder.heads=4",
        "decoder.max_positions=16",
        "vision.dim=8",
        "vision.layers=1",
        "vision.heads=2",
        "resampler.latents=2",
        "resampler.depth=1",
        "resampler.heads=2",
        "train.t_e=0",
        "train.t_d=16",
        "train.batch=16",
        "train.lr=0.003",
        "train.warmup=20",
        "eval.last_k=8",
    ]);
    let mut tc = cfg.train.clone();
    tc.total_steps = steps;
    let (model, store) = VistModel::build::<f32>(cfg.model, 11).unwrap();
    (model, store, tc)
}

#[test]
fn copy_task_loss_trends_down() {
    let (model, store, tc) = copy_setup(1000);
    let data = TrainData::new(copy_examples(512, 7, 1), None).unwrap();
    let out = run_training(&model, &data, store, &tc, "", None, None).unwrap();
    let loss: Vec<f64> = out.metrics.iter().map(|m| m.joint).collect();
    let w = 200;
    let ma: Vec<f64> = loss.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect();
    let after = &ma[tc.warmup..];
    let violations = after.windows(2).filter(|p| p[1] > p[0]).count();
    let share = violations as f64 / (after.len() - 1) as f64;
    eprintln!("first {:.3} last {:.3} violations {share:.3}", ma[0], ma[ma.len() - 1]);
    assert!(share <= 0.05, "{violations} of {} windows rose", after.len() - 1);
    assert!(ma[ma.len() - 1] < ma[0]);
}

fn image_examples(model: &VistModel, n: usize) -> Vec<Example> {
    let rc = &model.cfg.render;
    (0..n)
        .map(|i| {
            let text = format!("sample {i} with a few rendered words");
            let grid = vist_core::render::patchify(&vist_core::render::rasterize(&text, rc).unwrap(), rc).unwrap();
            let dec: Vec<usize> = (0..9).map(|j| 97 + (i + j) % 20).collect();
            Example {
                images: vec![grid],
                encoder_tokens: text.bytes().map(usize::from).collect(),
                decoder_tokens: dec[..8].to_vec(),
                targets: dec[1..].to_vec(),
            }
        })
        .collect()
}

/// The encoder runs inside every step's graph here (no feature cache), so
/// only its frozen flag keeps it from moving.
#[test]
fn frozen_encoder_never_moves() {
    let (model, store, mut tc) = copy_setup(40);
    tc.batch = 4;
    let before = encoder_checksum(&store);
    let vision_before: Vec<_> = store.iter().filter(|p| p.group == vist_core::nn::Group::Vision).cloned().collect();
    let data = TrainData::new(image_examples(&model, 8), None).unwrap();
    let out = run_training(&model, &data, store, &tc, "", None, None).unwrap();
    assert!(out.metrics.iter().all(|m| m.pve.is_some()));
    assert_eq!(encoder_checksum(&out.store), before);
    let vision_after: Vec<_> = out.store.iter().filter(|p| p.group == vist_core::nn::Group::Vision).cloned().collect();
    assert_eq!(vision_before, vision_after);
}

#[test]
fn checkpoint_file_round_trip_is_bitwise() {
    let (model, store, tc) = copy_setup(15);
    let data = TrainData::new(copy_examples(64, 5, 2), None).unwrap();
    let out = run_training(&model, &data, store, &tc, "seed = 1\n", None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    assert!(load_checkpoint::<f64>(&path).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
}

#[test]
fn same_seed_same_trajectory() {
    let run = || {
        let (model, store, tc) = copy_setup(30);
        let data = TrainData::new(copy_examples(64, 5, 3), None).unwrap();
        run_training(&model, &data, store, &tc, "", None, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn copy_task_generalizes_to_held_out_sequences() {
    let k = 6;
    let (model, store, tc) = copy_setup(1500);
    let train = TrainData::new(copy_examples(4096, k, 4), None).unwrap();
    let held = copy_examples(64, k, 5);
    let held_loss = |store: &vist_core::nn::ParamStore<f32>| {
        let mut total = 0.0;
        for ex in &held {
            let mut g = vist_core::tensor::Graph::new();
            let p = store.bind(&mut g);
            let out = model.joint_forward(&mut g, &p, &[ex], &[None], &[], None).unwrap();
            total += g.value(out.lm).item() as f64;
        }
        total / held.len() as f64
    };
    let initial = held_loss(&store);
    let out = run_training(&model, &train, store, &tc, "", None, None).unwrap();
    let fin = held_loss(&out.store);
    assert!(fin <= 0.5 * initial, "held-out lm loss {initial:.3} -> {fin:.3}");

    let (mut right, mut total) = (0, 0);
    for ex in &held {
        let prompt = &ex.decoder_tokens[..=k];
        let seq = model.decoder.generate(&out.store, prompt, None, k).unwrap();
        right += seq[k + 1..].iter().zip(&prompt[..k]).filter(|(a, b)| a == b).count();
        total += k;
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.95, "suffix token accuracy {acc:.3}");
}
