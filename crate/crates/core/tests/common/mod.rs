//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vist_core::config::RunConfig;
use vist_core::corpus::MaskVector;
use vist_core::model::{Example, VistModel};
use vist_core::nn::{Bound, ParamStore};
use vist_core::render::{paginate_text, patchify, rasterize, RenderConfig, TextImage};
use vist_core::tensor::{gradient_check, Graph, Result, Tensor, Var};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const JOINT_TOL: f64 = 1e-4;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `y` with a fixed random tensor so every output coordinate
/// reaches the scalar with a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let n: usize = g.shape(y).iter().product();
    let flat = g.reshape(y, &[1, n])?;
    let w = g.constant(random(&[n, 1], seed));
    g.matmul(flat, w)
}

/// Worst relative error of `f` (projected to a scalar) over `inputs`.
pub fn primitive_error(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    gradient_check(|g, v| f(g, v).and_then(|y| project(g, y, 99)), inputs, 1e-5).unwrap()
}

fn causal_mask() -> Tensor<f64> {
    let mut mask = Tensor::zeros(vec![3, 5]);
    for r in 0..3 {
        for c in r + 1..5 {
            mask.data_mut()[r * 5 + c] = f64::NEG_INFINITY;
        }
    }
    mask
}

/// One named check per differentiable primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let keep = [true, false, true, true, true, true, false, false];
    let scored = [true, false, true, true];
    let mask = causal_mask();
    vec![
        ("matmul", primitive_error(&[random(&[2, 3, 4], 1), random(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1]))),
        ("matmul_batched", primitive_error(&[random(&[2, 3, 4], 3), random(&[2, 4, 2], 4)], |g, v| g.matmul(v[0], v[1]))),
        ("add_broadcast", primitive_error(&[random(&[3, 4], 5), random(&[4], 6)], |g, v| g.add(v[0], v[1]))),
        ("mul", primitive_error(&[random(&[3, 4], 7), random(&[3, 4], 8)], |g, v| g.mul(v[0], v[1]))),
        ("sub_broadcast", primitive_error(&[random(&[3, 4], 9), random(&[1, 4], 10)], |g, v| g.sub(v[0], v[1]))),
        ("scale", primitive_error(&[random(&[5], 11)], |g, v| Ok(g.scale(v[0], 2.5)))),
        ("transpose", primitive_error(&[random(&[2, 3, 4], 12)], |g, v| g.transpose(v[0], &[2, 0, 1]))),
        ("transpose_last", primitive_error(&[random(&[2, 3, 4], 13)], |g, v| g.transpose_last(v[0]))),
        ("reshape", primitive_error(&[random(&[2, 6], 14)], |g, v| g.reshape(v[0], &[3, 4]))),
        ("concat", primitive_error(&[random(&[2, 3], 15), random(&[2, 2], 16)], |g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", primitive_error(&[random(&[4, 3], 17)], |g, v| g.slice(v[0], 0, 1, 3))),
        ("softmax", primitive_error(&[random(&[3, 5], 18)], |g, v| g.softmax(v[0], None))),
        ("softmax_masked", primitive_error(&[random(&[3, 5], 19)], |g, v| g.softmax(v[0], Some(&mask)))),
        ("layer_norm", primitive_error(&[random(&[3, 6], 20)], |g, v| g.layer_norm(v[0], 1e-5))),
        ("l2_normalize", primitive_error(&[random(&[3, 6], 21)], |g, v| g.l2_normalize(v[0]))),
        ("gelu", primitive_error(&[random(&[4, 5], 22)], |g, v| Ok(g.gelu(v[0])))),
        ("mean_pool_masked", primitive_error(&[random(&[2, 4, 3], 23)], |g, v| g.mean_pool(v[0], Some(&keep)))),
        ("mean_pool", primitive_error(&[random(&[2, 4, 3], 24)], |g, v| g.mean_pool(v[0], None))),
        ("embedding", primitive_error(&[random(&[6, 3], 25)], |g, v| g.embedding(v[0], &[1, 4, 4, 0, 5, 1], &[2, 3]))),
        (
            "cross_entropy",
            gradient_check(|g, v| g.cross_entropy(v[0], &[2, 0, 4, 1], None), &[random(&[4, 5], 26)], 1e-5).unwrap(),
        ),
        (
            "cross_entropy_scored",
            gradient_check(|g, v| g.cross_entropy(v[0], &[2, 0, 4, 1], Some(&scored)), &[random(&[4, 5], 27)], 1e-5).unwrap(),
        ),
    ]
}

pub fn config(sets: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(sets).unwrap();
    cfg.resolve().unwrap()
}

pub fn tiny_model() -> (VistModel, ParamStore<f64>) {
    let cfg = config(&[
        "vision.dim=8",
        "vision.layers=1",
        "vision.heads=2",
        "vision.mlp_ratio=2",
        "resampler.latents=3",
        "resampler.depth=1",
        "resampler.heads=2",
        "decoder.vocab_size=270",
        "decoder.dim=8",
        "decoder.layers=2",
        "decoder.heads=2",
        "decoder.max_positions=8",
        "decoder.mlp_ratio=2",
        "decoder.gate_init=0.5",
        "pve.lambda=0.7",
        "train.t_d=8",
        "eval.last_k=4",
    ]);
    VistModel::build::<f64>(cfg.model, 3).unwrap()
}

fn example(text: &str, dec: &[usize], model: &VistModel) -> Example {
    let rc = &model.cfg.render;
    let img = rasterize(text, rc).unwrap();
    Example {
        images: vec![patchify(&img, rc).unwrap()],
        encoder_tokens: text.bytes().map(usize::from).collect(),
        decoder_tokens: dec[..dec.len() - 1].to_vec(),
        targets: dec[1..].to_vec(),
    }
}

/// Relative error of the joint loss gradient on a tiny model with images,
/// masks and both loss terms, over a fixed random sample of coordinates
/// from every parameter tensor, and the number of coordinates checked.
///
/// Key biases have an exactly zero gradient (softmax ignores a shared
/// shift), where the difference quotient is pure round-off near 1e-11, so
/// the error is taken against `max(|a|, |n|, 1e-6)`.
pub fn joint_gradient_error() -> (f64, usize) {
    let (model, store) = tiny_model();
    let batch = [
        example("alpha beta gamma", &[97, 98, 99, 100, 101], &model),
        example("delta epsilon", &[101, 100, 99, 98, 97], &model),
    ];
    let refs: Vec<&Example> = batch.iter().collect();
    let masks = [
        MaskVector::from_flags((0..16).map(|i| i % 3 == 0).collect()),
        MaskVector::from_flags((0..13).map(|i| i % 2 == 1).collect()),
    ];
    let loss = |values: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let p = Bound(values.iter().map(|v| g.leaf(v.clone(), grads)).collect());
        let out = model.joint_forward(&mut g, &p, &refs, &[None, None], &masks, None).unwrap();
        assert!(out.pve.is_some());
        let value = g.value(out.joint).item();
        if !grads {
            return (value, Vec::new());
        }
        g.backward(out.joint).unwrap();
        let gr = p.0.iter().zip(values).map(|(v, x)| g.grad(*v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec)).collect();
        (value, gr)
    };

    let mut values: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
    let (_, analytic) = loss(&values, true);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-5;
    let (mut worst, mut count) = (0.0f64, 0);
    for (i, param) in store.iter().enumerate() {
        // every tensor gets a few coordinates, large ones a few more
        for _ in 0..3 + param.value.len() / 400 {
            let j = rng.gen_range(0..param.value.len());
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + eps;
            let up = loss(&values, false).0;
            values[i].data_mut()[j] = orig - eps;
            let down = loss(&values, false).0;
            values[i].data_mut()[j] = orig;
            let (a, n) = (analytic[i][j], (up - down) / (2.0 * eps));
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
            count += 1;
        }
    }
    (worst, count)
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn long_text() -> String {
    (0..60).map(|i| format!("line {i}: the slow path reads pixels, the fast path reads tokens. ")).collect()
}

pub fn golden_cases() -> Vec<(&'static str, TextImage)> {
    let rgb = RenderConfig::default();
    let gray = RenderConfig { channels: 1, ..RenderConfig::default() };
    let r = |t: &str, c: &RenderConfig| rasterize(t, c).unwrap();
    let pages = paginate_text(&long_text(), 300, &rgb).unwrap();
    assert!(pages.len() >= 3);
    vec![
        ("empty", r("", &rgb)),
        ("single_glyph", r("A", &rgb)),
        ("hello", r("hello", &rgb)),
        ("pangram", r("The quick brown fox jumps over the lazy dog.", &rgb)),
        ("digits", r("0123456789 +-*/= %$#@ 3.14159 2.71828", &rgb)),
        ("punctuation", r("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~", &rgb)),
        ("non_ascii", r("caf\u{e9} na\u{ef}ve \u{2603} \u{4e2d}\u{6587} tab\there", &rgb)),
        ("one_band", r(&"x".repeat(37), &rgb)),
        ("fold_boundary", r(&"ab".repeat(40), &rgb)),
        ("gray", r("single channel rendering", &gray)),
        ("page_0", pages[0].clone()),
        ("page_1", pages[1].clone()),
        ("page_last", pages.last().unwrap().clone()),
        ("full_strip", r(&"#".repeat(592), &rgb)),
    ]
}
