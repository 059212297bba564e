//! Invariants checked over generated inputs.

mod common;

use proptest::prelude::*;

use vist_core::config::RunConfig;
use vist_core::corpus::{importance_score, sample_mask, target_count, FreqTable, ImportanceScores, SlowFastSplit, Tokenizer};
use vist_core::decoder::pack_visual;
use vist_core::eval::{compression_report, cost_estimate};
use vist_core::model::{Example, ModelConfig};
use vist_core::objectives::{pve_loss_value, text_anchor, PveConfig, Similarity};
use vist_core::render::{fold_strip, image_count, paginate_text, patchify, rasterize, render_strip, RenderConfig};
use vist_core::tensor::{DType, Graph, Tensor};

fn table(samples: &[Vec<usize>]) -> FreqTable {
    let mut t = FreqTable::new();
    for s in samples {
        t.add_sample(s);
    }
    t
}

fn samples() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..40, 1..12), 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn importance_matches_independent_evaluation(s in 1u64..100_000, frac in 0.0f64..=1.0) {
        let c = ((s as f64) * frac).floor() as u64;
        let samples: Vec<Vec<usize>> = (0..s).map(|i| if i < c { vec![7] } else { vec![8] }).collect();
        let t = table(&samples);
        let got = importance_score(&t, 7).unwrap();
        // ln(S / (1 + c)) = ln_1p((S - 1 - c) / (1 + c)), the integer difference is exact
        let want = (((s as i64) - 1 - c as i64) as f64 / (1 + c) as f64).ln_1p();
        let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        prop_assert!(got == want || rel <= 1e-12, "got {got} want {want}");
    }

    #[test]
    fn importance_decreases_with_count(s in 2u64..500, c in 0u64..499) {
        prop_assume!(c < s);
        let mk = |c: u64| {
            let samples: Vec<Vec<usize>> = (0..s).map(|i| if i < c { vec![1] } else { vec![2] }).collect();
            importance_score(&table(&samples), 1).unwrap()
        };
        prop_assert!(mk(c) > mk(c + 1));
    }

    #[test]
    fn mask_count_is_exact(n in 1usize..300, rate in 0.0f64..=1.0, seed in any::<u64>(), kappa in 0.1f64..5.0) {
        let scores = ImportanceScores((0..n).map(|i| (i % 7) as f64 * 0.3 - 0.5).collect());
        let m = sample_mask(&scores, rate, kappa, seed).unwrap();
        let want = ((rate * n as f64 + 0.5).floor() as usize).min(n);
        prop_assert_eq!(m.masked_count(), want);
        prop_assert_eq!(target_count(n, rate), want);
        prop_assert_eq!(m.len(), n);
        prop_assert_eq!(m.flags().iter().filter(|&&f| f).count(), want);
    }

    #[test]
    fn mask_is_seed_deterministic(n in 1usize..100, seed in any::<u64>()) {
        let scores = ImportanceScores((0..n).map(|i| (i as f64).sin()).collect());
        prop_assert_eq!(sample_mask(&scores, 0.5, 1.0, seed).unwrap(), sample_mask(&scores, 0.5, 1.0, seed).unwrap());
    }

    #[test]
    fn counts_are_bounded_by_sample_count(s in samples()) {
        let t = table(&s);
        prop_assert_eq!(t.sample_count(), s.len() as u64);
        for (_, c) in t.iter() {
            prop_assert!(c <= t.sample_count());
        }
    }

    #[test]
    fn shard_merge_equals_whole(s in samples(), cut in 0usize..20) {
        let cut = cut.min(s.len());
        let mut a = table(&s[..cut]);
        a.merge(&table(&s[cut..]));
        prop_assert_eq!(a, table(&s));
    }

    /// Duplicating the corpus doubles |S| and every count, so scores move to
    /// ln(2|S| / (1 + 2c)): the ordering of tokens is kept.
    #[test]
    fn duplicated_corpus_keeps_score_order(s in samples()) {
        let once = table(&s);
        let twice = table(&[s.clone(), s].concat());
        prop_assert_eq!(twice.sample_count(), 2 * once.sample_count());
        let ids: Vec<usize> = (0..41).collect();
        let a = ImportanceScores::for_tokens(&once, &ids).unwrap().0;
        let b = ImportanceScores::for_tokens(&twice, &ids).unwrap().0;
        for i in 0..ids.len() {
            prop_assert_eq!(twice.count(i), 2 * once.count(i));
            let exact = (2.0 * once.sample_count() as f64 / (1 + 2 * once.count(i)) as f64).ln();
            prop_assert_eq!(b[i], exact);
            for j in 0..ids.len() {
                prop_assert_eq!(a[i] < a[j], b[i] < b[j]);
            }
        }
    }

    #[test]
    fn split_is_a_prefix_suffix_partition(tokens in prop::collection::vec(0usize..500, 0..64), t_e in 0usize..80) {
        let s = SlowFastSplit::new(&tokens, t_e);
        prop_assert_eq!(s.encoder_tokens.len() + s.decoder_tokens.len(), tokens.len());
        prop_assert_eq!([s.encoder_tokens, s.decoder_tokens].concat(), tokens.clone());
        prop_assert_eq!(s.encoder_tokens.len(), t_e.min(tokens.len()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tokenizer_round_trips(corpus in prop::collection::vec("[a-z ]{1,30}", 1..6), text in "\\PC{0,40}") {
        let tok = Tokenizer::train(&corpus, 300).unwrap();
        let ids = tok.encode(&text);
        prop_assert!(ids.iter().all(|&i| i < tok.vocab_size()));
        prop_assert_eq!(tok.decode(&ids), text.clone());
        let again = Tokenizer::from_text(&tok.to_text()).unwrap();
        prop_assert_eq!(again.encode(&text), ids);
    }

    #[test]
    fn folding_conserves_pixels(text in "[ -~]{0,592}") {
        let cfg = RenderConfig::default();
        let strip = render_strip(&text, &cfg).unwrap();
        let folded = fold_strip(&strip, &cfg);
        let key = |v: &Vec<f32>| { let mut k: Vec<u32> = v.iter().map(|x| x.to_bits()).collect(); k.sort_unstable(); k };
        prop_assert_eq!(key(&strip), key(&folded));
    }

    #[test]
    fn rasterize_is_pure_and_in_range(text in "\\PC{0,200}") {
        let cfg = RenderConfig::default();
        let a = rasterize(&text, &cfg).unwrap();
        prop_assert!(a.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(a, rasterize(&text, &cfg).unwrap());
    }

    #[test]
    fn empty_flag_means_every_pixel_is_background(text in "[ -~]{0,300}", threshold in 0.05f32..1.0) {
        let cfg = RenderConfig { empty_threshold: threshold, ..RenderConfig::default() };
        let grid = patchify(&rasterize(&text, &cfg).unwrap(), &cfg).unwrap();
        prop_assert_eq!(grid.len(), 256);
        for i in 0..grid.len() {
            prop_assert_eq!(grid.empty_mask[i], grid.patch(i).iter().all(|&v| v >= threshold));
        }
    }

    #[test]
    fn image_count_grows_with_length(t in 0usize..20_000, extra in 0usize..500) {
        let cfg = RenderConfig::default();
        prop_assert!(image_count(t, 0, &cfg) <= image_count(t + extra, 0, &cfg));
        prop_assert_eq!(image_count(t, 0, &cfg), t.div_ceil(cfg.tokens_per_image));
    }

    #[test]
    fn pagination_covers_the_text(words in prop::collection::vec("[a-z]{1,9}", 1..400)) {
        let cfg = RenderConfig::default();
        let text = words.join(" ");
        let tokens = words.len() * 2;
        let pages = paginate_text(&text, tokens, &cfg).unwrap();
        prop_assert!(pages.len() <= image_count(tokens, text.chars().count(), &cfg));
        prop_assert!(!pages.is_empty());
        for w in pages.windows(2) {
            prop_assert!(w[0].source_span.1 <= w[1].source_span.0 + 1);
        }
    }
}

#[test]
fn patch_count_identity() {
    for p in [1, 2, 4, 7, 8, 14, 16, 28, 32, 56, 112, 224] {
        let cfg = RenderConfig { patch_size: p, ..RenderConfig::default() };
        cfg.validate().unwrap();
        assert_eq!(cfg.patch_count(), (224 / p) * (224 / p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 24), bits in prop::collection::vec(any::<bool>(), 24)) {
        let mut mask = Tensor::<f64>::zeros(vec![4, 6]);
        for (i, &b) in bits.iter().enumerate() {
            // keep the first entry of each row so no row is fully masked
            if b && i % 6 != 0 {
                mask.data_mut()[i] = f64::NEG_INFINITY;
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 6], vals).unwrap());
        let y = g.softmax(x, Some(&mask)).unwrap();
        let y = g.value(y).data().to_vec();
        for r in 0..4 {
            let row = &y[r * 6..r * 6 + 6];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            for c in 0..6 {
                if mask.data()[r * 6 + c] == f64::NEG_INFINITY {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn pve_is_permutation_invariant_and_scale_free(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 2..6),
        noise in prop::collection::vec(prop::collection::vec(-0.3f64..0.3, 5), 6),
        scales in prop::collection::vec(0.01f64..100.0, 6),
        rot in 0usize..6,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let b = rows.len();
        let text: Vec<Vec<f64>> = rows.iter().zip(&noise).map(|(r, n)| r.iter().zip(n).map(|(a, b)| a + b).collect()).collect();
        prop_assume!(text.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let cfg = PveConfig { similarity: Similarity::Cosine, ..PveConfig::default() };
        let base = pve_loss_value(&rows, &text, &cfg).unwrap();
        prop_assert!(base >= 0.0);

        let k = rot % b;
        let (mut pv, mut pt) = (rows.clone(), text.clone());
        pv.rotate_left(k);
        pt.rotate_left(k);
        let permuted = pve_loss_value(&pv, &pt, &cfg).unwrap();
        prop_assert!((permuted - base).abs() <= 1e-12 * base.abs().max(1.0));

        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, &s)| r.iter().map(|x| x * s).collect()).collect();
        let s = pve_loss_value(&scaled, &text, &cfg).unwrap();
        prop_assert!((s - base).abs() <= 1e-9);
    }

    #[test]
    fn text_anchor_without_masking_is_the_mean(ids in prop::collection::vec(0usize..6, 1..10)) {
        let table = common::random(&[6, 4], 3);
        let mut g = Graph::new();
        let t = g.constant(table.clone());
        let keep = vec![true; ids.len()];
        let a = text_anchor(&mut g, t, &ids, &keep, 1).unwrap();
        let got = g.value(a).data().to_vec();
        for d in 0..4 {
            let mean = ids.iter().map(|&i| table.data()[i * 4 + d]).sum::<f64>() / ids.len() as f64;
            prop_assert!((got[d] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn compression_ratio_arithmetic(t in 0usize..50_000, latents in 1usize..200) {
        let r = compression_report(t, &RenderConfig::default(), latents);
        prop_assert_eq!(r.images, t.div_ceil(147));
        prop_assert_eq!(r.visual_tokens, r.images * latents);
        match r.delta {
            Some(d) => prop_assert_eq!(d, t as f64 / r.visual_tokens as f64),
            None => prop_assert!(t == 0),
        }
    }
}

fn model_cfg(latents: usize, layers: usize, dim: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.resampler.latents = latents;
    cfg.decoder.layers = layers;
    cfg.decoder.dim = dim;
    cfg.decoder.max_positions = 100_000;
    cfg.sync();
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cost_is_monotone(t_e in 0usize..5000, t_d in 1usize..2000, n in 1usize..128, layers in 1usize..8, dim_step in 1usize..8, grow in 1usize..600) {
        let dim = dim_step * 32;
        let base = cost_estimate(&model_cfg(n, layers, dim), t_e, t_d, DType::F32);
        let bigger = [
            cost_estimate(&model_cfg(n, layers, dim), t_e + grow, t_d, DType::F32),
            cost_estimate(&model_cfg(n, layers, dim), t_e, t_d + grow, DType::F32),
            cost_estimate(&model_cfg(n + 1, layers, dim), t_e, t_d, DType::F32),
            cost_estimate(&model_cfg(n, layers + 1, dim), t_e, t_d, DType::F32),
            cost_estimate(&model_cfg(n, layers, dim + 32), t_e, t_d, DType::F32),
        ];
        for c in &bigger {
            prop_assert!(c.flops >= base.flops);
            prop_assert!(c.memory_bytes >= base.memory_bytes);
        }
        let f64_cost = cost_estimate(&model_cfg(n, layers, dim), t_e, t_d, DType::F64);
        prop_assert_eq!(f64_cost.memory_bytes, 2 * base.memory_bytes);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..1.0, tau in 0.01f64..2.0, rate in 0.0f64..=1.0, layers in 2usize..6) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.train.lr = lr;
        cfg.model.pve.tau = tau;
        cfg.model.pve.mask_rate = rate;
        cfg.model.decoder.layers = layers;
        let cfg = cfg.resolve().unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap().resolve().unwrap();
        prop_assert_eq!(back, cfg);
    }
}

fn decoder_example(tokens: &[usize]) -> Example {
    Example {
        images: Vec::new(),
        encoder_tokens: Vec::new(),
        decoder_tokens: tokens.to_vec(),
        targets: tokens.to_vec(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decoder_is_causal(tokens in prop::collection::vec(0usize..270, 2..8), at in 0usize..8, other in 0usize..270) {
        let (model, store) = common::tiny_model();
        let at = at % tokens.len();
        let mut changed = tokens.clone();
        changed[at] = other;
        let a = model.example_logits(&store, &decoder_example(&tokens), None).unwrap();
        let b = model.example_logits(&store, &decoder_example(&changed), None).unwrap();
        let v = *a.shape().last().unwrap();
        prop_assert_eq!(&a.data()[..at * v], &b.data()[..at * v]);
    }

    #[test]
    fn visual_path_shapes_and_ablation(text in "[a-z ]{1,80}", pages in 1usize..4, tokens in prop::collection::vec(0usize..270, 1..8)) {
        let (model, store) = common::tiny_model();
        let rc = &model.cfg.render;
        let grids: Vec<_> = (0..pages).map(|i| patchify(&rasterize(&format!("{i} {text}"), rc).unwrap(), rc).unwrap()).collect();
        let vt = model.visual_tokens(&store, &grids).unwrap();
        prop_assert_eq!(vt.tokens.shape(), &[pages, model.cfg.resampler.latents + 1, model.cfg.vision.dim][..]);

        // cross-attention weights over the visual keys sum to one per query
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let v = g.constant(vt.tokens.clone());
        let vis = pack_visual(&mut g, &[Some(v)], model.cfg.vision.dim, true).unwrap().unwrap();
        let out = model.decoder.forward(&mut g, &p, &tokens, 1, Some(&vis)).unwrap();
        for probs in &out.cross_probs {
            let s = *g.shape(*probs).last().unwrap();
            for row in g.value(*probs).data().chunks(s) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }

        // with every gate at zero the images make no difference at all
        let zeroed = model.gates_zeroed(&store);
        let with = Example { images: grids, ..decoder_example(&tokens) };
        let a = model.example_logits(&zeroed, &with, None).unwrap();
        let b = model.example_logits(&zeroed, &decoder_example(&tokens), None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn empty_patch_content_is_ignored(text in "[a-z]{1,40}", level in 0.985f32..1.0) {
        let (model, store) = common::tiny_model();
        let rc = &model.cfg.render;
        let grid = patchify(&rasterize(&text, rc).unwrap(), rc).unwrap();
        let mut altered = grid.clone();
        let d = altered.patch_dim;
        for i in 0..altered.len() {
            if altered.empty_mask[i] {
                altered.patches[i * d..(i + 1) * d].iter_mut().enumerate().for_each(|(j, v)| *v = if j % 3 == 0 { level } else { 1.0 });
            }
        }
        let a = model.visual_tokens(&store, &[grid]).unwrap();
        let b = model.visual_tokens(&store, &[altered]).unwrap();
        prop_assert_eq!(a.tokens, b.tokens);
    }
}
