use super::{par_map, EvalError};
use crate::model::{Example, VistModel};
use crate::nn::ParamStore;
use crate::tensor::Real;
use crate::vision::VisualFeatures;

/// Summed cross-entropy over the final `last_k` positions of one example.
fn tail_nll<T: Real>(model: &VistModel, store: &ParamStore<T>, ex: &Example, cached: Option<&VisualFeatures<T>>, last_k: usize) -> Result<f64, EvalError> {
    let logits = model.example_logits(store, ex, cached)?;
    let v = *logits.shape().last().expect("logits have a vocabulary axis");
    let t = ex.targets.len();
    let data = logits.data();
    let mut nll = 0.0;
    for pos in t - last_k..t {
        let row = &data[pos * v..(pos + 1) * v];
        let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
        nll += lse - row[ex.targets[pos]].f64();
    }
    Ok(nll)
}

/// Mean cross-entropy over the last `last_k` decoder positions of every
/// example. `cache` may be empty or hold frozen-encoder features per example.
pub fn mean_nll<T: Real>(
    model: &VistModel,
    store: &ParamStore<T>,
    examples: &[Example],
    cache: &[Option<VisualFeatures<T>>],
    last_k: usize,
    workers: usize,
) -> Result<f64, EvalError> {
    if examples.is_empty() || last_k == 0 {
        return Err(EvalError::NoSamples);
    }
    for (index, ex) in examples.iter().enumerate() {
        if ex.targets.len() < last_k || ex.decoder_tokens.len() != ex.targets.len() {
            return Err(EvalError::SampleTooShort {
                index,
                len: ex.decoder_tokens.len().min(ex.targets.len()),
                need: last_k,
            });
        }
    }
    let per = par_map(workers, examples, |i, ex| tail_nll(model, store, ex, cache.get(i).and_then(Option::as_ref), last_k))?;
    Ok(per.iter().sum::<f64>() / (examples.len() * last_k) as f64)
}

/// `exp` of [`mean_nll`].
pub fn eval_perplexity<T: Real>(
    model: &VistModel,
    store: &ParamStore<T>,
    examples: &[Example],
    cache: &[Option<VisualFeatures<T>>],
    last_k: usize,
    workers: usize,
) -> Result<f64, EvalError> {
    Ok(mean_nll(model, store, examples, cache, last_k, workers)?.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::model::ModelConfig;
    use crate::nn::Group;
    use crate::vision::{ResamplerConfig, VisionConfig};

    fn cfg(vocab: usize) -> ModelConfig {
        let mut c = ModelConfig {
            vision: VisionConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                ..VisionConfig::default()
            },
            resampler: ResamplerConfig {
                latents: 2,
                depth: 1,
                heads: 2,
                latent_self_attention: false,
            },
            decoder: DecoderConfig {
                vocab_size: vocab,
                dim: 8,
                layers: 2,
                heads: 2,
                max_positions: 16,
                mlp_ratio: 2,
                ..DecoderConfig::default()
            },
            ..ModelConfig::default()
        };
        c.sync();
        c
    }

    fn text_only(n: usize, t: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                images: vec![],
                encoder_tokens: vec![],
                decoder_tokens: (0..t).map(|j| (i * 7 + j * 3) % 300).collect(),
                targets: (0..t).map(|j| (i * 5 + j * 11) % 300).collect(),
            })
            .collect()
    }

    #[test]
    fn zero_head_gives_uniform_perplexity() {
        let (m, mut store) = VistModel::build::<f64>(cfg(512), 3).unwrap();
        for p in store.iter_mut().filter(|p| p.name.starts_with("decoder.head")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ppl = eval_perplexity(&m, &store, &text_only(3, 8), &[], 4, 1).unwrap();
        assert!((ppl - 512.0).abs() < 1e-6 * 512.0, "{ppl}");
    }

    #[test]
    fn confident_head_gives_unit_perplexity() {
        let (m, mut store) = VistModel::build::<f64>(cfg(300), 3).unwrap();
        // bias towards token 0 only; every target is 0
        for p in store.iter_mut().filter(|p| p.group == Group::DecoderSelf && p.name.starts_with("decoder.head")) {
            let b = p.name.ends_with(".b");
            p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if b && i == 0 { 1e4 } else { 0.0 });
        }
        let mut ex = text_only(2, 6);
        ex.iter_mut().for_each(|e| e.targets.iter_mut().for_each(|t| *t = 0));
        let ppl = eval_perplexity(&m, &store, &ex, &[], 6, 1).unwrap();
        assert_eq!(ppl, 1.0);
    }

    #[test]
    fn workers_do_not_change_the_result() {
        let (m, store) = VistModel::build::<f32>(cfg(300), 5).unwrap();
        let ex = text_only(5, 8);
        let a = mean_nll(&m, &store, &ex, &[], 4, 1).unwrap();
        let b = mean_nll(&m, &store, &ex, &[], 4, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn short_samples_are_rejected() {
        let (m, store) = VistModel::build::<f32>(cfg(300), 5).unwrap();
        let err = mean_nll(&m, &store, &text_only(2, 3), &[], 4, 1).unwrap_err();
        assert!(matches!(err, EvalError::SampleTooShort { index: 0, len: 3, need: 4 }));
    }
}
