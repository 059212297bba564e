use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{par_map, EvalError};
use crate::corpus::Tokenizer;
use crate::model::{Example, VistModel};
use crate::nn::ParamStore;
use crate::synth::IclTask;
use crate::tensor::Real;
use crate::train::render_tokens;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IclResult {
    /// Mean of `per_seed`.
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
}

/// Vocabulary id of every candidate label, which must be one token when
/// preceded by a space.
fn label_ids(tok: &Tokenizer, task: &IclTask) -> Result<Vec<usize>, EvalError> {
    task.candidates()
        .into_iter()
        .map(|c| match tok.encode(&format!(" {c}"))[..] {
            [id] => Ok(id),
            _ => Err(EvalError::Label(c)),
        })
        .collect()
}

/// `episodes` queries per seed: `n_e` demos are rendered to images, `n_d`
/// are given as decoder text ahead of the query, and the prediction is the
/// candidate label with the highest next-token logit.
#[allow(clippy::too_many_arguments)]
pub fn icl_eval<T: Real>(
    model: &VistModel,
    store: &ParamStore<T>,
    tok: &Tokenizer,
    task: &IclTask,
    n_e: usize,
    n_d: usize,
    seeds: &[u64],
    episodes: usize,
    workers: usize,
) -> Result<IclResult, EvalError> {
    if seeds.is_empty() || episodes == 0 {
        return Err(EvalError::NoSamples);
    }
    let ids = label_ids(tok, task)?;
    let cands = task.candidates();
    let max = model.cfg.decoder.max_positions;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<_> = (0..episodes).map(|i| task.episode(n_e, n_d, i, &mut rng)).collect();
        let hits = par_map(workers, &eps, |_, ep| {
            let encoder_tokens = if n_e == 0 { Vec::new() } else { tok.encode(&ep.encoder_text()) };
            let images = render_tokens(&encoder_tokens, tok, &model.cfg.render)?;
            let prompt = tok.encode(&ep.prompt_text());
            if prompt.len() > max {
                return Err(EvalError::PromptTooLong { len: prompt.len(), max });
            }
            let ex = Example {
                images,
                encoder_tokens,
                targets: vec![0; prompt.len()],
                decoder_tokens: prompt,
            };
            let logits = model.example_logits(store, &ex, None)?;
            let v = *logits.shape().last().expect("logits have a vocabulary axis");
            let last = &logits.data()[(ex.decoder_tokens.len() - 1) * v..];
            // first maximum wins, so ties resolve to the earlier candidate
            let mut best = 0;
            for (j, &id) in ids.iter().enumerate() {
                if last[id] > last[ids[best]] {
                    best = j;
                }
            }
            Ok(cands[best] == ep.query.label)
        })?;
        per_seed.push(hits.iter().filter(|&&h| h).count() as f64 / episodes as f64);
    }
    Ok(IclResult {
        accuracy: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
        per_seed,
    })
}
