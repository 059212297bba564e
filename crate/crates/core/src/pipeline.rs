//! End-to-end runs driven by a [`RunConfig`]: data preparation, training
//! and the evaluations, shared by the command line and the test suites.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{DataKind, RunConfig};
use crate::corpus::{read_samples, CorpusError, FreqTable, Tokenizer, PAD};
use crate::eval::{self, DistanceCurve, EvalError, IclResult, MaskMode};
use crate::model::{Example, ModelError, VistModel};
use crate::nn::ParamStore;
use crate::synth::{icl_task_bank, icl_vocabulary_text, recall_corpus, split_tokens, IclTask, RecallSpec, RecallWorld};
use crate::tensor::Real;
use crate::train::{load_checkpoint, make_batch, pretrain_stage, render_tokens, run_training, Checkpoint, CheckpointError, StepMetrics, TrainData, TrainError};
use crate::vision::VisualFeatures;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Tokenizer and examples for one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub tokenizer: Tokenizer,
    pub train: Vec<Example>,
    /// Held out from training.
    pub eval: Vec<Example>,
    /// Token statistics of the training samples.
    pub freq: FreqTable,
    /// Samples too short for the configured split.
    pub skipped: usize,
    pub task: Option<IclTask>,
}

/// Separate generator streams per purpose, all derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1000 + id);
    r
}

fn freq_of(samples: &[Vec<usize>]) -> FreqTable {
    let mut t = FreqTable::new();
    samples.iter().for_each(|s| t.add_sample(s));
    t
}

pub fn recall_world(cfg: &RunConfig) -> RecallWorld {
    RecallWorld::new(&RecallSpec {
        topics: cfg.data.recall_topics,
        topic_words: cfg.data.recall_topic_words,
        keys: cfg.data.recall_keys,
        function_share: cfg.data.recall_function_share,
        seed: cfg.seed,
    })
}

fn prepare_recall(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    let d = &cfg.data;
    let (t_e, t_d) = (cfg.train.t_e, cfg.train.t_d);
    let world = recall_world(cfg);
    let tokenizer = Tokenizer::train(&[world.vocabulary_text()], cfg.model.decoder.vocab_size)?;
    let tokens = |seed_id: u64, count: usize| -> (Vec<Vec<usize>>, usize) {
        let seed = stream(cfg.seed, seed_id).gen();
        let samples = recall_corpus(&world, count, d.recall_words, d.recall_pairs, seed);
        let kept: Vec<_> = samples
            .iter()
            .filter_map(|s| split_tokens(&tokenizer, &s.distant, &s.near, t_e, t_d))
            .collect();
        let skipped = count - kept.len();
        (kept, skipped)
    };
    let (train_tok, s1) = tokens(1, d.samples);
    let (eval_tok, s2) = tokens(2, d.eval_samples);
    let freq = freq_of(&train_tok);
    let (train, _) = make_batch(&train_tok, &tokenizer, t_e, t_d, &cfg.model.render).map_err(PipelineError::Train)?;
    let (eval, _) = make_batch(&eval_tok, &tokenizer, t_e, t_d, &cfg.model.render).map_err(PipelineError::Train)?;
    Ok(Prepared {
        tokenizer,
        train,
        eval,
        freq,
        skipped: s1 + s2,
        task: None,
    })
}

/// One in-context episode as an example. The decoder sees the demos, the
/// query and its label; rows are right-padded to `len` with unscored padding.
pub fn icl_example(tok: &Tokenizer, render: &crate::render::RenderConfig, ep: &crate::synth::IclEpisode, len: usize) -> Result<Example, PipelineError> {
    let encoder_tokens = if ep.encoder_demos.is_empty() { Vec::new() } else { tok.encode(&ep.encoder_text()) };
    let images = render_tokens(&encoder_tokens, tok, render).map_err(TrainError::from)?;
    let full = tok.encode(&format!("{} {}", ep.prompt_text(), ep.query.label));
    if full.len() > len + 1 {
        return Err(PipelineError::Data(format!("episode of {} tokens exceeds {} decoder positions", full.len(), len)));
    }
    let mut decoder_tokens = full[..full.len() - 1].to_vec();
    let mut targets = full[1..].to_vec();
    decoder_tokens.resize(len, PAD);
    targets.resize(len, PAD);
    Ok(Example {
        images,
        encoder_tokens,
        decoder_tokens,
        targets,
    })
}

fn prepare_icl(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    let d = &cfg.data;
    let bank = icl_task_bank(cfg.seed);
    let task = bank
        .iter()
        .find(|t| t.name == d.icl_task)
        .cloned()
        .ok_or_else(|| PipelineError::Data(format!("unknown in-context task {:?}", d.icl_task)))?;
    let tokenizer = Tokenizer::train(&[icl_vocabulary_text(&bank)], cfg.model.decoder.vocab_size)?;
    let len = cfg.train.t_d;
    let build = |seed_id: u64, count: usize| -> Result<Vec<Example>, PipelineError> {
        let mut rng = stream(cfg.seed, seed_id);
        (0..count)
            .map(|i| {
                let n_e = rng.gen_range(0..=d.icl_max_n_e);
                let n_d = rng.gen_range(0..=d.icl_max_n_d);
                let ep = task.episode(n_e, n_d, i, &mut rng);
                icl_example(&tokenizer, &cfg.model.render, &ep, len)
            })
            .collect()
    };
    let train = build(1, d.samples)?;
    let eval = build(2, d.eval_samples)?;
    let mut freq = FreqTable::new();
    train.iter().for_each(|e| freq.add_sample(&e.encoder_tokens));
    Ok(Prepared {
        tokenizer,
        train,
        eval,
        freq,
        skipped: 0,
        task: Some(task),
    })
}

fn prepare_text(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    let lines = read_samples(Path::new(&cfg.data.path))?;
    let tokenizer = Tokenizer::train(&lines, cfg.model.decoder.vocab_size)?;
    let all: Vec<Vec<usize>> = lines.iter().map(|l| tokenizer.encode(l)).collect();
    let held = cfg.data.eval_samples.min(all.len() / 2);
    let (train_tok, eval_tok) = all.split_at(all.len() - held);
    let (t_e, t_d) = (cfg.train.t_e, cfg.train.t_d);
    let (train, s1) = make_batch(train_tok, &tokenizer, t_e, t_d, &cfg.model.render)?;
    let (eval, s2) = make_batch(eval_tok, &tokenizer, t_e, t_d, &cfg.model.render)?;
    Ok(Prepared {
        tokenizer,
        freq: freq_of(train_tok),
        train,
        eval,
        skipped: s1 + s2,
        task: None,
    })
}

/// Deterministic in the config alone.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    let p = match cfg.data.kind {
        DataKind::Recall => prepare_recall(cfg)?,
        DataKind::Icl => prepare_icl(cfg)?,
        DataKind::Text => prepare_text(cfg)?,
    };
    if p.train.is_empty() {
        return Err(TrainError::NoBatch { skipped: p.skipped }.into());
    }
    Ok(p)
}

/// Frozen-encoder features per example, empty when the encoder trains.
pub fn feature_cache<T: Real>(model: &VistModel, store: &ParamStore<T>, examples: &[Example], workers: usize) -> Result<Vec<Option<VisualFeatures<T>>>, PipelineError> {
    if !model.cfg.vision.frozen {
        return Ok(Vec::new());
    }
    Ok(eval::par_map(workers, examples, |_, ex| {
        if ex.images.is_empty() {
            Ok(None)
        } else {
            model.encode(store, &ex.images).map(Some)
        }
    })?)
}

/// A finished training run.
pub struct Trained<T> {
    pub model: VistModel,
    pub store: ParamStore<T>,
    pub data: Prepared,
    pub metrics: Vec<StepMetrics>,
    pub pretrain_losses: Vec<f64>,
    pub checkpoint: Checkpoint<T>,
}

/// Prepares data, builds the model, pretrains the encoder, then trains.
/// `resume` continues from a checkpoint of the same config.
pub fn train<T: Real>(cfg: &RunConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<Trained<T>, PipelineError> {
    let data = prepare(cfg)?;
    let (model, mut store) = VistModel::build::<T>(cfg.model.clone(), cfg.seed)?;
    let config_text = cfg.to_text();
    let ckpt = match resume {
        Some(p) => {
            let c = load_checkpoint::<T>(p)?;
            c.check_manifest(&store)?;
            Some(c)
        }
        None => None,
    };
    let mut td = TrainData::new(data.train.clone(), Some(data.freq.clone()))?;
    let pretrain_losses = match &ckpt {
        Some(c) => {
            store = c.store.clone();
            Vec::new()
        }
        None => pretrain_stage(&model, &mut store, &td, &cfg.train.pretrain)?,
    };
    td.cache_features(&model, &store)?;
    let outcome = run_training(&model, &td, store, &cfg.train, &config_text, ckpt, out)?;
    Ok(Trained {
        model,
        store: outcome.store,
        data,
        metrics: outcome.metrics,
        pretrain_losses,
        checkpoint: outcome.checkpoint,
    })
}

/// Rebuilds the model of a checkpoint from its stored config.
pub fn load<T: Real>(path: &Path) -> Result<(RunConfig, VistModel, ParamStore<T>), PipelineError> {
    let ckpt = load_checkpoint::<T>(path)?;
    let cfg = RunConfig::from_text(&ckpt.config)
        .and_then(RunConfig::resolve)
        .map_err(|e| PipelineError::Data(format!("checkpoint config: {e}")))?;
    let (model, fresh) = VistModel::build::<T>(cfg.model.clone(), cfg.seed)?;
    ckpt.check_manifest(&fresh)?;
    Ok((cfg, model, ckpt.store))
}

/// Last-k perplexity on held-out data with and without visual context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PplPair {
    pub with_context: f64,
    pub gates_zeroed: f64,
}

impl PplPair {
    /// Relative reduction from the ablation to the full model.
    pub fn reduction(&self) -> f64 {
        1.0 - self.with_context / self.gates_zeroed
    }
}

pub fn ppl_pair<T: Real>(cfg: &RunConfig, model: &VistModel, store: &ParamStore<T>, examples: &[Example], workers: usize) -> Result<PplPair, PipelineError> {
    let cache = feature_cache(model, store, examples, workers)?;
    let k = cfg.eval.last_k;
    let with_context = eval::eval_perplexity(model, store, examples, &cache, k, workers)?;
    let zeroed = model.gates_zeroed(store);
    let gates_zeroed = eval::eval_perplexity(model, &zeroed, examples, &cache, k, workers)?;
    Ok(PplPair { with_context, gates_zeroed })
}

/// Curves for every mask mode over the configured ratios.
pub fn distance_curves<T: Real>(
    cfg: &RunConfig,
    model: &VistModel,
    store: &ParamStore<T>,
    examples: &[Example],
    freq: &FreqTable,
    modes: &[MaskMode],
    workers: usize,
) -> Result<Vec<DistanceCurve>, PipelineError> {
    let with_images: Vec<Example> = examples.iter().filter(|e| !e.images.is_empty()).cloned().collect();
    let cache = feature_cache(model, store, &with_images, workers)?;
    modes
        .iter()
        .map(|&m| Ok(eval::distance_sweep(model, store, &with_images, &cache, freq, &cfg.eval.ratios, m, cfg.seed, workers)?))
        .collect()
}

/// In-context accuracy with `n_e` encoder demos and `n_d` decoder demos.
pub fn icl_accuracy<T: Real>(cfg: &RunConfig, model: &VistModel, store: &ParamStore<T>, tok: &Tokenizer, n_e: usize, n_d: usize, workers: usize) -> Result<IclResult, PipelineError> {
    let bank = icl_task_bank(cfg.seed);
    let task = bank
        .iter()
        .find(|t| t.name == cfg.data.icl_task)
        .ok_or_else(|| PipelineError::Data(format!("unknown in-context task {:?}", cfg.data.icl_task)))?;
    Ok(eval::icl_eval(model, store, tok, task, n_e, n_d, &cfg.eval.icl_seeds, cfg.eval.icl_episodes, workers)?)
}
