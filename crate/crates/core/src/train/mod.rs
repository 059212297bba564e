//! Batching with the slow-fast split, the optimizer loop and checkpoints.

mod checkpoint;
pub mod optim;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState};
pub use optim::{AdamW, Schedule};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{sample_mask_with, CorpusError, FreqTable, ImportanceScores, MaskVector, Tokenizer};
use crate::model::{Example, ModelError, VistModel};
use crate::nn::{Group, ParamStore};
use crate::render::{paginate, patchify, RenderConfig, RenderError};
use crate::tensor::{Graph, Real};
use crate::vision::{PretrainSchedule, VisualFeatures};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no sample is long enough for a batch ({skipped} skipped)")]
    NoBatch { skipped: usize },
    #[error("non-finite loss at step {step}: lm={lm} pve={pve:?}; {detail}")]
    NonFinite { step: u64, lm: f64, pve: Option<f64>, detail: String },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "32" => Some(Self::F32),
            "f64" | "64" => Some(Self::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub t_e: usize,
    pub t_d: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub pretrain: PretrainSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_e: 512,
            t_d: 128,
            batch: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            warmup: 100,
            total_steps: 1000,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            pretrain: PretrainSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.t_e + self.t_d < 2 {
            return Err(TrainError::Config(format!("t_e + t_d = {} must be at least 2", self.t_e + self.t_d)));
        }
        if self.t_d == 0 {
            return Err(TrainError::Config("t_d must be positive to score next tokens".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(TrainError::Config(format!("lr {} must be non-negative", self.lr)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            warmup: self.warmup.max(1),
            total: self.total_steps,
        }
    }
}

/// Renders the first `t_e` tokens and cuts them into patch grids.
pub fn render_tokens(tokens: &[usize], tokenizer: &Tokenizer, render: &RenderConfig) -> Result<Vec<crate::render::PatchGrid>, RenderError> {
    paginate(tokens, tokenizer, render)?
        .iter()
        .map(|img| patchify(img, render))
        .collect()
}

/// Splits each tokenized sample: the first `t_e` tokens become images, the
/// next `t_d` feed the decoder and the following token closes the targets.
/// Returns the examples and how many samples were too short.
pub fn make_batch(samples: &[Vec<usize>], tokenizer: &Tokenizer, t_e: usize, t_d: usize, render: &RenderConfig) -> Result<(Vec<Example>, usize), TrainError> {
    let need = t_e + t_d + 1;
    let mut out = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        if s.len() < need {
            skipped += 1;
            continue;
        }
        let enc = &s[..t_e];
        out.push(Example {
            images: render_tokens(enc, tokenizer, render)?,
            encoder_tokens: enc.to_vec(),
            decoder_tokens: s[t_e..t_e + t_d].to_vec(),
            targets: s[t_e + 1..need].to_vec(),
        });
    }
    Ok((out, skipped))
}

/// Examples plus everything derived from them once per run.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub examples: Vec<Example>,
    pub freq: FreqTable,
    pub scores: Vec<ImportanceScores>,
    /// Frozen-encoder features, filled by [`TrainData::cache_features`].
    pub cache: Vec<Option<VisualFeatures<T>>>,
}

impl<T: Real> TrainData<T> {
    /// Importance scores come from `freq` when given, else from the
    /// encoder tokens of `examples` themselves.
    pub fn new(examples: Vec<Example>, freq: Option<FreqTable>) -> Result<Self, TrainError> {
        let freq = freq.unwrap_or_else(|| {
            let mut t = FreqTable::new();
            for e in &examples {
                t.add_sample(&e.encoder_tokens);
            }
            t
        });
        let scores = examples
            .iter()
            .map(|e| {
                if e.encoder_tokens.is_empty() || freq.sample_count() == 0 {
                    Ok(ImportanceScores(Vec::new()))
                } else {
                    ImportanceScores::for_tokens(&freq, &e.encoder_tokens)
                }
            })
            .collect::<Result<_, _>>()?;
        let cache = vec![None; examples.len()];
        Ok(Self {
            examples,
            freq,
            scores,
            cache,
        })
    }

    /// Runs the frozen encoder once per example.
    pub fn cache_features(&mut self, model: &VistModel, store: &ParamStore<T>) -> Result<(), TrainError> {
        if !model.cfg.vision.frozen {
            self.cache.iter_mut().for_each(|c| *c = None);
            return Ok(());
        }
        for (ex, slot) in self.examples.iter().zip(self.cache.iter_mut()) {
            *slot = if ex.images.is_empty() { None } else { Some(model.encode(store, &ex.images)?) };
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lm: f64,
    pub pve: Option<f64>,
    pub joint: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,lm_loss,pve_loss,joint_loss,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let pve = self.pve.map_or_else(String::new, |v| format!("{v:e}"));
        format!("{},{:e},{},{:e},{:e}", self.step, self.lm, pve, self.joint, self.lr)
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// One optimizer update on `batch`; returns the losses before the update.
pub fn train_step<T: Real>(
    model: &VistModel,
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    batch: &[&Example],
    cached: &[Option<&VisualFeatures<T>>],
    masks: &[MaskVector],
    lr: f64,
    step: u64,
) -> Result<StepMetrics, TrainError> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = model.joint_forward(&mut g, &p, batch, cached, masks, None)?;
    let lm = g.value(out.lm).item().f64();
    let pve = out.pve.map(|v| g.value(v).item().f64());
    let joint = g.value(out.joint).item().f64();
    if !joint.is_finite() {
        let worst = store
            .iter()
            .filter(|p| !p.value.all_finite())
            .map(|p| p.name.clone())
            .collect::<Vec<_>>();
        return Err(TrainError::NonFinite {
            step,
            lm,
            pve,
            detail: format!("non-finite parameters: {worst:?}"),
        });
    }
    g.backward(out.joint).map_err(ModelError::from)?;
    opt.step(store, &g, &p, lr);
    Ok(StepMetrics { step, lm, pve, joint, lr })
}

/// Owns the mutable state of a run so it can be checkpointed mid-way.
pub struct Trainer<'a, T> {
    pub model: &'a VistModel,
    pub data: &'a TrainData<T>,
    pub cfg: TrainConfig,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model: &'a VistModel, data: &'a TrainData<T>, store: ParamStore<T>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.examples.is_empty() {
            return Err(TrainError::NoBatch { skipped: 0 });
        }
        let opt = AdamW::new(&store, cfg.beta1, cfg.beta2, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        Ok(Self {
            model,
            data,
            cfg,
            store,
            opt,
            rng,
            step: 0,
            epoch: None,
        })
    }

    pub fn resume(model: &'a VistModel, data: &'a TrainData<T>, ckpt: Checkpoint<T>, cfg: TrainConfig) -> Result<Self, TrainError> {
        let mut t = Self::new(model, data, ckpt.store, cfg)?;
        if let Some(o) = ckpt.opt {
            t.opt = o;
        }
        t.rng = ckpt.rng.restore();
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self, config: &str) -> Checkpoint<T> {
        Checkpoint {
            step: self.step,
            config: config.to_owned(),
            store: self.store.clone(),
            opt: Some(self.opt.clone()),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Example indices for the current step. Each epoch is a fresh
    /// permutation drawn from its own stream, so any step can be located
    /// without replaying earlier ones.
    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.data.examples.len();
        let b = self.cfg.batch;
        let start = self.step as usize * b;
        (start..start + b)
            .map(|pos| {
                let e = (pos / n) as u64;
                if self.epoch.as_ref().map(|(k, _)| *k) != Some(e) {
                    let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                    r.set_stream(e + 1);
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut r);
                    self.epoch = Some((e, perm));
                }
                self.epoch.as_ref().expect("set above").1[pos % n]
            })
            .collect()
    }

    pub fn step_once(&mut self) -> Result<StepMetrics, TrainError> {
        let idx = self.batch_indices();
        let pve = &self.model.cfg.pve;
        let mut masks = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &self.data.scores[i];
            masks.push(if pve.mask_rate == 0.0 || s.is_empty() {
                MaskVector::none(s.len())
            } else {
                sample_mask_with(s, pve.mask_rate, pve.mask_kappa, &mut self.rng)?
            });
        }
        let batch: Vec<&Example> = idx.iter().map(|&i| &self.data.examples[i]).collect();
        let cached: Vec<Option<&VisualFeatures<T>>> = idx.iter().map(|&i| self.data.cache[i].as_ref()).collect();
        let lr = self.cfg.schedule().lr_at(self.step as usize);
        let m = train_step(self.model, &mut self.store, &mut self.opt, &batch, &cached, &masks, lr, self.step)?;
        self.step += 1;
        Ok(m)
    }
}

/// What a finished run leaves behind.
pub struct TrainOutcome<T> {
    pub store: ParamStore<T>,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: Checkpoint<T>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Runs the schedule to `cfg.total_steps`, starting from `resume` if given.
/// With `out`, writes `metrics.csv`, `timing.csv` (wall clock, kept apart so
/// the metrics file is reproducible) and checkpoints.
pub fn run_training<T: Real>(
    model: &VistModel,
    data: &TrainData<T>,
    store: ParamStore<T>,
    cfg: &TrainConfig,
    config_text: &str,
    resume: Option<Checkpoint<T>>,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    let mut trainer = match resume {
        Some(c) => Trainer::resume(model, data, c, cfg.clone())?,
        None => Trainer::new(model, data, store, cfg.clone())?,
    };
    let (mut metrics_file, mut timing_file) = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let mp = dir.join("metrics.csv");
            let tp = dir.join("timing.csv");
            let mut m = std::fs::File::create(&mp).map_err(io_err(&mp))?;
            let mut t = std::fs::File::create(&tp).map_err(io_err(&tp))?;
            writeln!(m, "{METRICS_HEADER}").map_err(io_err(&mp))?;
            writeln!(t, "step,wall_seconds").map_err(io_err(&tp))?;
            (Some((m, mp)), Some((t, tp)))
        }
        None => (None, None),
    };
    let started = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    while (trainer.step as usize) < cfg.total_steps {
        let m = trainer.step_once()?;
        if let Some((f, p)) = metrics_file.as_mut() {
            writeln!(f, "{}", m.csv_row()).map_err(io_err(p))?;
        }
        if let Some((f, p)) = timing_file.as_mut() {
            writeln!(f, "{},{:.3}", m.step, started.elapsed().as_secs_f64()).map_err(io_err(p))?;
        }
        metrics.push(m);
        if let (Some(dir), true) = (out, cfg.checkpoint_every > 0 && trainer.step as usize % cfg.checkpoint_every == 0) {
            save_checkpoint(&trainer.checkpoint(config_text), &dir.join(format!("ckpt_{:06}.bin", trainer.step)))?;
        }
    }
    let checkpoint = trainer.checkpoint(config_text);
    if let Some(dir) = out {
        save_checkpoint(&checkpoint, &dir.join("final.bin"))?;
    }
    Ok(TrainOutcome {
        store: trainer.store,
        metrics,
        checkpoint,
    })
}

/// Optional encoder pretraining on the run's own renders, then freezing.
pub fn pretrain_stage<T: Real>(model: &VistModel, store: &mut ParamStore<T>, data: &TrainData<T>, schedule: &PretrainSchedule) -> Result<Vec<f64>, TrainError> {
    if schedule.steps == 0 || model.cfg.vision.pretrain_mode == crate::vision::PretrainMode::FrozenRandom {
        return Ok(Vec::new());
    }
    let images: Vec<_> = data.examples.iter().flat_map(|e| e.images.iter().cloned()).collect();
    let losses = crate::vision::pretrain_vision(&model.encoder, store, &images, schedule).map_err(ModelError::from)?;
    model.apply_freeze(store);
    Ok(losses)
}

/// Checksum of the vision encoder parameters.
pub fn encoder_checksum<T: Real>(store: &ParamStore<T>) -> u32 {
    store.checksum(Group::Vision)
}
