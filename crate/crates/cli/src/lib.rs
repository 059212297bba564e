//! The `vist` command line. [`dispatch`] takes the argument vector and the
//! two output streams, so the binary is a one-line wrapper and tests can
//! drive every subcommand in-process.
//!
//! Failures print a single line `error: kind=<kind> msg=<message>` on the
//! error stream and return a nonzero code (2 for usage errors, 1 otherwise).

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use vist_core::config::{DataKind, RunConfig};
use vist_core::corpus::{read_samples, FreqTable, Tokenizer, BOS};
use vist_core::eval::{self, curves_csv, EvalReport, MaskMode, COST_FORMULA};
use vist_core::model::VistModel;
use vist_core::nn::ParamStore;
use vist_core::pipeline::{self, PipelineError};
use vist_core::render::{paginate, patchify, to_pgm, to_png};
use vist_core::tensor::{DType, Real};
use vist_core::train::{checkpoint_dtype, Precision};

#[derive(Parser, Debug)]
#[command(name = "vist", version, about = "Render distant context to images, train and evaluate slow-fast models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Run config of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every file the command writes.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Config override, applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a tokenizer and count token statistics over a corpus.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Render a text file to images.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        /// Tokenizer file from `stats`; bytes only if omitted.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Also write PNG files.
        #[arg(long)]
        png: bool,
    },
    /// Per-token importance scores and the frequency mask of a text.
    Mask {
        #[arg(long = "in")]
        input: PathBuf,
        /// Frequency table from `stats`.
        #[arg(long)]
        freq: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Pretrain the encoder and train the model.
    Train {
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(value_enum)]
        task: Task,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Train, then run every evaluation that fits the data. With `--prompt`
    /// and `--ckpt`, instead continue the prompt greedily, reading `--ctx`
    /// as rendered distant context.
    Run {
        #[arg(long)]
        ctx: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Tokens to generate.
        #[arg(long, default_value_t = 32)]
        max_new: usize,
    },
    /// Summarize the reports in a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Ppl,
    Icl,
    Distance,
    Cost,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Ppl => "ppl",
            Task::Icl => "icl",
            Task::Distance => "distance",
            Task::Cost => "cost",
        }
    }
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    msg: String,
}

impl CliError {
    fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        Self { kind, msg: msg.into() }
    }

    fn line(&self) -> String {
        let msg: String = self.msg.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: kind={} msg={}", self.kind, msg)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Data(_) | PipelineError::Corpus(_) => "data",
            PipelineError::Train(_) => "train",
            PipelineError::Model(_) => "model",
            PipelineError::Eval(_) => "eval",
            PipelineError::Checkpoint(_) => "checkpoint",
        };
        Self::new(kind, e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

/// Everything a subcommand needs besides its own arguments.
struct Ctx<'a> {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.out.join(name);
        fs::write(&p, bytes).map_err(io(&p))
    }

    fn say(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.stdout, "{}", line.as_ref());
    }

    fn warn(&mut self, kind: &str, msg: impl AsRef<str>) {
        let _ = writeln!(self.stderr, "warning: kind={kind} msg={}", msg.as_ref());
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
            RunConfig::from_text(&text).map_err(|e| CliError::new("config", e.to_string()))?
        }
        None => RunConfig::default(),
    };
    apply_flags(&mut cfg, common)?;
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, common: &Common) -> Result<()> {
    cfg.apply_overrides(&common.set).map_err(|e| CliError::new("config", e.to_string()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(())
}

fn resolve(cfg: RunConfig) -> Result<RunConfig> {
    cfg.resolve().map_err(|e| CliError::new("config", e.to_string()))
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn dispatch<S: AsRef<str>>(argv: &[S], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(AsRef::as_ref)) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let _ = writeln!(stderr, "{}", CliError::new("usage", first).line());
            if matches!(e.kind(), ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                use clap::CommandFactory;
                let _ = write!(stderr, "{}", Cli::command().render_usage());
                let _ = writeln!(stderr);
            }
            return 2;
        }
    };
    match run(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.line());
            if e.kind == "usage" {
                2
            } else {
                1
            }
        }
    }
}

fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let out = cli.common.out.clone().ok_or_else(|| CliError::new("usage", "--out is required"))?;
    fs::create_dir_all(&out).map_err(io(&out))?;
    // eval against a checkpoint takes its config from the checkpoint
    let from_ckpt = matches!(&cli.cmd, Cmd::Eval { ckpt: Some(_), .. } | Cmd::Run { ckpt: Some(_), .. });
    let cfg = if from_ckpt { RunConfig::default() } else { resolve(load_config(&cli.common)?)? };
    let mut ctx = Ctx {
        cfg,
        out,
        workers: cli.common.workers.max(1),
        stdout,
        stderr,
    };
    if !from_ckpt {
        ctx.write("config.resolved", ctx.cfg.to_text())?;
    }
    match cli.cmd {
        Cmd::Stats { input } => stats(&mut ctx, &input),
        Cmd::Render { input, tokenizer, png } => render(&mut ctx, &input, tokenizer.as_deref(), png),
        Cmd::Mask { input, freq, tokenizer } => mask(&mut ctx, &input, &freq, tokenizer.as_deref()),
        Cmd::Train { resume } => match ctx.cfg.train.precision {
            Precision::F32 => train::<f32>(&mut ctx, resume.as_deref()).map(drop),
            Precision::F64 => train::<f64>(&mut ctx, resume.as_deref()).map(drop),
        },
        Cmd::Eval { task, ckpt } => eval_cmd(&mut ctx, &cli.common, task, ckpt.as_deref()),
        Cmd::Run { ctx: None, prompt: None, ckpt: None, .. } => match ctx.cfg.train.precision {
            Precision::F32 => run_all::<f32>(&mut ctx),
            Precision::F64 => run_all::<f64>(&mut ctx),
        },
        Cmd::Run {
            ctx: context,
            prompt: Some(prompt),
            ckpt: Some(ckpt),
            max_new,
        } => {
            let req = Generate {
                context,
                prompt,
                max_new,
            };
            match read_dtype(&ckpt)? {
                DType::F32 => generate::<f32>(&mut ctx, &cli.common, &ckpt, &req),
                DType::F64 => generate::<f64>(&mut ctx, &cli.common, &ckpt, &req),
            }
        }
        Cmd::Run { .. } => Err(CliError::new("usage", "generation needs both --prompt and --ckpt")),
        Cmd::Report { input } => report(&mut ctx, &input),
    }
}

fn read_tokenizer(path: Option<&Path>) -> Result<Tokenizer> {
    match path {
        None => Ok(Tokenizer::bytes_only()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            Tokenizer::from_text(&text).map_err(|e| CliError::new("data", format!("{}: {e}", p.display())))
        }
    }
}

fn stats(ctx: &mut Ctx, input: &Path) -> Result<()> {
    let samples = read_samples(input).map_err(|e| CliError::new("data", format!("{}: {e}", input.display())))?;
    let tok = Tokenizer::train(&samples, ctx.cfg.model.decoder.vocab_size).map_err(|e| CliError::new("data", e.to_string()))?;
    let mut freq = FreqTable::new();
    let mut total = 0usize;
    for s in &samples {
        let ids = tok.encode(s);
        total += ids.len();
        freq.add_sample(&ids);
    }
    ctx.write("tokenizer.txt", tok.to_text())?;
    ctx.write("freq.txt", freq.to_text())?;
    let summary = serde_json::json!({
        "samples": samples.len(),
        "tokens": total,
        "distinct_tokens": freq.distinct_tokens(),
        "vocab_size": tok.vocab_size(),
    });
    ctx.write("stats.json", format!("{summary}\n"))?;
    ctx.say(format!("samples={} tokens={} distinct={} vocab={}", samples.len(), total, freq.distinct_tokens(), tok.vocab_size()));
    Ok(())
}

fn render(ctx: &mut Ctx, input: &Path, tokenizer: Option<&Path>, png: bool) -> Result<()> {
    let text = fs::read_to_string(input).map_err(io(input))?;
    let tok = read_tokenizer(tokenizer)?;
    let ids = tok.encode(&text);
    let rc = ctx.cfg.model.render.clone();
    let latents = ctx.cfg.model.resampler.latents;
    let images = paginate(&ids, &tok, &rc).map_err(|e| CliError::new("render", e.to_string()))?;
    let mut index = String::from("file,first_token,end_token\n");
    for (i, img) in images.iter().enumerate() {
        let name = format!("image_{i:03}.pgm");
        ctx.write(&name, to_pgm(img))?;
        if png {
            let bytes = to_png(img).map_err(|e| CliError::new("render", e.to_string()))?;
            ctx.write(&format!("image_{i:03}.png"), bytes)?;
        }
        let _ = writeln!(index, "{name},{},{}", img.source_span.0, img.source_span.1);
    }
    ctx.write("images.csv", index)?;
    if images.is_empty() {
        ctx.warn("empty-input", format!("{} has no visible text; wrote zero images", input.display()));
    }
    let r = eval::compression_report(ids.len(), &rc, latents);
    ctx.say(format!("images={} tokens={} visual_tokens={} delta={}", images.len(), ids.len(), r.visual_tokens, r.delta_display()));
    Ok(())
}

fn mask(ctx: &mut Ctx, input: &Path, freq: &Path, tokenizer: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input).map_err(io(input))?;
    let tok = read_tokenizer(tokenizer)?;
    let table = FreqTable::from_text(&fs::read_to_string(freq).map_err(io(freq))?).map_err(|e| CliError::new("data", format!("{}: {e}", freq.display())))?;
    let ids = tok.encode(&text);
    if ids.is_empty() {
        ctx.warn("empty-input", format!("{} has no tokens", input.display()));
    }
    let profile = eval::info_gain_profile(&ids, &table).map_err(|e| CliError::new("data", e.to_string()))?;
    let mut csv = String::from("position,token,piece,score,masked\n");
    let mut shown = String::new();
    for (i, g) in profile.iter().enumerate() {
        let piece = tok.piece(g.token);
        let _ = writeln!(csv, "{i},{},{:?},{:.6},{}", g.token, piece, g.score, u8::from(g.masked));
        if g.masked {
            let word = piece.trim_start();
            shown.push_str(&piece[..piece.len() - word.len()]);
            let _ = write!(shown, "[{word}]");
        } else {
            shown.push_str(&piece);
        }
    }
    ctx.write("mask.csv", csv)?;
    ctx.write("mask.txt", format!("{shown}\n"))?;
    let masked = profile.iter().filter(|g| g.masked).count();
    ctx.say(format!("tokens={} masked={masked}", profile.len()));
    Ok(())
}

fn train<T: Real>(ctx: &mut Ctx, resume: Option<&Path>) -> Result<pipeline::Trained<T>> {
    let t = pipeline::train::<T>(&ctx.cfg, Some(&ctx.out), resume)?;
    let mut pre = String::from("step,reconstruction_loss\n");
    for (i, l) in t.pretrain_losses.iter().enumerate() {
        let _ = writeln!(pre, "{i},{l:e}");
    }
    ctx.write("pretrain.csv", pre)?;
    if t.data.skipped > 0 {
        ctx.warn("short-samples", format!("{} samples were too short for the split and were skipped", t.data.skipped));
    }
    let last = t.metrics.last().map_or_else(|| "none".into(), |m| format!("{:.4}", m.lm));
    ctx.say(format!("steps={} params={} final_lm={last}", t.checkpoint.step, t.store.count()));
    Ok(t)
}

fn save_report(ctx: &mut Ctx, r: &EvalReport) -> Result<()> {
    ctx.write(&format!("eval_{}.json", r.task), format!("{}\n", r.to_json()))?;
    ctx.say(r.to_json());
    Ok(())
}

fn cost_report(cfg: &RunConfig) -> EvalReport {
    let dtype = match cfg.train.precision {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    };
    let c = eval::cost_estimate(&cfg.model, cfg.train.t_e, cfg.train.t_d, dtype);
    let comp = eval::compression_report(cfg.train.t_e, &cfg.model.render, cfg.model.resampler.latents);
    EvalReport {
        delta: comp.delta,
        flops_estimate: Some(c.flops),
        memory_estimate: Some(c.memory_bytes),
        formula: Some(COST_FORMULA.into()),
        ..EvalReport::new("cost")
    }
}

/// Runs one evaluation against a trained model.
fn evaluate<T: Real>(ctx: &mut Ctx, task: Task, model: &VistModel, store: &ParamStore<T>, data: &pipeline::Prepared) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let mut r = EvalReport::new(task.name());
    match task {
        Task::Cost => r = cost_report(&cfg),
        Task::Ppl => {
            if cfg.data.kind == DataKind::Icl {
                return Err(CliError::new("usage", "perplexity needs recall or text data"));
            }
            let p = pipeline::ppl_pair(&cfg, model, store, &data.eval, ctx.workers)?;
            r.ppl = Some(p.with_context);
            r.ppl_gates_zeroed = Some(p.gates_zeroed);
            let comp = eval::compression_report(cfg.train.t_e, &cfg.model.render, cfg.model.resampler.latents);
            r.delta = comp.delta;
        }
        Task::Icl => {
            let a = pipeline::icl_accuracy(&cfg, model, store, &data.tokenizer, cfg.eval.n_e, cfg.eval.n_d, ctx.workers)?;
            r.accuracy = Some(a.accuracy);
            r.accuracy_per_seed = a.per_seed;
        }
        Task::Distance => {
            let curves = pipeline::distance_curves(&cfg, model, store, &data.eval, &data.freq, &MaskMode::ALL, ctx.workers)?;
            ctx.write("distance_curves.csv", curves_csv(&curves))?;
            r.distance_curves = curves;
        }
    }
    save_report(ctx, &r)
}

fn eval_with<T: Real>(ctx: &mut Ctx, common: &Common, task: Task, ckpt: &Path) -> Result<()> {
    let (mut cfg, model, store) = pipeline::load::<T>(ckpt)?;
    apply_flags(&mut cfg, common)?;
    ctx.cfg = resolve(cfg)?;
    ctx.write("config.resolved", ctx.cfg.to_text())?;
    if task == Task::Cost {
        return save_report(ctx, &cost_report(&ctx.cfg));
    }
    let data = pipeline::prepare(&ctx.cfg)?;
    evaluate(ctx, task, &model, &store, &data)
}

fn read_dtype(ckpt: &Path) -> Result<DType> {
    checkpoint_dtype(ckpt).map_err(|e| CliError::new("checkpoint", format!("{}: {e}", ckpt.display())))
}

struct Generate {
    context: Option<PathBuf>,
    prompt: PathBuf,
    max_new: usize,
}

fn generate<T: Real>(ctx: &mut Ctx, common: &Common, ckpt: &Path, req: &Generate) -> Result<()> {
    let (mut cfg, model, store) = pipeline::load::<T>(ckpt)?;
    apply_flags(&mut cfg, common)?;
    ctx.cfg = resolve(cfg)?;
    ctx.write("config.resolved", ctx.cfg.to_text())?;
    let tok = pipeline::prepare(&ctx.cfg)?.tokenizer;
    let prompt_text = fs::read_to_string(&req.prompt).map_err(io(&req.prompt))?;
    let mut prompt = tok.encode(&prompt_text);
    if prompt.is_empty() {
        prompt.push(BOS);
    }
    let visual = match &req.context {
        None => None,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io(path))?;
            let ids = tok.encode(&text);
            let rc = &ctx.cfg.model.render;
            let grids = paginate(&ids, &tok, rc)
                .and_then(|imgs| imgs.iter().map(|i| patchify(i, rc)).collect::<std::result::Result<Vec<_>, _>>())
                .map_err(|e| CliError::new("render", e.to_string()))?;
            if grids.is_empty() {
                ctx.warn("empty-input", format!("{} has no visible text; generating without context", path.display()));
                None
            } else {
                Some(model.visual_tokens(&store, &grids).map_err(|e| CliError::new("model", e.to_string()))?.tokens)
            }
        }
    };
    let room = ctx.cfg.model.decoder.max_positions.saturating_sub(prompt.len());
    let seq = model
        .decoder
        .generate(&store, &prompt, visual.as_ref(), req.max_new.min(room))
        .map_err(|e| CliError::new("model", e.to_string()))?;
    let continuation = tok.decode(&seq[prompt.len()..]);
    ctx.write("generation.txt", format!("{continuation}\n"))?;
    ctx.say(continuation);
    Ok(())
}

fn eval_cmd(ctx: &mut Ctx, common: &Common, task: Task, ckpt: Option<&Path>) -> Result<()> {
    let Some(ckpt) = ckpt else {
        if task == Task::Cost {
            let r = cost_report(&ctx.cfg);
            return save_report(ctx, &r);
        }
        return Err(CliError::new("usage", format!("eval {} needs --ckpt", task.name())));
    };
    match read_dtype(ckpt)? {
        DType::F32 => eval_with::<f32>(ctx, common, task, ckpt),
        DType::F64 => eval_with::<f64>(ctx, common, task, ckpt),
    }
}

fn run_all<T: Real>(ctx: &mut Ctx) -> Result<()> {
    let t = train::<T>(ctx, None)?;
    let tasks: &[Task] = match ctx.cfg.data.kind {
        DataKind::Icl => &[Task::Icl, Task::Distance, Task::Cost],
        _ => &[Task::Ppl, Task::Distance, Task::Cost],
    };
    for &task in tasks {
        evaluate(ctx, task, &t.model, &t.store, &t.data)?;
    }
    let out = ctx.out.clone();
    report(ctx, &out)
}

/// Collects `eval_*.json` and the last metrics row of a run directory.
fn report(ctx: &mut Ctx, input: &Path) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(input)
        .map_err(io(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("eval_") && n.ends_with(".json")))
        .collect();
    names.sort();
    let mut text = String::new();
    let metrics = input.join("metrics.csv");
    if let Ok(m) = fs::read_to_string(&metrics) {
        if let Some(last) = m.lines().skip(1).last() {
            let _ = writeln!(text, "last training step: {last}");
        }
    }
    for p in &names {
        let raw = fs::read_to_string(p).map_err(io(p))?;
        let v: serde_json::Value = serde_json::from_str(&raw).map_err(|e| CliError::new("data", format!("{}: {e}", p.display())))?;
        let task = v["task"].as_str().unwrap_or("?");
        let mut parts = Vec::new();
        for key in ["ppl", "ppl_gates_zeroed", "accuracy", "delta", "flops_estimate", "memory_estimate"] {
            if let Some(x) = v.get(key).filter(|x| !x.is_null()) {
                parts.push(format!("{key}={x}"));
            }
        }
        if let Some(curves) = v["distance_curves"].as_array() {
            for c in curves {
                let pts: Vec<String> = c["points"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|p| match p["sum"].as_f64() {
                        Some(s) => format!("{}:{s:.3}", p["ratio"]),
                        None => format!("{}:absent", p["ratio"]),
                    })
                    .collect();
                parts.push(format!("{}=[{}]", c["mode"].as_str().unwrap_or("?"), pts.join(" ")));
            }
        }
        let _ = writeln!(text, "{task}: {}", parts.join(" "));
    }
    if names.is_empty() {
        ctx.warn("no-reports", format!("no eval_*.json in {}", input.display()));
    }
    ctx.write("report.txt", &text)?;
    let _ = write!(ctx.stdout, "{text}");
    Ok(())
}
