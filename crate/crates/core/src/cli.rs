//! Command-line front end. Results go to stdout or `--out`; progress and
//! diagnostics go to stderr.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, save_dataset, Segment, Split, SynthSpec};
use crate::decoder::{Attention, DmaVariant, GenerateOptions, Modality};
use crate::error::{Error, Result};
use crate::eval::{caption_all, score, CaptionRecord, EvalSummary};
use crate::experiments::{build_vocab, prepare_splits, run_experiment, ExperimentId, ExperimentReport};
use crate::fusion::FusionMode;
use crate::gradcheck::run_suite;
use crate::metrics::attn_report;
use crate::model::{CaptionModel, ModelConfig, Preset};
use crate::training::{run_hash, Checkpoint, EarlyStopping, TrainConfig, Trainer, ValidationSet};
use crate::util::{config_hash, write_atomic};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "egocap", version, about = "Sensor-augmented egocentric video captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (JSON lines).
    GenData(GenDataArgs),
    /// Fit a model; writes checkpoint.json, train.log.jsonl and run.json.
    Train(TrainArgs),
    /// Caption a split and record attention traces.
    Caption(CaptionArgs),
    /// Print BLEU-1..5 and CIDEr-D.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Word-type by modality attention tables from a captions file.
    AttnReport(AttnReportArgs),
    /// Train and score an ablation grid.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// SynthSpec JSON; built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_segments: Option<usize>,
    #[arg(long, env = "EGOCAP_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    k_frames: Option<usize>,
    #[arg(long)]
    t_sensor: Option<usize>,
    /// concat | symmetric | linear-on-v | linear-on-s
    #[arg(long)]
    fusion: Option<String>,
    /// dynamic | v | s | vs
    #[arg(long)]
    attention: Option<String>,
    #[command(flatten)]
    dma: DmaArgs,
}

#[derive(Debug, Args, Clone)]
struct DmaArgs {
    /// softmax | gumbel | st-gumbel
    #[arg(long)]
    dma_variant: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    c_vs: Option<f64>,
}

#[derive(Debug, Args, Clone)]
struct TrainFlags {
    #[arg(long, env = "EGOCAP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args, Clone)]
struct GenFlags {
    /// Maximum generated words, EOS step included.
    #[arg(long, default_value_t = 15)]
    max_words: usize,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Draw Gumbel noise while generating from this seed.
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    dma: DmaArgs,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Score an existing captions file instead of captioning.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    captions: Option<PathBuf>,
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    dma: DmaArgs,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, env = "EGOCAP_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AttnReportArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// fusion-ablation | ammt-ablation | dma-variant | tau-sweep | cvs-sweep
    #[arg(long)]
    id: String,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub config_hash: String,
    pub data: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Captions plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionFile {
    pub config_hash: String,
    pub split: Split,
    pub model: ModelConfig,
    pub generate: GenerateOptions,
    pub captions: Vec<CaptionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub split: Split,
    pub segments: usize,
    pub metrics: EvalSummary,
}

fn parse_attention(s: &str) -> Result<Attention> {
    Ok(match s {
        "dynamic" => Attention::Dynamic,
        "v" => Attention::Fixed(Modality::V),
        "s" => Attention::Fixed(Modality::S),
        "vs" | "v+s" => Attention::Fixed(Modality::VS),
        other => return Err(Error::Config(format!("unknown attention `{other}`"))),
    })
}

impl DmaArgs {
    fn apply(&self, cfg: &mut ModelConfig) -> Result<()> {
        if let Some(v) = &self.dma_variant {
            cfg.dma.variant = v.parse::<DmaVariant>()?;
        }
        if let Some(t) = self.tau {
            cfg.dma.tau = t;
        }
        if let Some(c) = self.c_vs {
            cfg.dma.c[Modality::VS.index()] = c;
        }
        cfg.dma.validate()
    }
}

impl ModelArgs {
    fn preset(&self) -> Result<Preset> {
        self.preset.parse()
    }

    fn build(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(self.preset()?);
        if let Some(k) = self.k_frames {
            cfg.k_frames = k;
        }
        if let Some(t) = self.t_sensor {
            cfg.t_sensor = t;
        }
        if let Some(f) = &self.fusion {
            cfg.fusion = f.parse::<FusionMode>()?;
        }
        if let Some(a) = &self.attention {
            cfg.attention = parse_attention(a)?;
        }
        self.dma.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainFlags {
    fn build(&self, preset: Preset) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::preset(preset);
        cfg.seed = self.seed;
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        match self.patience {
            Some(0) => cfg.early_stopping = None,
            Some(p) => {
                let every = cfg.early_stopping.map_or(5, |e| e.eval_every);
                cfg.early_stopping = Some(EarlyStopping {
                    patience: p,
                    eval_every: every,
                });
            }
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl GenFlags {
    fn options(&self) -> GenerateOptions {
        GenerateOptions {
            max_len: self.max_words,
            beam: self.beam,
            sample_noise_seed: self.noise_seed,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Write to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn segments_of(dataset: &[Segment], split: Split) -> Vec<&Segment> {
    dataset.iter().filter(|s| s.split == split).collect()
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(n) = a.n_segments {
        spec.n_segments = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let data = generate_synthetic(&spec)?;
    save_dataset(&data, &a.out)?;
    eprintln!("wrote {} segments to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ck_path = a.out.join("checkpoint.json");
    let log_path = a.out.join("train.log.jsonl");

    let (mut trainer, mut log) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let log = truncate_log(&std::fs::read(&log_path).unwrap_or_default(), ck.header.epoch);
            (Trainer::from_checkpoint(&ck)?, log)
        }
        None => {
            let model_cfg = a.model.build()?;
            let train_cfg = a.train.build(a.model.preset()?)?;
            let vocab = build_vocab(&dataset)?;
            let model = CaptionModel::new(model_cfg, vocab, train_cfg.seed)?;
            (Trainer::new(model, train_cfg)?, Vec::new())
        }
    };
    let run = RunConfig {
        config_hash: run_hash(&trainer.model.config, &trainer.cfg),
        data: a.data.display().to_string(),
        model: trainer.model.config.clone(),
        train: trainer.cfg.clone(),
    };
    write_atomic(&a.out.join("run.json"), &to_json(&run)?)?;

    let splits = prepare_splits(&trainer.model, &dataset)?;
    let val = (splits.val.len() >= 2).then(|| ValidationSet {
        segments: &splits.val,
        references: &splits.val_refs,
    });
    let every = a.checkpoint_every.max(1);
    let quiet = a.quiet;
    trainer.fit(&splits.train, val.as_ref(), |m, t| {
        let mut line = serde_json::to_vec(m).map_err(|e| Error::Data(e.to_string()))?;
        line.push(b'\n');
        log.extend_from_slice(&line);
        write_atomic(&log_path, &log)?;
        if t.epoch % every == 0 && !t.finished {
            t.checkpoint().save(&ck_path)?;
        }
        if !quiet {
            let val = m
                .val
                .as_ref()
                .map(|v| format!(" val_cider={:.1}", v.cider_d))
                .unwrap_or_default();
            eprintln!(
                "epoch {} loss={:.4} acc={:.3} lr={} p_tf={:.3}{val}",
                m.epoch, m.loss, m.token_accuracy, m.lr, m.p_tf
            );
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&ck_path)?;
    eprintln!("wrote {}", ck_path.display());
    Ok(())
}

/// Keep log lines for epochs before `epoch`, dropping those a resumed run repeats.
fn truncate_log(log: &[u8], epoch: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for line in log.split_inclusive(|&b| b == b'\n') {
        let keep = serde_json::from_slice::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("epoch").and_then(|e| e.as_u64()))
            .is_some_and(|e| (e as usize) < epoch);
        if keep {
            out.extend_from_slice(line);
        }
    }
    out
}

/// Load a checkpoint, apply inference-time DMA overrides and caption `split`.
fn caption_split(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    dma: &DmaArgs,
    opts: &GenerateOptions,
) -> Result<(CaptionModel, Vec<CaptionRecord>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = ck.model()?;
    dma.apply(&mut model.config)?;
    let dataset = load_dataset(data)?;
    let segs = segments_of(&dataset, split);
    let prepared = segs.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<String> = segs.iter().map(|s| s.caption.clone()).collect();
    let captions = caption_all(&model, &prepared, &refs, opts)?;
    Ok((model, captions))
}

fn cmd_caption(a: CaptionArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let opts = a.gen.options();
    let (model, captions) = caption_split(&a.checkpoint, &a.data, split, &a.dma, &opts)?;
    let file = CaptionFile {
        config_hash: config_hash(&(&model.config, &opts)),
        split,
        model: model.config,
        generate: opts,
        captions,
    };
    emit(a.out.as_deref(), &to_json(&file)?)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (hash, split, captions) = match (&a.captions, &a.checkpoint, &a.data) {
        (Some(p), _, _) => {
            let f: CaptionFile = read_json(p)?;
            (f.config_hash, f.split, f.captions)
        }
        (None, Some(ck), Some(data)) => {
            let split: Split = a.split.parse()?;
            let opts = a.gen.options();
            let (model, captions) = caption_split(ck, data, split, &a.dma, &opts)?;
            (config_hash(&(&model.config, &opts)), split, captions)
        }
        _ => return Err(Error::Config("evaluate needs --captions or --checkpoint with --data".into())),
    };
    let metrics = score(&captions)?;
    let report = EvalReport {
        config_hash: hash,
        split,
        segments: captions.len(),
        metrics,
    };
    let b = &report.metrics.bleu;
    println!(
        "B-1 {:.2}  B-2 {:.2}  B-3 {:.2}  B-4 {:.2}  B-5 {:.2}  CIDEr-D {:.2}  verb-acc {:.2}",
        b[0], b[1], b[2], b[3], b[4], report.metrics.cider_d, report.metrics.verb_accuracy
    );
    if let Some(out) = &a.out {
        write_atomic(out, &to_json(&report)?)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let suite = run_suite(a.seed)?;
    let mut failed = Vec::new();
    for e in &suite {
        let r = &e.report;
        println!(
            "{} {:<28} max_rel={:.3e} tol={:.0e} coords={}",
            if r.passed { "PASS" } else { "FAIL" },
            e.name,
            r.max_rel_error,
            r.tol,
            r.coordinates
        );
        if !r.passed {
            failed.push(e.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", failed.join(","))))
    }
}

fn cmd_attn_report(a: AttnReportArgs) -> Result<()> {
    let f: CaptionFile = read_json(&a.captions)?;
    let traces: Vec<_> = f.captions.iter().map(|c| c.trace.clone()).collect();
    let words: Vec<Vec<String>> = f
        .captions
        .iter()
        .map(|c| c.hypothesis.split_whitespace().map(str::to_string).collect())
        .collect();
    let report = attn_report(&traces, &words)?;
    print!("{}", report.render());
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Out<'a> {
            config_hash: &'a str,
            report: &'a crate::metrics::AttnReport,
        }
        write_atomic(
            out,
            &to_json(&Out {
                config_hash: &f.config_hash,
                report: &report,
            })?,
        )?;
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let id: ExperimentId = a.id.parse()?;
    let base = a.model.build()?;
    let train = a.train.build(a.model.preset()?)?;
    let dataset = load_dataset(&a.data)?;
    let report: ExperimentReport = run_experiment(id, &base, &train, &dataset, &a.seeds, |label, seed, s| {
        eprintln!("{label} seed={seed} cider_d={:.1} verb_acc={:.1}", s.cider_d, s.verb_accuracy);
    })?;
    print!("{}", report.render());
    if let Some(out) = &a.out {
        write_atomic(out, &to_json(&report)?)?;
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } | Error::Dimension { .. } | Error::Index { .. } => EXIT_DATA,
        Error::Numeric(_) | Error::Contract(_) => EXIT_NUMERIC,
    }
}

/// One-line JSON diagnostic.
pub fn diagnostic(kind: &str, code: i32, message: &str) -> String {
    serde_json::json!({ "error": kind, "exit": code, "message": message }).to_string()
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", diagnostic("usage", EXIT_USAGE, first));
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::AttnReport(a) => cmd_attn_report(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", diagnostic(e.kind(), code, &e.to_string()));
            code
        }
    }
}
