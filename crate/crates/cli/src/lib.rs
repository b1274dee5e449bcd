//! Command implementations behind the `mgms` binary.
//!
//! Every artifact lands under one output root:
//!
//! ```text
//! <root>/corpus/{pretrain,finetune,heldout}/   images + manifest.txt
//! <root>/checkpoints/{codec,pretrain,finetune}.ckpt
//! <root>/logs/{codec,pretrain,finetune}.log
//! <root>/eval/<split>/                         synthesized sketches + report.txt
//! ```
//!
//! The root is `--out`, else `out_dir` from the config file, else
//! `$MGMS_OUT`, else `./mgms-out`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mgms::config::RunConfig;
use mgms::data::{generate_split, read_split, write_split, Split};
use mgms::gradsuite::full_suite;
use mgms::pipeline::{
    evaluate, load_checkpoint, run_codec_stage, run_finetune_stage, run_pretrain_stage, save_checkpoint, synthesize, Checkpoint,
    InferenceConfig, Model, Stage, StepMetrics, METRICS_HEADER,
};
use mgms::vq::reconstruction_error;
use mgms::GrayImage;

pub const OUT_ENV: &str = "MGMS_OUT";
const DEFAULT_OUT: &str = "mgms-out";

#[derive(Debug, Parser)]
#[command(name = "mgms", version, about = "Style-controllable photo-to-sketch synthesis with masked token modeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural photo/sketch corpus (all three splits).
    GenData(Common),
    /// Train the stage-0 tokenizer on the pretraining sketches.
    TrainVq(Train),
    /// Train the token transformer with the masked-token loss (codec frozen).
    Pretrain(Train),
    /// Jointly finetune the transformer and the sketch decoder.
    Finetune(Train),
    /// Render one sketch for a photo at style `s`.
    Synthesize(Synthesize),
    /// Render a horizontal strip of sketches over a list of style values.
    Interpolate(Interpolate),
    /// Score a checkpoint on a corpus split (mean SSIM and pixel loss).
    Eval(Eval),
    /// Check every gradient against central finite differences.
    GradCheck(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; missing keys take built-in defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed; every module seed is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root (overrides `out_dir` and $MGMS_OUT).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to start from [default: the previous stage's checkpoint
    /// under the output root; unused by train-vq].
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Number of optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Examples per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Decoding {
    /// Checkpoint to synthesize with [default: <out>/checkpoints/finetune.ckpt].
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Number of iterative decoding steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Synthesize {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub decoding: Decoding,
    /// Input photo (binary PGM).
    #[arg(long, value_name = "FILE")]
    pub photo: PathBuf,
    /// Style value s in [0, 1].
    #[arg(long, short = 's', default_value_t = 0.0)]
    pub style: f64,
    /// Output sketch (binary PGM).
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct Interpolate {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub decoding: Decoding,
    /// Input photo (binary PGM).
    #[arg(long, value_name = "FILE")]
    pub photo: PathBuf,
    /// Comma-separated style values, one sketch per value, left to right.
    #[arg(long, short = 's', value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub styles: Vec<f64>,
    /// Output grid image (binary PGM).
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub decoding: Decoding,
    /// Corpus split to score: pretrain, finetune or heldout.
    #[arg(long, default_value = "heldout")]
    pub split: Split,
}

/// A checkpoint path that does not exist; maps to exit code 3.
#[derive(Debug)]
pub struct MissingCheckpoint(pub PathBuf);

impl fmt::Display for MissingCheckpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "checkpoint not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingCheckpoint {}

/// Exit code for a failed command: 2 for configuration errors, 3 for a
/// missing checkpoint, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<MissingCheckpoint>().is_some() {
        3
    } else if matches!(err.downcast_ref::<mgms::Error>(), Some(mgms::Error::Config(_))) {
        2
    } else {
        1
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(c) => gen_data(&c),
        Command::TrainVq(t) => train_vq(&t),
        Command::Pretrain(t) => train_transformer(&t, Stage::Pretrain),
        Command::Finetune(t) => train_transformer(&t, Stage::Finetune),
        Command::Synthesize(s) => synthesize_cmd(&s),
        Command::Interpolate(i) => interpolate(&i),
        Command::Eval(e) => eval(&e),
        Command::GradCheck(_) => grad_check(),
    }
}

struct Run {
    cfg: RunConfig,
    root: PathBuf,
}

impl Run {
    fn corpus(&self, split: Split) -> PathBuf {
        self.root.join("corpus").join(split.name())
    }

    fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }

    fn log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}.log", stage.name()))
    }

    fn read_corpus(&self, split: Split) -> anyhow::Result<Vec<mgms::data::PhotoSketchPair>> {
        let dir = self.corpus(split);
        read_split(&dir).with_context(|| format!("reading {} (run gen-data first)", dir.display()))
    }
}

fn setup(c: &Common) -> anyhow::Result<Run> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    let root = c
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok(Run { cfg, root })
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    if !path.is_file() {
        return Err(MissingCheckpoint(path.to_path_buf()).into());
    }
    Ok(load_checkpoint(path)?.to_model()?)
}

fn save_model(path: &Path, model: &Model) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(path, &Checkpoint::from_model(model))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Streams step metrics to a log file and echoes every `echo`-th line.
struct MetricsLog {
    out: BufWriter<File>,
    echo: u64,
    err: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: &Path, echo: u64) -> anyhow::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out, echo: echo.max(1), err: None })
    }

    fn record(&mut self, m: &StepMetrics) {
        let line = m.log_line();
        if m.step.is_multiple_of(self.echo) {
            println!("{line}");
        }
        if self.err.is_none() {
            self.err = writeln!(self.out, "{line}").err();
        }
    }

    fn finish(mut self) -> anyhow::Result<()> {
        if let Some(e) = self.err {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

fn gen_data(c: &Common) -> anyhow::Result<()> {
    let run = setup(c)?;
    run.cfg.validate()?;
    for split in Split::ALL {
        let pairs = generate_split(&run.cfg.corpus, split)?;
        let dir = run.corpus(split);
        write_split(&dir, &pairs)?;
        println!("{} pairs -> {}", pairs.len(), dir.display());
    }
    Ok(())
}

fn train_vq(t: &Train) -> anyhow::Result<()> {
    let mut run = setup(&t.common)?;
    let codec = &mut run.cfg.training.codec;
    codec.steps = t.steps.unwrap_or(codec.steps);
    codec.batch_size = t.batch_size.unwrap_or(codec.batch_size);
    codec.adam.lr = t.lr.unwrap_or(codec.adam.lr);
    run.cfg.validate()?;

    let pairs = run.read_corpus(Split::Pretrain)?;
    let mut log = MetricsLog::create(&run.log(Stage::Codec), 250)?;
    let model = run_codec_stage(&run.cfg, &pairs, |m| log.record(m))?;
    log.finish()?;
    if let Ok(heldout) = read_split(&run.corpus(Split::Heldout)) {
        let sketches: Vec<GrayImage> = heldout.into_iter().map(|p| p.sketch).collect();
        println!("held-out reconstruction L1 {:.6}", reconstruction_error(&model.codec, &sketches)?);
    }
    save_model(&run.checkpoint(Stage::Codec), &model)
}

fn train_transformer(t: &Train, stage: Stage) -> anyhow::Result<()> {
    let mut run = setup(&t.common)?;
    let training = &mut run.cfg.training;
    let steps = if stage == Stage::Pretrain { &mut training.pretrain_steps } else { &mut training.finetune_steps };
    *steps = t.steps.unwrap_or(*steps);
    training.batch_size = t.batch_size.unwrap_or(training.batch_size);
    training.lr = t.lr.unwrap_or(training.lr);
    run.cfg.validate()?;

    let (previous, split) = match stage {
        Stage::Pretrain => (Stage::Codec, Split::Pretrain),
        _ => (Stage::Pretrain, Split::Finetune),
    };
    let model = load_model(t.checkpoint.as_deref().unwrap_or(&run.checkpoint(previous)))?;
    let pairs = run.read_corpus(split)?;
    let mut log = MetricsLog::create(&run.log(stage), 100)?;
    let model = match stage {
        Stage::Pretrain => run_pretrain_stage(&run.cfg, model, &pairs, |m| log.record(m))?,
        _ => run_finetune_stage(&run.cfg, model, &pairs, |m| log.record(m))?,
    };
    log.finish()?;
    save_model(&run.checkpoint(stage), &model)
}

fn decoding_setup(c: &Common, d: &Decoding) -> anyhow::Result<(Run, Model)> {
    let mut run = setup(c)?;
    let inf = &mut run.cfg.inference;
    inf.steps = d.steps.unwrap_or(inf.steps);
    inf.temperature = d.temperature.unwrap_or(inf.temperature);
    run.cfg.validate()?;
    let model = load_model(d.checkpoint.as_deref().unwrap_or(&run.checkpoint(Stage::Finetune)))?;
    Ok((run, model))
}

fn check_style(s: f64) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(mgms::Error::Config(format!("style value {s} outside [0, 1]")).into());
    }
    Ok(())
}

fn render(run: &Run, model: &Model, photo: &GrayImage, s: f64) -> anyhow::Result<GrayImage> {
    check_style(s)?;
    let cfg = InferenceConfig { style: s, ..run.cfg.inference.clone() };
    Ok(synthesize(model, photo, &cfg)?)
}

fn write_image(path: &Path, img: &GrayImage) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.write_pgm(path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn synthesize_cmd(s: &Synthesize) -> anyhow::Result<()> {
    let (run, model) = decoding_setup(&s.common, &s.decoding)?;
    let photo = GrayImage::read_pgm(&s.photo).with_context(|| format!("reading {}", s.photo.display()))?;
    write_image(&s.output, &render(&run, &model, &photo, s.style)?)
}

fn interpolate(i: &Interpolate) -> anyhow::Result<()> {
    let (run, model) = decoding_setup(&i.common, &i.decoding)?;
    if i.styles.is_empty() {
        bail!(mgms::Error::Config("need at least one style value".into()));
    }
    let photo = GrayImage::read_pgm(&i.photo).with_context(|| format!("reading {}", i.photo.display()))?;
    let frames = i.styles.iter().map(|&s| render(&run, &model, &photo, s)).collect::<anyhow::Result<Vec<_>>>()?;
    write_image(&i.output, &GrayImage::hstack(&frames)?)
}

fn eval(e: &Eval) -> anyhow::Result<()> {
    let (run, model) = decoding_setup(&e.common, &e.decoding)?;
    let pairs = run.read_corpus(e.split)?;
    let (report, images) = evaluate(&run.cfg, &model, &pairs)?;
    let dir = run.root.join("eval").join(e.split.name());
    std::fs::create_dir_all(&dir)?;
    for (i, img) in images.iter().enumerate() {
        img.write_pgm(dir.join(format!("{i:05}.pgm")))?;
    }
    let text = format!(
        "split {}\npairs {}\nmean_ssim {:.6}\nmean_pixel_l1 {:.6}\nbaseline_ssim {:.6}\n",
        e.split.name(),
        report.pairs,
        report.mean_ssim,
        report.mean_pixel,
        report.baseline_ssim
    );
    std::fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn grad_check() -> anyhow::Result<()> {
    let cases = full_suite()?;
    let mut failed = 0;
    for c in &cases {
        let verdict = if c.passed() { "pass" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{verdict} {:<24} rel_err {:.3e} (tol {:.0e})", c.name, c.error, c.tolerance);
    }
    println!("{} of {} checks passed", cases.len() - failed, cases.len());
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
