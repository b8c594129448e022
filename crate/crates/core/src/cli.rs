//! Command-line surface. The `maskverify` binary only forwards to [`run`].
//!
//! Exit codes: 0 success, 1 validation failure (bad flags or config, failed
//! check), 2 I/O failure (missing, unreadable or corrupt files).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::ablation::{self, AblationConfig, Arm};
use crate::backbone::{train_ce, BackboneConfig, ToyBackbone};
use crate::dataio::{
    build_pairs, read_features, read_pairs, score_pairs, scores_to_set, write_features,
    write_pairs, write_scores, ImpostorSampling, PairMode, Pipeline,
};
use crate::embedder::LinearEmbedder;
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckConfig, Site};
use crate::masksynth::synth_dataset;
use crate::metrics::{read_roc_csv, roc, write_roc_csv, write_roc_svg, MetricReport};
use crate::numkit::Prng;
use crate::synthetic::{self, SyntheticConfig};
use crate::trainer::{train_embedder, EmbedderTrainConfig};

pub const THREADS_ENV: &str = "MASKVERIFY_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "maskverify",
    version,
    about = "Masked-face verification toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark as train/val/test feature files.
    Generate(GenerateArgs),
    /// Composite random masks onto the images of a manifest.
    Synth(SynthArgs),
    /// Run the CE / CE+TL / CE+TL+MSE ablation and write tables and ROC plots.
    Ablate(AblateArgs),
    /// Compare every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the classification backbone on raw records.
    TrainBackbone(TrainBackboneArgs),
    /// Train the embedding head on frozen features.
    TrainEmbed(TrainEmbedArgs),
    /// Score a pair list and report verification metrics.
    Evaluate(EvaluateArgs),
    /// Build a U-M or M-M pair list from a feature file.
    Pairs(PairsArgs),
    /// Draw ROC curves from CSV files into one SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Um,
    Mm,
}

impl From<ModeArg> for PairMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Um => PairMode::UnmaskedMasked,
            ModeArg::Mm => PairMode::MaskedMasked,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: u64,
    /// JSON synthetic-benchmark settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON-lines manifest of {identity, image_path, landmark_path}.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub seed: u64,
    /// JSON ablation settings ({synthetic, backbone, embedder, ...}).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated subset of ce, ce_tl, ce_tl_mse.
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<String>>,
    /// Precomputed training features; skips the synthetic data and stage 1.
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Negative control: perturb the named site's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainBackboneArgs {
    /// Raw records (feature file) with identities as class labels.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON backbone settings ({hidden_dim, sgd, val_fraction, lr_floor}).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for backbone.mfbw and ce_report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainEmbedArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Validation identities for learning-rate decay.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Frozen backbone applied to the records first.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// JSON head settings ({sgd, loss, use_mse, ...}).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for embedder.mfew and train_log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    /// Output directory for scores.csv, roc.csv and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub seed: u64,
    /// Keep every impostor pair instead of sampling.
    #[arg(long, conflicts_with = "ratio")]
    pub exhaustive: bool,
    /// Impostor pairs per genuine pair.
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// ROC CSV files (threshold,fmr,fnmr); repeat for several curves.
    #[arg(long = "roc", required = true)]
    pub rocs: Vec<PathBuf>,
    /// Curve labels in the same order; defaults to file stems.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long, default_value = "ROC")]
    pub title: String,
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        let _ = writeln!(err, "error: {e}");
        return 1;
    }
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        2
    } else {
        1
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Error::InvalidConfig(format!("{THREADS_ENV}={raw:?} is not a thread count"))
    })?;
    // A pool that is already built (e.g. repeated in-process runs) is kept.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display()))),
    }
}

fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::TrainBackbone(a) => cmd_train_backbone(&a, out),
        Command::TrainEmbed(a) => cmd_train_embed(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Pairs(a) => cmd_pairs(&a, out),
        Command::Plot(a) => cmd_plot(&a, out),
    }
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg: SyntheticConfig = load_config(a.config.as_deref())?;
    cfg.seed = a.seed;
    let bench = synthetic::generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    for (name, records) in [
        ("train", &bench.train),
        ("val", &bench.val),
        ("test", &bench.test),
    ] {
        let path = a.out.join(format!("{name}.mfre"));
        write_features(&path, records)?;
        writeln!(out, "{}: {} records", path.display(), records.len())?;
    }
    write_json(a.out.join("synthetic.json"), &cfg)?;
    Ok(0)
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let report = synth_dataset(&a.manifest, &a.out, a.seed)?;
    writeln!(
        out,
        "masked {} image(s) into {}",
        report.written.len(),
        a.out.display()
    )?;
    for f in &report.failures {
        writeln!(
            out,
            "failed entry {} ({}): {}",
            f.index,
            f.image_path.display(),
            f.error
        )?;
    }
    Ok(match report.failures.iter().map(|f| f.io).max() {
        None => 0,
        Some(true) => 2,
        Some(false) => 1,
    })
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg: AblationConfig = match &a.config {
        Some(p) => load_config(Some(p))?,
        None => AblationConfig::default(),
    };
    cfg.set_seed(a.seed);
    if let Some(arms) = &a.arms {
        cfg.arms = arms
            .iter()
            .map(|s| s.parse::<Arm>())
            .collect::<Result<_>>()?;
    }
    let result = match (&a.train, &a.test) {
        (Some(train), Some(test)) => {
            let val = a.val.as_ref().map(read_features).transpose()?;
            ablation::run_on_features(
                &read_features(train)?,
                val.as_deref(),
                &read_features(test)?,
                &cfg,
            )?
        }
        _ => ablation::run_synthetic(&cfg)?,
    };
    result.write_outputs(&a.out)?;
    write_json(a.out.join("config.json"), &cfg)?;
    write!(out, "{}", result.table_text())?;
    for arm in &result.arms {
        if let Some(m) = arm.heldout_mse {
            writeln!(out, "held-out anchor MSE {:<15} {m:.6e}", arm.arm.title())?;
        }
    }
    Ok(0)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = GradcheckConfig {
        instances: a.instances,
        seed: a.seed,
        corrupt: a.corrupt.as_deref().map(str::parse::<Site>).transpose()?,
        ..Default::default()
    };
    let report = gradcheck::run(&cfg)?;
    write!(out, "{}", report.to_text(gradcheck::TOLERANCE))?;
    writeln!(
        out,
        "max relative error {:.3e} (tolerance {:e})",
        report.max_rel_error(),
        gradcheck::TOLERANCE
    )?;
    Ok(if report.passed(gradcheck::TOLERANCE) {
        0
    } else {
        1
    })
}

pub fn cmd_train_backbone(a: &TrainBackboneArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg: BackboneConfig = load_config(a.config.as_deref())?;
    cfg.sgd.seed = a.seed;
    let data = read_features(&a.data)?;
    let (bb, report) = train_ce(&data, &cfg)?;
    fs::create_dir_all(&a.out)?;
    bb.save(a.out.join("backbone.mfbw"))?;
    write_json(a.out.join("ce_report.json"), &report)?;
    writeln!(
        out,
        "{} classes, train accuracy {:.3}, validation accuracy {:.3}",
        report.classes.len(),
        report.train_accuracy,
        report.val_accuracy
    )?;
    Ok(0)
}

pub fn cmd_train_embed(a: &TrainEmbedArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg: EmbedderTrainConfig = load_config(a.config.as_deref())?;
    cfg.sgd.seed = a.seed;
    let mut train = read_features(&a.features)?;
    let mut val = a.val.as_ref().map(read_features).transpose()?;
    if let Some(path) = &a.backbone {
        let frozen = ToyBackbone::load(path)?.freeze();
        train = frozen.featurize(&train)?;
        val = val.map(|v| frozen.featurize(&v)).transpose()?;
    }
    let (embedder, log) = train_embedder(&train, val.as_deref(), &cfg)?;
    fs::create_dir_all(&a.out)?;
    embedder.save(a.out.join("embedder.mfew"))?;
    log.save_jsonl(a.out.join("train_log.jsonl"))?;
    let losses = log.losses();
    writeln!(
        out,
        "{} iterations, {} quadruplets, final batch loss {:.6}",
        losses.len(),
        log.quadruplets_drawn,
        losses.last().copied().unwrap_or(f64::NAN)
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct EvaluationSummary {
    mode: PairMode,
    genuine: usize,
    impostor: usize,
    #[serde(flatten)]
    metrics: MetricReport,
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let records = read_features(&a.records)?;
    let pairs = read_pairs(&a.pairs)?;
    let backbone = a
        .backbone
        .as_ref()
        .map(ToyBackbone::load)
        .transpose()?
        .map(ToyBackbone::freeze);
    let embedder = a.embedder.as_ref().map(LinearEmbedder::load).transpose()?;
    let pipeline = Pipeline {
        backbone: backbone.as_ref(),
        embedder: embedder.as_ref(),
    };
    let scored = score_pairs(&pipeline, &records, &pairs)?;
    let set = scores_to_set(&scored)?;
    let summary = EvaluationSummary {
        mode: pairs.mode,
        genuine: set.genuine().len(),
        impostor: set.impostor().len(),
        metrics: MetricReport::compute(&set),
    };
    fs::create_dir_all(&a.out)?;
    write_scores(a.out.join("scores.csv"), &scored)?;
    write_roc_csv(a.out.join("roc.csv"), &roc(&set))?;
    write_json(a.out.join("metrics.json"), &summary)?;
    let m = &summary.metrics;
    writeln!(
        out,
        "{} genuine={} impostor={} GMean={:.3} IMean={:.3} AUC={:.3} EER={:.1}% FMR100={:.1}% FMR10={:.1}%",
        pairs.mode,
        summary.genuine,
        summary.impostor,
        m.gmean,
        m.imean,
        m.auc,
        100.0 * m.eer,
        100.0 * m.fmr100,
        100.0 * m.fmr10
    )?;
    Ok(0)
}

pub fn cmd_pairs(a: &PairsArgs, out: &mut dyn Write) -> Result<i32> {
    let records = read_features(&a.records)?;
    let sampling = if a.exhaustive {
        ImpostorSampling::Exhaustive
    } else {
        ImpostorSampling::Ratio(a.ratio)
    };
    let list = build_pairs(&records, a.mode.into(), &mut Prng::new(a.seed), sampling)?;
    write_pairs(&a.out, &list)?;
    writeln!(
        out,
        "{} pairs ({} genuine) -> {}",
        list.pairs.len(),
        list.count(crate::dataio::PairLabel::Genuine),
        a.out.display()
    )?;
    Ok(0)
}

pub fn cmd_plot(a: &PlotArgs, out: &mut dyn Write) -> Result<i32> {
    if !a.labels.is_empty() && a.labels.len() != a.rocs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} labels for {} curves",
            a.labels.len(),
            a.rocs.len()
        )));
    }
    let curves = a
        .rocs
        .iter()
        .map(read_roc_csv)
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = if a.labels.is_empty() {
        a.rocs
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect()
    } else {
        a.labels.clone()
    };
    let pairs: Vec<(&str, &crate::metrics::RocCurve)> =
        labels.iter().map(String::as_str).zip(&curves).collect();
    write_roc_svg(&a.out, &a.title, &pairs)?;
    writeln!(out, "{} curve(s) -> {}", curves.len(), a.out.display())?;
    Ok(0)
}
