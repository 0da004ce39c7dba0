//! The `siamcd` command line: argument definitions and subcommands.

mod runconfig;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

pub use runconfig::{parse_size, DataSection, RunConfig, KEYS};

use crate::data::{
    encode_mask_png, load_split, read_manifest, save_pair, synth_generate, DatasetSplit, ImageFormat, SamplePair,
    TEST_MANIFEST, TRAIN_MANIFEST,
};
use crate::engine::{load_checkpoint, predict, save_checkpoint, train_with, LOG_CSV_HEADER};
use crate::error::Error;
use crate::fsutil::{with_staging_dir, write_atomic};
use crate::glimpse::{preprocess_pair, GlimpseSettings};
use crate::metrics::{binarize, confusion, percent, scores, ConfusionCounts, Evaluation, MetricsRow, CSV_HEADER};
use crate::model::{build, Fusion};
use crate::tensor::scdt;

/// Name of the sidecar a glimpsed dataset carries.
pub const GLIMPSE_SIDECAR: &str = "glimpse.txt";

#[derive(Debug, Parser)]
#[command(name = "siamcd", version, about = "Siamese fully convolutional change detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with exact change labels.
    Synth(SynthArgs),
    /// Write a Gaussian-glimpse preprocessed copy of a dataset.
    Glimpse(GlimpseArgs),
    /// Train a network and write a checkpoint plus a log CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Produce a change map for one image pair.
    Infer(InferArgs),
}

/// Config file plus overrides, shared by the subcommands that read settings.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key=value config file (`#` comments; keys model.*, train.*, glimpse.*, data.*)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Png,
    Scdt,
}

impl From<FormatArg> for ImageFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Png => ImageFormat::Png,
            FormatArg::Scdt => ImageFormat::Scdt,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of pairs [default: 16]
    #[arg(long)]
    pub count: Option<usize>,
    /// Image size, HxW or a single side [default: 64x64]
    #[arg(long, value_name = "HxW")]
    pub size: Option<String>,
    /// Generator and split seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Target fraction of changed pixels, in (0, 0.5) [default: 0.1]
    #[arg(long)]
    pub change_fraction: Option<f64>,
    /// Pairs listed in test.txt; the rest go to train.txt [default: 4]
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Image encoding
    #[arg(long, value_enum, default_value = "png")]
    pub format: FormatArg,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GlimpseArgs {
    /// Input dataset directory
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// First centre as a fraction of the image extent [default: 0.1]
    #[arg(long)]
    pub u: Option<f64>,
    /// Gaussian standard deviation in pixels [default: 0.5]
    #[arg(long)]
    pub s: Option<f64>,
    /// Centre spacing in pixels [default: 2]
    #[arg(long)]
    pub d: Option<f64>,
    /// Encoding of the glimpsed images
    #[arg(long, value_enum, default_value = "scdt")]
    pub format: FormatArg,
    /// Also write the filter banks as SCDT1 files under masks/
    #[arg(long)]
    pub export_masks: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (train.txt / test.txt pick the splits)
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Skip fusion: conc or diff [default: diff]
    #[arg(long, value_name = "VARIANT")]
    pub variant: Option<Fusion>,
    /// Attention gates in the decoder [default: true]
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub gated: Option<bool>,
    /// Output checkpoint path
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Training log CSV [default: <CKPT>.log.csv]
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Seed for initialisation and batching [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer steps [default: 500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Suppress per-step progress on stderr
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// The test split when it is non-empty, otherwise every pair
    Auto,
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score (not needed with --oracle)
    #[arg(long, value_name = "FILE", required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Probability threshold for a changed pixel
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Which pairs to score
    #[arg(long, value_enum, default_value = "auto")]
    pub split: SplitArg,
    /// Score the labels themselves as predictions (debug ceiling)
    #[arg(long)]
    pub oracle: bool,
    /// Also score these comma-separated thresholds
    #[arg(long, value_name = "T1,T2,...", value_delimiter = ',')]
    pub sweep: Vec<f64>,
    /// Write PREFIX.csv, PREFIX_tiles.csv and (with --sweep) PREFIX_sweep.csv
    #[arg(long, value_name = "PREFIX")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Earlier image (PNG or SCDT1)
    #[arg(long, value_name = "IMG")]
    pub t1: PathBuf,
    /// Later image (PNG or SCDT1)
    #[arg(long, value_name = "IMG")]
    pub t2: PathBuf,
    /// Writes PREFIX.scdt (probabilities) and PREFIX.png (255 = changed)
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
    /// Probability threshold for a changed pixel
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 1.
    Usage(String),
    /// Data, validation, I/O or numerical failure: exit 2, or 3 for a non-finite abort.
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(Error::NonFinite { .. }) => 3,
            CliError::Run(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Run(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.set).map_err(|e| CliError::Usage(e.to_string()))
}

fn usage<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(e.to_string()))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Glimpse(a) => cmd_glimpse(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
    }
}

fn write_manifests(dir: &Path, split: &DatasetSplit) -> crate::Result<()> {
    let ids = |v: &[SamplePair]| v.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
    crate::data::write_manifest(dir.join(TRAIN_MANIFEST), &ids(&split.train))?;
    crate::data::write_manifest(dir.join(TEST_MANIFEST), &ids(&split.test))
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.count {
        cfg.data.count = v;
    }
    if let Some(v) = &a.size {
        let (h, w) = usage(parse_size("--size", v))?;
        cfg.data.height = h;
        cfg.data.width = w;
    }
    if let Some(v) = a.seed {
        cfg.data.seed = v;
    }
    if let Some(v) = a.change_fraction {
        cfg.data.change_fraction = v;
    }
    if let Some(v) = a.test_count {
        cfg.data.test_count = v;
    }
    let pairs = synth_generate(&cfg.data.synth_config())?;
    let split = DatasetSplit::random(pairs, cfg.data.test_count, cfg.data.seed)?;
    let format = a.format.into();
    with_staging_dir(&a.out, |dir| {
        split
            .train
            .par_iter()
            .chain(split.test.par_iter())
            .try_for_each(|p| save_pair(dir, p, format))?;
        write_manifests(dir, &split)
    })?;
    println!(
        "wrote {} pairs ({} train, {} test) to {}",
        split.train.len() + split.test.len(),
        split.train.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn sidecar_text(g: &GlimpseSettings) -> String {
    format!("u={}\ns={}\nd={}\n", g.u, g.s, g.d)
}

/// Reads `glimpse.txt` from a dataset directory, if present.
pub fn read_sidecar(dir: &Path) -> crate::Result<Option<GlimpseSettings>> {
    let path = dir.join(GLIMPSE_SIDECAR);
    if !path.is_file() {
        return Ok(None);
    }
    let mut cfg = RunConfig::default();
    for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: bad line `{line}`", path.display())))?;
        cfg.set(&format!("glimpse.{}", k.trim()), v)?;
    }
    Ok(Some(cfg.glimpse))
}

pub fn cmd_glimpse(a: &GlimpseArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.glimpse = GlimpseSettings {
        u: a.u.unwrap_or(cfg.glimpse.u),
        s: a.s.unwrap_or(cfg.glimpse.s),
        d: a.d.unwrap_or(cfg.glimpse.d),
    };
    let g = cfg.glimpse;
    let split = load_split(&a.input, 0)?;
    let has_manifests = a.input.join(TRAIN_MANIFEST).is_file() || a.input.join(TEST_MANIFEST).is_file();
    let pairs: Vec<&SamplePair> = split.train.iter().chain(&split.test).collect();
    let glimpsed: Vec<SamplePair> = pairs
        .par_iter()
        .map(|p| preprocess_pair(p, &g))
        .collect::<crate::Result<_>>()?;
    let format = a.format.into();
    with_staging_dir(&a.out, |dir| {
        glimpsed.par_iter().try_for_each(|p| save_pair(dir, p, format))?;
        for name in [TRAIN_MANIFEST, TEST_MANIFEST] {
            if has_manifests && a.input.join(name).is_file() {
                crate::data::write_manifest(dir.join(name), &read_manifest(a.input.join(name))?)?;
            }
        }
        fs::write(dir.join(GLIMPSE_SIDECAR), sidecar_text(&g))?;
        if a.export_masks {
            fs::create_dir_all(dir.join("masks"))?;
            let mut sizes: Vec<(usize, usize)> = glimpsed.iter().map(SamplePair::spatial).collect();
            sizes.sort();
            sizes.dedup();
            for (h, w) in sizes {
                let (a_y, a_x) = g.masks(h, w)?;
                scdt::write(dir.join(format!("masks/a_y_{h}.scdt")), &a_y.to_tensor::<f64>())?;
                scdt::write(dir.join(format!("masks/a_x_{w}.scdt")), &a_x.to_tensor::<f64>())?;
            }
        }
        Ok(())
    })?;
    println!(
        "glimpsed {} pairs (u={} s={} d={}) into {}",
        glimpsed.len(),
        g.u,
        g.s,
        g.d,
        a.out.display()
    );
    Ok(())
}

fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.csv");
    ckpt.with_file_name(name)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.variant {
        cfg.model.fusion = v;
    }
    if let Some(v) = a.gated {
        cfg.model.gated = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    let data = load_split(&a.data, cfg.data.seed)?;
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::invalid("dataset", format!("{} has no training pairs", a.data.display())))?;
    let mut model_cfg = cfg.model_for(first.spatial());
    model_cfg.input_channels = first.channels();
    let model = build::<f32>(&model_cfg, cfg.train.seed)?;
    let steps = cfg.train.steps;
    let every = (steps / 10).max(1);
    eprintln!(
        "training {} ({} parameters) on {} pairs, {} test, {} steps",
        model_cfg.network_name(),
        model.num_scalars(),
        data.train.len(),
        data.test.len(),
        steps
    );
    let outcome = train_with(model, &data, &cfg.train, |e| {
        if a.quiet {
            return;
        }
        match &e.eval {
            Some(s) => eprintln!("step {}/{steps} loss {:.5} test {s}", e.step, e.loss),
            None if e.step % every == 0 || e.step == 1 => eprintln!("step {}/{steps} loss {:.5}", e.step, e.loss),
            None => {}
        }
    })?;
    let mut log = String::from(LOG_CSV_HEADER);
    log.push('\n');
    for e in &outcome.log {
        log.push_str(&e.csv());
        log.push('\n');
    }
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    save_checkpoint(&outcome.model, &a.out)?;
    write_atomic(&log_path, log.as_bytes())?;
    println!(
        "wrote {} (beta {:.4}) and {}",
        a.out.display(),
        outcome.loss.beta,
        log_path.display()
    );
    Ok(())
}

fn select(split: DatasetSplit, which: SplitArg) -> Vec<SamplePair> {
    match which {
        SplitArg::Train => split.train,
        SplitArg::Test => split.test,
        SplitArg::All => split.train.into_iter().chain(split.test).collect(),
        SplitArg::Auto if split.test.is_empty() => split.train,
        SplitArg::Auto => split.test,
    }
}

/// Rendered metrics table: a header line plus one row, columns aligned.
pub fn metrics_table(row: &MetricsRow) -> String {
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let csv = row.csv();
    let cells: Vec<&str> = csv.split(',').collect();
    let widths: Vec<usize> = header.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
    let line = |v: &[&str]| {
        v.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    format!("{}\n{}\n", line(&header), line(&cells))
}

pub const TILES_CSV_HEADER: &str = "id,tp,fp,tn,fn,Recall,F1,Precision,Accuracy";
pub const SWEEP_CSV_HEADER: &str = "threshold,positives,Recall,F1,Precision,Accuracy";

fn score_cells(c: &ConfusionCounts) -> crate::Result<String> {
    let s = scores(c)?;
    Ok(format!(
        "{},{},{},{}",
        percent(s.recall),
        percent(s.f1),
        percent(s.precision),
        percent(Some(s.accuracy))
    ))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(CliError::Usage(format!("--threshold {} not in (0, 1)", a.threshold)));
    }
    if let Some(t) = a.sweep.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(CliError::Usage(format!("--sweep threshold {t} not in (0, 1)")));
    }
    let pairs = select(load_split(&a.data, 0)?, a.split);
    if pairs.is_empty() {
        return Err(Error::invalid(
            "dataset",
            format!("{} has no pairs in the chosen split", a.data.display()),
        )
        .into());
    }
    let glimpse = read_sidecar(&a.data)?;
    let (network, probs) = if a.oracle {
        let probs: Vec<_> = pairs.iter().map(|p| p.label.to_tensor::<f32>()).collect();
        ("oracle".to_string(), probs)
    } else {
        let ckpt = a.ckpt.as_ref().expect("clap requires --ckpt without --oracle");
        let model = load_checkpoint(ckpt)?;
        let expected = model.config().input_channels;
        if let Some(p) = pairs.iter().find(|p| p.channels() != expected) {
            return Err(Error::sample(
                &p.id,
                format!("{} channels but the checkpoint expects {expected}", p.channels()),
            )
            .into());
        }
        let probs = pairs
            .par_iter()
            .map(|p| predict(&model, &p.t1, &p.t2))
            .collect::<crate::Result<Vec<_>>>()?;
        (model.config().network_name(), probs)
    };
    let counts_at = |t: f64| -> crate::Result<Vec<ConfusionCounts>> {
        probs
            .iter()
            .zip(&pairs)
            .map(|(prob, p)| confusion(&binarize(prob, t)?, &p.label))
            .collect()
    };
    let mut ev = Evaluation::default();
    for (p, c) in pairs.iter().zip(counts_at(a.threshold)?) {
        ev.push(p.id.clone(), c);
    }
    let row = MetricsRow {
        network,
        glimpse: glimpse.map(|g| (g.u, g.s, g.d)),
        scores: ev.scores()?,
    };
    print!("{}", metrics_table(&row));

    let mut sweep = String::new();
    if !a.sweep.is_empty() {
        sweep.push_str(SWEEP_CSV_HEADER);
        sweep.push('\n');
        println!("\nthreshold  positives  Recall  F1  Precision  Accuracy");
        for &t in &a.sweep {
            let total: ConfusionCounts = counts_at(t)?.into_iter().sum();
            let line = format!("{t},{},{}", total.tp + total.fp, score_cells(&total)?);
            println!("{}", line.replace(',', "  "));
            sweep.push_str(&line);
            sweep.push('\n');
        }
    }

    if let Some(prefix) = &a.out {
        let mut tiles = String::from(TILES_CSV_HEADER);
        tiles.push('\n');
        for (id, c) in &ev.tiles {
            tiles.push_str(&format!(
                "{id},{},{},{},{},{}\n",
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                score_cells(c)?
            ));
        }
        let with_suffix = |s: &str| {
            let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(s);
            prefix.with_file_name(name)
        };
        write_atomic(with_suffix(".csv"), format!("{CSV_HEADER}\n{}\n", row.csv()).as_bytes())?;
        write_atomic(with_suffix("_tiles.csv"), tiles.as_bytes())?;
        if !sweep.is_empty() {
            write_atomic(with_suffix("_sweep.csv"), sweep.as_bytes())?;
        }
    }
    Ok(())
}

pub fn cmd_infer(a: &InferArgs) -> CliResult<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(CliError::Usage(format!("--threshold {} not in (0, 1)", a.threshold)));
    }
    let model = load_checkpoint(&a.ckpt)?;
    let t1 = crate::data::load_image(&a.t1)?;
    let t2 = crate::data::load_image(&a.t2)?;
    if t1.shape() != t2.shape() {
        return Err(Error::shape("infer", format!("t1 is {:?} but t2 is {:?}", t1.shape(), t2.shape())).into());
    }
    let prob = predict(&model, &t1, &t2)?;
    let mask = binarize(&prob, a.threshold)?;
    let png = encode_mask_png(&mask)?;
    let with_ext = |ext: &str| {
        let mut name = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(ext);
        a.out.with_file_name(name)
    };
    let (prob_path, png_path) = (with_ext(".scdt"), with_ext(".png"));
    write_atomic(&prob_path, &scdt::encode(&prob))?;
    if let Err(e) = write_atomic(&png_path, &png) {
        let _ = fs::remove_file(&prob_path);
        return Err(e.into());
    }
    println!(
        "wrote {} and {} ({} of {} pixels changed)",
        prob_path.display(),
        png_path.display(),
        mask.positives(),
        mask.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Run(Error::Format("x".into())).exit_code(), 2);
        let nf = Error::NonFinite {
            step: 4,
            detail: String::new(),
        };
        assert_eq!(CliError::Run(nf).exit_code(), 3);
    }

    #[test]
    fn table_columns_line_up_with_csv() {
        let row = MetricsRow {
            network: "FC-Siam-diff-Att".into(),
            glimpse: Some((0.1, 0.5, 2.0)),
            scores: scores(&ConfusionCounts {
                tp: 3,
                fp: 1,
                tn: 10,
                fn_: 2,
            })
            .unwrap(),
        };
        let table = metrics_table(&row);
        let lines: Vec<Vec<&str>> = table.lines().map(|l| l.split_whitespace().collect()).collect();
        assert_eq!(lines[0], CSV_HEADER.split(',').collect::<Vec<_>>());
        assert_eq!(lines[1], row.csv().split(',').collect::<Vec<_>>());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_sidecar(dir.path()).unwrap().is_none());
        let g = GlimpseSettings {
            u: 0.25,
            s: 1.5,
            d: 5.0,
        };
        fs::write(dir.path().join(GLIMPSE_SIDECAR), sidecar_text(&g)).unwrap();
        assert_eq!(read_sidecar(dir.path()).unwrap(), Some(g));
    }

    #[test]
    fn default_log_sits_next_to_checkpoint() {
        assert_eq!(
            default_log_path(Path::new("out/m.ckpt")),
            PathBuf::from("out/m.ckpt.log.csv")
        );
    }
}
