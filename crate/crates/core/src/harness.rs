//! Configuration and command implementations behind the `shadowbench` binary.
//!
//! Every command is a pure function of its config file, input files and seed.
//! Work is spread over a pool of `worker_count` threads, but each item draws
//! from a sub-seed fixed in advance and results are written in input order, so
//! outputs do not depend on the pool size.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command as Process, Stdio};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adv_attack::{
    attack, fd_oracle_adapter, AttackConfig, AttackResult, BlackBoxLoss, BlackBoxOutput, DetectorOracle, SceneRef,
    Subsample, ToyDetector,
};
use crate::error::{Error, Result};
use crate::factor_bench::{
    area_range, location_target, plan_cell, render_cell, rescale_mask_to_area, shape_complexity, AttackSummary,
    DatasetManifestRecord, RenderOptions, Severity, SilhouetteLibrary,
};
use crate::imaging::{
    load_field, load_image, resize_field, save_field, save_image, save_image_16, FieldRole, Image, ScalarField,
};
use crate::metrics::{
    aggregate_report, compare_summaries, nme, region_report_with_mode, ItemMetrics, Landmarks, MetricMode, SummaryTable,
};
use crate::rng::{hash_str, rng_from_seed, sub_seed};
use crate::shadow_synth::{synthetic_face_depth, BetaMap, MatteConfig, ShadowForward};

/// Process exit statuses.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const DOMAIN: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const PARTIAL: i32 = 3;
}

/// Exit status for an error that aborted a command. Unreadable or missing
/// data files count as domain errors; only bad flags and configs are usage errors.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => exit::USAGE,
        _ => exit::DOMAIN,
    }
}

/// Landmark detector used by `attack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    Toy {
        #[serde(default)]
        weights_seed: u64,
    },
    /// A child process speaking the line protocol described in [`ExternalDetector`].
    External {
        command: Vec<String>,
        #[serde(default = "default_fd_step")]
        fd_step: f64,
        /// Fraction of pixels probed per gradient; `None` uses the adapter default.
        #[serde(default)]
        subsample_fraction: Option<f64>,
    },
}

fn default_fd_step() -> f64 {
    1e-2
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig::Toy { weights_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input_dir: Option<PathBuf>,
    pub silhouette_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Ground-truth landmark files `<stem>.json`; defaults to `input_dir`.
    pub landmarks_dir: Option<PathBuf>,
    /// Optional depth maps with the same file names as the inputs.
    pub depth_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub matte: MatteConfig,
    pub beta: BetaMap,
    pub attack: AttackConfig,
    pub metric_mode: MetricMode,
    pub worker_count: Option<usize>,
    pub oracle: OracleConfig,
    /// Grid cell whose size/shape/location severities seed the attack mask.
    pub attack_cell: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_dir: None,
            silhouette_dir: None,
            output_dir: None,
            landmarks_dir: None,
            depth_dir: None,
            seed: None,
            matte: MatteConfig::default(),
            beta: BetaMap::default(),
            attack: AttackConfig::default(),
            metric_mode: MetricMode::default(),
            worker_count: None,
            oracle: OracleConfig::default(),
            attack_cell: "i1s1h2l2".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (--seed or \"seed\" in the config)".into()))
    }

    fn existing_dir<'a>(&self, dir: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        let dir = dir
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{name} is required")))?;
        if !dir.is_dir() {
            return Err(Error::Config(format!("{name} {} does not exist", dir.display())));
        }
        Ok(dir)
    }

    fn optional_dir<'a>(&self, dir: &'a Option<PathBuf>, name: &str) -> Result<Option<&'a Path>> {
        match dir {
            Some(_) => self.existing_dir(dir, name).map(Some),
            None => Ok(None),
        }
    }

    fn output_dir(&self) -> Result<&Path> {
        let dir = self
            .output_dir
            .as_deref()
            .ok_or_else(|| Error::Config("output_dir is required".into()))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(dir)
    }

    /// Checks value ranges that do not depend on the command.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.matte.validate().map_err(cfg)?;
        self.attack.validate().map_err(cfg)?;
        parse_cell_tag(&self.attack_cell).map_err(cfg)?;
        if self.worker_count == Some(0) {
            return Err(Error::Config("worker_count must be >= 1".into()));
        }
        if let OracleConfig::External {
            command,
            fd_step,
            subsample_fraction,
        } = &self.oracle
        {
            if command.is_empty() {
                return Err(Error::Config("external oracle needs a command".into()));
            }
            if fd_step.is_nan() || *fd_step <= 0.0 {
                return Err(Error::Config(format!("fd_step must be > 0, got {fd_step}")));
            }
            if subsample_fraction.is_some_and(|f| !(f > 0.0 && f <= 1.0)) {
                return Err(Error::Config("subsample_fraction must be in (0, 1]".into()));
            }
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let n = self
            .worker_count
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
    }

    fn library(&self) -> Result<SilhouetteLibrary> {
        match self.optional_dir(&self.silhouette_dir, "silhouette_dir")? {
            Some(dir) => SilhouetteLibrary::load_dir(dir),
            None => Ok(SilhouetteLibrary::starter()),
        }
    }

    fn depth_for(&self, name: &str, dims: (usize, usize)) -> Result<ScalarField> {
        if let Some(dir) = self.optional_dir(&self.depth_dir, "depth_dir")? {
            let path = dir.join(name);
            if path.exists() {
                let depth = load_field(&path, FieldRole::Depth)?;
                return if depth.dims() == dims {
                    Ok(depth)
                } else {
                    resize_field(&depth, dims.0, dims.1)
                };
            }
        }
        synthetic_face_depth(dims.0, dims.1)
    }

    fn landmarks_dir(&self) -> Result<&Path> {
        match &self.landmarks_dir {
            Some(_) => self.existing_dir(&self.landmarks_dir, "landmarks_dir"),
            None => self.existing_dir(&self.input_dir, "input_dir"),
        }
    }
}

/// Parses a grid cell tag such as `i1s2h3l1`.
pub fn parse_cell_tag(tag: &str) -> Result<[Severity; 4]> {
    let bad = || Error::InvalidArgument(format!("cell tag '{tag}' is not of the form i1s2h3l1"));
    let b = tag.as_bytes();
    if b.len() != 8 || [b[0], b[2], b[4], b[6]] != *b"ishl" {
        return Err(bad());
    }
    let level = |c: u8| {
        if c.is_ascii_digit() {
            Severity::new(c - b'0').map_err(|_| bad())
        } else {
            Err(bad())
        }
    };
    Ok([level(b[1])?, level(b[3])?, level(b[5])?, level(b[7])?])
}

/// Messages and per-item failures of a finished command.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct CommandReport {
    pub lines: Vec<String>,
    pub failures: Vec<String>,
}

impl CommandReport {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            exit::SUCCESS
        } else {
            exit::PARTIAL
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "shadowbench", version, about = "Facial shadow benchmark toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub silhouette_dir: Option<PathBuf>,
    #[arg(long)]
    pub landmarks_dir: Option<PathBuf>,
    #[arg(long)]
    pub depth_dir: Option<PathBuf>,
    /// `rms` or `mae_compat`.
    #[arg(long, value_parser = parse_metric_mode)]
    pub metric_mode: Option<MetricMode>,
}

fn parse_metric_mode(s: &str) -> std::result::Result<MetricMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown metric mode '{s}'"))
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut cfg.input_dir, &self.input_dir);
        set(&mut cfg.output_dir, &self.output_dir);
        set(&mut cfg.silhouette_dir, &self.silhouette_dir);
        set(&mut cfg.landmarks_dir, &self.landmarks_dir);
        set(&mut cfg.depth_dir, &self.depth_dir);
        cfg.seed = self.seed.or(cfg.seed);
        cfg.worker_count = self.workers.or(cfg.worker_count);
        if let Some(mode) = self.metric_mode {
            cfg.metric_mode = mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Composite one shadow onto one image.
    Synth(SynthArgs),
    /// Render the 81-cell factor grid for every image in the input directory.
    GenDataset(GenDatasetArgs),
    /// Mine adversarial shadows against a landmark detector.
    Attack(AttackArgs),
    /// Score restored images and landmark predictions against ground truth.
    Eval(EvalArgs),
    /// Compare several evaluation reports against a baseline.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub depth: Option<PathBuf>,
    #[arg(long)]
    pub alpha: f64,
    /// Move the mask centroid to a location severity (1 top, 2 middle, 3 bottom).
    #[arg(long)]
    pub location: Option<u8>,
    /// Rescale the mask into a size severity's area range.
    #[arg(long)]
    pub size: Option<u8>,
    #[arg(long)]
    pub output: PathBuf,
    /// JSON-lines record; defaults to the output path with a `.jsonl` extension.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `toy` or `external`; overrides the config's oracle kind.
    #[arg(long)]
    pub oracle: Option<String>,
    /// Program of the external detector.
    #[arg(long)]
    pub oracle_cmd: Option<String>,
    /// Extra argument for the external detector (repeatable).
    #[arg(long = "oracle-arg", allow_hyphen_values = true)]
    pub oracle_args: Vec<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Restored images named like the manifest outputs; defaults to the shadowed images.
    #[arg(long)]
    pub restored_dir: Option<PathBuf>,
    /// Landmark predictions `<output stem>.json`.
    #[arg(long)]
    pub predictions_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `LABEL=PATH` to a `report.json`; a bare path is labelled by its directory.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<String>,
    /// Label of the baseline column; defaults to the first input.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status. Messages go to stdout, failures to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            for failure in &report.failures {
                eprintln!("failed: {failure}");
            }
            report.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> Result<CommandReport> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::GenDataset(a) => cmd_gen_dataset(&a.common.resolve()?),
        Command::Attack(a) => {
            let mut cfg = a.common.resolve()?;
            apply_attack_flags(&mut cfg, a)?;
            cmd_attack(&cfg)
        }
        Command::Eval(a) => cmd_eval(
            &a.common.resolve()?,
            &a.manifest,
            a.restored_dir.as_deref(),
            a.predictions_dir.as_deref(),
        ),
        Command::Report(a) => cmd_report(&a.inputs, a.baseline.as_deref(), a.output_dir.as_deref()),
    }
}

fn apply_attack_flags(cfg: &mut RunConfig, a: &AttackArgs) -> Result<()> {
    match a.oracle.as_deref() {
        None => {}
        Some("toy") => {
            if !matches!(cfg.oracle, OracleConfig::Toy { .. }) {
                cfg.oracle = OracleConfig::default();
            }
        }
        Some("external") => {
            let command = match (&a.oracle_cmd, &cfg.oracle) {
                (Some(prog), _) => std::iter::once(prog.clone())
                    .chain(a.oracle_args.iter().cloned())
                    .collect(),
                (None, OracleConfig::External { command, .. }) => command.clone(),
                (None, _) => return Err(Error::Config("--oracle external needs --oracle-cmd".into())),
            };
            let (fd_step, subsample_fraction) = match &cfg.oracle {
                OracleConfig::External {
                    fd_step,
                    subsample_fraction,
                    ..
                } => (*fd_step, *subsample_fraction),
                _ => (default_fd_step(), None),
            };
            cfg.oracle = OracleConfig::External {
                command,
                fd_step,
                subsample_fraction,
            };
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown oracle '{other}' (expected toy or external)"
            )))
        }
    }
    if let Some(n) = a.iterations {
        cfg.attack.iterations = n;
    }
    cfg.validate()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned())
}

/// One line of the `synth` manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub source_image: String,
    pub output_image: String,
    pub mask_image: String,
    pub alpha: f64,
    pub area_fraction: f64,
    pub centroid: Option<(f64, f64)>,
    pub complexity: Option<f64>,
    pub size_severity: Option<Severity>,
    pub location_severity: Option<Severity>,
    pub seed: u64,
}

pub fn cmd_synth(a: &SynthArgs) -> Result<CommandReport> {
    let cfg = a.common.resolve()?;
    let seed = cfg.seed()?;
    if !(0.0..1.0).contains(&a.alpha) {
        return Err(Error::Config(format!("--alpha must be in [0, 1), got {}", a.alpha)));
    }
    let severity = |v: Option<u8>, name: &str| {
        v.map(|l| Severity::new(l).map_err(|_| Error::Config(format!("--{name} must be 1, 2 or 3, got {l}"))))
            .transpose()
    };
    let size = severity(a.size, "size")?;
    let location = severity(a.location, "location")?;

    let clean = load_image(&a.image)?;
    let dims = clean.dims();
    let mut mask = load_field(&a.mask, FieldRole::Mask)?;
    if mask.dims() != dims {
        mask = resize_field(&mask, dims.0, dims.1)?;
    }
    let depth = match &a.depth {
        Some(p) => {
            let d = load_field(p, FieldRole::Depth)?;
            if d.dims() == dims {
                d
            } else {
                resize_field(&d, dims.0, dims.1)?
            }
        }
        None => synthetic_face_depth(dims.0, dims.1)?,
    };
    let mut rng = rng_from_seed(seed);
    if let Some(size) = size {
        mask = rescale_mask_to_area(&mask, area_range(size), dims, &mut rng)?.mask;
    }
    if let Some(location) = location {
        let target = location_target(location, dims.0, dims.1);
        if let Some((cx, cy)) = mask.centroid() {
            let (dx, dy) = ((target.0 - cx).round() as isize, (target.1 - cy).round() as isize);
            mask = ScalarField::from_fn(dims.0, dims.1, FieldRole::Mask, |y, x| {
                let (sx, sy) = (x as isize - dx, y as isize - dy);
                if sx < 0 || sy < 0 || sx as usize >= dims.1 || sy as usize >= dims.0 {
                    0.0
                } else {
                    mask.get(sy as usize, sx as usize)
                }
            })?;
        }
    }

    let shadowed = ShadowForward::run(&clean, &mask, &depth, a.alpha, &cfg.beta, &cfg.matte)?.into_image();
    save_image(&shadowed, &a.output)?;
    let mask_path = a.output.with_extension("mask.png");
    save_field(&mask, &mask_path)?;
    let record = SynthRecord {
        source_image: a.image.display().to_string(),
        output_image: a.output.display().to_string(),
        mask_image: mask_path.display().to_string(),
        alpha: a.alpha,
        area_fraction: mask.foreground_fraction(),
        centroid: mask.centroid(),
        complexity: shape_complexity(&mask).ok(),
        size_severity: size,
        location_severity: location,
        seed,
    };
    let manifest = a.manifest.clone().unwrap_or_else(|| a.output.with_extension("jsonl"));
    write_file(&manifest, json_lines([&record])?.as_bytes())?;
    Ok(CommandReport {
        lines: vec![format!(
            "synth: wrote {} and {}",
            a.output.display(),
            manifest.display()
        )],
        failures: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FailureRecord {
    item: String,
    error: String,
}

pub fn cmd_gen_dataset(cfg: &RunConfig) -> Result<CommandReport> {
    let seed = cfg.seed()?;
    let input = cfg.existing_dir(&cfg.input_dir, "input_dir")?;
    let library = cfg.library()?;
    let out = cfg.output_dir()?;
    ensure_dir(&out.join("images"))?;
    ensure_dir(&out.join("masks"))?;
    let names = list_pngs(input)?;
    let opts = RenderOptions {
        matte: cfg.matte,
        beta: cfg.beta,
    };
    let pool = cfg.pool()?;

    let (cells, loads) = pool.install(|| {
        let loads: Vec<Result<(Image, ScalarField)>> = names
            .par_iter()
            .map(|name| {
                let img = load_image(input.join(name))?;
                let depth = cfg.depth_for(name, img.dims())?;
                Ok((img, depth))
            })
            .collect();
        let jobs: Vec<(usize, usize)> = (0..names.len())
            .filter(|i| loads[*i].is_ok())
            .flat_map(|i| (0..81).map(move |c| (i, c)))
            .collect();
        let cells: Vec<((usize, usize), Result<DatasetManifestRecord>)> = jobs
            .par_iter()
            .map(|&(i, cell)| {
                let (img, depth) = loads[i].as_ref().expect("filtered");
                let name = &names[i];
                let result = render_cell(img, depth, &library, sub_seed(seed, hash_str(name)), name, &opts, cell)
                    .and_then(|sample| {
                        save_image(&sample.image, out.join(&sample.record.output_image))?;
                        if let Some(m) = &sample.record.mask_image {
                            save_field(&sample.mask, out.join(m))?;
                        }
                        Ok(sample.record)
                    });
                ((i, cell), result)
            })
            .collect();
        (cells, loads)
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (name, load) in names.iter().zip(&loads) {
        if let Err(e) = load {
            failures.push(FailureRecord {
                item: name.clone(),
                error: e.to_string(),
            });
        }
    }
    for ((i, cell), result) in cells {
        match result {
            Ok(r) => records.push(r),
            Err(e) => failures.push(FailureRecord {
                item: format!("{} cell {cell}", names[i]),
                error: e.to_string(),
            }),
        }
    }
    write_file(&out.join("manifest.jsonl"), json_lines(&records)?.as_bytes())?;
    write_file(&out.join("failures.jsonl"), json_lines(&failures)?.as_bytes())?;
    Ok(CommandReport {
        lines: vec![format!(
            "gen-dataset: {} source image(s), {} output(s), {} failure(s)",
            names.len(),
            records.len(),
            failures.len()
        )],
        failures: failures
            .into_iter()
            .map(|f| format!("{}: {}", f.item, f.error))
            .collect(),
    })
}

/// Child-process detector.
///
/// For every query the harness writes one line `<image.png>\t<truth.json>`
/// (UTF-8, absolute paths, 16-bit PNG) to the child's stdin; the child replies
/// with one JSON line `{"loss": <number>, "landmarks": [[x, y], ... 68]}`
/// (`landmarks` may be omitted). The process lives as long as this value.
pub struct ExternalDetector {
    io: Mutex<ChildIo>,
    scratch: PathBuf,
    truth_path: PathBuf,
}

struct ChildIo {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

#[derive(Deserialize)]
struct DetectorReply {
    loss: f64,
    #[serde(default)]
    landmarks: Option<Landmarks>,
}

impl ExternalDetector {
    pub fn spawn(command: &[String], scratch_dir: &Path, truth_path: &Path) -> Result<Self> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty oracle command".into()))?;
        ensure_dir(scratch_dir)?;
        let mut child = Process::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Oracle {
                iteration: 0,
                message: format!("cannot start {prog}: {e}"),
            })?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        Ok(Self {
            io: Mutex::new(ChildIo { child, stdin, stdout }),
            scratch: abs(&scratch_dir.join("query.png")),
            truth_path: abs(truth_path),
        })
    }
}

impl BlackBoxLoss for ExternalDetector {
    fn loss(&self, image: &Image, _truth: &Landmarks) -> std::result::Result<BlackBoxOutput, String> {
        let mut io = self.io.lock().map_err(|_| "detector state poisoned".to_string())?;
        save_image_16(image, &self.scratch).map_err(|e| e.to_string())?;
        let stdin = io.stdin.as_mut().ok_or("detector stdin closed")?;
        writeln!(stdin, "{}\t{}", self.scratch.display(), self.truth_path.display())
            .and_then(|_| stdin.flush())
            .map_err(|e| format!("writing to detector: {e}"))?;
        let mut line = String::new();
        let n = io
            .stdout
            .read_line(&mut line)
            .map_err(|e| format!("reading from detector: {e}"))?;
        if n == 0 {
            return Err("detector closed its output".into());
        }
        let reply: DetectorReply =
            serde_json::from_str(line.trim()).map_err(|e| format!("bad detector reply {:?}: {e}", line.trim()))?;
        if !(reply.loss >= 0.0 && reply.loss.is_finite()) {
            return Err(format!("detector returned invalid loss {}", reply.loss));
        }
        Ok(BlackBoxOutput {
            loss: reply.loss,
            landmarks: reply.landmarks,
        })
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            io.stdin.take();
            if !matches!(io.child.try_wait(), Ok(Some(_))) {
                let _ = io.child.kill();
            }
            let _ = io.child.wait();
        }
        let _ = std::fs::remove_file(&self.scratch);
    }
}

/// Per-image attack outputs before they are written.
struct AttackOutcome {
    record: DatasetManifestRecord,
    result: AttackResult,
    warped_mask: ScalarField,
}

fn attack_one(
    cfg: &RunConfig,
    name: &str,
    library: &SilhouetteLibrary,
    toy: Option<&ToyDetector>,
) -> Result<AttackOutcome> {
    let seed = sub_seed(cfg.seed()?, hash_str(name));
    let input = cfg.existing_dir(&cfg.input_dir, "input_dir")?;
    let out = cfg.output_dir()?;
    let clean = load_image(input.join(name))?;
    let dims = clean.dims();
    let truth_path = cfg.landmarks_dir()?.join(format!("{}.json", stem(name)));
    let truth = Landmarks::load(&truth_path)?;
    let depth = cfg.depth_for(name, dims)?;
    let severities = parse_cell_tag(&cfg.attack_cell)?;
    let plan = plan_cell(severities, dims, library, sub_seed(seed, 0))?;
    let scene = SceneRef {
        clean: &clean,
        depth: &depth,
        truth: &truth,
        beta: cfg.beta,
        matte: cfg.matte,
    };

    let result = match (&cfg.oracle, toy) {
        (OracleConfig::Toy { .. }, Some(det)) => attack(&scene, det, &cfg.attack, &plan.placed.mask)?,
        (
            OracleConfig::External {
                command,
                fd_step,
                subsample_fraction,
            },
            _,
        ) => {
            let scratch = out.join(".oracle").join(stem(name));
            let detector = ExternalDetector::spawn(command, &scratch, &truth_path)?;
            let subsample = match subsample_fraction {
                Some(fraction) => Subsample::Fraction {
                    fraction: *fraction,
                    seed,
                },
                None => Subsample::Auto { seed },
            };
            let oracle = fd_oracle_adapter(detector, *fd_step)?.with_subsample(subsample);
            let result = attack(&scene, &oracle as &dyn DetectorOracle, &cfg.attack, &plan.placed.mask);
            drop(oracle);
            let _ = std::fs::remove_dir(&scratch);
            let _ = std::fs::remove_dir(out.join(".oracle"));
            result?
        }
        (OracleConfig::Toy { .. }, None) => unreachable!("toy detector built before dispatch"),
    };

    let warped = crate::adv_attack::affine_warp(&result.state.mask, &result.state.theta);
    let nme_of = |lm: &Option<Landmarks>| lm.as_ref().and_then(|p| nme(p, &truth).ok());
    let file = format!("{}__adv.png", stem(name));
    let record = DatasetManifestRecord {
        source_image: name.to_string(),
        output_image: format!("images/{file}"),
        factor_spec: plan.spec,
        alpha: result.state.alpha,
        mask_id: plan.mask_id.clone(),
        area_fraction: warped.foreground_fraction(),
        centroid: warped.centroid().unwrap_or(plan.placed.centroid),
        complexity: plan.complexity,
        clip_fraction: plan.placed.clip_fraction,
        mask_image: Some(format!("masks/{file}")),
        attack: true,
        attack_result: Some(AttackSummary {
            theta: result.state.theta.0,
            mask_linf: result.state.mask_linf(),
            initial_loss: result.initial_loss(),
            final_loss: result.best_loss(),
            best_iteration: result.best_iteration,
            initial_nme: nme_of(&result.initial_landmarks),
            final_nme: nme_of(&result.landmarks),
        }),
    };
    Ok(AttackOutcome {
        record,
        result,
        warped_mask: warped,
    })
}

pub fn cmd_attack(cfg: &RunConfig) -> Result<CommandReport> {
    cfg.seed()?;
    let input = cfg.existing_dir(&cfg.input_dir, "input_dir")?;
    cfg.landmarks_dir()?;
    let library = cfg.library()?;
    let out = cfg.output_dir()?;
    for sub in ["images", "masks", "traces"] {
        ensure_dir(&out.join(sub))?;
    }
    let names = list_pngs(input)?;
    let toy = match cfg.oracle {
        OracleConfig::Toy { weights_seed } => Some(ToyDetector::new(weights_seed)),
        OracleConfig::External { .. } => None,
    };
    let pool = cfg.pool()?;
    let outcomes: Vec<Result<DatasetManifestRecord>> = pool.install(|| {
        names
            .par_iter()
            .map(|name| {
                let o = attack_one(cfg, name, &library, toy.as_ref())?;
                save_image(&o.result.image, out.join(&o.record.output_image))?;
                if let Some(m) = &o.record.mask_image {
                    save_field(&o.warped_mask, out.join(m))?;
                }
                let trace = json_lines(&o.result.trace)?;
                write_file(
                    &out.join("traces").join(format!("{}.jsonl", stem(name))),
                    trace.as_bytes(),
                )?;
                Ok(o.record)
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (name, outcome) in names.iter().zip(outcomes) {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(FailureRecord {
                item: name.clone(),
                error: e.to_string(),
            }),
        }
    }
    write_file(&out.join("manifest.jsonl"), json_lines(&records)?.as_bytes())?;
    write_file(&out.join("failures.jsonl"), json_lines(&failures)?.as_bytes())?;
    let raised = records
        .iter()
        .filter_map(|r| r.attack_result.as_ref())
        .filter(|a| matches!((a.initial_nme, a.final_nme), (Some(i), Some(f)) if f > i))
        .count();
    Ok(CommandReport {
        lines: vec![format!(
            "attack: {} image(s), {} attacked, NME raised on {}, {} failure(s)",
            names.len(),
            records.len(),
            raised,
            failures.len()
        )],
        failures: failures
            .into_iter()
            .map(|f| format!("{}: {}", f.item, f.error))
            .collect(),
    })
}

/// Metrics of one manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub output_image: String,
    pub metrics: Option<ItemMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_mode: MetricMode,
    pub records: Vec<EvalRecord>,
    pub summary: SummaryTable,
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetManifestRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn eval_record(
    cfg: &RunConfig,
    root: &Path,
    rec: &DatasetManifestRecord,
    restored_dir: Option<&Path>,
    predictions_dir: Option<&Path>,
) -> Result<ItemMetrics> {
    let input = cfg.existing_dir(&cfg.input_dir, "input_dir")?;
    let clean = load_image(input.join(&rec.source_image))?;
    let file = Path::new(&rec.output_image)
        .file_name()
        .map(PathBuf::from)
        .unwrap_or_default();
    let evaluated = match restored_dir {
        Some(dir) => load_image(dir.join(&file))?,
        None => load_image(root.join(&rec.output_image))?,
    };
    let mut m = ItemMetrics::default();
    match &rec.mask_image {
        Some(mask) => {
            let mask = load_field(root.join(mask), FieldRole::Mask)?;
            let r = region_report_with_mode(&clean, &evaluated, &mask, cfg.metric_mode)?;
            m.rmse_shadow = r.rmse_shadow;
            m.rmse_non_shadow = r.rmse_non_shadow;
            m.rmse_all = Some(r.rmse_all);
        }
        None => m.rmse_all = Some(crate::metrics::lab_error(&clean, &evaluated, None, cfg.metric_mode)?),
    }
    if let Some(dir) = predictions_dir {
        let pred = Landmarks::load(dir.join(format!("{}.json", stem(&file.to_string_lossy()))))?;
        let truth = Landmarks::load(cfg.landmarks_dir()?.join(format!("{}.json", stem(&rec.source_image))))?;
        m.nme = Some(nme(&pred, &truth)?);
    }
    Ok(m)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    manifest: &Path,
    restored_dir: Option<&Path>,
    predictions_dir: Option<&Path>,
) -> Result<CommandReport> {
    cfg.existing_dir(&cfg.input_dir, "input_dir")?;
    for (dir, name) in [(restored_dir, "restored_dir"), (predictions_dir, "predictions_dir")] {
        if let Some(d) = dir {
            if !d.is_dir() {
                return Err(Error::Config(format!("{name} {} does not exist", d.display())));
            }
        }
    }
    let out = cfg.output_dir()?;
    let records = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let pool = cfg.pool()?;
    let results: Vec<Result<ItemMetrics>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| eval_record(cfg, root, r, restored_dir, predictions_dir))
            .collect()
    });
    let mut failures = Vec::new();
    let mut per_record = Vec::with_capacity(records.len());
    let mut metrics = Vec::with_capacity(records.len());
    for (rec, res) in records.iter().zip(results) {
        let (m, error) = match res {
            Ok(m) => (Some(m), None),
            Err(e) => {
                failures.push(format!("{}: {e}", rec.output_image));
                (None, Some(e.to_string()))
            }
        };
        metrics.push(m);
        per_record.push(EvalRecord {
            output_image: rec.output_image.clone(),
            metrics: m,
            error,
        });
    }
    let summary = aggregate_report(&records, &metrics)?;
    let text = summary.to_text();
    let report = EvalReport {
        metric_mode: cfg.metric_mode,
        records: per_record,
        summary,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&out.join("report.json"), format!("{json}\n").as_bytes())?;
    write_file(&out.join("report.txt"), text.as_bytes())?;
    let mut lines = vec![format!(
        "eval: {} record(s), {} scored, {} failed",
        records.len(),
        records.len() - failures.len(),
        failures.len()
    )];
    lines.extend(text.lines().map(str::to_string));
    Ok(CommandReport { lines, failures })
}

fn split_input(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let label = path
                .parent()
                .and_then(|p| p.file_name())
                .map_or_else(|| spec.to_string(), |n| n.to_string_lossy().into_owned());
            (label, path)
        }
    }
}

pub fn cmd_report(inputs: &[String], baseline: Option<&str>, output_dir: Option<&Path>) -> Result<CommandReport> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one --input".into()));
    }
    let mut tables: BTreeMap<String, SummaryTable> = BTreeMap::new();
    let mut first = None;
    for spec in inputs {
        let (label, path) = split_input(spec);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        first.get_or_insert_with(|| label.clone());
        if tables.insert(label.clone(), report.summary).is_some() {
            return Err(Error::Config(format!("duplicate report label '{label}'")));
        }
    }
    let baseline = baseline.map(str::to_string).or(first).expect("at least one input");
    let inputs: Vec<(String, SummaryTable)> = tables.into_iter().collect();
    let table = compare_summaries(&inputs, &baseline).map_err(|e| Error::Config(e.to_string()))?;
    let text = table.to_text();
    if let Some(dir) = output_dir {
        let json = serde_json::to_string_pretty(&table).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&dir.join("comparison.json"), format!("{json}\n").as_bytes())?;
        write_file(&dir.join("comparison.txt"), text.as_bytes())?;
    }
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines.extend(table.warnings.iter().map(|w| format!("warning: {w}")));
    Ok(CommandReport {
        lines,
        failures: Vec::new(),
    })
}
