//! Driver for the `spxtrack` command: segment, fields, track, eval and all.
//!
//! Exit codes: 0 success, 1 internal failure, 2 configuration error, 3 data error.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use spxtrack::imaging::{
    list_matching, load_frame, load_mask, read_label_map, write_label_map, write_mask, Sequence,
};
use spxtrack::matching::MatchField;
use spxtrack::metrics::{contour_f_measure, default_contour_radius, dice, fwbw_consistency, FrameMetrics, MetricsReport};
use spxtrack::tracking::{compute_elementary_fields, required_pairs, segment_sequence, track, TrackResult};

pub use config::RunConfig;

/// Environment variable that overrides the field cache directory.
pub const CACHE_ENV: &str = "SPXTRACK_CACHE";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Internal(String),
}

impl std::error::Error for CliError {}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<spxtrack::Error> for CliError {
    fn from(e: spxtrack::Error) -> Self {
        use spxtrack::Error as E;
        let m = e.to_string();
        match e {
            E::Io { .. } | E::UnsupportedFormat(_) | E::DimensionMismatch(_) | E::Malformed { .. } | E::Codec(_) => {
                CliError::Data(m)
            }
            E::InvalidArgument(_) => CliError::Config(m),
            E::MissingField { .. } | E::IndexOutOfRange(_) => CliError::Internal(m),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "spxtrack", version, about = "Superpixel-based long-term ROI tracking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Stage to run when no subcommand is given.
    #[arg(long, global = true, value_parser = ["segment", "fields", "track", "eval", "all"])]
    pub stage: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Segment every frame and write label maps.
    Segment,
    /// Compute elementary match fields into the cache.
    Fields,
    /// Track the reference ROI through the sequence.
    Track,
    /// Score tracked masks against ground truth.
    Eval(EvalArgs),
    /// Track, then evaluate when `gt_dir` is set.
    All,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct EvalArgs {
    /// Directory of tracked masks (default: `<output_dir>/masks`).
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Directory of ground-truth masks (default: `gt_dir`).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Track output directory with segments and match fields, for consistency scores.
    #[arg(long)]
    pub track_dir: Option<PathBuf>,
    /// Report path (default: `metrics.csv` next to the masks directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs, prints a one-line diagnostic on failure, and returns the exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("spxtrack: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let command = match (&cli.command, cli.stage.as_deref()) {
        (Some(c), None) => c.clone(),
        (Some(_), Some(_)) => return Err(CliError::Config("give either a subcommand or --stage, not both".into())),
        (None, Some("segment")) => Command::Segment,
        (None, Some("fields")) => Command::Fields,
        (None, Some("track")) => Command::Track,
        (None, Some("eval")) => Command::Eval(EvalArgs::default()),
        (None, Some(_)) => Command::All,
        (None, None) => return Err(CliError::Config("no subcommand or --stage given".into())),
    };
    let config = match &cli.config {
        Some(path) => Some(load_config(path, cli)?),
        None => None,
    };
    let jobs = config.as_ref().map_or(0, |c| c.jobs);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(jobs))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| match command {
        Command::Eval(args) => run_eval(config.as_ref(), &args).map(|_| ()),
        other => {
            let cfg = config.ok_or_else(|| CliError::Config("--config is required".into()))?;
            match other {
                Command::Segment => run_segment(&cfg),
                Command::Fields => run_fields(&cfg),
                Command::Track => run_track(&cfg).map(|_| ()),
                Command::All => {
                    run_track(&cfg)?;
                    if cfg.gt_dir.is_some() {
                        run_eval(Some(&cfg), &EvalArgs::default())?;
                    }
                    Ok(())
                }
                Command::Eval(_) => unreachable!(),
            }
        }
    })
}

/// Reads a config file and applies `--seed` / `--jobs` overrides.
pub fn load_config(path: &Path, cli: &Cli) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = std::path::absolute(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut cfg = RunConfig::parse(&text, &base)?;
    if let Some(seed) = cli.seed {
        cfg.tracker.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

struct LoadedSequence {
    seq: Sequence,
    paths: Vec<PathBuf>,
}

impl LoadedSequence {
    fn stem(&self, n: usize) -> String {
        file_stem(&self.paths[n])
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_frames(cfg: &RunConfig) -> Result<LoadedSequence, CliError> {
    if !cfg.sequence_dir.is_dir() {
        return Err(CliError::Data(format!("sequence directory {} does not exist", cfg.sequence_dir.display())));
    }
    let paths = list_matching(&cfg.sequence_dir, &cfg.pattern)?;
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no frames matching {:?} in {}",
            cfg.pattern,
            cfg.sequence_dir.display()
        )));
    }
    let frames = paths.iter().map(load_frame).collect::<Result<Vec<_>, _>>()?;
    if cfg.reference >= frames.len() {
        return Err(CliError::Config(format!(
            "reference {} is outside the {} frames found",
            cfg.reference,
            frames.len()
        )));
    }
    Ok(LoadedSequence {
        seq: Sequence::new(frames, cfg.reference)?,
        paths,
    })
}

/// Cache directory for the elementary fields of this config and frame set.
fn cache_dir(cfg: &RunConfig, frames: &LoadedSequence) -> Result<PathBuf, CliError> {
    let root = match std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        Some(dir) => PathBuf::from(dir),
        None => cfg.cache_dir.clone().unwrap_or_else(|| cfg.output_dir.join("cache")),
    };
    let mut hasher = Sha256::new();
    hasher.update(b"spxtrack-fields v1\n");
    hasher.update(cfg.field_fingerprint_lines().as_bytes());
    for p in &frames.paths {
        let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
        hasher.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        hasher.update(Sha256::digest(&bytes));
    }
    let digest = hex::encode(hasher.finalize());
    Ok(root.join(&digest[..16]))
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<(), CliError> {
    fs::write(p, text).map_err(|e| io_err(p, e))
}

struct Manifest {
    stage: &'static str,
    notes: Vec<String>,
}

impl Manifest {
    fn write(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let t = &cfg.tracker;
        let mut out = format!("# spxtrack {} manifest, stage {}\n", env!("CARGO_PKG_VERSION"), self.stage);
        let _ = writeln!(
            out,
            "# seeds: slic={} bank={} forest={} sampling={} reverse={}",
            t.slic_seed(),
            t.bank_seed(),
            t.forest_seed(),
            t.sampling_seed(),
            t.reverse_seed()
        );
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out.push_str(&cfg.to_text());
        write_text(&cfg.output_dir.join("manifest.txt"), &out)
    }
}

fn write_segments(dir: &Path, frames: &LoadedSequence, segs: &[spxtrack::slic::Segmentation]) -> Result<(), CliError> {
    create_dir(dir)?;
    for (n, seg) in segs.iter().enumerate() {
        write_label_map(seg, dir.join(format!("{}.png", frames.stem(n))))?;
    }
    Ok(())
}

pub fn run_segment(cfg: &RunConfig) -> Result<(), CliError> {
    let frames = load_frames(cfg)?;
    let t = Instant::now();
    let segs = segment_sequence(&frames.seq, &cfg.tracker)?;
    let elapsed = t.elapsed().as_secs_f64();
    write_segments(&cfg.output_dir.join("segments"), &frames, &segs)?;
    Manifest {
        stage: "segment",
        notes: vec![format!("time segment = {elapsed:.3} s"), format!("frames = {}", frames.seq.len())],
    }
    .write(cfg)
}

pub fn run_fields(cfg: &RunConfig) -> Result<(), CliError> {
    let frames = load_frames(cfg)?;
    create_dir(&cfg.output_dir)?;
    let cache = cache_dir(cfg, &frames)?;
    let t = Instant::now();
    let segs = segment_sequence(&frames.seq, &cfg.tracker)?;
    let t_seg = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let pairs = required_pairs(frames.seq.len(), cfg.reference, &cfg.tracker);
    let fields = compute_elementary_fields(&frames.seq, &segs, &pairs, &cfg.tracker, Some(&cache))?;
    Manifest {
        stage: "fields",
        notes: vec![
            format!("time segment = {t_seg:.3} s"),
            format!("time fields = {:.3} s", t.elapsed().as_secs_f64()),
            format!("cache = {}", cache.display()),
            format!("fields computed = {} reused = {}", fields.computed, fields.reused),
        ],
    }
    .write(cfg)
}

/// Runs tracking and writes masks, match fields, segments and the manifest.
pub fn run_track(cfg: &RunConfig) -> Result<TrackResult, CliError> {
    let mask_path = cfg
        .reference_mask
        .as_ref()
        .ok_or_else(|| CliError::Config("missing required key `reference_mask` for tracking".into()))?;
    let frames = load_frames(cfg)?;
    if !mask_path.is_file() {
        return Err(CliError::Data(format!("reference mask {} does not exist", mask_path.display())));
    }
    let mask = load_mask(mask_path, cfg.mask_threshold)?;
    frames.seq.check_mask(&mask)?;
    create_dir(&cfg.output_dir)?;
    let cache = cache_dir(cfg, &frames)?;
    let result = track(&frames.seq, &mask, &cfg.tracker, Some(&cache))?;

    let out = &cfg.output_dir;
    let (mask_dir, match_dir) = (out.join("masks"), out.join("matches"));
    create_dir(&mask_dir)?;
    create_dir(&match_dir)?;
    write_segments(&out.join("segments"), &frames, &result.segmentations)?;
    write_mask(&result.quantized_reference, out.join("reference_roi.png"))?;
    write_text(&out.join("reference_frame.txt"), &format!("{}\n", frames.stem(result.reference)))?;
    let mut fallbacks = 0;
    for f in &result.frames {
        let stem = frames.stem(f.frame);
        write_mask(&f.mask, mask_dir.join(format!("{stem}.png")))?;
        f.forward.write_csv(match_dir.join(format!("fw_{stem}.csv")), true)?;
        f.backward.write_csv(match_dir.join(format!("bw_{stem}.csv")), true)?;
        fallbacks += f.mutual_fallbacks;
    }
    let mut notes: Vec<String> = result
        .timings
        .iter()
        .map(|(stage, secs)| format!("time {stage} = {secs:.3} s"))
        .collect();
    notes.push(format!("cache = {}", cache.display()));
    notes.push(format!(
        "fields computed = {} reused = {}",
        result.fields_computed, result.fields_reused
    ));
    notes.push(format!("mutual vote fallbacks = {fallbacks}"));
    notes.push(format!("reference frame = {}", frames.stem(result.reference)));
    Manifest { stage: "track", notes }.write(cfg)?;
    Ok(result)
}

fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("mask directory {} does not exist", dir.display())));
    }
    let mut out = BTreeMap::new();
    for p in list_matching(dir, "*")? {
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if matches!(ext.as_str(), "png" | "pgm" | "ppm") {
            out.insert(file_stem(&p), p);
        }
    }
    Ok(out)
}

/// Track output needed for consistency scores.
struct TrackDir {
    dir: PathBuf,
    reference_stem: String,
}

impl TrackDir {
    fn open(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join("reference_frame.txt");
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        Ok(TrackDir {
            dir: dir.to_path_buf(),
            reference_stem: text.trim().to_string(),
        })
    }

    fn consistency(&self, stem: &str) -> Result<f64, CliError> {
        let segs = self.dir.join("segments");
        let ref_seg = read_label_map(segs.join(format!("{}.png", self.reference_stem)))?;
        let seg = read_label_map(segs.join(format!("{stem}.png")))?;
        let roi = load_mask(self.dir.join("reference_roi.png"), 128)?;
        let matches = self.dir.join("matches");
        let fw = MatchField::read_csv(matches.join(format!("fw_{stem}.csv")), 0, 1, seg.count())?;
        let bw = MatchField::read_csv(matches.join(format!("bw_{stem}.csv")), 1, 0, ref_seg.count())?;
        Ok(fwbw_consistency(&roi, &ref_seg, &fw, &bw)?)
    }
}

/// Scores every tracked mask against its ground truth, writes the report and prints the aggregate row.
pub fn run_eval(cfg: Option<&RunConfig>, args: &EvalArgs) -> Result<MetricsReport, CliError> {
    let masks_dir = args
        .masks
        .clone()
        .or_else(|| cfg.map(|c| c.output_dir.join("masks")))
        .ok_or_else(|| CliError::Config("eval needs --masks or --config".into()))?;
    let gt_dir = args
        .gt
        .clone()
        .or_else(|| cfg.and_then(|c| c.gt_dir.clone()))
        .ok_or_else(|| CliError::Config("eval needs --gt or `gt_dir` in the config".into()))?;
    let track_dir = args.track_dir.clone().or_else(|| cfg.map(|c| c.output_dir.clone()));
    let out = args.out.clone().unwrap_or_else(|| match cfg {
        Some(c) => c.output_dir.join("metrics.csv"),
        None => masks_dir.parent().unwrap_or(Path::new(".")).join("metrics.csv"),
    });
    let threshold = cfg.map_or(spxtrack::imaging::DEFAULT_MASK_THRESHOLD, |c| c.mask_threshold);

    let masks = mask_files(&masks_dir)?;
    let gts = mask_files(&gt_dir)?;
    if masks.is_empty() {
        return Err(CliError::Data(format!("no masks in {}", masks_dir.display())));
    }
    let track = match &track_dir {
        Some(d) if d.join("reference_frame.txt").is_file() => Some(TrackDir::open(d)?),
        _ => None,
    };
    for stem in masks.keys() {
        if !gts.contains_key(stem) {
            return Err(CliError::Data(format!("frame {stem}: no ground-truth mask in {}", gt_dir.display())));
        }
    }
    if let Some(track) = &track {
        for stem in gts.keys() {
            if *stem != track.reference_stem && !masks.contains_key(stem) {
                return Err(CliError::Data(format!("frame {stem}: no tracked mask in {}", masks_dir.display())));
            }
        }
    }

    let mut report = MetricsReport::default();
    for (stem, path) in &masks {
        let x = load_mask(path, threshold)?;
        let y = load_mask(&gts[stem], threshold)?;
        let d = dice(&x, &y).map_err(|e| CliError::Data(format!("frame {stem}: {e}")))?;
        let contour = contour_f_measure(&x, &y, default_contour_radius(x.width(), x.height()))?;
        let consistency = track.as_ref().map(|t| t.consistency(stem)).transpose()?;
        report.frames.push(FrameMetrics {
            frame: stem.clone(),
            dice: d,
            contour,
            consistency,
        });
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.write_csv(&out)?;
    if let Some(row) = report.aggregate_row() {
        println!("{row}");
    }
    Ok(report)
}
