//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_store::{
    write_atomic, write_features, write_manifest, ExtractorDescriptor, FeatureMatrix, Manifest, SlideManifestEntry,
    TaskSpec,
};
use crate::kv::KvFile;
use crate::protocol::{
    cross_validate, ensemble_predict, make_splits, one_shot_retrain, predictions_path, read_predictions,
    write_predictions, Dataset, ProtocolConfig, RunArtifacts, DEFAULT_EPOCH_GRID,
};
use crate::report::{self, compare, parse_sided, CompareMeta, ModelPredictions};
use crate::rng;
use crate::stats::{Sided, DEFAULT_N_BOOT, DEFAULT_N_PERM};
use crate::synthgen::{generate, SynthSpec};
use crate::tiler::{tile_image, FixedMaskProvider, Mask, MaskProvider, OtsuMaskProvider, Raster, TilingConfig};

#[derive(Debug, Parser)]
#[command(name = "milbench", version, about = "Slide-level MIL benchmark harness")]
pub struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "BENCH_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Encoder {
    /// Per-tile channel means.
    Means,
    /// Seeded Gaussian projection of an 8×8 grid of channel means.
    Projection,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut PNG slides into tissue tiles.
    Tile {
        /// Slide images; the slide id is the file stem.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Directory of precomputed masks named `<slide_id>.png`.
        #[arg(long)]
        mask_dir: Option<PathBuf>,
    },
    /// Encode tiles into feature matrices with a toy encoder.
    Featurize {
        /// Output directory of `tile`.
        #[arg(long)]
        tiles: PathBuf,
        /// CSV with columns slide_id,case_id,label.
        #[arg(long)]
        slides: PathBuf,
        #[arg(long, value_enum, default_value = "means")]
        encoder: Encoder,
        /// Output dimension of the projection encoder.
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
    /// Generate a synthetic training and external cohort.
    Synth,
    /// Cross-validate, retrain and score external cohorts.
    Train {
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        /// External cohort manifest, optionally `name=path`.
        #[arg(long)]
        external: Vec<String>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Score external cohorts with a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// External cohort manifest, optionally `name=path`.
        #[arg(long, required = true)]
        external: Vec<String>,
    },
    /// Compare trained runs on their external predictions.
    Compare {
        /// Run directory, optionally `name=dir`.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
    },
    /// Re-render report.md from the CSVs of a comparison.
    Report {
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) => e.exit_code(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Training and comparison settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Option<PathBuf>,
    pub train: Option<PathBuf>,
    /// `(cohort_id, manifest)` pairs.
    pub externals: Vec<(String, PathBuf)>,
    pub seed: u64,
    pub protocol: ProtocolConfig,
    pub n_boot: usize,
    pub n_perm: usize,
    pub sided: Sided,
    pub model_name: String,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            train: None,
            externals: Vec::new(),
            seed: 0,
            protocol: ProtocolConfig::default(),
            n_boot: DEFAULT_N_BOOT,
            n_perm: DEFAULT_N_PERM,
            sided: Sided::One,
            model_name: "abmil".into(),
            out: None,
        }
    }
}

const RUN_KEYS: [&str; 16] = [
    "task",
    "train",
    "externals",
    "seed",
    "folds",
    "replicates",
    "epoch_grid",
    "extended_grid",
    "n_boot",
    "n_perm",
    "sided",
    "model_name",
    "lr",
    "batch_size",
    "out",
    "jobs",
];

/// `name=path`, or a bare path whose cohort id is its parent directory name.
fn parse_cohort(spec: &str, base: &Path) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, p)) => (name.trim().to_string(), base.join(p.trim())),
        None => {
            let p = base.join(spec.trim());
            let name = p
                .parent()
                .and_then(Path::file_name)
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "external".into());
            (name, p)
        }
    }
}

impl RunConfig {
    /// Relative paths resolve against the config file's directory.
    pub fn from_kv(kv: &KvFile, base: &Path) -> Result<Self> {
        kv.check_keys(&RUN_KEYS)?;
        let d = Self::default();
        let path = |k: &str| kv.get_str(k).map(|p| base.join(p));
        let mut protocol = ProtocolConfig {
            n_folds: kv.get_or("folds", d.protocol.n_folds)?,
            replicates: kv.get_or("replicates", d.protocol.replicates)?,
            epoch_grid: kv.get_list("epoch_grid")?.unwrap_or_else(|| DEFAULT_EPOCH_GRID.to_vec()),
            adam: d.protocol.adam,
        };
        protocol.adam.lr = kv.get_or("lr", protocol.adam.lr)?;
        protocol.adam.batch_size = kv.get_or("batch_size", protocol.adam.batch_size)?;
        if kv.get_or("extended_grid", false)? {
            protocol = protocol.with_extended_grid();
        }
        protocol.validate()?;
        let externals = kv
            .get_list::<String>("externals")?
            .unwrap_or_default()
            .iter()
            .map(|s| parse_cohort(s, base))
            .collect();
        Ok(Self {
            task: path("task"),
            train: path("train"),
            externals,
            seed: kv.get_or("seed", d.seed)?,
            protocol,
            n_boot: kv.get_or("n_boot", d.n_boot)?,
            n_perm: kv.get_or("n_perm", d.n_perm)?,
            sided: parse_sided(kv.get_str("sided").unwrap_or("one"))?,
            model_name: kv.get_str("model_name").unwrap_or(&d.model_name).to_string(),
            out: path("out"),
        })
    }
}

fn load_kv(path: &Option<PathBuf>) -> Result<Option<(KvFile, PathBuf)>> {
    match path {
        Some(p) => {
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok(Some((KvFile::load(p)?, base)))
        }
        None => Ok(None),
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match load_kv(&cli.config)? {
        Some((kv, base)) => RunConfig::from_kv(&kv, &base)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.out.is_some() {
        cfg.out.clone_from(&cli.out);
    }
    Ok(cfg)
}

fn out_dir(out: &Option<PathBuf>) -> CliResult<PathBuf> {
    out.clone()
        .ok_or_else(|| CliError::Usage("--out is required for this command".into()))
}

/// Seed of the per-slide tile draw; shared by every model trained with the same master seed.
pub fn sample_seed(master: u64) -> u64 {
    rng::mix(master, &[0x5A3B])
}

/// Lists every file under `dir` with its size in `artifacts.txt`.
fn write_artifact_list(dir: &Path) -> Result<()> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, u64)>) -> Result<()> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let p = entry.path();
            let meta = entry.metadata().map_err(|e| Error::io(&p, e))?;
            if meta.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                if rel != "artifacts.txt" && !rel.ends_with(".tmp") {
                    out.push((rel, meta.len()));
                }
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let text: String = files.iter().map(|(p, n)| format!("{p}\t{n}\n")).collect();
    write_atomic(&dir.join("artifacts.txt"), text.as_bytes())
}

fn cmd_synth(cli: &Cli) -> CliResult<()> {
    let out = out_dir(&cli.out)?;
    let mut spec = match load_kv(&cli.config)? {
        Some((kv, _)) => SynthSpec::from_kv(&kv)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let data = generate(&spec)?;
    data.train.write(&out.join("train"))?;
    data.external.write(&out.join("external"))?;
    write_atomic(&out.join("task.kv"), spec.task_spec().to_kv_string().as_bytes())?;
    write_atomic(&out.join("synth.kv"), spec.to_kv_string().as_bytes())?;
    write_artifact_list(&out)?;
    Ok(())
}

fn load_cohort(cohort_id: &str, manifest: &Path, task: &TaskSpec, seed: u64) -> Result<Dataset> {
    let m = Manifest::load(manifest, task)?;
    Dataset::load(cohort_id, &m, task, sample_seed(seed))
}

fn eval_into(art: &RunArtifacts, dir: &Path, externals: &[(String, PathBuf)]) -> Result<()> {
    for (id, manifest) in externals {
        let cohort = load_cohort(id, manifest, &art.run.task, art.run.master_seed)?;
        let preds = ensemble_predict(&art.run, &cohort)?;
        write_predictions(&predictions_path(dir, id, false), &preds)?;
        if let Some(rt) = &art.retrained {
            let p = rt.predict(&art.run, &cohort)?;
            write_predictions(&predictions_path(dir, id, true), &p)?;
        }
    }
    Ok(())
}

fn cmd_train(cli: &Cli, task: &Option<PathBuf>, train: &Option<PathBuf>, ext: &[String], name: &Option<String>) -> CliResult<()> {
    let mut cfg = run_config(cli)?;
    if task.is_some() {
        cfg.task.clone_from(task);
    }
    if train.is_some() {
        cfg.train.clone_from(train);
    }
    if !ext.is_empty() {
        cfg.externals = ext.iter().map(|s| parse_cohort(s, Path::new(""))).collect();
    }
    if let Some(n) = name {
        cfg.model_name.clone_from(n);
    }
    let out = out_dir(&cfg.out)?;
    let task_path = cfg.task.clone().ok_or_else(|| CliError::Usage("a task spec is required (--task or `task`)".into()))?;
    let train_path = cfg
        .train
        .clone()
        .ok_or_else(|| CliError::Usage("a training manifest is required (--train or `train`)".into()))?;
    let task = TaskSpec::load(&task_path)?;
    let manifest = Manifest::load(&train_path, &task)?;
    let data = Dataset::load("train", &manifest, &task, sample_seed(cfg.seed))?;
    let plan = make_splits(&manifest.entries, cfg.protocol.n_folds, cfg.seed)?;
    let run = cross_validate(&data, &task, &plan, &cfg.protocol, cfg.seed)?;
    let retrained = one_shot_retrain(&run, &data, cfg.seed)?;
    let mut extra = BTreeMap::new();
    extra.insert("train_manifest".to_string(), train_path.display().to_string());
    let art = RunArtifacts {
        model_name: cfg.model_name.clone(),
        run,
        retrained: Some(retrained),
        extra,
    };
    art.save(&out)?;
    eval_into(&art, &out, &cfg.externals)?;
    write_artifact_list(&out)?;
    Ok(())
}

fn cmd_eval(cli: &Cli, run: &Path, ext: &[String]) -> CliResult<()> {
    let art = RunArtifacts::load(run)?;
    let out = cli.out.clone().unwrap_or_else(|| run.to_path_buf());
    let externals: Vec<_> = ext.iter().map(|s| parse_cohort(s, Path::new(""))).collect();
    eval_into(&art, &out, &externals)?;
    write_artifact_list(&out)?;
    Ok(())
}

/// Ensemble and retrain predictions found in a run directory.
fn run_predictions(name: Option<&str>, dir: &Path) -> Result<Vec<ModelPredictions>> {
    let art = RunArtifacts::load(dir)?;
    let model = name.map_or(art.model_name.clone(), str::to_string);
    let mut files: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("preds_") && n.ends_with(".csv") && !n.ends_with("_retrain.csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::validation(format!("{}: no external predictions; run `eval` first", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let cohort = &f["preds_".len()..f.len() - ".csv".len()];
            let ensemble = read_predictions(&dir.join(f), cohort)?;
            let rt_path = predictions_path(dir, cohort, true);
            let retrain = if rt_path.exists() {
                Some(read_predictions(&rt_path, cohort)?)
            } else {
                None
            };
            Ok(ModelPredictions {
                model: model.clone(),
                task: format!("{}/{cohort}", art.run.task.task_id),
                ensemble,
                retrain,
            })
        })
        .collect()
}

fn cmd_compare(cli: &Cli, runs: &[String]) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let out = out_dir(&cfg.out)?;
    let mut inputs = Vec::new();
    for r in runs {
        let (name, dir) = match r.split_once('=') {
            Some((n, d)) => (Some(n), PathBuf::from(d)),
            None => (None, PathBuf::from(r)),
        };
        inputs.extend(run_predictions(name, &dir)?);
    }
    let meta = CompareMeta {
        seed: cfg.seed,
        n_boot: cfg.n_boot,
        n_perm: cfg.n_perm,
        sided: cfg.sided,
    };
    let c = compare(&inputs, meta)?;
    report::write_report(&c, &out)?;
    write_artifact_list(&out)?;
    Ok(())
}

fn cmd_report(cli: &Cli, input: &Option<PathBuf>) -> CliResult<()> {
    let dir = input
        .clone()
        .or_else(|| cli.out.clone())
        .ok_or_else(|| CliError::Usage("--in or --out is required".into()))?;
    let md = report::render_markdown(&report::Comparison::load(&dir)?);
    let out = cli.out.clone().unwrap_or_else(|| dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_atomic(&out.join(report::REPORT_MD), md.as_bytes())?;
    Ok(())
}

fn cmd_tile(cli: &Cli, images: &[PathBuf], mask_dir: &Option<PathBuf>) -> CliResult<()> {
    let out = out_dir(&cli.out)?;
    let cfg = match load_kv(&cli.config)? {
        Some((kv, _)) => TilingConfig::from_kv(&kv)?,
        None => TilingConfig::default(),
    };
    let mut csv = String::from("slide_id,x,y,tissue_fraction\n");
    for path in images {
        let slide_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Usage(format!("{}: not a file", path.display())))?;
        let image = Raster::load_png(path)?;
        let fixed;
        let provider: &dyn MaskProvider = match mask_dir.as_ref().map(|d| d.join(format!("{slide_id}.png"))) {
            Some(p) if p.exists() => {
                fixed = FixedMaskProvider(Mask::load_png(&p)?);
                &fixed
            }
            _ => &OtsuMaskProvider,
        };
        let (scaled, tiles) = tile_image(&image, &cfg, provider)?;
        let dir = out.join("tiles").join(&slide_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        tiles
            .par_iter()
            .map(|t| {
                scaled
                    .crop(t.x as usize, t.y as usize, cfg.tile_px, cfg.tile_px)
                    .save_png(&dir.join(format!("{}_{}.png", t.x, t.y)))
            })
            .collect::<Result<Vec<()>>>()?;
        for t in &tiles {
            csv.push_str(&format!("{slide_id},{},{},{}\n", t.x, t.y, t.tissue_fraction));
        }
    }
    write_atomic(&out.join("tiles.csv"), csv.as_bytes())?;
    write_artifact_list(&out)?;
    Ok(())
}

const GRID: usize = 8;

/// Channel means over a `GRID × GRID` partition of the tile, scaled to `[0, 1]`.
fn grid_means(tile: &Raster) -> Vec<f64> {
    let mut v = vec![0.0; GRID * GRID * tile.channels];
    let mut n = vec![0usize; GRID * GRID];
    for y in 0..tile.height {
        for x in 0..tile.width {
            let cell = (y * GRID / tile.height) * GRID + x * GRID / tile.width;
            n[cell] += 1;
            for (c, &p) in tile.pixel(x, y).iter().enumerate() {
                v[cell * tile.channels + c] += f64::from(p);
            }
        }
    }
    for (i, x) in v.iter_mut().enumerate() {
        *x /= 255.0 * n[i / tile.channels].max(1) as f64;
    }
    v
}

fn channel_means(tile: &Raster) -> Vec<f64> {
    let mut v = vec![0.0; tile.channels];
    for px in tile.data.chunks(tile.channels) {
        for (c, &p) in px.iter().enumerate() {
            v[c] += f64::from(p);
        }
    }
    let n = (tile.width * tile.height) as f64;
    v.iter().map(|s| s / (255.0 * n)).collect()
}

fn cmd_featurize(cli: &Cli, tiles_dir: &Path, slides: &Path, encoder: Encoder, dim: usize) -> CliResult<()> {
    let out = out_dir(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let tiles_csv = tiles_dir.join("tiles.csv");
    let mut reader = csv::Reader::from_path(&tiles_csv)
        .map_err(|e| Error::validation(format!("{}: {e}", tiles_csv.display())))?;
    let mut by_slide: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let bad = || Error::validation(format!("{}: row {}: malformed", tiles_csv.display(), i + 2));
        let rec = rec.map_err(|_| bad())?;
        let x = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let y = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        by_slide.entry(rec.get(0).ok_or_else(bad)?.to_string()).or_default().push((x, y));
    }

    let mut reader =
        csv::Reader::from_path(slides).map_err(|e| Error::validation(format!("{}: {e}", slides.display())))?;
    let mut entries = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let bad = || Error::validation(format!("{}: row {}: expected slide_id,case_id,label", slides.display(), i + 2));
        let rec = rec.map_err(|_| bad())?;
        let slide_id = rec.get(0).ok_or_else(bad)?.to_string();
        entries.push(SlideManifestEntry {
            feature_path: PathBuf::from("features").join(format!("{slide_id}.fmx")),
            case_id: rec.get(1).ok_or_else(bad)?.to_string(),
            label: rec.get(2).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?,
            slide_id,
        });
    }

    let (out_dim, name, projection) = match encoder {
        Encoder::Means => (3, "channel-means", None),
        Encoder::Projection => {
            if dim == 0 {
                return Err(CliError::Usage("--dim must be positive".into()));
            }
            let input = GRID * GRID * 3;
            let normal = Normal::new(0.0, 1.0 / (input as f64).sqrt()).expect("valid normal");
            let mut r = rng::stream(rng::mix(seed, &[0xFEA7]), 0);
            let w: Vec<f64> = (0..input * dim).map(|_| normal.sample(&mut r)).collect();
            (dim, "random-projection", Some(w))
        }
    };

    for e in &entries {
        let coords = by_slide
            .get(&e.slide_id)
            .ok_or_else(|| Error::validation(format!("slide {} has no tiles in {}", e.slide_id, tiles_csv.display())))?;
        let rows = coords
            .par_iter()
            .map(|&(x, y)| {
                let p = tiles_dir.join("tiles").join(&e.slide_id).join(format!("{x}_{y}.png"));
                let mut tile = Raster::load_png(&p)?;
                if tile.channels == 1 {
                    tile = Raster::new(
                        tile.width,
                        tile.height,
                        3,
                        tile.data.iter().flat_map(|&v| [v, v, v]).collect(),
                    )?;
                }
                Ok(match &projection {
                    None => channel_means(&tile),
                    Some(w) => {
                        let g = grid_means(&tile);
                        (0..out_dim)
                            .map(|j| g.iter().enumerate().map(|(i, v)| v * w[i * out_dim + j]).sum())
                            .collect()
                    }
                })
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let values = rows.iter().flatten().map(|&v| v as f32).collect();
        let m = FeatureMatrix::new(out_dim, coords.clone(), values)?;
        write_features(&m, &out.join(&e.feature_path))?;
    }
    write_manifest(&out.join("manifest.csv"), &entries)?;
    let desc = ExtractorDescriptor::new(name, out_dim, &format!("seed = {seed}"))?;
    write_atomic(&out.join("extractor.kv"), desc.to_kv_string().as_bytes())?;
    write_artifact_list(&out)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Tile { images, mask_dir } => cmd_tile(cli, images, mask_dir),
        Command::Featurize {
            tiles,
            slides,
            encoder,
            dim,
        } => cmd_featurize(cli, tiles, slides, *encoder, *dim),
        Command::Synth => cmd_synth(cli),
        Command::Train {
            task,
            train,
            external,
            name,
        } => cmd_train(cli, task, train, external, name),
        Command::Eval { run, external } => cmd_eval(cli, run, external),
        Command::Compare { runs } => cmd_compare(cli, runs),
        Command::Report { input } => cmd_report(cli, input),
    }
}

/// Runs a parsed command on a pool of `--jobs` workers.
pub fn run(cli: &Cli) -> CliResult<()> {
    let mut jobs = cli.jobs;
    if jobs.is_none() {
        if let Some((kv, _)) = load_kv(&cli.config).ok().flatten() {
            jobs = kv.get::<usize>("jobs").ok().flatten();
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("milbench: {e}");
            e.exit_code()
        }
    }
}
