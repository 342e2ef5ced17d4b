//! `pathdiff` command-line front end.
//!
//! Exit codes: 0 ok, 2 bad input, 3 training failure, 4 conditioning
//! failure (no usable contour), 5 validation failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use pathdiff::dataset::{
    dataset_checksum, denormalize, inference_norm, make_record, monotone_extrusion, read_records,
    silhouette_from_photo, write_records, DatasetError, DenormalizeOptions, KeypointFile, TrainingRecord,
    DEFAULT_N_MAX,
};
use pathdiff::diffusion::{
    item_rng, make_cosine_schedule, sample_model, write_trace_csv, COSINE_OFFSET,
};
use pathdiff::eval::{emit_plots, evaluate, EvalError, EvalOptions};
use pathdiff::gcode::{emit_layer, parse_program, validate_layer, Keypoint, LayerToolpath, PrinterProfile};
use pathdiff::geometry::{
    parse_stl, random_spec, rasterize, slice_mesh, synth_sample, InfillKind, ShapeKind, SliceImage, IMAGE_SIZE,
};
use pathdiff::model::ModelConfig;
use pathdiff::train::{load_model, train_loop, TrainConfig, TrainError, TrainRun};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "pathdiff", version, about = "Slice images to extrusion toolpaths")]
struct Cli {
    /// Worker threads; 1 gives fully sequential execution.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build training records from STL/G-code pairs or synthetic shapes.
    BuildData(BuildDataArgs),
    /// Train a model on a record directory.
    Train(TrainArgs),
    /// Sample toolpaths for a slice image or photo.
    Generate(GenerateArgs),
    /// Turn a normalized keypoint file into a G-code program.
    Emit(EmitArgs),
    /// Compare generated toolpaths with ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct BuildDataArgs {
    /// Directory of `name.stl` files, each with a sliced `name.gcode`.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    stl: Option<PathBuf>,
    /// Shape and infill lists, e.g. `square,circle x rectilinear,concentric`.
    #[arg(long)]
    synthetic: Option<String>,
    /// Number of synthetic records.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_N_MAX)]
    n_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Diffusion steps.
    #[arg(long)]
    steps: Option<usize>,
    /// `key = value` file overriding preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a `last.ckpt`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 224x224 slice image (PGM).
    #[arg(long, conflicts_with = "photo", required_unless_present = "photo")]
    image: Option<PathBuf>,
    /// Grayscale photo or sketch (PGM, any size).
    #[arg(long)]
    photo: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keypoint count; predicted from the image when absent.
    #[arg(long)]
    length: Option<usize>,
    /// Also write per-step norms of each run.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmitArgs {
    #[arg(long)]
    keypoints: PathBuf,
    /// Printer profile (`key = value`); defaults apply when absent.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Half the larger side of the part, in mm. Defaults to the file's own scale.
    #[arg(long)]
    scale_mm: Option<f64>,
    /// Part center in mm; defaults to the bed center.
    #[arg(long, num_args = 2, value_names = ["X", "Y"])]
    center: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.2)]
    z: f64,
    #[arg(long)]
    extrusion_multiplier: Option<f64>,
    /// Keep generated E values as they are instead of removing retractions.
    #[arg(long)]
    raw_e: bool,
    /// Write the program even if validation fails.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Ground truth: G-code program or keypoint file.
    #[arg(long)]
    truth: PathBuf,
    /// One file per generation run, same layer count as the truth.
    #[arg(long, num_args = 1..)]
    generated: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = pathdiff::eval::DEFAULT_LINE_WIDTH)]
    line_width: f64,
    #[arg(long, default_value_t = pathdiff::eval::DEFAULT_GRID_PITCH)]
    grid_pitch: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn input(msg: impl std::fmt::Display) -> Self {
        Self { code: 2, msg: msg.to_string() }
    }
    fn training(msg: impl std::fmt::Display) -> Self {
        Self { code: 3, msg: msg.to_string() }
    }
    fn conditioning(msg: impl std::fmt::Display) -> Self {
        Self { code: 4, msg: msg.to_string() }
    }
    fn validation(msg: impl std::fmt::Display) -> Self {
        Self { code: 5, msg: msg.to_string() }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::NoContourFound => Self::conditioning(e),
            _ => Self::input(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } | EvalError::Json(_) => Self { code: 1, msg: e.to_string() },
            _ => Self::input(e),
        }
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::EmptyDataset | TrainError::SequenceLength { .. } | TrainError::InvalidConfig(_) => {
            CliError::input(e)
        }
        TrainError::Checkpoint(_) => CliError::input(e),
        _ => CliError::training(e),
    }
}

/// What a run did, written next to its outputs on success and failure.
#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    args: Vec<String>,
    threads: usize,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    status: String,
    exit_code: u8,
    error: Option<String>,
    started_unix: f64,
    finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Default)]
struct Report {
    seed: Option<u64>,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = now();
    let (name, manifest_path) = match &cli.command {
        Command::BuildData(a) => ("build-data", a.out.join(MANIFEST_FILE)),
        Command::Train(a) => ("train", a.out.join(MANIFEST_FILE)),
        Command::Generate(a) => ("generate", a.out.join(MANIFEST_FILE)),
        Command::Emit(a) => ("emit", sibling(&a.out, ".manifest.json")),
        Command::Evaluate(a) => ("evaluate", a.out.join(MANIFEST_FILE)),
    };
    let mut report = Report::default();
    let result = if cli.threads == 0 {
        Err(CliError::input("--threads must be at least 1"))
    } else {
        match &cli.command {
            Command::BuildData(a) => build_data(a, &mut report),
            Command::Train(a) => train(a, cli.threads, &mut report),
            Command::Generate(a) => generate(a, &mut report),
            Command::Emit(a) => emit(a, &mut report),
            Command::Evaluate(a) => evaluate_cmd(a, &mut report),
        }
    };
    let (code, error) = match &result {
        Ok(()) => (0, None),
        Err(e) => (e.code, Some(e.msg.clone())),
    };
    let manifest = RunManifest {
        tool: "pathdiff",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: name.to_string(),
        args: std::env::args().skip(1).collect(),
        threads: cli.threads,
        seed: report.seed,
        config: report.config,
        inputs: report.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: report.outputs.iter().map(|p| p.display().to_string()).collect(),
        status: if code == 0 { "ok".into() } else { "error".into() },
        exit_code: code,
        error: error.clone(),
        started_unix: started,
        finished_unix: now(),
    };
    if let Err(e) = write_manifest(&manifest_path, &manifest) {
        eprintln!("warning: could not write run manifest {}: {e}", manifest_path.display());
    }
    match error {
        None => ExitCode::SUCCESS,
        Some(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(path: &Path, m: &RunManifest) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(m)? + "\n")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError { code: 1, msg: format!("{}: {e}", path.display()) })
}

// ---------------------------------------------------------------------------
// build-data

/// Parses `shapes x infills`; `×` works as separator too.
fn parse_synthetic(spec: &str) -> Result<(Vec<ShapeKind>, Vec<InfillKind>), CliError> {
    let norm = spec.replace('×', " x ");
    let (shapes, infills) = norm
        .split_once(" x ")
        .or_else(|| norm.split_once('x').filter(|(a, _)| !a.trim().is_empty()))
        .ok_or_else(|| CliError::input(format!("synthetic spec `{spec}` must look like `square,circle x rectilinear`")))?;
    let list = |s: &str| s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect::<Vec<_>>();
    let shapes = list(shapes)
        .iter()
        .map(|s| ShapeKind::parse(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::input)?;
    let infills = list(infills)
        .iter()
        .map(|s| InfillKind::parse(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::input)?;
    if shapes.is_empty() || infills.is_empty() {
        return Err(CliError::input("synthetic spec needs at least one shape and one infill"));
    }
    Ok((shapes, infills))
}

fn synthetic_records(
    shapes: &[ShapeKind],
    infills: &[InfillKind],
    count: usize,
    n_max: usize,
    seed: u64,
) -> Result<Vec<TrainingRecord>, CliError> {
    (0..count)
        .map(|i| {
            let shape = shapes[i % shapes.len()];
            let infill = infills[(i / shapes.len()) % infills.len()];
            let mut rng = item_rng(seed, i as u64);
            let spec = random_spec(&mut rng, shape, infill);
            let (contour, path) = synth_sample(&spec, seed.wrapping_add(i as u64)).map_err(CliError::input)?;
            let image = rasterize(&contour).map_err(CliError::input)?;
            Ok(make_record(image, &path, n_max, &format!("{}/{}", shape.name(), infill.name()))?)
        })
        .collect()
}

/// Pairs every `name.stl` with `name.gcode` and slices the mesh at each
/// printed layer.
fn stl_records(dir: &Path, n_max: usize) -> Result<(Vec<TrainingRecord>, Vec<PathBuf>), CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    let mut stls: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("stl")))
        .collect();
    stls.sort();
    if stls.is_empty() {
        return Err(CliError::input(format!("no .stl files in {}", dir.display())));
    }
    let mut records = Vec::new();
    let mut inputs = Vec::new();
    for stl in stls {
        let gcode = stl.with_extension("gcode");
        if !gcode.exists() {
            return Err(CliError::input(format!("{} has no matching {}", stl.display(), gcode.display())));
        }
        let mesh = parse_stl(&read_bytes(&stl)?).map_err(|e| CliError::input(format!("{}: {e}", stl.display())))?;
        let text = String::from_utf8_lossy(&read_bytes(&gcode)?).into_owned();
        let layers = parse_program(&text).map_err(|e| CliError::input(format!("{}: {e}", gcode.display())))?;
        let label = stl.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut prev_z = 0.0;
        for layer in layers.iter().filter(|l| !l.keypoints.is_empty()) {
            // middle of the printed layer avoids facets lying in the plane
            let z = 0.5 * (prev_z + layer.z);
            prev_z = layer.z;
            let contour = match slice_mesh(&mesh.mesh, z) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let Ok(image) = rasterize(&contour) else { continue };
            records.push(make_record(image, layer, n_max, &label)?);
        }
        inputs.push(stl);
        inputs.push(gcode);
    }
    if records.is_empty() {
        return Err(CliError::input("no layer produced a closed slice"));
    }
    Ok((records, inputs))
}

fn build_data(a: &BuildDataArgs, report: &mut Report) -> Result<(), CliError> {
    report.seed = Some(a.seed);
    report.config = json!({ "n_max": a.n_max, "count": a.count, "synthetic": a.synthetic, "stl": a.stl });
    if a.n_max == 0 {
        return Err(CliError::input("--n-max must be positive"));
    }
    let records = match (&a.stl, &a.synthetic) {
        (Some(dir), _) => {
            let (r, inputs) = stl_records(dir, a.n_max)?;
            report.inputs = inputs;
            r
        }
        (None, Some(spec)) => {
            let (shapes, infills) = parse_synthetic(spec)?;
            if a.count == 0 {
                return Err(CliError::input("--count must be positive"));
            }
            synthetic_records(&shapes, &infills, a.count, a.n_max, a.seed)?
        }
        (None, None) => return Err(CliError::input("one of --stl or --synthetic is required")),
    };
    write_records(&a.out, &records)?;
    let checksum = dataset_checksum(&a.out)?;
    let mut breakdown: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *breakdown.entry(r.label.as_str()).or_default() += 1;
    }
    println!("{} records written to {}", records.len(), a.out.display());
    for (label, n) in &breakdown {
        println!("  {label}: {n}");
    }
    println!("checksum {checksum}");
    report.outputs.push(a.out.join(pathdiff::dataset::MANIFEST_NAME));
    report.config["checksum"] = json!(checksum);
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Applies `key = value` lines to a training configuration.
fn apply_train_config(text: &str, cfg: &mut TrainConfig) -> Result<(), CliError> {
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| CliError::input(format!("config line {}: {what}", idx + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim().trim_matches('"'));
        let f = || value.parse::<f64>().map_err(|_| bad(&format!("bad number for `{key}`")));
        let u = || value.parse::<usize>().map_err(|_| bad(&format!("bad integer for `{key}`")));
        match key {
            "epochs" => cfg.epochs = u()?,
            "batch_size" => cfg.batch_size = u()?,
            "lr" | "lr0" => cfg.lr0 = f()?,
            "weight_decay" => cfg.weight_decay = f()?,
            "steps" => cfg.steps = u()?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("bad seed"))?,
            "clip_norm" => cfg.clip_norm = f()?,
            "val_fraction" => cfg.val_fraction = f()?,
            "length_loss_weight" => cfg.length_loss_weight = f()?,
            "plateau_factor" => cfg.plateau.factor = f()?,
            "plateau_patience" => cfg.plateau.patience = u()?,
            "min_lr" => cfg.plateau.min_lr = f()?,
            "stop_at_train_mse" => cfg.stop_at_train_mse = Some(f()?),
            "mse_eval_every" => cfg.mse_eval_every = u()?,
            _ => return Err(bad(&format!("unknown key `{key}`"))),
        }
    }
    Ok(())
}

fn train(a: &TrainArgs, threads: usize, report: &mut Report) -> Result<(), CliError> {
    if !a.data.join(pathdiff::dataset::MANIFEST_NAME).exists() {
        return Err(CliError::input(format!("{} is not a record directory", a.data.display())));
    }
    let records = read_records(&a.data)?;
    report.inputs.push(a.data.clone());
    let n_max = records.first().map(|r| r.n_max()).ok_or_else(|| CliError::input("dataset is empty"))?;
    let (model, mut cfg) = match a.preset {
        Preset::Desk => (ModelConfig::desk(n_max), TrainConfig::desk()),
        Preset::Paper => (ModelConfig::paper(n_max), TrainConfig::default()),
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        apply_train_config(&text, &mut cfg)?;
        report.inputs.push(path.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    cfg.threads = threads;
    report.seed = Some(cfg.seed);
    report.config = json!({ "preset": a.preset, "model": model, "train": cfg });
    if let Some(r) = &a.resume {
        report.inputs.push(r.clone());
    }
    create_dir(&a.out)?;
    let run = TrainRun {
        records: &records,
        model: &model,
        config: &cfg,
        out_dir: Some(&a.out),
        resume: a.resume.as_deref(),
    };
    let state = train_loop(&run, &mut |s| {
        println!(
            "epoch {:>4}  train {:.6}  val {:.6}  lr {:.3e}",
            s.epoch, s.train_loss, s.val_loss, s.lr
        );
    })
    .map_err(train_error)?;
    println!("trained {} epochs, best validation loss {:.6}", state.epoch, state.best_val);
    for f in [
        pathdiff::train::CURVE_CSV,
        pathdiff::train::LAST_CHECKPOINT,
        pathdiff::train::BEST_CHECKPOINT,
    ] {
        report.outputs.push(a.out.join(f));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

fn load_condition(a: &GenerateArgs) -> Result<SliceImage, CliError> {
    if let Some(path) = &a.photo {
        let photo = SliceImage::from_pgm(&read_bytes(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        return Ok(silhouette_from_photo(&photo)?);
    }
    let path = a.image.as_ref().ok_or_else(|| CliError::input("one of --image or --photo is required"))?;
    let img = SliceImage::from_pgm(&read_bytes(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    if (img.width, img.height) != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(CliError::input(format!(
            "slice image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}; use --photo for other images",
            img.width, img.height
        )));
    }
    Ok(img)
}

fn generate(a: &GenerateArgs, report: &mut Report) -> Result<(), CliError> {
    report.seed = Some(a.seed);
    report.inputs.push(a.checkpoint.clone());
    report.inputs.extend(a.image.iter().chain(&a.photo).cloned());
    if a.runs == 0 {
        return Err(CliError::input("--runs must be positive"));
    }
    let (model, tcfg, params) = load_model(&a.checkpoint).map_err(|e| CliError::input(format!("{}: {e}", a.checkpoint.display())))?;
    let image = load_condition(a)?;
    create_dir(&a.out)?;
    let cond_path = a.out.join("condition.pgm");
    write_bytes(&cond_path, &image.to_pgm())?;
    report.outputs.push(cond_path);

    let schedule = make_cosine_schedule(tcfg.steps, COSINE_OFFSET).map_err(CliError::input)?;
    let tokens = model.encode_value(&params, &image).map_err(CliError::input)?;
    let length = match a.length {
        Some(0) => return Err(CliError::input("--length must be positive")),
        Some(n) => n.min(model.seq_len),
        None => model.predict_length(&params, &tokens),
    };
    let mut runs = Vec::new();
    for k in 0..a.runs {
        let stream = k as u64;
        let mut rng = item_rng(a.seed, stream);
        let mut trace = Vec::new();
        let x = sample_model(
            &model,
            &params,
            &tokens,
            model.seq_len,
            &schedule,
            &mut rng,
            a.trace.then_some(&mut trace),
        )
        .map_err(CliError::training)?;
        let rows = pathdiff::dataset::rows_from_tensor(&x);
        let mut file = KeypointFile::new(rows[..length].to_vec());
        file.seed = Some(a.seed);
        file.stream = Some(stream);
        let path = a.out.join(format!("run_{k}.json"));
        file.save(&path)?;
        report.outputs.push(path.clone());
        if a.trace {
            let tpath = a.out.join(format!("trace_run_{k}.csv"));
            let f = fs::File::create(&tpath).map_err(|e| CliError::input(format!("{}: {e}", tpath.display())))?;
            write_trace_csv(f, &trace).map_err(|e| CliError::input(format!("{}: {e}", tpath.display())))?;
            report.outputs.push(tpath);
        }
        println!("run {k}: {length} keypoints -> {}", path.display());
        runs.push(json!({ "run": k, "seed": a.seed, "stream": stream }));
    }
    report.config = json!({ "steps": tcfg.steps, "length": length, "runs": runs, "model": model });
    Ok(())
}

// ---------------------------------------------------------------------------
// emit

fn emit(a: &EmitArgs, report: &mut Report) -> Result<(), CliError> {
    report.inputs.push(a.keypoints.clone());
    let file = KeypointFile::load(&a.keypoints)?;
    report.seed = file.seed;
    let profile = match &a.profile {
        Some(p) => {
            report.inputs.push(p.clone());
            PrinterProfile::load(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
        }
        None => PrinterProfile::default(),
    };
    if file.keypoints.is_empty() {
        return Err(CliError::input("keypoint file is empty"));
    }
    let center = match &a.center {
        Some(c) => [c[0], c[1]],
        None => [
            0.5 * (profile.build_min.0 + profile.build_max.0),
            0.5 * (profile.build_min.1 + profile.build_max.1),
        ],
    };
    let mask = vec![true; file.keypoints.len()];
    let norm = match (a.scale_mm, &file.norm) {
        (Some(s), _) if !(s > 0.0 && s.is_finite()) => return Err(CliError::input("--scale-mm must be positive")),
        (Some(s), Some(n)) => pathdiff::dataset::NormalizationParams { xy_scale: s, ..*n },
        (Some(s), None) => inference_norm(&file.keypoints, &mask, s, center),
        (None, Some(n)) => *n,
        (None, None) => return Err(CliError::input("the keypoint file carries no scale; pass --scale-mm")),
    };
    let opts = DenormalizeOptions {
        target_scale_mm: None,
        target_center: Some(center),
        extrusion_multiplier: a.extrusion_multiplier.or(Some(profile.extrusion_multiplier)),
    };
    let mut keypoints: Vec<Keypoint> = denormalize(&file.keypoints, &mask, &norm, &opts)?;
    let adjusted = if a.raw_e { 0 } else { monotone_extrusion(&mut keypoints) };
    if adjusted > 0 {
        println!("removed retraction at {adjusted} keypoints");
    }
    let validation = validate_layer(&keypoints, &profile);
    report.config = json!({
        "profile": profile.to_config(),
        "norm": norm,
        "z": a.z,
        "raw_e": a.raw_e,
        "force": a.force,
        "adjusted_e": adjusted,
        "violations": validation.violations.len(),
    });
    if !validation.is_valid() {
        for v in validation.violations.iter().take(10) {
            eprintln!("violation: {v:?}");
        }
        if validation.violations.len() > 10 {
            eprintln!("... {} more", validation.violations.len() - 10);
        }
        if !a.force {
            return Err(CliError::validation(format!(
                "{} validation violations; use --force to emit anyway",
                validation.violations.len()
            )));
        }
        eprintln!("warning: emitting despite {} violations", validation.violations.len());
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_bytes(&a.out, emit_layer(&keypoints, &profile, a.z).as_bytes())?;
    println!("{} keypoints -> {}", keypoints.len(), a.out.display());
    report.outputs.push(a.out.clone());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

/// Layers of a G-code program or the single layer of a keypoint file.
fn load_layers(path: &Path) -> Result<Vec<Vec<Keypoint>>, CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let f = KeypointFile::load(path)?;
        return Ok(vec![f.keypoints.iter().map(|p| Keypoint::new(p[0], p[1], p[2])).collect()]);
    }
    let text = String::from_utf8_lossy(&read_bytes(path)?).into_owned();
    let layers: Vec<LayerToolpath> = parse_program(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(layers.into_iter().filter(|l| !l.keypoints.is_empty()).map(|l| l.keypoints).collect())
}

fn evaluate_cmd(a: &EvaluateArgs, report: &mut Report) -> Result<(), CliError> {
    report.seed = Some(a.seed);
    report.inputs.push(a.truth.clone());
    report.inputs.extend(a.generated.iter().cloned());
    let truth = load_layers(&a.truth)?;
    let runs = a.generated.iter().map(|p| load_layers(p)).collect::<Result<Vec<_>, _>>()?;
    let opts = EvalOptions {
        line_width: a.line_width,
        grid_pitch: a.grid_pitch,
        seed: a.seed,
        ..EvalOptions::default()
    };
    report.config = serde_json::to_value(&opts).unwrap_or(Value::Null);
    let results = evaluate(&truth, &runs, &opts)?;
    report.outputs = emit_plots(&results, &a.out)?;
    if let Some(s) = &results.summary {
        println!("layers {}  runs {}", s.layers, s.runs);
        println!("truth mean travel {:.6}  generated mean travel {:.6}", s.truth_mean, s.generated_mean);
        println!("mean reduction {:.4}%", s.reduction_percent);
        if let Some(iou) = s.mean_iou {
            println!("mean deposition IoU {iou:.4}");
        }
    } else {
        println!("no generated runs; wrote empty tables");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_spec_forms() {
        let (s, i) = parse_synthetic("square,circle×rectilinear,concentric").unwrap();
        assert_eq!(s, vec![ShapeKind::Square, ShapeKind::Circle]);
        assert_eq!(i, vec![InfillKind::Rectilinear, InfillKind::Concentric]);
        let (s, i) = parse_synthetic("annulus x concentric").unwrap();
        assert_eq!((s.len(), i.len()), (1, 1));
        assert!(parse_synthetic("square").is_err());
        assert!(parse_synthetic("hexagon x rectilinear").is_err());
    }

    #[test]
    fn config_file_overrides() {
        let mut cfg = TrainConfig::desk();
        apply_train_config("# comment\nepochs = 7\nlr = 0.002\nplateau_patience = 3\n", &mut cfg).unwrap();
        assert_eq!((cfg.epochs, cfg.lr0, cfg.plateau.patience), (7, 0.002, 3));
        assert!(apply_train_config("bogus = 1", &mut cfg).is_err());
        assert!(apply_train_config("epochs = many", &mut cfg).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
