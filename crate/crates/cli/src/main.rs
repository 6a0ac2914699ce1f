use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lifseg::context::paint;
use lifseg::dataio::{self, Dataset, DatasetMeta, FORMATS_DOC, FORMAT_VERSION};
use lifseg::evaluation::MeanMode;
use lifseg::geometry::{compose_chain, in_image_mask, project_points};
use lifseg::offset::CentroidMode;
use lifseg::pipeline::{self, comparison_csv, PipelineConfig, RunReport, Variant};
use lifseg::synthetic::{self, SceneSpec, CLASS_NAMES};
use lifseg::{Error, Models};
use serde_json::json;

/// Desk-scale LiDAR and camera fusion for point cloud segmentation.
#[derive(Parser, Debug)]
#[command(name = "lifseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Write the projection of one frame into one camera as CSV.
    Project(ProjectArgs),
    /// Write the painted cloud of one frame.
    Paint(PaintArgs),
    /// Train one variant and evaluate it on the held-out split.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate several variants with shared seeds.
    Ablate(AblateArgs),
    /// Print the on-disk format documentation.
    Formats,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of frames.
    #[arg(long, default_value_t = 40)]
    frames: usize,
    /// Camera exposure time minus sweep time, seconds.
    #[arg(long, default_value_t = 0.05)]
    skew: f64,
    /// Forward ego speed, m/s.
    #[arg(long, default_value_t = 5.0)]
    speed: f64,
    /// Ego yaw rate, rad/s.
    #[arg(long, default_value_t = 0.0)]
    yaw_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    vehicles: usize,
    #[arg(long, default_value_t = 4)]
    poles: usize,
    /// Vehicle-sized background boxes.
    #[arg(long, default_value_t = 3)]
    clutter: usize,
    /// Context window recorded in meta.json.
    #[arg(long, default_value_t = 3)]
    window: usize,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    camera: usize,
    /// Output CSV: point,row,col,depth,visible.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PaintArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    frame: usize,
    /// Odd window size.
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Output file in the points.bin layout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Centroid {
    MemberMean,
    BoxCenter,
}

/// Training hyperparameters shared by `train` and `ablate`.
#[derive(Args, Debug, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// SGD step size.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// SGD step size of the offset head.
    #[arg(long, default_value_t = 5.0)]
    offset_lr: f64,
    /// Weight of the auxiliary offset loss.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Fraction of frames used for training; the rest is held out.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Voxel grid resolution as X,Y,Z.
    #[arg(long, default_value = "32,32,8", value_parser = parse_grid)]
    grid: lifseg::networks::GridShape,
    /// Anchor of the offset targets.
    #[arg(long, value_enum, default_value_t = Centroid::MemberMean)]
    centroid: Centroid,
    /// Divide mIoU by all classes instead of the classes present.
    #[arg(long)]
    all_classes: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// baseline, c1x1, c3x3, c5x5, mid or full.
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; the report goes next to it with a .json extension.
    #[arg(long)]
    out: PathBuf,
    /// Only the frames the run held out from training.
    #[arg(long)]
    held_out: bool,
    /// Zero the predicted offset field.
    #[arg(long)]
    zero_offset: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory, one run directory per variant and seed.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants.
    #[arg(long, default_value = "baseline,c1x1,c3x3,c5x5,mid,full", value_delimiter = ',', value_parser = parse_variant)]
    variants: Vec<Variant>,
    /// Comma-separated seeds; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    training: TrainingArgs,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_grid(s: &str) -> Result<lifseg::networks::GridShape, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] if x > 0 && y > 0 && z > 0 => Ok(lifseg::networks::GridShape { x, y, z }),
        _ => Err("expected three positive integers X,Y,Z".into()),
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = if e.is_data_error() { (3, "data") } else { (4, "runtime") };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        kind: "usage",
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return report(usage(first.strip_prefix("error: ").unwrap_or(first)));
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Project(a) => project(a),
        Command::Paint(a) => paint_cmd(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Formats => {
            print!("{FORMATS_DOC}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

/// Prints `lifseg: error=<kind> code=<n> <message>` on one line.
fn report(f: Failure) -> ExitCode {
    let flat: String = f.message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("lifseg: error={} code={} {}", f.kind, f.code, flat);
    ExitCode::from(f.code)
}

fn gen(a: GenArgs) -> CmdResult {
    if a.frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }
    if a.window % 2 == 0 {
        return Err(usage("--window must be odd"));
    }
    let spec = SceneSpec {
        seed: a.seed,
        vehicles: a.vehicles,
        poles: a.poles,
        clutter: a.clutter,
        speed: a.speed,
        yaw_rate: a.yaw_rate,
        ..SceneSpec::default()
    }
    .with_skew(a.skew);
    let frames: Vec<_> = synthetic::generate_dataset(&spec, a.frames)?
        .into_iter()
        .map(|f| f.bundle)
        .collect();
    let first = &frames[0];
    let (height, width) = first.image_size();
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        classes: CLASS_NAMES.len(),
        dims: first.cloud.dims(),
        cameras: first.cameras.len(),
        height,
        width,
        window: a.window,
        frames: (0..frames.len()).map(dataio::frame_name).collect(),
    };
    dataio::write_dataset(&a.out, &meta, &frames)?;
    Ok(())
}

fn project(a: ProjectArgs) -> CmdResult {
    let ds = Dataset::open(&a.data)?;
    let f = ds.frame(a.frame)?;
    let cam = f
        .cameras
        .get(a.camera)
        .ok_or_else(|| usage(format!("--camera {} out of range ({} cameras)", a.camera, f.cameras.len())))?;
    let coords = project_points(&f.cloud, &compose_chain(&cam.chain)?, &cam.intrinsics);
    let (h, w) = f.image_size();
    let mask = in_image_mask(&coords, h, w);
    let mut out = String::from("point,row,col,depth,visible\n");
    for i in 0..coords.len() {
        let [r, c] = coords.idx[i];
        writeln!(out, "{i},{r},{c},{},{}", coords.depth[i], u8::from(mask.mask[i])).unwrap();
    }
    dataio::write_text(&a.out, &out)?;
    Ok(())
}

fn paint_cmd(a: PaintArgs) -> CmdResult {
    if a.window % 2 == 0 {
        return Err(usage("--window must be odd"));
    }
    let ds = Dataset::open(&a.data)?;
    let f = ds.frame(a.frame)?;
    let painted = paint(&f.cloud, &f, a.window)?;
    dataio::write_points(&a.out, painted.width(), painted.rows())?;
    Ok(())
}

fn build_config(variant: Variant, classes: usize, t: &TrainingArgs) -> Result<PipelineConfig, Failure> {
    let mut c = PipelineConfig::for_variant(variant, classes);
    c.epochs = t.epochs;
    c.seed = t.seed;
    c.lr = t.lr;
    c.offset_lr = t.offset_lr;
    c.alpha = t.alpha;
    c.grid = t.grid;
    c.targets.centroid = match t.centroid {
        Centroid::MemberMean => CentroidMode::MemberMean,
        Centroid::BoxCenter => CentroidMode::BoxCenter,
    };
    c.mean_mode = if t.all_classes {
        MeanMode::AllClasses
    } else {
        MeanMode::PresentClasses
    };
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

/// Trains `config` on the split of `ds` and writes a run directory.
fn train_into(
    ds: &Dataset,
    frames: &[lifseg::FrameBundle],
    config: &PipelineConfig,
    fraction: f64,
    out: &Path,
) -> Result<RunReport, Failure> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(usage("--train-fraction must lie strictly between 0 and 1"));
    }
    let (train_idx, held_idx) = synthetic::split(frames.len(), fraction, config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| frames[i].clone()).collect::<Vec<_>>();
    let (models, report) = pipeline::run_variant(config, &pick(&train_idx), &pick(&held_idx))?;
    let metadata = json!({
        "variant": config.variant.tag(),
        "source_dims": ds.meta.dims,
        "train_frames": train_idx.iter().map(|&i| &ds.meta.frames[i]).collect::<Vec<_>>(),
        "held_out_frames": held_idx.iter().map(|&i| &ds.meta.frames[i]).collect::<Vec<_>>(),
    });
    std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::Io {
        path: out.to_path_buf(),
        source: e,
    }))?;
    dataio::write_checkpoint(&out.join("model.ckpt"), &models.to_checkpoint(metadata))?;
    dataio::write_json(&out.join("config.json"), config)?;
    dataio::write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn train(a: TrainArgs) -> CmdResult {
    let ds = Dataset::open(&a.data)?;
    let config = build_config(a.variant, ds.meta.classes, &a.training)?;
    let frames = ds.frames()?;
    train_into(&ds, &frames, &config, a.training.train_fraction, &a.out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let ds = Dataset::open(&a.data)?;
    let mut config: PipelineConfig = dataio::read_json(&a.run.join("config.json"))?;
    config.validate()?;
    config.force_zero_offset |= a.zero_offset;
    let ckpt = dataio::read_checkpoint(&a.run.join("model.ckpt"))?;
    let source_dims = ckpt.metadata["source_dims"]
        .as_u64()
        .ok_or_else(|| Failure::from(Error::InvalidConfig("checkpoint metadata lacks source_dims".into())))?
        as usize;
    if source_dims != ds.meta.dims {
        return Err(Error::InvalidConfig(format!("run expects D = {source_dims}, dataset has D = {}", ds.meta.dims)).into());
    }
    if config.classes != ds.meta.classes {
        return Err(Error::InvalidConfig(format!("run expects C = {}, dataset has C = {}", config.classes, ds.meta.classes)).into());
    }
    let models = Models::from_checkpoint(&config, source_dims, &ckpt)?;
    let frames = if a.held_out {
        let names: Vec<String> = serde_json::from_value(ckpt.metadata["held_out_frames"].clone())
            .map_err(|e| Failure::from(Error::InvalidConfig(format!("checkpoint metadata: {e}"))))?;
        names
            .iter()
            .map(|n| {
                let k = ds.meta.frames.iter().position(|f| f == n).ok_or_else(|| {
                    Failure::from(Error::InvalidConfig(format!("held-out frame {n} not in dataset")))
                })?;
                Ok(ds.frame(k)?)
            })
            .collect::<Result<Vec<_>, Failure>>()?
    } else {
        ds.frames()?
    };
    let report = pipeline::evaluate(&models, &frames, &config)?;
    let metrics = report.metrics.as_ref().expect("evaluate fills metrics");
    if metrics.confusion.total() == 0 {
        return Err(Error::EmptyMatrix.into());
    }
    dataio::write_text(&a.out, &metrics.confusion.csv(&ds.meta.class_names, config.mean_mode)?)?;
    dataio::write_json(&a.out.with_extension("json"), &report)?;
    Ok(())
}

fn ablate(a: AblateArgs) -> CmdResult {
    let ds = Dataset::open(&a.data)?;
    let frames = ds.frames()?;
    let seeds = if a.seeds.is_empty() {
        vec![a.training.seed]
    } else {
        a.seeds.clone()
    };
    let mut reports = Vec::new();
    for &seed in &seeds {
        for &v in &a.variants {
            let t = TrainingArgs {
                seed,
                ..a.training.clone()
            };
            let config = build_config(v, ds.meta.classes, &t)?;
            let dir = a.out.join(format!("{}_seed{seed}", v.tag()));
            reports.push(train_into(&ds, &frames, &config, t.train_fraction, &dir)?);
        }
    }
    dataio::write_text(&a.out.join("comparison.csv"), &comparison_csv(&reports))?;
    print!("{}", comparison_csv(&reports));
    Ok(())
}
