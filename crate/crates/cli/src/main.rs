use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use usmask_core::geom::{validate_annotations, ViolationKind, DEFAULT_SQUARENESS_TOL};
use usmask_core::imgproc::{
    remove_overlay_text, TextMaskParams, DEFAULT_INPAINT_MAX_ITERS, DEFAULT_INPAINT_TOL, DEFAULT_MIN_CONTRAST,
};
use usmask_core::metrics::{sweep_confidence, uniform_grid};
use usmask_core::pipeline::formats::{
    eval_report_csv, eval_report_json, import_yolo_txt, load_ground_truth, load_predictions, sweep_csv, sweep_json,
};
use usmask_core::pipeline::pgm::{read_pgm, write_pgm};
use usmask_core::pipeline::render::MaskStyle;
use usmask_core::pipeline::{
    count_frames, eval_files, run, EngineConfig, FrameSinkSpec, FrameSourceSpec, RunConfig, DEFAULT_CONF_THR,
    DEFAULT_IOU_THR,
};
use usmask_core::service::Server;
use usmask_core::synth::{dropout_fixture, generate, StreamSpec};
use usmask_core::temporal::{
    fn_rate_report, DecisionSource, HoldConfig, HoldMode, MaskDecision, DEFAULT_HOLD_FRAMES, DEFAULT_SSIM_THRESHOLD,
};

#[derive(Parser)]
#[command(name = "usmask", version, about = "Mask regions of interest in grayscale ultrasound frame streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mask a frame stream using detector predictions and temporal holding
    Mask(MaskArgs),
    /// Score predictions against ground truth at one operating point
    Eval(EvalArgs),
    /// Sweep the confidence threshold and report the F1-optimal point
    Sweep(SweepArgs),
    /// Remove burnt-in overlay text from PGM frames by inpainting
    Preprocess(PreprocessArgs),
    /// Check that ground-truth boxes are square
    Validate(ValidateArgs),
    /// Write a synthetic stream with scripted detector dropouts
    Simulate(SimulateArgs),
    /// Run the streaming masking service
    Serve(ServeArgs),
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Minimum detection confidence
    #[arg(long = "conf", default_value_t = DEFAULT_CONF_THR)]
    conf: f64,
    /// Hold rule: off, hold or hold_sim
    #[arg(long, default_value = "hold_sim")]
    mode: HoldMode,
    /// Frames a box is held after the last detection (N)
    #[arg(long, default_value_t = DEFAULT_HOLD_FRAMES)]
    hold_frames: u32,
    /// SSIM above which the hold is renewed (tau)
    #[arg(long, default_value_t = DEFAULT_SSIM_THRESHOLD)]
    ssim_threshold: f64,
    /// Block-mean downsampling before SSIM
    #[arg(long, default_value_t = 2)]
    ssim_downsample: usize,
    /// Mask style: solid or pixelate:<block>
    #[arg(long, default_value = "solid")]
    style: MaskStyle,
}

impl EngineArgs {
    fn config(&self) -> EngineConfig {
        let defaults = HoldConfig::default();
        EngineConfig {
            conf_thr: self.conf,
            hold: HoldConfig {
                mode: self.mode,
                hold_frames: self.hold_frames,
                ssim_threshold: self.ssim_threshold,
                ssim_params: defaults.ssim_params.with_downsample(self.ssim_downsample),
            },
            style: self.style,
        }
    }
}

#[derive(Args)]
struct MaskArgs {
    /// Directory of numbered PGM frames, or a raw stream file ("-" for stdin)
    #[arg(long)]
    frames: PathBuf,
    /// Prediction sidecar (JSONL); without it nothing is detected
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Output directory for PGM frames, or a raw stream file ("-" for stdout)
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write a raw stream instead of PGM files (implied by "-" or a .raw extension)
    #[arg(long)]
    raw_output: bool,
    /// Per-frame decision log (JSONL)
    #[arg(long)]
    decision_log: Option<PathBuf>,
    /// Ground truth for reporting frame-level false-negative rates
    #[arg(long)]
    gt: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long = "conf", default_value_t = DEFAULT_CONF_THR)]
    conf: f64,
    #[arg(long = "iou", default_value_t = DEFAULT_IOU_THR)]
    iou: f64,
    /// Images evaluated, for FPPI (default: distinct frames in either file)
    #[arg(long)]
    n_images: Option<usize>,
    /// Write the report as JSON
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long = "iou", default_value_t = DEFAULT_IOU_THR)]
    iou: f64,
    /// Grid resolution: thresholds 0, 1/steps, ..., 1
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// PGM file or directory of PGM files
    #[arg(long)]
    input: PathBuf,
    /// Output PGM file or directory
    #[arg(long)]
    output: PathBuf,
    /// Also write the text mask (single-file mode)
    #[arg(long)]
    mask_output: Option<PathBuf>,
    /// Fixed hysteresis low level (default: derived by Otsu)
    #[arg(long)]
    low: Option<u8>,
    /// Fixed hysteresis high level (default: twice the low level)
    #[arg(long)]
    high: Option<u8>,
    /// Floor for the derived low level
    #[arg(long, default_value_t = DEFAULT_MIN_CONTRAST)]
    min_contrast: u8,
    #[arg(long, default_value_t = DEFAULT_INPAINT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_INPAINT_MAX_ITERS)]
    max_iters: usize,
}

#[derive(Args)]
struct ValidateArgs {
    /// Ground truth JSONL
    #[arg(long, conflicts_with = "yolo_dir", required_unless_present = "yolo_dir")]
    gt: Option<PathBuf>,
    /// Directory of YOLO label files instead of JSONL
    #[arg(long, requires_all = ["width", "height"])]
    yolo_dir: Option<PathBuf>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    /// Allowed relative difference between box sides
    #[arg(long, default_value_t = DEFAULT_SQUARENESS_TOL)]
    tol: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Write the small built-in dropout fixture and ignore the size flags
    #[arg(long)]
    fixture: bool,
    #[arg(long, default_value_t = 384)]
    width: usize,
    #[arg(long, default_value_t = 384)]
    height: usize,
    #[arg(long, default_value_t = 300)]
    frames: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[command(flatten)]
    engine: EngineArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask(a) => mask(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Validate(a) => validate(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn mask(a: MaskArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new(FrameSourceSpec::infer(&a.frames));
    cfg.predictions = a.predictions;
    cfg.engine = a.engine.config();
    cfg.decision_log = a.decision_log;
    cfg.output = a.output.map(|out| {
        let raw = a.raw_output || out.as_os_str() == "-" || out.extension().is_some_and(|e| e == "raw");
        if raw {
            FrameSinkSpec::Raw(out)
        } else {
            FrameSinkSpec::PgmDir(out)
        }
    });
    let to_stdout = matches!(&cfg.output, Some(FrameSinkSpec::Raw(p)) if p.as_os_str() == "-");
    let summary = run(&cfg)?;

    let mut lines = vec![format!(
        "{} frames in {:.2}s ({:.1} frames/s)",
        summary.frames, summary.elapsed_secs, summary.frames_per_sec
    )];
    for source in [DecisionSource::Fresh, DecisionSource::Held, DecisionSource::HeldSim, DecisionSource::None] {
        lines.push(format!("  {:<9} {}", source.as_str(), summary.count(source)));
    }
    if let Some(gt) = a.gt {
        let gts = load_ground_truth(&gt)?;
        let positive: BTreeSet<u64> = gts.boxes.iter().map(|g| g.frame_index).collect();
        let roi: Vec<bool> = summary.decisions.iter().map(|(i, _)| positive.contains(i)).collect();
        let decisions: Vec<MaskDecision> = summary.decisions.iter().map(|(_, d)| d.clone()).collect();
        let r = fn_rate_report(&decisions, &roi);
        lines.push(format!(
            "ROI frames {}: raw FN rate {:.4}, post FN rate {:.4}, reduction {:.4}",
            r.roi_frames, r.raw_fn_rate, r.post_fn_rate, r.reduction_fraction
        ));
    }
    // Keep stdout clean when it carries the masked stream.
    for line in lines {
        if to_stdout {
            eprintln!("{line}");
        } else {
            println!("{line}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let report = eval_files(&a.gt, &a.predictions, a.conf, a.iou, a.n_images)?;
    let json = eval_report_json(&report);
    if let Some(path) = &a.json {
        fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.csv {
        fs::write(path, eval_report_csv(&report)).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let gts = load_ground_truth(&a.gt)?;
    let preds = load_predictions(&a.predictions)?;
    let n_images = a.n_images.unwrap_or_else(|| count_frames(&gts, &preds));
    let curve = sweep_confidence(&preds.all(), &gts.boxes, a.iou, &uniform_grid(a.steps), n_images)?;
    if let Some(path) = &a.json {
        fs::write(path, sweep_json(&curve)).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.csv {
        fs::write(path, sweep_csv(&curve)).with_context(|| format!("writing {}", path.display()))?;
    }
    let best = curve.points.iter().find(|p| p.conf == curve.best_conf).expect("best point is on the grid");
    println!(
        "best conf {:.4}: F1 {:.4}, precision {:.4}, recall {:.4}, FPPI {:.4}",
        best.conf, best.f1, best.precision, best.recall, best.fppi
    );
    Ok(ExitCode::SUCCESS)
}

fn clean_one(input: &Path, output: &Path, mask_out: Option<&Path>, a: &PreprocessArgs) -> Result<usize> {
    let img = read_pgm(input).with_context(|| format!("reading {}", input.display()))?;
    let params = TextMaskParams {
        low: a.low,
        high: a.high,
        min_contrast: a.min_contrast,
        ..TextMaskParams::default()
    };
    let (mask, cleaned) =
        remove_overlay_text(&img, &params, a.tol, a.max_iters).with_context(|| format!("cleaning {}", input.display()))?;
    write_pgm(output, &cleaned).with_context(|| format!("writing {}", output.display()))?;
    if let Some(path) = mask_out {
        write_pgm(path, &mask.to_image()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(mask.count())
}

fn preprocess(a: PreprocessArgs) -> Result<ExitCode> {
    if a.input.is_dir() {
        if a.mask_output.is_some() {
            bail!("--mask-output only applies to a single input file");
        }
        fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
        let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        inputs.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")));
        inputs.sort();
        let mut total = 0;
        for input in &inputs {
            let name = input.file_name().expect("listed files have names");
            total += clean_one(input, &a.output.join(name), None, &a)?;
        }
        println!("{} frames cleaned, {total} pixels inpainted", inputs.len());
    } else {
        let n = clean_one(&a.input, &a.output, a.mask_output.as_deref(), &a)?;
        println!("{n} pixels inpainted");
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> Result<ExitCode> {
    let gts = match (&a.gt, &a.yolo_dir) {
        (Some(path), _) => load_ground_truth(path)?.boxes,
        (None, Some(dir)) => import_yolo_txt(dir, a.width.unwrap_or(0), a.height.unwrap_or(0))?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let report = validate_annotations(&gts, a.tol);
    for v in &report.violations {
        let what = match v.kind {
            ViolationKind::NotSquare { relative_error } => format!("not square (relative error {relative_error:.4})"),
            ViolationKind::InvalidBox => "box starts outside the frame".to_string(),
        };
        println!("annotation {} (frame {}): {what}", v.index, v.frame_index);
    }
    println!("{} annotations checked, {} violations", report.checked, report.violations.len());
    Ok(if report.is_conforming() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let spec = if a.fixture {
        dropout_fixture()
    } else {
        if a.frames == 0 || a.width < 24 || a.height < 24 {
            bail!("need at least one frame of 24x24 or more");
        }
        let n = a.frames;
        StreamSpec {
            width: a.width,
            height: a.height,
            n_frames: n,
            roi_spans: vec![n / 15..n - n / 15],
            dropouts: vec![n / 5..n / 5 + 3, n / 2..n / 2 + 8, 3 * n / 4..3 * n / 4 + 20],
            probe_moves: vec![n / 2 + 4, 3 * n / 4 + 10],
            seed: a.seed,
            ..dropout_fixture()
        }
    };
    let s = generate(&spec);
    let files = s.write_to_dir(&a.out)?;
    println!(
        "{} frames of {}x{} in {}\npredictions  {}\nground truth {}",
        spec.n_frames,
        spec.width,
        spec.height,
        files.frames.display(),
        files.predictions.display(),
        files.ground_truth.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn serve(a: ServeArgs) -> Result<ExitCode> {
    let server = Server::bind(&a.listen, a.engine.config())?;
    log::info!("listening on {}", server.local_addr()?);
    server.run()?;
    Ok(ExitCode::SUCCESS)
}
