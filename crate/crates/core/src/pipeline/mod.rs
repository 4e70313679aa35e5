//! Offline orchestration: frame and detection sources, the per-stream
//! masking engine, and end-to-end runs that write masked frames plus a
//! decision log.

pub mod formats;
pub mod pgm;
pub mod render;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::geom::{Detection, GeomError};
use crate::image::GrayImage;
use crate::metrics::MetricsError;
use crate::temporal::{DecisionSource, HoldConfig, HoldState, MaskDecision, TemporalError};

pub use formats::{load_predictions, DetectionSource, FormatError};
pub use pgm::PgmError;
pub use render::{render_mask, MaskStyle};

pub const DEFAULT_CONF_THR: f64 = 0.318;
pub const DEFAULT_IOU_THR: f64 = 0.6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame}: {source}")]
    Frame {
        frame: u64,
        #[source]
        source: TemporalError,
    },
    #[error("frame {frame} is {actual:?}, stream frames are {expected:?}")]
    StreamInconsistency {
        frame: u64,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("frame indices must increase: {previous} then {next}")]
    FrameOrder { previous: u64, next: u64 },
    #[error("{path}: file name carries no frame number")]
    FrameName { path: String },
    #[error("no frames found in {0}")]
    NoFrames(String),
    #[error("threshold {name}={value} is outside [0, 1]")]
    Threshold { name: &'static str, value: f64 },
    #[error("{path}: {source}")]
    Pgm {
        path: String,
        #[source]
        source: PgmError,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Settings that shape one masking stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub conf_thr: f64,
    pub hold: HoldConfig,
    pub style: MaskStyle,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            conf_thr: DEFAULT_CONF_THR,
            hold: HoldConfig::default(),
            style: MaskStyle::Solid,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.conf_thr) {
            return Err(PipelineError::Threshold {
                name: "conf_thr",
                value: self.conf_thr,
            });
        }
        self.hold.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MaskedFrame {
    pub decision: MaskDecision,
    pub image: GrayImage,
}

/// Per-stream masking state machine: confidence filter, clamp, hold
/// rules, render. Shared by offline runs and the network service so both
/// make identical decisions.
#[derive(Debug, Clone)]
pub struct MaskEngine {
    cfg: EngineConfig,
    state: HoldState,
    dims: Option<(usize, usize)>,
}

impl MaskEngine {
    pub fn new(cfg: EngineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: HoldState::new(),
            dims: None,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Swaps settings mid-stream; the hold state carries over.
    pub fn reconfigure(&mut self, cfg: EngineConfig) -> Result<(), PipelineError> {
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn state(&self) -> &HoldState {
        &self.state
    }

    /// Detections that pass the confidence threshold, clamped to the frame.
    /// Boxes left empty by clamping are dropped.
    pub fn admit(&self, frame_index: u64, frame: &GrayImage, dets: &[Detection]) -> Vec<Detection> {
        let (w, h) = frame.dims();
        dets.iter()
            .filter(|d| d.confidence() >= self.cfg.conf_thr)
            .filter_map(|d| match d.bbox.clamp_to_frame(w as u32, h as u32) {
                Ok(bbox) => Some(d.with_bbox(bbox)),
                Err(GeomError::EmptyAfterClamp { .. }) => {
                    log::warn!("frame {frame_index}: skipping box {} outside the {w}x{h} frame", d.bbox);
                    None
                }
                Err(e) => {
                    log::warn!("frame {frame_index}: skipping box {}: {e}", d.bbox);
                    None
                }
            })
            .collect()
    }

    pub fn process(
        &mut self,
        frame_index: u64,
        frame: &GrayImage,
        dets: &[Detection],
    ) -> Result<MaskedFrame, PipelineError> {
        match self.dims {
            Some(expected) if expected != frame.dims() => {
                return Err(PipelineError::StreamInconsistency {
                    frame: frame_index,
                    expected,
                    actual: frame.dims(),
                })
            }
            _ => self.dims = Some(frame.dims()),
        }
        let fresh = self.admit(frame_index, frame, dets);
        let decision = self
            .state
            .step(frame, &fresh, &self.cfg.hold)
            .map_err(|source| PipelineError::Frame {
                frame: frame_index,
                source,
            })?;
        let boxes: Vec<_> = decision.boxes.iter().map(|b| b.bbox).collect();
        let image = render_mask(frame, &boxes, self.cfg.style);
        Ok(MaskedFrame { decision, image })
    }
}

/// Where frames come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSourceSpec {
    /// Directory of numbered PGM files, e.g. `frame_000123.pgm`.
    PgmDir(PathBuf),
    /// Raw stream file; `-` reads standard input.
    Raw(PathBuf),
}

impl FrameSourceSpec {
    /// Directories are PGM sequences, anything else a raw stream.
    pub fn infer(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        if path.is_dir() {
            FrameSourceSpec::PgmDir(path)
        } else {
            FrameSourceSpec::Raw(path)
        }
    }
}

enum SourceKind {
    Dir { files: Vec<(u64, PathBuf)>, next: usize },
    Raw { reader: pgm::RawFrameReader<Box<dyn Read>>, next: u64, label: String },
}

/// Ordered `(frame_index, frame)` sequence.
pub struct FrameSource {
    kind: SourceKind,
    dims: Option<(usize, usize)>,
    last_index: Option<u64>,
}

impl FrameSource {
    pub fn open(spec: &FrameSourceSpec) -> Result<Self, PipelineError> {
        let kind = match spec {
            FrameSourceSpec::PgmDir(dir) => {
                let mut files = Vec::new();
                for entry in std::fs::read_dir(dir).map_err(io_error(dir))? {
                    let path = entry.map_err(io_error(dir))?.path();
                    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
                        let index = formats::frame_index_from_path(&path).ok_or_else(|| PipelineError::FrameName {
                            path: path.display().to_string(),
                        })?;
                        files.push((index, path));
                    }
                }
                if files.is_empty() {
                    return Err(PipelineError::NoFrames(dir.display().to_string()));
                }
                files.sort();
                SourceKind::Dir { files, next: 0 }
            }
            FrameSourceSpec::Raw(path) => {
                let input: Box<dyn Read> = if path.as_os_str() == "-" {
                    Box::new(io::stdin())
                } else {
                    Box::new(io::BufReader::new(File::open(path).map_err(io_error(path))?))
                };
                let label = path.display().to_string();
                let reader = pgm::RawFrameReader::new(input).map_err(|source| PipelineError::Pgm {
                    path: label.clone(),
                    source,
                })?;
                SourceKind::Raw {
                    reader,
                    next: 0,
                    label,
                }
            }
        };
        Ok(Self {
            kind,
            dims: None,
            last_index: None,
        })
    }

    /// File name for an output frame mirroring the input naming.
    fn output_name(&self, index: u64) -> String {
        match &self.kind {
            SourceKind::Dir { files, .. } => files
                .iter()
                .find(|(i, _)| *i == index)
                .and_then(|(_, p)| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("frame_{index:06}.pgm")),
            SourceKind::Raw { .. } => format!("frame_{index:06}.pgm"),
        }
    }

    fn read_next(&mut self) -> Result<Option<(u64, GrayImage)>, PipelineError> {
        match &mut self.kind {
            SourceKind::Dir { files, next } => {
                let Some((index, path)) = files.get(*next).cloned() else {
                    return Ok(None);
                };
                *next += 1;
                let img = pgm::read_pgm(&path).map_err(|source| PipelineError::Pgm {
                    path: path.display().to_string(),
                    source,
                })?;
                Ok(Some((index, img)))
            }
            SourceKind::Raw { reader, next, label } => {
                let frame = reader.next_frame().map_err(|source| PipelineError::Pgm {
                    path: label.clone(),
                    source,
                })?;
                Ok(frame.map(|f| {
                    let i = *next;
                    *next += 1;
                    (i, f)
                }))
            }
        }
    }
}

impl Iterator for FrameSource {
    type Item = Result<(u64, GrayImage), PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (index, frame) = match self.read_next() {
            Ok(Some(v)) => v,
            Ok(None) => return None,
            Err(e) => return Some(Err(e)),
        };
        if let Some(previous) = self.last_index {
            if index <= previous {
                return Some(Err(PipelineError::FrameOrder { previous, next: index }));
            }
        }
        self.last_index = Some(index);
        match self.dims {
            Some(expected) if expected != frame.dims() => {
                return Some(Err(PipelineError::StreamInconsistency {
                    frame: index,
                    expected,
                    actual: frame.dims(),
                }))
            }
            _ => self.dims = Some(frame.dims()),
        }
        Some(Ok((index, frame)))
    }
}

/// Where masked frames go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSinkSpec {
    /// One PGM per frame, named like the input.
    PgmDir(PathBuf),
    /// Raw stream file; `-` writes standard output.
    Raw(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frames: FrameSourceSpec,
    /// Sidecar predictions; `None` means the detector reported nothing.
    pub predictions: Option<PathBuf>,
    pub engine: EngineConfig,
    /// Used when a run is evaluated against ground truth.
    pub iou_thr: f64,
    pub output: Option<FrameSinkSpec>,
    pub decision_log: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(frames: FrameSourceSpec) -> Self {
        Self {
            frames,
            predictions: None,
            engine: EngineConfig::default(),
            iou_thr: DEFAULT_IOU_THR,
            output: None,
            decision_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub frames: usize,
    pub sources: BTreeMap<DecisionSource, usize>,
    pub elapsed_secs: f64,
    pub frames_per_sec: f64,
    /// Per-frame decisions in stream order.
    pub decisions: Vec<(u64, MaskDecision)>,
}

impl RunSummary {
    pub fn count(&self, source: DecisionSource) -> usize {
        self.sources.get(&source).copied().unwrap_or(0)
    }
}

enum Sink {
    Dir(PathBuf),
    Raw(Box<dyn Write>, bool),
}

/// Runs the full offline pipeline over a stream.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    let detections = match &cfg.predictions {
        Some(path) => load_predictions(path)?,
        None => DetectionSource::new(),
    };
    let mut source = FrameSource::open(&cfg.frames)?;
    let mut engine = MaskEngine::new(cfg.engine)?;

    let mut sink = match &cfg.output {
        None => None,
        Some(FrameSinkSpec::PgmDir(dir)) => {
            std::fs::create_dir_all(dir).map_err(io_error(dir))?;
            Some(Sink::Dir(dir.clone()))
        }
        Some(FrameSinkSpec::Raw(path)) => {
            let out: Box<dyn Write> = if path.as_os_str() == "-" {
                Box::new(BufWriter::new(io::stdout()))
            } else {
                Box::new(BufWriter::new(File::create(path).map_err(io_error(path))?))
            };
            Some(Sink::Raw(out, false))
        }
    };
    let mut log = match &cfg.decision_log {
        Some(path) => Some((BufWriter::new(File::create(path).map_err(io_error(path))?), path.clone())),
        None => None,
    };

    let started = Instant::now();
    let mut summary = RunSummary {
        frames: 0,
        sources: BTreeMap::new(),
        elapsed_secs: 0.0,
        frames_per_sec: 0.0,
        decisions: Vec::new(),
    };

    while let Some(item) = source.next() {
        let (index, frame) = item?;
        let masked = engine.process(index, &frame, detections.for_frame(index))?;

        match &mut sink {
            Some(Sink::Dir(dir)) => {
                let path = dir.join(source.output_name(index));
                pgm::write_pgm(&path, &masked.image).map_err(|source| PipelineError::Pgm {
                    path: path.display().to_string(),
                    source,
                })?;
            }
            Some(Sink::Raw(out, header_written)) => {
                let label = Path::new("<raw output>");
                if !*header_written {
                    pgm::write_raw_header(out, frame.width(), frame.height()).map_err(|source| {
                        PipelineError::Pgm {
                            path: label.display().to_string(),
                            source,
                        }
                    })?;
                    *header_written = true;
                }
                out.write_all(masked.image.data()).map_err(io_error(label))?;
            }
            None => {}
        }
        if let Some((out, path)) = &mut log {
            formats::write_decision(out, &formats::DecisionRecord::new(index, &masked.decision))
                .map_err(io_error(path))?;
        }

        summary.frames += 1;
        *summary.sources.entry(masked.decision.source).or_default() += 1;
        summary.decisions.push((index, masked.decision));
    }

    if let Some(Sink::Raw(out, _)) = &mut sink {
        out.flush().map_err(io_error(Path::new("<raw output>")))?;
    }
    if let Some((out, path)) = &mut log {
        out.flush().map_err(io_error(path))?;
    }
    summary.elapsed_secs = started.elapsed().as_secs_f64();
    summary.frames_per_sec = if summary.elapsed_secs > 0.0 {
        summary.frames as f64 / summary.elapsed_secs
    } else {
        f64::INFINITY
    };
    Ok(summary)
}

/// Reads ground truth and predictions, then evaluates at one operating
/// point. `n_images` defaults to the number of distinct frames named by
/// either file.
pub fn eval_files(
    gt_path: &Path,
    pred_path: &Path,
    conf_thr: f64,
    iou_thr: f64,
    n_images: Option<usize>,
) -> Result<crate::metrics::EvalReport, PipelineError> {
    let gts = formats::load_ground_truth(gt_path)?;
    let preds = load_predictions(pred_path)?;
    let n = n_images.unwrap_or_else(|| count_frames(&gts, &preds));
    Ok(crate::metrics::evaluate(&preds.all(), &gts.boxes, conf_thr, iou_thr, n)?)
}

pub fn count_frames(gts: &formats::GroundTruthSet, preds: &DetectionSource) -> usize {
    let mut frames: std::collections::BTreeSet<u64> = gts.frames.iter().copied().collect();
    frames.extend(preds.frames());
    frames.len()
}
