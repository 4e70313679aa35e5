//! JSON Lines sidecars, decision logs, report documents and YOLO text
//! import.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{BBox, CategoryLabel, Detection, GeomError, GroundTruth};
use crate::metrics::{EvalReport, SweepCurve};
use crate::temporal::{DecisionSource, LabeledBox, MaskDecision};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One box inside a sidecar record. `conf` is absent for ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub bbox: [f64; 4],
    pub category: CategoryLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: u64,
    #[serde(default)]
    pub detections: Vec<BoxRecord>,
}

/// Per-frame detections keyed by frame index. Frames the file never
/// mentions have no detections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSource {
    frames: BTreeMap<u64, Vec<Detection>>,
}

impl DetectionSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_detections(dets: impl IntoIterator<Item = Detection>) -> Self {
        let mut s = Self::new();
        for d in dets {
            s.frames.entry(d.frame_index).or_default().push(d);
        }
        s
    }

    pub fn push(&mut self, det: Detection) {
        self.frames.entry(det.frame_index).or_default().push(det);
    }

    /// Marks a frame as present even when it holds no detections.
    pub fn touch(&mut self, frame: u64) {
        self.frames.entry(frame).or_default();
    }

    pub fn for_frame(&self, frame: u64) -> &[Detection] {
        self.frames.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Frame indices mentioned by the source, ascending.
    pub fn frames(&self) -> impl Iterator<Item = u64> + '_ {
        self.frames.keys().copied()
    }

    pub fn all(&self) -> Vec<Detection> {
        self.frames.values().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground truth plus every frame index the annotation file lists,
/// including negative frames with no boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub boxes: Vec<GroundTruth>,
    pub frames: Vec<u64>,
}

fn parse_records(
    reader: impl BufRead,
    path: &str,
    mut each: impl FnMut(usize, FrameRecord) -> Result<(), FormatError>,
) -> Result<(), FormatError> {
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| FormatError::Io {
            path: path.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| FormatError::Parse {
            path: path.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        each(line_no, record)?;
    }
    Ok(())
}

fn record_box(r: &BoxRecord, path: &str, line: usize) -> Result<BBox, FormatError> {
    let [x0, y0, x1, y1] = r.bbox;
    BBox::new(x0, y0, x1, y1).map_err(|e| FormatError::Schema {
        path: path.to_string(),
        line,
        message: e.to_string(),
    })
}

pub fn parse_predictions(reader: impl BufRead, path: &str) -> Result<DetectionSource, FormatError> {
    let mut source = DetectionSource::new();
    parse_records(reader, path, |line, rec| {
        source.touch(rec.frame);
        for b in &rec.detections {
            let bbox = record_box(b, path, line)?;
            let schema = |message: String| FormatError::Schema {
                path: path.to_string(),
                line,
                message,
            };
            let conf = b.conf.ok_or_else(|| schema("prediction is missing \"conf\"".into()))?;
            let det = Detection::new(rec.frame, bbox, b.category, conf).map_err(|e: GeomError| schema(e.to_string()))?;
            source.push(det);
        }
        Ok(())
    })?;
    Ok(source)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<DetectionSource, FormatError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_predictions(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn parse_ground_truth(reader: impl BufRead, path: &str) -> Result<GroundTruthSet, FormatError> {
    let mut set = GroundTruthSet::default();
    let mut seen = std::collections::BTreeSet::new();
    parse_records(reader, path, |line, rec| {
        if seen.insert(rec.frame) {
            set.frames.push(rec.frame);
        }
        for b in &rec.detections {
            let bbox = record_box(b, path, line)?;
            set.boxes.push(GroundTruth::new(rec.frame, bbox, b.category));
        }
        Ok(())
    })?;
    set.frames.sort_unstable();
    Ok(set)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruthSet, FormatError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_ground_truth(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn prediction_record(frame: u64, dets: &[Detection]) -> FrameRecord {
    FrameRecord {
        frame,
        detections: dets
            .iter()
            .map(|d| BoxRecord {
                bbox: d.bbox.to_array(),
                category: d.category,
                conf: Some(d.confidence()),
            })
            .collect(),
    }
}

pub fn ground_truth_record(frame: u64, gts: &[GroundTruth]) -> FrameRecord {
    FrameRecord {
        frame,
        detections: gts
            .iter()
            .map(|g| BoxRecord {
                bbox: g.bbox.to_array(),
                category: g.category,
                conf: None,
            })
            .collect(),
    }
}

pub fn write_records<W: Write>(out: &mut W, records: &[FrameRecord]) -> Result<(), FormatError> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n").map_err(|source| FormatError::Io {
            path: "<output>".into(),
            source,
        })?;
    }
    Ok(())
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub frame: u64,
    pub source: DecisionSource,
    pub boxes: Vec<LabeledBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

impl DecisionRecord {
    pub fn new(frame: u64, d: &MaskDecision) -> Self {
        Self {
            frame,
            source: d.source,
            boxes: d.boxes.clone(),
            ssim: d.ssim,
        }
    }

    pub fn to_decision(&self) -> MaskDecision {
        MaskDecision {
            boxes: self.boxes.clone(),
            source: self.source,
            ssim: self.ssim,
        }
    }
}

pub fn write_decision<W: Write>(out: &mut W, record: &DecisionRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

pub fn read_decision_log(path: impl AsRef<Path>) -> Result<Vec<DecisionRecord>, FormatError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FormatError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const EVAL_CSV_HEADER: &str = "ap_50,ap_50_95,precision,recall,f1,fppi,tp,fp,fn,conf_thr,iou_thr";
pub const SWEEP_CSV_HEADER: &str = "conf,precision,recall,f1,fppi";

pub fn eval_report_json(r: &EvalReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes")
}

pub fn eval_report_csv(r: &EvalReport) -> String {
    format!(
        "{EVAL_CSV_HEADER}\n{},{},{},{},{},{},{},{},{},{},{}\n",
        r.ap_50, r.ap_50_95, r.precision, r.recall, r.f1, r.fppi, r.tp, r.fp, r.fn_, r.conf_thr, r.iou_thr
    )
}

pub fn sweep_csv(c: &SweepCurve) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for p in &c.points {
        let _ = writeln!(s, "{},{},{},{},{}", p.conf, p.precision, p.recall, p.f1, p.fppi);
    }
    s
}

pub fn sweep_json(c: &SweepCurve) -> String {
    serde_json::to_string_pretty(c).expect("curve serializes")
}

/// Parses one YOLO annotation line `category cx cy w h` (normalized) into
/// a pixel box on a `width x height` image.
pub fn parse_yolo_line(
    line: &str,
    frame: u64,
    width: u32,
    height: u32,
) -> Result<GroundTruth, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let code: u8 = fields[0]
        .parse()
        .map_err(|_| format!("bad category {:?}", fields[0]))?;
    let category = CategoryLabel::from_code(code).ok_or_else(|| format!("unknown category {code}"))?;
    let mut v = [0f64; 4];
    for (slot, text) in v.iter_mut().zip(&fields[1..]) {
        let x: f64 = text.parse().map_err(|_| format!("bad number {text:?}"))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(format!("value {x} outside [0, 1]"));
        }
        *slot = x;
    }
    let [cx, cy, w, h] = v;
    let (fw, fh) = (f64::from(width), f64::from(height));
    let bbox = BBox::new(
        (cx - w / 2.0) * fw,
        (cy - h / 2.0) * fh,
        (cx + w / 2.0) * fw,
        (cy + h / 2.0) * fh,
    )
    .map_err(|e| e.to_string())?;
    Ok(GroundTruth::new(frame, bbox, category))
}

fn trailing_number(stem: &str) -> Option<u64> {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Frame index encoded by trailing digits in a file stem, e.g.
/// `frame_00042.pgm` is frame 42.
pub fn frame_index_from_path(path: &Path) -> Option<u64> {
    path.file_stem().and_then(|s| s.to_str()).and_then(trailing_number)
}

/// Imports every `*.txt` file of a YOLO label directory. The frame index
/// comes from trailing digits in the file name, falling back to the
/// position in name order.
pub fn import_yolo_txt(dir: impl AsRef<Path>, width: u32, height: u32) -> Result<Vec<GroundTruth>, FormatError> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for (pos, file) in files.iter().enumerate() {
        let frame = frame_index_from_path(file).unwrap_or(pos as u64);
        let text = std::fs::read_to_string(file).map_err(io_err(file))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let gt = parse_yolo_line(line, frame, width, height).map_err(|message| FormatError::Schema {
                path: file.display().to_string(),
                line: i + 1,
                message,
            })?;
            out.push(gt);
        }
    }
    Ok(out)
}
