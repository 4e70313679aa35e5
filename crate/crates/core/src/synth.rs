//! Synthetic ultrasound-like streams with scripted detector dropouts.
//!
//! Frames are a smooth depth gradient plus a static speckle texture and a
//! bright, slowly drifting blob standing in for the region of interest.
//! A "probe move" swaps the speckle texture, which drives SSIM against
//! earlier frames well below typical hold thresholds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{BBox, CategoryLabel, Detection, GroundTruth};
use crate::image::GrayImage;
use crate::pipeline::formats::{ground_truth_record, prediction_record, write_records};
use crate::pipeline::{pgm, PipelineError};

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    /// Frames showing the region of interest.
    pub roi_spans: Vec<Range<usize>>,
    /// ROI frames on which the detector stays silent.
    pub dropouts: Vec<Range<usize>>,
    /// Frames at which the scene texture changes.
    pub probe_moves: Vec<usize>,
    pub category: CategoryLabel,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub frames: Vec<GrayImage>,
    pub detections: Vec<Vec<Detection>>,
    pub ground_truth: Vec<Vec<GroundTruth>>,
    pub roi: Vec<bool>,
}

/// Paths written by [`SyntheticStream::write_to_dir`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamFiles {
    pub frames: PathBuf,
    pub predictions: PathBuf,
    pub ground_truth: PathBuf,
}

impl SyntheticStream {
    /// Writes `frames/frame_NNNNNN.pgm`, `predictions.jsonl` and
    /// `ground_truth.jsonl` under `dir`. Every frame gets a record, so
    /// negative frames are visible to evaluation.
    pub fn write_to_dir(&self, dir: &Path) -> Result<StreamFiles, PipelineError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| PipelineError::Io { path, source }
        };
        let files = StreamFiles {
            frames: dir.join("frames"),
            predictions: dir.join("predictions.jsonl"),
            ground_truth: dir.join("ground_truth.jsonl"),
        };
        std::fs::create_dir_all(&files.frames).map_err(io_err(&files.frames))?;
        for (i, frame) in self.frames.iter().enumerate() {
            let path = files.frames.join(format!("frame_{i:06}.pgm"));
            pgm::write_pgm(&path, frame).map_err(|source| PipelineError::Pgm {
                path: path.display().to_string(),
                source,
            })?;
        }
        let preds: Vec<_> = self.detections.iter().enumerate().map(|(i, d)| prediction_record(i as u64, d)).collect();
        let gts: Vec<_> = self.ground_truth.iter().enumerate().map(|(i, g)| ground_truth_record(i as u64, g)).collect();
        for (path, records) in [(&files.predictions, preds), (&files.ground_truth, gts)] {
            let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
            write_records(&mut out, &records)?;
            out.flush().map_err(io_err(path))?;
        }
        Ok(files)
    }
}

fn in_any(spans: &[Range<usize>], i: usize) -> bool {
    spans.iter().any(|r| r.contains(&i))
}

/// Square ROI box for frame `t`; its center drifts slowly sideways.
pub fn roi_box(width: usize, height: usize, t: usize) -> BBox {
    let side = (width.min(height) as f64 * 0.25).round().max(4.0);
    let cx = width as f64 * (0.5 + 0.1 * (t as f64 * 0.05).sin());
    let cy = height as f64 * 0.55;
    let x0 = (cx - side / 2.0).round();
    let y0 = (cy - side / 2.0).round();
    BBox::new(x0, y0, x0 + side, y0 + side).expect("side is positive")
}

struct Texture {
    speckle: Vec<i16>,
}

impl Texture {
    fn new(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            speckle: (0..width * height).map(|_| rng.gen_range(-28..=28)).collect(),
        }
    }
}

fn render_frame(width: usize, height: usize, texture: &Texture, roi: Option<BBox>, shade: i16) -> GrayImage {
    let mut data = Vec::with_capacity(width * height);
    let (bcx, bcy, br2) = match roi {
        Some(b) => {
            let r = b.width() / 2.0;
            (
                (b.x_min() + b.x_max()) / 2.0,
                (b.y_min() + b.y_max()) / 2.0,
                r * r,
            )
        }
        None => (0.0, 0.0, 0.0),
    };
    for y in 0..height {
        let depth = 50 + (60 * y / height.max(1)) as i16 + shade;
        for x in 0..width {
            let mut v = depth + texture.speckle[y * width + x];
            if br2 > 0.0 {
                let dx = x as f64 + 0.5 - bcx;
                let dy = y as f64 + 0.5 - bcy;
                let d2 = dx * dx + dy * dy;
                if d2 < br2 {
                    v += (90.0 * (1.0 - d2 / br2)) as i16;
                }
            }
            data.push(v.clamp(0, 255) as u8);
        }
    }
    GrayImage::new(width, height, data).expect("exact size")
}

/// Renders a stream and the detector output it scripts.
pub fn generate(spec: &StreamSpec) -> SyntheticStream {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let mut texture_seed = spec.seed;
    let mut texture = Texture::new(spec.width, spec.height, texture_seed);
    let mut shade = 0i16;

    let mut out = SyntheticStream {
        frames: Vec::with_capacity(spec.n_frames),
        detections: Vec::with_capacity(spec.n_frames),
        ground_truth: Vec::with_capacity(spec.n_frames),
        roi: Vec::with_capacity(spec.n_frames),
    };
    for t in 0..spec.n_frames {
        if spec.probe_moves.contains(&t) {
            texture_seed = texture_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            texture = Texture::new(spec.width, spec.height, texture_seed);
            shade = rng.gen_range(-20..=20);
        }
        let has_roi = in_any(&spec.roi_spans, t);
        let bbox = has_roi.then(|| roi_box(spec.width, spec.height, t));
        out.frames.push(render_frame(spec.width, spec.height, &texture, bbox, shade));
        out.roi.push(has_roi);

        let frame_index = t as u64;
        match bbox {
            Some(b) => {
                out.ground_truth.push(vec![GroundTruth::new(frame_index, b, spec.category)]);
                if in_any(&spec.dropouts, t) {
                    out.detections.push(Vec::new());
                } else {
                    let conf = rng.gen_range(0.5..1.0);
                    let det = Detection::new(frame_index, b, spec.category, conf).expect("conf in range");
                    out.detections.push(vec![det]);
                }
            }
            None => {
                out.ground_truth.push(Vec::new());
                out.detections.push(Vec::new());
            }
        }
    }
    out
}

/// Small deterministic stream used as a cross-module fixture: 40 frames
/// of 48x48, ROI on frames 4..36, detector silent on 10..13 (a gap of 3)
/// and 20..28 (a gap of 8), probe move at frame 24.
pub fn dropout_fixture() -> StreamSpec {
    StreamSpec {
        width: 48,
        height: 48,
        n_frames: 40,
        roi_spans: vec![4..36],
        dropouts: vec![10..13, 20..28],
        probe_moves: vec![24],
        category: CategoryLabel::Transverse,
        seed: 2024,
    }
}

/// Random spec for property tests: a few ROI spans, random dropout gaps
/// and occasional probe moves.
pub fn random_spec(rng: &mut impl Rng, width: usize, height: usize, n_frames: usize) -> StreamSpec {
    let mut roi_spans = Vec::new();
    let mut t = rng.gen_range(0..n_frames / 4 + 1);
    while t < n_frames {
        let len = rng.gen_range(3..=n_frames / 2 + 3);
        roi_spans.push(t..(t + len).min(n_frames));
        t += len + rng.gen_range(1..=n_frames / 4 + 1);
    }
    let mut dropouts = Vec::new();
    for span in &roi_spans {
        let mut t = span.start;
        while t < span.end {
            if rng.gen_bool(0.3) {
                let len = rng.gen_range(1..=12);
                dropouts.push(t..(t + len).min(span.end));
                t += len;
            }
            t += 1;
        }
    }
    let probe_moves = (0..n_frames).filter(|_| rng.gen_bool(0.05)).collect();
    StreamSpec {
        width,
        height,
        n_frames,
        roi_spans,
        dropouts,
        probe_moves,
        category: if rng.gen_bool(0.5) {
            CategoryLabel::Transverse
        } else {
            CategoryLabel::MidSagittal
        },
        seed: rng.gen(),
    }
}
