//! Hold rules that keep a mask on screen when the detector briefly goes
//! silent.
//!
//! * `BBoxHold` replays the most recent fresh boxes for up to
//!   `hold_frames` consecutive empty frames.
//! * `BBoxHoldSim` additionally compares each empty frame with the frame
//!   the boxes were detected on. While the MSSIM stays above
//!   `ssim_threshold` the hold is refreshed and never expires; otherwise it
//!   falls back to the plain frame counter.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{BBox, CategoryLabel, Detection};
use crate::image::GrayImage;
use crate::ssim::{mssim, SsimError, SsimParams};

pub const DEFAULT_HOLD_FRAMES: u32 = 15;
pub const DEFAULT_SSIM_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TemporalError {
    #[error("frame is {actual:?} but the stream reference frame is {expected:?}")]
    StreamInconsistency {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("stream has {frames} frames but {detections} detection lists")]
    LengthMismatch { frames: usize, detections: usize },
    #[error("ssim threshold {0} is outside [0, 1]")]
    Threshold(f64),
    #[error("unknown hold mode '{0}' (expected off, hold or hold_sim)")]
    UnknownMode(String),
    #[error(transparent)]
    Ssim(#[from] SsimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldMode {
    Off,
    #[serde(rename = "hold")]
    BBoxHold,
    #[serde(rename = "hold_sim")]
    BBoxHoldSim,
}

impl HoldMode {
    pub fn code(self) -> u8 {
        match self {
            HoldMode::Off => 0,
            HoldMode::BBoxHold => 1,
            HoldMode::BBoxHoldSim => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HoldMode::Off),
            1 => Some(HoldMode::BBoxHold),
            2 => Some(HoldMode::BBoxHoldSim),
            _ => None,
        }
    }
}

impl FromStr for HoldMode {
    type Err = TemporalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(HoldMode::Off),
            "hold" | "bbox_hold" => Ok(HoldMode::BBoxHold),
            "hold_sim" | "bbox_hold_sim" => Ok(HoldMode::BBoxHoldSim),
            other => Err(TemporalError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldConfig {
    pub mode: HoldMode,
    pub hold_frames: u32,
    pub ssim_threshold: f64,
    pub ssim_params: SsimParams,
}

impl Default for HoldConfig {
    fn default() -> Self {
        Self {
            mode: HoldMode::BBoxHoldSim,
            hold_frames: DEFAULT_HOLD_FRAMES,
            ssim_threshold: DEFAULT_SSIM_THRESHOLD,
            ssim_params: SsimParams::default().with_downsample(2),
        }
    }
}

impl HoldConfig {
    pub fn with_mode(mut self, mode: HoldMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), TemporalError> {
        if !(0.0..=1.0).contains(&self.ssim_threshold) {
            return Err(TemporalError::Threshold(self.ssim_threshold));
        }
        self.ssim_params.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub category: CategoryLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Fresh,
    Held,
    HeldSim,
    None,
}

impl DecisionSource {
    /// Wire tag: 0 none, 1 fresh, 2 held, 3 held_sim.
    pub fn code(self) -> u8 {
        match self {
            DecisionSource::None => 0,
            DecisionSource::Fresh => 1,
            DecisionSource::Held => 2,
            DecisionSource::HeldSim => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DecisionSource::None),
            1 => Some(DecisionSource::Fresh),
            2 => Some(DecisionSource::Held),
            3 => Some(DecisionSource::HeldSim),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DecisionSource::Fresh => "fresh",
            DecisionSource::Held => "held",
            DecisionSource::HeldSim => "held_sim",
            DecisionSource::None => "none",
        }
    }

    pub fn masks(self) -> bool {
        self != DecisionSource::None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskDecision {
    pub boxes: Vec<LabeledBox>,
    pub source: DecisionSource,
    /// MSSIM against the reference frame, when it was computed.
    pub ssim: Option<f64>,
}

impl MaskDecision {
    fn none(ssim: Option<f64>) -> Self {
        Self {
            boxes: Vec::new(),
            source: DecisionSource::None,
            ssim,
        }
    }
}

/// Per-stream memory. Start every stream from `HoldState::default()`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HoldState {
    last_boxes: Vec<LabeledBox>,
    frames_since_detection: u64,
    reference_frame: Option<GrayImage>,
}

impl HoldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_boxes(&self) -> &[LabeledBox] {
        &self.last_boxes
    }

    pub fn frames_since_detection(&self) -> u64 {
        self.frames_since_detection
    }

    pub fn reference_frame(&self) -> Option<&GrayImage> {
        self.reference_frame.as_ref()
    }

    /// Advances the state by one frame and returns what to mask on it.
    /// `fresh` must already be filtered by the operating confidence.
    pub fn step(
        &mut self,
        frame: &GrayImage,
        fresh: &[Detection],
        cfg: &HoldConfig,
    ) -> Result<MaskDecision, TemporalError> {
        if let Some(reference) = &self.reference_frame {
            if reference.dims() != frame.dims() {
                return Err(TemporalError::StreamInconsistency {
                    expected: reference.dims(),
                    actual: frame.dims(),
                });
            }
        }

        if !fresh.is_empty() {
            let boxes: Vec<LabeledBox> = fresh
                .iter()
                .map(|d| LabeledBox {
                    bbox: d.bbox,
                    category: d.category,
                })
                .collect();
            self.last_boxes = boxes.clone();
            self.frames_since_detection = 0;
            self.reference_frame = Some(frame.clone());
            return Ok(MaskDecision {
                boxes,
                source: DecisionSource::Fresh,
                ssim: None,
            });
        }

        let decision = match cfg.mode {
            HoldMode::Off => MaskDecision::none(None),
            HoldMode::BBoxHold => self.counter_hold(cfg, None),
            HoldMode::BBoxHoldSim => match &self.reference_frame {
                Some(reference) => {
                    let s = mssim(frame, reference, &cfg.ssim_params)?;
                    if s > cfg.ssim_threshold {
                        self.frames_since_detection = 0;
                        return Ok(MaskDecision {
                            boxes: self.last_boxes.clone(),
                            source: DecisionSource::HeldSim,
                            ssim: Some(s),
                        });
                    }
                    self.counter_hold(cfg, Some(s))
                }
                None => MaskDecision::none(None),
            },
        };
        self.frames_since_detection = self.frames_since_detection.saturating_add(1);
        Ok(decision)
    }

    fn counter_hold(&self, cfg: &HoldConfig, ssim: Option<f64>) -> MaskDecision {
        if self.frames_since_detection < u64::from(cfg.hold_frames) && !self.last_boxes.is_empty() {
            MaskDecision {
                boxes: self.last_boxes.clone(),
                source: DecisionSource::Held,
                ssim,
            }
        } else {
            MaskDecision::none(ssim)
        }
    }
}

/// Functional form of [`HoldState::step`].
pub fn step(
    state: &mut HoldState,
    frame: &GrayImage,
    fresh: &[Detection],
    cfg: &HoldConfig,
) -> Result<MaskDecision, TemporalError> {
    state.step(frame, fresh, cfg)
}

/// Folds [`HoldState::step`] over a whole stream from a fresh state.
pub fn run_stream<F, D>(
    frames: &[F],
    per_frame_detections: &[D],
    cfg: &HoldConfig,
) -> Result<Vec<MaskDecision>, TemporalError>
where
    F: AsRef<GrayImage>,
    D: AsRef<[Detection]>,
{
    if frames.len() != per_frame_detections.len() {
        return Err(TemporalError::LengthMismatch {
            frames: frames.len(),
            detections: per_frame_detections.len(),
        });
    }
    cfg.validate()?;
    let mut state = HoldState::new();
    frames
        .iter()
        .zip(per_frame_detections)
        .map(|(f, d)| state.step(f.as_ref(), d.as_ref(), cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnRateReport {
    pub roi_frames: usize,
    pub raw_misses: usize,
    pub post_misses: usize,
    pub raw_fn_rate: f64,
    pub post_fn_rate: f64,
    pub reduction_fraction: f64,
}

/// Frame-level false-negative rates before and after holding. A frame in
/// `roi` is a raw miss when it had no fresh detection and a post miss when
/// nothing was masked on it at all.
pub fn fn_rate_report(decisions: &[MaskDecision], roi: &[bool]) -> FnRateReport {
    let mut roi_frames = 0;
    let mut raw_misses = 0;
    let mut post_misses = 0;
    for (d, &has_roi) in decisions.iter().zip(roi) {
        if !has_roi {
            continue;
        }
        roi_frames += 1;
        if d.source != DecisionSource::Fresh {
            raw_misses += 1;
        }
        if d.source == DecisionSource::None {
            post_misses += 1;
        }
    }
    let rate = |n: usize| {
        if roi_frames == 0 {
            0.0
        } else {
            n as f64 / roi_frames as f64
        }
    };
    let reduction_fraction = if raw_misses == 0 {
        0.0
    } else {
        1.0 - post_misses as f64 / raw_misses as f64
    };
    FnRateReport {
        roi_frames,
        raw_misses,
        post_misses,
        raw_fn_rate: rate(raw_misses),
        post_fn_rate: rate(post_misses),
        reduction_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: u8) -> GrayImage {
        GrayImage::filled(24, 24, v).unwrap()
    }

    fn fresh(frame_index: u64) -> Vec<Detection> {
        vec![Detection::new(
            frame_index,
            BBox::new(2.0, 2.0, 10.0, 10.0).unwrap(),
            CategoryLabel::Transverse,
            0.9,
        )
        .unwrap()]
    }

    fn cfg(mode: HoldMode, hold_frames: u32) -> HoldConfig {
        HoldConfig {
            mode,
            hold_frames,
            ssim_threshold: 0.85,
            ssim_params: SsimParams::default(),
        }
    }

    /// Detections on frames `[0, detected)` then nothing for `gap` frames.
    fn gap_stream(detected: u64, gap: u64) -> Vec<Vec<Detection>> {
        (0..detected + gap)
            .map(|i| if i < detected { fresh(i) } else { Vec::new() })
            .collect()
    }

    fn sources(decisions: &[MaskDecision]) -> Vec<DecisionSource> {
        decisions.iter().map(|d| d.source).collect()
    }

    #[test]
    fn short_gap_is_held() {
        let dets = gap_stream(10, 3);
        let frames = vec![frame(40); dets.len()];
        let out = run_stream(&frames, &dets, &cfg(HoldMode::BBoxHold, 5)).unwrap();
        assert!(out[..10].iter().all(|d| d.source == DecisionSource::Fresh));
        assert!(out[10..].iter().all(|d| d.source == DecisionSource::Held));
        assert!(out[10..].iter().all(|d| d.boxes == out[9].boxes));
    }

    #[test]
    fn long_gap_exhausts_counter() {
        let dets = gap_stream(1, 8);
        let frames = vec![frame(40); dets.len()];
        let out = run_stream(&frames, &dets, &cfg(HoldMode::BBoxHold, 5)).unwrap();
        use DecisionSource::*;
        assert_eq!(
            sources(&out),
            [Fresh, Held, Held, Held, Held, Held, None, None, None]
        );
    }

    #[test]
    fn similar_frames_refresh_hold() {
        let dets = gap_stream(1, 8);
        let frames = vec![frame(40); dets.len()];
        let out = run_stream(&frames, &dets, &cfg(HoldMode::BBoxHoldSim, 5)).unwrap();
        assert!(out[1..].iter().all(|d| d.source == DecisionSource::HeldSim));
        assert!(out[1..].iter().all(|d| d.ssim == Some(1.0)));
    }

    #[test]
    fn dissimilar_frames_fall_back_to_counter() {
        let dets = gap_stream(1, 4);
        let mut frames = vec![frame(40)];
        frames.extend(std::iter::repeat_n(frame(220), 4));
        let out = run_stream(&frames, &dets, &cfg(HoldMode::BBoxHoldSim, 2)).unwrap();
        use DecisionSource::*;
        assert_eq!(sources(&out), [Fresh, Held, Held, None, None]);
        assert!(out[1].ssim.unwrap() < 0.85);
    }

    #[test]
    fn off_mode_never_holds() {
        let dets = gap_stream(2, 3);
        let frames = vec![frame(40); dets.len()];
        let out = run_stream(&frames, &dets, &cfg(HoldMode::Off, 5)).unwrap();
        use DecisionSource::*;
        assert_eq!(sources(&out), [Fresh, Fresh, None, None, None]);
    }

    #[test]
    fn fresh_resets_counter_and_reference() {
        let mut state = HoldState::new();
        let c = cfg(HoldMode::BBoxHold, 3);
        state.step(&frame(1), &fresh(0), &c).unwrap();
        state.step(&frame(1), &[], &c).unwrap();
        state.step(&frame(1), &[], &c).unwrap();
        assert_eq!(state.frames_since_detection(), 2);
        state.step(&frame(9), &fresh(3), &c).unwrap();
        assert_eq!(state.frames_since_detection(), 0);
        assert_eq!(state.reference_frame(), Some(&frame(9)));
    }

    #[test]
    fn no_history_means_nothing_to_hold() {
        let frames = vec![frame(40); 3];
        let dets: Vec<Vec<Detection>> = vec![Vec::new(); 3];
        for mode in [HoldMode::Off, HoldMode::BBoxHold, HoldMode::BBoxHoldSim] {
            let out = run_stream(&frames, &dets, &cfg(mode, 5)).unwrap();
            assert!(out.iter().all(|d| d.source == DecisionSource::None && d.boxes.is_empty()));
        }
    }

    #[test]
    fn size_change_is_rejected() {
        let mut state = HoldState::new();
        let c = cfg(HoldMode::BBoxHoldSim, 3);
        state.step(&frame(1), &fresh(0), &c).unwrap();
        let other = GrayImage::filled(25, 24, 1).unwrap();
        assert!(matches!(
            state.step(&other, &[], &c),
            Err(TemporalError::StreamInconsistency { .. })
        ));
    }

    #[test]
    fn run_stream_edges() {
        let empty: Vec<GrayImage> = Vec::new();
        let no_dets: Vec<Vec<Detection>> = Vec::new();
        assert!(run_stream(&empty, &no_dets, &HoldConfig::default()).unwrap().is_empty());
        assert!(matches!(
            run_stream(&[frame(0)], &no_dets, &HoldConfig::default()),
            Err(TemporalError::LengthMismatch { frames: 1, detections: 0 })
        ));
    }

    #[test]
    fn fn_rate_examples() {
        let c = cfg(HoldMode::BBoxHold, 5);
        let frames = vec![frame(40); 100];
        let roi = vec![true; 100];

        // Ten isolated misses, each shorter than the hold.
        let dets: Vec<Vec<Detection>> = (0..100)
            .map(|i| if i % 10 == 5 { Vec::new() } else { fresh(i) })
            .collect();
        let r = fn_rate_report(&run_stream(&frames, &dets, &c).unwrap(), &roi);
        assert_eq!((r.raw_fn_rate, r.post_fn_rate, r.reduction_fraction), (0.10, 0.0, 1.0));

        // One gap of eight frames.
        let dets: Vec<Vec<Detection>> = (0..100)
            .map(|i| if (50..58).contains(&i) { Vec::new() } else { fresh(i) })
            .collect();
        let r = fn_rate_report(&run_stream(&frames, &dets, &c).unwrap(), &roi);
        assert_eq!((r.raw_fn_rate, r.post_fn_rate), (0.08, 0.03));
        assert_eq!(r.reduction_fraction, 0.625);

        let dets: Vec<Vec<Detection>> = (0..100).map(fresh).collect();
        let r = fn_rate_report(&run_stream(&frames, &dets, &c).unwrap(), &roi);
        assert_eq!((r.raw_fn_rate, r.post_fn_rate, r.reduction_fraction), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("hold_sim".parse::<HoldMode>().unwrap(), HoldMode::BBoxHoldSim);
        assert!("sometimes".parse::<HoldMode>().is_err());
        for m in [HoldMode::Off, HoldMode::BBoxHold, HoldMode::BBoxHoldSim] {
            assert_eq!(HoldMode::from_code(m.code()), Some(m));
        }
    }
}
