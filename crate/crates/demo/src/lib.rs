//! Browser-facing wrappers around `usmask-core`. Every export is a plain
//! Rust function as well, so the crate builds and tests natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use usmask_core::geom::{BBox, Detection, GroundTruth};
use usmask_core::image::GrayImage;
use usmask_core::imgproc::{remove_overlay_text, TextMaskParams, DEFAULT_INPAINT_MAX_ITERS, DEFAULT_INPAINT_TOL};
use usmask_core::metrics::{sweep_confidence, uniform_grid};
use usmask_core::synth::{dropout_fixture, generate, StreamSpec};
use usmask_core::temporal::{fn_rate_report, run_stream, HoldConfig, HoldMode};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Speckled test frame with a line of bright overlay digits burnt in.
#[wasm_bindgen]
pub fn sample_frame(width: usize, height: usize, seed: u64) -> Vec<u8> {
    const DIGITS: [[u8; 7]; 4] = [
        [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        [0b01110, 0b10001, 0b00001, 0b00110, 0b01000, 0b10000, 0b11111],
        [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<u8> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            let r = ((x - width as f64 / 2.0).powi(2) + (y - height as f64 * 0.6).powi(2)).sqrt();
            let fan = if r < width.min(height) as f64 * 0.45 { 70.0 } else { 15.0 };
            (fan + rng.gen_range(0.0..18.0)) as u8
        })
        .collect();
    for (k, digit) in DIGITS.iter().enumerate() {
        for (row, bits) in digit.iter().enumerate() {
            for col in 0..5 {
                let (x, y) = (6 + k * 7 + col, 5 + row);
                if bits & (1 << (4 - col)) != 0 && x < width && y < height {
                    data[y * width + x] = 235;
                }
            }
        }
    }
    data
}

/// Detects and inpaints overlay text. Returns the mask (255 = text)
/// followed by the cleaned frame, each `width * height` bytes.
#[wasm_bindgen]
pub fn clean_text(width: usize, height: usize, pixels: &[u8], low: Option<u8>) -> Result<Vec<u8>, JsError> {
    let img = GrayImage::new(width, height, pixels.to_vec()).map_err(js_err)?;
    let params = TextMaskParams {
        low,
        ..TextMaskParams::default()
    };
    let (mask, cleaned) =
        remove_overlay_text(&img, &params, DEFAULT_INPAINT_TOL, DEFAULT_INPAINT_MAX_ITERS).map_err(js_err)?;
    let mut out = mask.to_image().into_data();
    out.extend_from_slice(cleaned.data());
    Ok(out)
}

#[derive(Serialize)]
struct Timeline {
    roi: Vec<bool>,
    fresh: Vec<bool>,
    /// Decision source per frame for each mode, in the order off, hold, hold_sim.
    sources: [Vec<&'static str>; 3],
    post_fn_rate: [f64; 3],
    ssim: Vec<Option<f64>>,
}

/// Runs a synthetic stream with two detector dropouts and a probe move
/// through all three hold modes. Returns JSON.
#[wasm_bindgen]
pub fn hold_timeline(n_frames: usize, hold_frames: u32, ssim_threshold: f64, seed: u64) -> Result<String, JsError> {
    let n = n_frames.clamp(20, 400);
    let spec = StreamSpec {
        width: 48,
        height: 48,
        n_frames: n,
        roi_spans: vec![n / 10..n - n / 10],
        dropouts: vec![n / 4..n / 4 + 4, n / 2..n / 2 + n / 5],
        probe_moves: vec![n / 2 + n / 10],
        seed,
        ..dropout_fixture()
    };
    let s = generate(&spec);
    let mut sources: [Vec<&'static str>; 3] = Default::default();
    let mut post_fn_rate = [0.0; 3];
    let mut ssim = Vec::new();
    for (k, mode) in [HoldMode::Off, HoldMode::BBoxHold, HoldMode::BBoxHoldSim].into_iter().enumerate() {
        let cfg = HoldConfig {
            hold_frames,
            ssim_threshold,
            ..HoldConfig::default().with_mode(mode)
        };
        let decisions = run_stream(&s.frames, &s.detections, &cfg).map_err(js_err)?;
        post_fn_rate[k] = fn_rate_report(&decisions, &s.roi).post_fn_rate;
        sources[k] = decisions.iter().map(|d| d.source.as_str()).collect();
        if mode == HoldMode::BBoxHoldSim {
            ssim = decisions.iter().map(|d| d.ssim).collect();
        }
    }
    let t = Timeline {
        fresh: s.detections.iter().map(|d| !d.is_empty()).collect(),
        roi: s.roi,
        sources,
        post_fn_rate,
        ssim,
    };
    Ok(serde_json::to_string(&t).expect("timeline serializes"))
}

/// Simulated detector output for a sweep: true positives whose confidence
/// spreads with `noise`, some missed regions, and low-confidence clutter.
fn noisy_detections(rng: &mut impl Rng, n_frames: usize, noise: f64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let spec = StreamSpec {
        width: 64,
        height: 64,
        n_frames,
        roi_spans: vec![0..n_frames * 2 / 3],
        dropouts: Vec::new(),
        probe_moves: Vec::new(),
        seed: rng.gen(),
        ..dropout_fixture()
    };
    // Only the boxes are needed; a tiny frame size keeps this cheap.
    let s = generate(&spec);
    let gts: Vec<GroundTruth> = s.ground_truth.into_iter().flatten().collect();
    let mut dets = Vec::new();
    for g in &gts {
        if rng.gen_bool(0.9) {
            let conf = (0.75 + noise * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
            dets.push(Detection::new(g.frame_index, g.bbox, g.category, conf).expect("clamped"));
        }
    }
    for f in 0..n_frames as u64 {
        if rng.gen_bool(0.5) {
            // Clutter in the top-left corner, away from the region of interest.
            let (x, y) = (rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0));
            let b = BBox::new(x, y, x + 12.0, y + 12.0).expect("positive size");
            let conf = (0.3 + noise * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
            dets.push(Detection::new(f, b, spec.category, conf).expect("clamped"));
        }
    }
    (dets, gts)
}

/// Precision/recall/F1/FPPI against the confidence threshold for a
/// simulated detector. Returns the curve as JSON.
#[wasm_bindgen]
pub fn f1_sweep(n_frames: usize, noise: f64, iou_thr: f64, steps: usize, seed: u64) -> Result<String, JsError> {
    let n = n_frames.clamp(3, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dets, gts) = noisy_detections(&mut rng, n, noise.clamp(0.0, 1.0));
    let curve = sweep_confidence(&dets, &gts, iou_thr, &uniform_grid(steps.clamp(1, 1000)), n).map_err(js_err)?;
    Ok(serde_json::to_string(&curve).expect("curve serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cleaning_removes_the_sample_digits() {
        let (w, h) = (96, 64);
        let frame = sample_frame(w, h, 1);
        let out = clean_text(w, h, &frame, None).unwrap();
        let (mask, cleaned) = out.split_at(w * h);
        let text: Vec<usize> = (0..w * h).filter(|&i| frame[i] == 235).collect();
        assert!(text.iter().all(|&i| mask[i] == 255));
        assert!(text.iter().all(|&i| cleaned[i] < 150));
        for i in 0..w * h {
            if mask[i] == 0 {
                assert_eq!(cleaned[i], frame[i]);
            }
        }
    }

    #[test]
    fn timeline_shows_dominance() {
        let json = hold_timeline(120, 5, 0.85, 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let rates: Vec<f64> = v["post_fn_rate"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(rates[2] <= rates[1] && rates[1] <= rates[0]);
        assert!(rates[0] > 0.0);
        assert_eq!(v["sources"][2].as_array().unwrap().len(), 120);
    }

    #[test]
    fn sweep_curve_is_sane() {
        let json = f1_sweep(60, 0.2, 0.5, 20, 9).unwrap();
        let c: usmask_core::metrics::SweepCurve = serde_json::from_str(&json).unwrap();
        assert_eq!(c.points.len(), 21);
        assert!(c.best_f1 > 0.8, "{}", c.best_f1);
        assert!(c.points.windows(2).all(|w| w[1].recall <= w[0].recall));
    }
}
