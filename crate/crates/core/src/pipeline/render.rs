use std::fmt;
use std::str::FromStr;

use crate::geom::BBox;
use crate::image::GrayImage;

/// How a masked region is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskStyle {
    /// Every covered pixel set to 0.
    #[default]
    Solid,
    /// Covered pixels replaced by the rounded mean of their `block x block`
    /// cell; cells are aligned to the box origin.
    Pixelate { block: usize },
}

impl FromStr for MaskStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "solid" {
            return Ok(MaskStyle::Solid);
        }
        let block = s
            .strip_prefix("pixelate")
            .map(|rest| rest.trim_start_matches(':'))
            .ok_or_else(|| format!("unknown mask style {s:?} (expected solid or pixelate:<block>)"))?;
        let block = if block.is_empty() {
            16
        } else {
            block.parse().map_err(|_| format!("bad pixelate block size {block:?}"))?
        };
        if block == 0 {
            return Err("pixelate block size must be positive".into());
        }
        Ok(MaskStyle::Pixelate { block })
    }
}

impl fmt::Display for MaskStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskStyle::Solid => f.write_str("solid"),
            MaskStyle::Pixelate { block } => write!(f, "pixelate:{block}"),
        }
    }
}

/// Pixel range `[lo, hi)` whose centers fall inside `[min, max)`.
fn covered(min: f64, max: f64, limit: usize) -> (usize, usize) {
    let lo = (min - 0.5).ceil().max(0.0) as usize;
    let hi = ((max - 0.5).ceil().max(0.0) as usize).min(limit);
    (lo.min(limit), hi)
}

/// Pixel-index rectangle `(x0, y0, x1, y1)` covered by a box, half-open.
pub fn covered_pixels(b: &BBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (x0, x1) = covered(b.x_min(), b.x_max(), width);
    let (y0, y1) = covered(b.y_min(), b.y_max(), height);
    (x0, y0, x1, y1)
}

/// Draws every box onto a copy of `frame`. A pixel is covered when its
/// center lies inside the box; pixels outside all boxes are untouched.
pub fn render_mask(frame: &GrayImage, boxes: &[BBox], style: MaskStyle) -> GrayImage {
    let mut out = frame.clone();
    for b in boxes {
        apply_box(&mut out, b, style);
    }
    out
}

fn apply_box(img: &mut GrayImage, b: &BBox, style: MaskStyle) {
    let (w, h) = img.dims();
    let (x0, y0, x1, y1) = covered_pixels(b, w, h);
    if x0 >= x1 || y0 >= y1 {
        return;
    }
    match style {
        MaskStyle::Solid => {
            let data = img.data_mut();
            for y in y0..y1 {
                data[y * w + x0..y * w + x1].fill(0);
            }
        }
        MaskStyle::Pixelate { block } => {
            for by in (y0..y1).step_by(block) {
                let ey = (by + block).min(y1);
                for bx in (x0..x1).step_by(block) {
                    let ex = (bx + block).min(x1);
                    let mut sum = 0u64;
                    for y in by..ey {
                        sum += img.row(y)[bx..ex].iter().map(|&v| u64::from(v)).sum::<u64>();
                    }
                    let n = ((ey - by) * (ex - bx)) as u64;
                    let mean = ((sum + n / 2) / n) as u8;
                    let data = img.data_mut();
                    for y in by..ey {
                        data[y * w + bx..y * w + ex].fill(mean);
                    }
                }
            }
        }
    }
}
