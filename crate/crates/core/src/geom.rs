//! Boxes, categories and detections shared by the whole crate.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("invalid box ({0}, {1}, {2}, {3}): coordinates must be finite with positive area")]
    InvalidBox(f64, f64, f64, f64),
    #[error("box is empty after clamping to a {width}x{height} frame")]
    EmptyAfterClamp { width: u32, height: u32 },
    #[error("frame dimensions must be positive, got {width}x{height}")]
    EmptyFrame { width: u32, height: u32 },
    #[error("confidence {0} is outside [0, 1]")]
    Confidence(f64),
}

/// Axis-aligned pixel box, half-open: `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeomError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeomError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeomError> {
        Self::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Boxes built through [`BBox::new`] always
    /// have positive area, so the union is never zero.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clamp_to_frame(&self, width: u32, height: u32) -> Result<Self, GeomError> {
        if width == 0 || height == 0 {
            return Err(GeomError::EmptyFrame { width, height });
        }
        let (w, h) = (f64::from(width), f64::from(height));
        let x_min = self.x_min.clamp(0.0, w);
        let x_max = self.x_max.clamp(0.0, w);
        let y_min = self.y_min.clamp(0.0, h);
        let y_max = self.y_max.clamp(0.0, h);
        Self::new(x_min, y_min, x_max, y_max)
            .map_err(|_| GeomError::EmptyAfterClamp { width, height })
    }

    /// Relative side mismatch `|w - h| / max(w, h)`.
    pub fn squareness_error(&self) -> f64 {
        let (w, h) = (self.width(), self.height());
        (w - h).abs() / w.max(h)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeomError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Free-function form of [`BBox::iou`].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn clamp_to_frame(b: &BBox, width: u32, height: u32) -> Result<BBox, GeomError> {
    b.clamp_to_frame(width, height)
}

/// The two imaging planes a region of interest is annotated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryLabel {
    Transverse,
    MidSagittal,
}

impl CategoryLabel {
    pub const ALL: [CategoryLabel; 2] = [CategoryLabel::Transverse, CategoryLabel::MidSagittal];

    pub fn code(self) -> u8 {
        match self {
            CategoryLabel::Transverse => 0,
            CategoryLabel::MidSagittal => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CategoryLabel::Transverse),
            1 => Some(CategoryLabel::MidSagittal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CategoryLabel::Transverse => "transverse",
            CategoryLabel::MidSagittal => "mid_sagittal",
        }
    }
}

impl fmt::Display for CategoryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame_index: u64,
    pub bbox: BBox,
    pub category: CategoryLabel,
    confidence: f64,
}

impl Detection {
    pub fn new(
        frame_index: u64,
        bbox: BBox,
        category: CategoryLabel,
        confidence: f64,
    ) -> Result<Self, GeomError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GeomError::Confidence(confidence));
        }
        Ok(Self {
            frame_index,
            bbox,
            category,
            confidence,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn with_bbox(self, bbox: BBox) -> Self {
        Self { bbox, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub frame_index: u64,
    pub bbox: BBox,
    pub category: CategoryLabel,
}

impl GroundTruth {
    pub fn new(frame_index: u64, bbox: BBox, category: CategoryLabel) -> Self {
        Self {
            frame_index,
            bbox,
            category,
        }
    }
}

/// Default relative tolerance for the square-annotation rule.
pub const DEFAULT_SQUARENESS_TOL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    NotSquare { relative_error: f64 },
    InvalidBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Position of the annotation in the input list.
    pub index: usize,
    pub frame_index: u64,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_conforming(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that every annotation box is square within `squareness_tol`.
pub fn validate_annotations(gts: &[GroundTruth], squareness_tol: f64) -> ValidationReport {
    let mut report = ValidationReport {
        checked: gts.len(),
        violations: Vec::new(),
    };
    for (index, gt) in gts.iter().enumerate() {
        let b = gt.bbox;
        // Positive area is enforced on construction; negative origins are not.
        let kind = if b.x_min < 0.0 || b.y_min < 0.0 {
            Some(ViolationKind::InvalidBox)
        } else {
            let relative_error = b.squareness_error();
            (relative_error > squareness_tol).then_some(ViolationKind::NotSquare { relative_error })
        };
        if let Some(kind) = kind {
            report.violations.push(Violation {
                index,
                frame_index: gt.frame_index,
                kind,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(20., 20., 30., 30.)), 0.0);
        let v = iou(&b(0., 0., 100., 100.), &b(50., 0., 150., 100.));
        assert!((v - 5000.0 / 15000.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(10., 0., 20., 10.)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(5., 0., 5., 10.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 10.).is_err());
        assert!(BBox::new(0., 10., 10., 0.).is_err());
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(b(-5., -5., 10., 10.).clamp_to_frame(384, 384).unwrap(), b(0., 0., 10., 10.));
        assert_eq!(b(0., 0., 10., 10.).clamp_to_frame(384, 384).unwrap(), b(0., 0., 10., 10.));
        assert_eq!(
            b(400., 400., 500., 500.).clamp_to_frame(384, 384),
            Err(GeomError::EmptyAfterClamp { width: 384, height: 384 })
        );
        assert!(b(0., 0., 1., 1.).clamp_to_frame(0, 10).is_err());
    }

    #[test]
    fn squareness_examples() {
        let gt = |x1, y1| GroundTruth::new(0, b(0., 0., x1, y1), CategoryLabel::Transverse);
        assert!(validate_annotations(&[gt(50., 50.)], 0.01).is_conforming());
        let r = validate_annotations(&[gt(50., 50.), gt(50., 60.)], 0.01);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].index, 1);
        assert!(validate_annotations(&[gt(100., 101.)], 0.02).is_conforming());
    }

    #[test]
    fn category_codes_are_stable() {
        for c in CategoryLabel::ALL {
            assert_eq!(CategoryLabel::from_code(c.code()), Some(c));
        }
        assert_eq!(CategoryLabel::Transverse.code(), 0);
        assert_eq!(CategoryLabel::MidSagittal.code(), 1);
        assert_eq!(CategoryLabel::from_code(2), None);
    }

    #[test]
    fn confidence_is_bounded() {
        let bx = b(0., 0., 1., 1.);
        assert!(Detection::new(0, bx, CategoryLabel::Transverse, 1.5).is_err());
        assert!(Detection::new(0, bx, CategoryLabel::Transverse, f64::NAN).is_err());
        assert!(Detection::new(0, bx, CategoryLabel::Transverse, 1.0).is_ok());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..500.0f64, 0.0..500.0f64, 0.5..200.0f64, 0.5..200.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = a.iou(&c);
            prop_assert_eq!(ab, c.iou(&a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_is_translation_invariant(a in arb_box(), c in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let moved = a.translate(dx, dy).unwrap().iou(&c.translate(dx, dy).unwrap());
            prop_assert!((moved - a.iou(&c)).abs() < 1e-9);
        }

        #[test]
        fn clamp_is_idempotent(a in arb_box(), w in 1u32..600, h in 1u32..600) {
            if let Ok(once) = a.clamp_to_frame(w, h) {
                prop_assert_eq!(once.clamp_to_frame(w, h).unwrap(), once);
            }
        }
    }
}
