//! Dataset preprocessing: Otsu and hysteresis thresholding, rectangular
//! grayscale morphology, overlay-text mask extraction and diffusion
//! inpainting.

use std::collections::VecDeque;

use thiserror::Error;

use crate::image::GrayImage;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImgProcError {
    #[error("image is constant; there is no threshold that splits it")]
    ConstantImage,
    #[error("hysteresis low level {low} is above high level {high}")]
    HysteresisBand { low: u8, high: u8 },
    #[error("structuring element {0}x{1} must have odd sides of at least 1")]
    ElementShape(usize, usize),
    #[error("structuring element {se:?} is larger than the {image:?} image")]
    ElementTooLarge {
        se: (usize, usize),
        image: (usize, usize),
    },
    #[error("mask is {mask:?} but the image is {image:?}")]
    MaskSize {
        mask: (usize, usize),
        image: (usize, usize),
    },
    #[error("every pixel is masked; inpainting needs at least one known pixel")]
    NoBoundaryData,
    #[error("inpaint tolerance {0} must be positive")]
    Tolerance(f64),
}

/// One bit per pixel, row-major; `true` marks a selected pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Selected pixels as 255, others 0.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("mask dimensions are nonzero")
    }

    /// Nonzero pixels become selected.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.data().iter().map(|&v| v != 0).collect(),
        }
    }
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("selected", &self.count())
            .finish()
    }
}

pub fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in img.data() {
        h[v as usize] += 1;
    }
    h
}

/// Otsu level over a 256-bin histogram: the `t` maximizing between-class
/// variance for classes `<= t` and `> t`, lowest `t` on ties.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<u8, ImgProcError> {
    let total: u64 = hist.iter().sum();
    let total_sum: u128 = hist
        .iter()
        .enumerate()
        .map(|(v, &c)| v as u128 * u128::from(c))
        .sum();

    let mut best: Option<(u8, u128, u128)> = None;
    let (mut n0, mut s0) = (0u64, 0u128);
    for t in 0..=255u8 {
        n0 += hist[t as usize];
        s0 += t as u128 * u128::from(hist[t as usize]);
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // N^2 * between-class variance = (S*n0 - N*s0)^2 / (n0*n1), kept as
        // an exact fraction so ties resolve to the lowest level.
        let diff = (total_sum as i128 * i128::from(n0) - i128::from(total) * s0 as i128).unsigned_abs();
        let num = diff * diff;
        let den = u128::from(n0) * u128::from(n1);
        if best.is_none_or(|(_, bn, bd)| cmp_fraction(num, den, bn, bd) == std::cmp::Ordering::Greater) {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t).ok_or(ImgProcError::ConstantImage)
}

/// Exact comparison of `a/b` with `c/d` (nonzero denominators) by
/// continued-fraction expansion, immune to overflow.
fn cmp_fraction(mut a: u128, mut b: u128, mut c: u128, mut d: u128) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let mut flipped = false;
    loop {
        let (qa, qc) = (a / b, c / d);
        if qa != qc {
            let o = qa.cmp(&qc);
            return if flipped { o.reverse() } else { o };
        }
        let (ra, rc) = (a % b, c % d);
        let o = match (ra == 0, rc == 0) {
            (true, true) => return Ordering::Equal,
            (true, false) => Ordering::Less,
            (false, true) => Ordering::Greater,
            (false, false) => {
                // a/b vs c/d  <=>  reversed b/ra vs d/rc
                (a, b, c, d) = (b, ra, d, rc);
                flipped = !flipped;
                continue;
            }
        };
        return if flipped { o.reverse() } else { o };
    }
}

pub fn otsu_threshold(img: &GrayImage) -> Result<u8, ImgProcError> {
    otsu_from_histogram(&histogram(img))
}

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Pixels `>= high` seed the mask, which then grows through 8-connected
/// pixels `>= low`.
pub fn hysteresis_threshold(img: &GrayImage, low: u8, high: u8) -> Result<BinaryMask, ImgProcError> {
    if low > high {
        return Err(ImgProcError::HysteresisBand { low, high });
    }
    let (w, h) = img.dims();
    let mut mask = BinaryMask::empty(w, h);
    let mut queue = VecDeque::new();
    for (i, &v) in img.data().iter().enumerate() {
        if v >= high {
            mask.bits[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for (dx, dy) in NEIGHBORS_8 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if !mask.bits[j] && img.data()[j] >= low {
                mask.bits[j] = true;
                queue.push_back(j);
            }
        }
    }
    Ok(mask)
}

/// Rectangular footprint anchored at its center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    width: usize,
    height: usize,
}

impl StructuringElement {
    pub fn rect(width: usize, height: usize) -> Result<Self, ImgProcError> {
        if width == 0 || height == 0 || width.is_multiple_of(2) || height.is_multiple_of(2) {
            return Err(ImgProcError::ElementShape(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn square(side: usize) -> Result<Self, ImgProcError> {
        Self::rect(side, side)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    TopHat,
}

/// Separable rank filter (min or max) with edge replication.
fn rank_filter(img: &GrayImage, se: StructuringElement, pick: fn(u8, u8) -> u8) -> GrayImage {
    let (w, h) = img.dims();
    let rx = se.width / 2;
    let ry = se.height / 2;

    let mut horiz = vec![0u8; w * h];
    for y in 0..h {
        let row = img.row(y);
        for x in 0..w {
            let lo = x.saturating_sub(rx);
            let hi = (x + rx).min(w - 1);
            horiz[y * w + x] = row[lo..=hi].iter().copied().reduce(pick).unwrap();
        }
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(ry);
        let hi = (y + ry).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| horiz[yy * w + x]).reduce(pick).unwrap();
        }
    }
    GrayImage::new(w, h, out).expect("same size as input")
}

pub fn erode(img: &GrayImage, se: StructuringElement) -> Result<GrayImage, ImgProcError> {
    morphology(img, MorphOp::Erode, se)
}

pub fn dilate(img: &GrayImage, se: StructuringElement) -> Result<GrayImage, ImgProcError> {
    morphology(img, MorphOp::Dilate, se)
}

pub fn morphology(img: &GrayImage, op: MorphOp, se: StructuringElement) -> Result<GrayImage, ImgProcError> {
    if se.width > img.width() || se.height > img.height() {
        return Err(ImgProcError::ElementTooLarge {
            se: (se.width, se.height),
            image: img.dims(),
        });
    }
    let out = match op {
        MorphOp::Erode => rank_filter(img, se, u8::min),
        MorphOp::Dilate => rank_filter(img, se, u8::max),
        MorphOp::Open => rank_filter(&rank_filter(img, se, u8::min), se, u8::max),
        MorphOp::TopHat => {
            let opened = rank_filter(&rank_filter(img, se, u8::min), se, u8::max);
            let data = img
                .data()
                .iter()
                .zip(opened.data())
                .map(|(&a, &b)| a.saturating_sub(b))
                .collect();
            GrayImage::new(img.width(), img.height(), data).expect("same size as input")
        }
    };
    Ok(out)
}

/// Knobs for [`text_cleanup_mask_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextMaskParams {
    pub tophat: StructuringElement,
    pub dilate: StructuringElement,
    /// Overrides the Otsu-derived low level.
    pub low: Option<u8>,
    /// Overrides the high level (default `min(255, 2 * low)`).
    pub high: Option<u8>,
    /// Floor for the derived low level; top-hat responses below it are
    /// treated as background texture.
    pub min_contrast: u8,
}

pub const DEFAULT_MIN_CONTRAST: u8 = 16;

impl Default for TextMaskParams {
    fn default() -> Self {
        Self {
            tophat: StructuringElement { width: 7, height: 7 },
            dilate: StructuringElement { width: 3, height: 3 },
            low: None,
            high: None,
            min_contrast: DEFAULT_MIN_CONTRAST,
        }
    }
}

/// Hysteresis band derived from the top-hat image: `low` is the first
/// level of Otsu's upper class (at least `min_contrast`), `high` doubles it.
pub fn hysteresis_band(tophat: &GrayImage, min_contrast: u8) -> Result<(u8, u8), ImgProcError> {
    let t = otsu_threshold(tophat)?;
    let low = t.saturating_add(1).max(min_contrast);
    Ok((low, low.saturating_mul(2)))
}

pub fn text_cleanup_mask(img: &GrayImage) -> Result<BinaryMask, ImgProcError> {
    text_cleanup_mask_with(img, &TextMaskParams::default())
}

/// Mask of small bright overlay structure (text, markers): top-hat,
/// hysteresis thresholding, then a dilation to recover stroke edges.
pub fn text_cleanup_mask_with(img: &GrayImage, p: &TextMaskParams) -> Result<BinaryMask, ImgProcError> {
    if img.data().iter().all(|&v| v == img.data()[0]) {
        return Err(ImgProcError::ConstantImage);
    }
    let tophat = morphology(img, MorphOp::TopHat, p.tophat)?;

    let (low, high) = match (p.low, p.high) {
        (Some(low), Some(high)) => (low, high),
        (low, high) => {
            let derived = match low {
                Some(low) => Ok((low, low.saturating_mul(2))),
                None => hysteresis_band(&tophat, p.min_contrast),
            };
            match derived {
                Ok((l, h)) => (l, high.unwrap_or(h)),
                // Flat top-hat: nothing small and bright to remove.
                Err(ImgProcError::ConstantImage) => return Ok(BinaryMask::empty(img.width(), img.height())),
                Err(e) => return Err(e),
            }
        }
    };

    let selected = hysteresis_threshold(&tophat, low, high)?;
    let grown = morphology(&selected.to_image(), MorphOp::Dilate, p.dilate)?;
    Ok(BinaryMask::from_image(&grown))
}

pub const DEFAULT_INPAINT_TOL: f64 = 1e-3;
pub const DEFAULT_INPAINT_MAX_ITERS: usize = 500;

/// Harmonic fill: masked pixels are repeatedly set to the mean of their
/// in-image 4-neighbours (Gauss-Seidel sweeps) until the largest update
/// falls below `tol` or `max_iters` sweeps have run. Unmasked pixels are
/// copied through untouched.
pub fn inpaint(
    img: &GrayImage,
    mask: &BinaryMask,
    tol: f64,
    max_iters: usize,
) -> Result<GrayImage, ImgProcError> {
    if mask.dims() != img.dims() {
        return Err(ImgProcError::MaskSize {
            mask: mask.dims(),
            image: img.dims(),
        });
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(ImgProcError::Tolerance(tol));
    }
    let holes: Vec<usize> = (0..mask.bits.len()).filter(|&i| mask.bits[i]).collect();
    if holes.is_empty() {
        return Ok(img.clone());
    }
    if holes.len() == mask.bits.len() {
        return Err(ImgProcError::NoBoundaryData);
    }

    let (w, h) = img.dims();
    let neighbors = |i: usize| {
        let (x, y) = (i % w, i / w);
        let mut n = [usize::MAX; 4];
        if x > 0 {
            n[0] = i - 1;
        }
        if x + 1 < w {
            n[1] = i + 1;
        }
        if y > 0 {
            n[2] = i - w;
        }
        if y + 1 < h {
            n[3] = i + w;
        }
        n
    };

    let mut values: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();

    // Seed holes with the mean of the known pixels bordering them.
    let (mut sum, mut count) = (0.0, 0usize);
    for &i in &holes {
        for j in neighbors(i) {
            if j != usize::MAX && !mask.bits[j] {
                sum += values[j];
                count += 1;
            }
        }
    }
    let seed = if count > 0 {
        sum / count as f64
    } else {
        let known: Vec<f64> = (0..values.len()).filter(|&i| !mask.bits[i]).map(|i| values[i]).collect();
        known.iter().sum::<f64>() / known.len() as f64
    };
    for &i in &holes {
        values[i] = seed;
    }

    for _ in 0..max_iters {
        let mut max_change: f64 = 0.0;
        for &i in &holes {
            let (mut s, mut n) = (0.0, 0u32);
            for j in neighbors(i) {
                if j != usize::MAX {
                    s += values[j];
                    n += 1;
                }
            }
            let v = s / f64::from(n);
            max_change = max_change.max((v - values[i]).abs());
            values[i] = v;
        }
        if max_change < tol {
            break;
        }
    }

    let mut out = img.clone();
    let data = out.data_mut();
    for &i in &holes {
        data[i] = values[i].round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

/// Text-mask extraction followed by inpainting of the masked pixels.
pub fn remove_overlay_text(
    img: &GrayImage,
    params: &TextMaskParams,
    tol: f64,
    max_iters: usize,
) -> Result<(BinaryMask, GrayImage), ImgProcError> {
    let mask = text_cleanup_mask_with(img, params)?;
    if mask.count() == mask.bits.len() {
        return Err(ImgProcError::NoBoundaryData);
    }
    let cleaned = inpaint(img, &mask, tol, max_iters)?;
    Ok((mask, cleaned))
}
