//! Mean structural similarity (MSSIM) between two grayscale frames.
//!
//! Local statistics use a normalized Gaussian window evaluated only at
//! fully interior positions. The window is separable, so moments are
//! accumulated with a horizontal pass followed by a vertical pass; the
//! final mean is a fixed row-major sequential sum.

use thiserror::Error;

pub use crate::image::GrayImage;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsimError {
    #[error("window size {0} must be odd and at least 3")]
    WindowSize(usize),
    #[error("gaussian sigma {0} must be positive and finite")]
    Sigma(f64),
    #[error("downsample factor must be at least 1")]
    Downsample,
    #[error("stability constants k1={k1}, k2={k2} and dynamic range {range} must be positive")]
    Constants { k1: f64, k2: f64, range: f64 },
    #[error("image sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("window of {window} px does not fit a {width}x{height} image")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub window_size: usize,
    pub gaussian_sigma: f64,
    pub downsample: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            window_size: 11,
            gaussian_sigma: 1.5,
            downsample: 1,
        }
    }
}

impl SsimParams {
    pub fn with_downsample(mut self, factor: usize) -> Self {
        self.downsample = factor;
        self
    }

    pub fn validate(&self) -> Result<(), SsimError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.k1) && positive(self.k2) && positive(self.dynamic_range)) {
            return Err(SsimError::Constants {
                k1: self.k1,
                k2: self.k2,
                range: self.dynamic_range,
            });
        }
        if self.downsample < 1 {
            return Err(SsimError::Downsample);
        }
        check_window(self.window_size, self.gaussian_sigma)
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

fn check_window(size: usize, sigma: f64) -> Result<(), SsimError> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(SsimError::WindowSize(size));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(SsimError::Sigma(sigma));
    }
    Ok(())
}

/// Square Gaussian weighting window; entries sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWindow {
    size: usize,
    profile: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianWindow {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major `size x size` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.size + x]
    }

    /// The normalized 1-D factor; `weight(x, y) == profile[x] * profile[y]`.
    pub fn profile(&self) -> &[f64] {
        &self.profile
    }
}

pub fn gaussian_window(size: usize, sigma: f64) -> Result<GaussianWindow, SsimError> {
    check_window(size, sigma)?;
    let center = (size / 2) as f64;
    let mut profile: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = profile.iter().sum();
    profile.iter_mut().for_each(|v| *v /= total);

    let weights = (0..size * size)
        .map(|k| profile[k / size] * profile[k % size])
        .collect();
    Ok(GaussianWindow {
        size,
        profile,
        weights,
    })
}

/// Block-mean downsampling; partial blocks at the right and bottom edges
/// average whatever pixels they cover. Means are rounded half up.
pub fn downsample_mean(img: &GrayImage, factor: usize) -> Result<GrayImage, SsimError> {
    if factor < 1 {
        return Err(SsimError::Downsample);
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (w, h) = img.dims();
    let ow = w.div_ceil(factor);
    let oh = h.div_ceil(factor);
    let mut out = Vec::with_capacity(ow * oh);
    for by in 0..oh {
        let y0 = by * factor;
        let y1 = (y0 + factor).min(h);
        for bx in 0..ow {
            let x0 = bx * factor;
            let x1 = (x0 + factor).min(w);
            let mut sum = 0u64;
            for y in y0..y1 {
                sum += img.row(y)[x0..x1].iter().map(|&v| u64::from(v)).sum::<u64>();
            }
            let count = ((y1 - y0) * (x1 - x0)) as u64;
            out.push(((sum + count / 2) / count) as u8);
        }
    }
    Ok(GrayImage::new(ow, oh, out).expect("block grid matches output size"))
}

/// Gaussian-weighted first and second moments at every interior window
/// position, laid out row-major over the `(w - n + 1) x (h - n + 1)` grid.
struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    xx: Vec<f64>,
    yy: Vec<f64>,
    xy: Vec<f64>,
}

fn window_moments(x: &GrayImage, y: &GrayImage, g: &[f64]) -> Moments {
    let (w, h) = x.dims();
    let n = g.len();
    let vw = w - n + 1;
    let vh = h - n + 1;

    // Horizontal pass over every row.
    let len = h * vw;
    let mut hx = vec![0.0; len];
    let mut hy = vec![0.0; len];
    let mut hxx = vec![0.0; len];
    let mut hyy = vec![0.0; len];
    let mut hxy = vec![0.0; len];
    for row in 0..h {
        let rx = x.row(row);
        let ry = y.row(row);
        for col in 0..vw {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (k, &wk) in g.iter().enumerate() {
                let a = f64::from(rx[col + k]);
                let b = f64::from(ry[col + k]);
                sx += wk * a;
                sy += wk * b;
                sxx += wk * (a * a);
                syy += wk * (b * b);
                sxy += wk * (a * b);
            }
            let i = row * vw + col;
            hx[i] = sx;
            hy[i] = sy;
            hxx[i] = sxx;
            hyy[i] = syy;
            hxy[i] = sxy;
        }
    }

    let vertical = |src: &[f64]| {
        let mut out = vec![0.0; vh * vw];
        for row in 0..vh {
            for col in 0..vw {
                let mut s = 0.0;
                for (k, &wk) in g.iter().enumerate() {
                    s += wk * src[(row + k) * vw + col];
                }
                out[row * vw + col] = s;
            }
        }
        out
    };

    Moments {
        mx: vertical(&hx),
        my: vertical(&hy),
        xx: vertical(&hxx),
        yy: vertical(&hyy),
        xy: vertical(&hxy),
    }
}

/// Mean SSIM over all interior window positions.
pub fn mssim(x: &GrayImage, y: &GrayImage, p: &SsimParams) -> Result<f64, SsimError> {
    p.validate()?;
    if x.dims() != y.dims() {
        return Err(SsimError::DimensionMismatch(x.dims(), y.dims()));
    }
    let x = downsample_mean(x, p.downsample)?;
    let y = downsample_mean(y, p.downsample)?;
    let (w, h) = x.dims();
    if p.window_size > w || p.window_size > h {
        return Err(SsimError::WindowTooLarge {
            window: p.window_size,
            width: w,
            height: h,
        });
    }

    let window = gaussian_window(p.window_size, p.gaussian_sigma)?;
    let m = window_moments(&x, &y, window.profile());
    let (c1, c2) = (p.c1(), p.c2());

    let mut total = 0.0;
    for i in 0..m.mx.len() {
        let (mx, my) = (m.mx[i], m.my[i]);
        let var_x = (m.xx[i] - mx * mx).max(0.0);
        let var_y = (m.yy[i] - my * my).max(0.0);
        let cov = m.xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
    }
    Ok(total / m.mx.len() as f64)
}
