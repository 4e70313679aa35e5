//! Independent reference implementations used as test oracles. They are
//! written for clarity, not speed, and share no code with the crate beyond
//! its plain data types.
#![allow(dead_code)]

use rand::Rng;
use usmask_core::geom::{BBox, CategoryLabel, Detection, GroundTruth};
use usmask_core::image::GrayImage;

// ---------------------------------------------------------------- metrics

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |b: &BBox| (b.x_max() - b.x_min()) * (b.y_max() - b.y_min());
    (inter / (area(a) + area(b) - inter)).clamp(0.0, 1.0)
}

/// Per-detection outcome: `None` when the detection is filtered out,
/// otherwise whether it is a true positive. Also returns the number of
/// ground-truth boxes that take part.
pub fn match_all(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    keep_det: impl Fn(&Detection) -> bool,
    keep_gt: impl Fn(&GroundTruth) -> bool,
) -> (Vec<Option<bool>>, usize) {
    let mut outcome = vec![None; dets.len()];
    let mut frames: Vec<u64> = dets.iter().map(|d| d.frame_index).chain(gts.iter().map(|g| g.frame_index)).collect();
    frames.sort();
    frames.dedup();
    let mut n_gt = 0;
    for f in frames {
        let g_idx: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].frame_index == f && keep_gt(&gts[g])).collect();
        n_gt += g_idx.len();
        let mut d_idx: Vec<usize> = (0..dets.len()).filter(|&d| dets[d].frame_index == f && keep_det(&dets[d])).collect();
        // Highest confidence first, input order among equals.
        d_idx.sort_by(|&a, &b| {
            dets[b]
                .confidence()
                .partial_cmp(&dets[a].confidence())
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut taken = vec![false; gts.len()];
        for d in d_idx {
            let mut best: Option<(usize, f64)> = None;
            for &g in &g_idx {
                if taken[g] || gts[g].category != dets[d].category {
                    continue;
                }
                let iou = box_iou(&dets[d].bbox, &gts[g].bbox);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            outcome[d] = Some(best.is_some());
        }
    }
    (outcome, n_gt)
}

pub fn counts(dets: &[Detection], gts: &[GroundTruth], conf: f64, iou_thr: f64) -> (usize, usize, usize) {
    let (o, n_gt) = match_all(dets, gts, iou_thr, |d| d.confidence() >= conf, |_| true);
    let tp = o.iter().filter(|x| **x == Some(true)).count();
    let fp = o.iter().filter(|x| **x == Some(false)).count();
    (tp, fp, n_gt - tp)
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// 101-point interpolated AP straight from the definition: at each recall
/// level, the best precision reached at that recall or beyond.
pub fn ap(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64, cat: CategoryLabel) -> Option<f64> {
    let (o, n_gt) = match_all(dets, gts, iou_thr, |d| d.category == cat, |g| g.category == cat);
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<usize> = (0..dets.len()).filter(|&i| o[i].is_some()).collect();
    ranked.sort_by(|&a, &b| {
        dets[b]
            .confidence()
            .partial_cmp(&dets[a].confidence())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut pr = Vec::new();
    let mut tp = 0;
    for (rank, &i) in ranked.iter().enumerate() {
        if o[i] == Some(true) {
            tp += 1;
        }
        pr.push((tp as f64 / (rank + 1) as f64, tp as f64 / n_gt as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        total += pr.iter().filter(|(_, rec)| *rec >= r).map(|(p, _)| *p).fold(0.0, f64::max);
    }
    Some(total / 101.0)
}

pub fn map(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> Option<f64> {
    let aps: Vec<f64> = CategoryLabel::ALL.iter().filter_map(|&c| ap(dets, gts, iou_thr, c)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn ap_range(dets: &[Detection], gts: &[GroundTruth]) -> Option<f64> {
    let mut total = 0.0;
    for k in 0..10 {
        total += map(dets, gts, (50 + 5 * k) as f64 / 100.0)?;
    }
    Some(total / 10.0)
}

/// `(conf, p, r, f1, fppi)` per grid point plus the best (conf, f1).
pub fn sweep(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64, grid: &[f64], n_images: usize) -> (Vec<[f64; 5]>, f64, f64) {
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rows: Vec<[f64; 5]> = grid
        .iter()
        .map(|&c| {
            let (tp, fp, fn_) = counts(dets, gts, c, iou_thr);
            let (p, r, f) = prf(tp, fp, fn_);
            [c, p, r, f, fp as f64 / n_images as f64]
        })
        .collect();
    let mut best = rows[0];
    for row in &rows {
        if row[3] > best[3] {
            best = *row;
        }
    }
    (rows, best[0], best[3])
}

/// Random evaluation instance: up to 5 frames with up to 4 ground-truth
/// and 4 predicted boxes each. Predictions are mostly jittered copies of
/// ground truth so IoUs spread over the whole range; confidences are drawn
/// from a coarse set so ties are common.
pub fn random_instance(rng: &mut impl Rng) -> (Vec<Detection>, Vec<GroundTruth>, usize) {
    loop {
        let n_frames = rng.gen_range(1..=5);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for f in 0..n_frames as u64 {
            for _ in 0..rng.gen_range(0..=4) {
                gts.push(GroundTruth::new(f, random_box(rng), random_cat(rng)));
            }
            let frame_gts: Vec<GroundTruth> = gts.iter().filter(|g| g.frame_index == f).copied().collect();
            for _ in 0..rng.gen_range(0..=4) {
                let (bbox, cat) = if !frame_gts.is_empty() && rng.gen_bool(0.75) {
                    let g = frame_gts[rng.gen_range(0..frame_gts.len())];
                    let cat = if rng.gen_bool(0.85) { g.category } else { random_cat(rng) };
                    (jitter(rng, &g.bbox), cat)
                } else {
                    (random_box(rng), random_cat(rng))
                };
                let conf = if rng.gen_bool(0.5) {
                    rng.gen_range(0..=20) as f64 / 20.0
                } else {
                    rng.gen_range(0.0..=1.0)
                };
                dets.push(Detection::new(f, bbox, cat, conf).unwrap());
            }
        }
        if !gts.is_empty() {
            let n_images = n_frames + rng.gen_range(0..3);
            return (dets, gts, n_images);
        }
    }
}

fn random_cat(rng: &mut impl Rng) -> CategoryLabel {
    if rng.gen_bool(0.5) {
        CategoryLabel::Transverse
    } else {
        CategoryLabel::MidSagittal
    }
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let x = rng.gen_range(0..40) as f64;
    let y = rng.gen_range(0..40) as f64;
    let w = rng.gen_range(2..20) as f64;
    let h = rng.gen_range(2..20) as f64;
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn jitter(rng: &mut impl Rng, b: &BBox) -> BBox {
    let mut d = || rng.gen_range(-4..=4) as f64 * 0.5;
    let x0 = b.x_min() + d();
    let y0 = b.y_min() + d();
    let x1 = (b.x_max() + d()).max(x0 + 1.0);
    let y1 = (b.y_max() + d()).max(y0 + 1.0);
    BBox::new(x0, y0, x1, y1).unwrap()
}

// -------------------------------------------------------------- imaging

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap()
}

/// Piecewise-smooth image with a few bright specks: closer to real frames
/// than white noise.
pub fn random_scene(rng: &mut impl Rng, w: usize, h: usize) -> GrayImage {
    let base: u8 = rng.gen_range(20..120);
    let gx: f64 = rng.gen_range(-1.0..1.0);
    let gy: f64 = rng.gen_range(-1.0..1.0);
    let mut img = GrayImage::from_fn(w, h, |x, y| {
        (f64::from(base) + gx * x as f64 + gy * y as f64 + rng.gen_range(-10.0..10.0)).clamp(0.0, 255.0) as u8
    })
    .unwrap();
    for _ in 0..rng.gen_range(0..6) {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        img.set(x, y, rng.gen_range(150..=255));
    }
    img
}

/// Reference mean SSIM: every interior window evaluated directly with the
/// 2-D Gaussian weights written out in full.
pub fn ssim_direct(x: &GrayImage, y: &GrayImage, size: usize, sigma: f64, k1: f64, k2: f64, l: f64) -> f64 {
    let c = (size / 2) as f64;
    let mut w = vec![0.0; size * size];
    for j in 0..size {
        for i in 0..size {
            let (dx, dy) = (i as f64 - c, j as f64 - c);
            w[j * size + i] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= norm);
    let (c1, c2) = ((k1 * l).powi(2), (k2 * l).powi(2));
    let (width, height) = x.dims();
    let mut total = 0.0;
    let mut n = 0;
    for oy in 0..=height - size {
        for ox in 0..=width - size {
            let (mut mx, mut my) = (0.0, 0.0);
            for j in 0..size {
                for i in 0..size {
                    let wt = w[j * size + i];
                    mx += wt * f64::from(x.get(ox + i, oy + j));
                    my += wt * f64::from(y.get(ox + i, oy + j));
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for j in 0..size {
                for i in 0..size {
                    let wt = w[j * size + i];
                    let a = f64::from(x.get(ox + i, oy + j)) - mx;
                    let b = f64::from(y.get(ox + i, oy + j)) - my;
                    vx += wt * a * a;
                    vy += wt * b * b;
                    cxy += wt * a * b;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    total / n as f64
}

/// Otsu by exhaustive search, comparing between-class variances as exact
/// rationals `(s0*n1 - s1*n0)^2 / (n0*n1)` by cross-multiplication.
/// Callers keep the pixel total small enough for u128.
pub fn otsu_exhaustive(hist: &[u64; 256]) -> Option<u8> {
    let mut best: Option<(u8, u128, u128)> = None;
    for t in 0..256usize {
        let n0: u128 = hist[..=t].iter().map(|&c| u128::from(c)).sum();
        let n1: u128 = hist[t + 1..].iter().map(|&c| u128::from(c)).sum();
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u128 = (0..=t).map(|v| v as u128 * u128::from(hist[v])).sum();
        let s1: u128 = (t + 1..256).map(|v| v as u128 * u128::from(hist[v])).sum();
        let d = (s0 * n1).abs_diff(s1 * n0);
        let (num, den) = (d * d, n0 * n1);
        if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
            best = Some((t as u8, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

/// Rank filter by brute force over the clamped window.
pub fn rank_naive(img: &GrayImage, sw: usize, sh: usize, max: bool) -> GrayImage {
    let (w, h) = img.dims();
    let (rx, ry) = ((sw / 2) as isize, (sh / 2) as isize);
    GrayImage::from_fn(w, h, |x, y| {
        let mut acc = if max { 0u8 } else { 255u8 };
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let v = img.get(xx, yy);
                acc = if max { acc.max(v) } else { acc.min(v) };
            }
        }
        acc
    })
    .unwrap()
}

/// Harmonic fill by a dense linear solve: for every hole pixel,
/// `deg * u_i - sum(hole neighbours) = sum(known neighbours)`.
pub fn harmonic_dense(img: &GrayImage, hole: &dyn Fn(usize, usize) -> bool) -> Vec<(usize, usize, f64)> {
    let (w, h) = img.dims();
    let holes: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| hole(x, y)).collect();
    let index = |x: usize, y: usize| holes.iter().position(|&p| p == (x, y));
    let n = holes.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (i, &(x, y)) in holes.iter().enumerate() {
        let mut nbrs = Vec::new();
        if x > 0 {
            nbrs.push((x - 1, y));
        }
        if x + 1 < w {
            nbrs.push((x + 1, y));
        }
        if y > 0 {
            nbrs.push((x, y - 1));
        }
        if y + 1 < h {
            nbrs.push((x, y + 1));
        }
        a[i][i] = nbrs.len() as f64;
        for (nx, ny) in nbrs {
            match index(nx, ny) {
                Some(j) => a[i][j] -= 1.0,
                None => a[i][n] += f64::from(img.get(nx, ny)),
            }
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..n {
        let pivot = (col..n).max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap()).unwrap();
        a.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    let pivot_row = a[col].clone();
                    for (dst, src) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                        *dst -= f * src;
                    }
                }
            }
        }
    }
    holes.iter().enumerate().map(|(i, &(x, y))| (x, y, a[i][n] / a[i][i])).collect()
}
