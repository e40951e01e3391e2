//! Dynamics-aware image reward: find the regions that changed between two
//! frames, match generated regions to real ones, and score the matches.
//! Also the compressibility rewards.

use std::collections::VecDeque;
use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x1 > x0 && y1 > y0);
        BBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection(&self, o: &BBox) -> usize {
        let w = self.x1.min(o.x1).saturating_sub(self.x0.max(o.x0));
        let h = self.y1.min(o.y1).saturating_sub(self.y0.max(o.y0));
        w * h
    }

    pub fn union_box(&self, o: &BBox) -> BBox {
        BBox { x0: self.x0.min(o.x0), y0: self.y0.min(o.y0), x1: self.x1.max(o.x1), y1: self.y1.max(o.y1) }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    /// Minimum IoU for a matched pair to count.
    pub tau_iou: f64,
    pub lambda_mse: f64,
    /// Penalty per unmatched region.
    pub gamma_pen: f64,
    pub blur_sigma: f64,
    pub blur_ksize: usize,
    pub diff_threshold: f64,
    pub closing_size: usize,
    pub nms_iou: f64,
    pub min_area: usize,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            tau_iou: 0.3,
            lambda_mse: 1.0,
            gamma_pen: 0.5,
            blur_sigma: 1.0,
            blur_ksize: 5,
            diff_threshold: 0.1,
            closing_size: 3,
            nms_iou: 0.5,
            min_area: 4,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.lambda_mse, self.gamma_pen, self.diff_threshold, self.nms_iou];
        if nonneg.iter().any(|v| !(*v >= 0.0)) || !(self.tau_iou > 0.0 && self.tau_iou <= 1.0) {
            return Err(Error::Config("reward parameters must be nonnegative with τ in (0, 1]".into()));
        }
        if self.closing_size % 2 == 0 {
            return Err(Error::BadKernel(format!("closing size {} is not odd", self.closing_size)));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    if ksize % 2 == 0 || !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::BadKernel(format!("ksize {ksize} must be odd and σ {sigma} positive")));
    }
    let r = (ksize / 2) as f64;
    let taps: Vec<f64> = (0..ksize).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / s).collect())
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(gray: &[f64], width: usize, height: usize, sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    if gray.len() != width * height {
        return Err(Error::DimensionMismatch(format!("{} values for {width}×{height}", gray.len())));
    }
    let k = gaussian_kernel(sigma, ksize)?;
    let r = (ksize / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; gray.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k.iter().enumerate().map(|(i, w)| w * gray[y * width + clamp(x as isize + i as isize - r, width)]).sum();
        }
    }
    let mut out = vec![0.0; gray.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k.iter().enumerate().map(|(i, w)| w * tmp[clamp(y as isize + i as isize - r, height) * width + x]).sum();
        }
    }
    Ok(out)
}

fn morph(mask: &[bool], width: usize, height: usize, size: usize, dilate: bool) -> Vec<bool> {
    let r = (size / 2) as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut hit = !dilate;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    // pixels outside the raster are ignored
                    if yy < 0 || xx < 0 || yy >= height as isize || xx >= width as isize {
                        continue;
                    }
                    let v = mask[yy as usize * width + xx as usize];
                    if dilate && v {
                        hit = true;
                        break 'win;
                    }
                    if !dilate && !v {
                        hit = false;
                        break 'win;
                    }
                }
            }
            out[y as usize * width + x as usize] = hit;
        }
    }
    out
}

/// Dilation followed by erosion with a square structuring element.
pub fn closing(mask: &[bool], width: usize, height: usize, size: usize) -> Vec<bool> {
    let d = morph(mask, width, height, size, true);
    morph(&d, width, height, size, false)
}

/// 4-connected components as (bounding box, pixel count), in raster order
/// of each component's first pixel.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<(BBox, usize)> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1, mut n) = (usize::MAX, usize::MAX, 0, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / width, i % width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            n += 1;
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < width {
                push(i + 1);
            }
            if y > 0 {
                push(i - width);
            }
            if y + 1 < height {
                push(i + width);
            }
        }
        out.push((BBox::new(x0, y0, x1, y1), n));
    }
    out
}

/// Greedy suppression by descending area (ties by `(y0, x0)`); a box is
/// dropped when its IoU with a kept box exceeds `thresh`.
pub fn nms(boxes: &[BBox], thresh: f64) -> Vec<BBox> {
    let mut order: Vec<BBox> = boxes.to_vec();
    order.sort_by(|a, b| b.area().cmp(&a.area()).then((a.y0, a.x0, a.y1, a.x1).cmp(&(b.y0, b.x0, b.y1, b.x1))));
    let mut kept: Vec<BBox> = Vec::new();
    for b in order {
        if kept.iter().all(|k| iou(k, &b) <= thresh) {
            kept.push(b);
        }
    }
    kept
}

/// Thresholded, closed difference mask between two rasters.
pub fn change_mask(a: &Raster, b: &Raster, p: &RewardParams) -> Result<Vec<bool>> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!("{}×{} vs {}×{}", a.width, a.height, b.width, b.height)));
    }
    let (w, h) = (a.width, a.height);
    let ga = gaussian_blur(&a.to_gray(), w, h, p.blur_sigma, p.blur_ksize)?;
    let gb = gaussian_blur(&b.to_gray(), w, h, p.blur_sigma, p.blur_ksize)?;
    let mask: Vec<bool> = ga.iter().zip(&gb).map(|(x, y)| (x - y).abs() > p.diff_threshold).collect();
    Ok(closing(&mask, w, h, p.closing_size))
}

/// Boxes around the regions that changed from `a` to `b`, sorted by
/// `(y0, x0)`.
pub fn detect_regions(a: &Raster, b: &Raster, p: &RewardParams) -> Result<Vec<BBox>> {
    let mask = change_mask(a, b, p)?;
    let boxes: Vec<BBox> =
        connected_components(&mask, a.width, a.height).into_iter().filter(|(_, n)| *n >= p.min_area).map(|(b, _)| b).collect();
    let mut kept = nms(&boxes, p.nms_iou);
    kept.sort_by_key(|b| (b.y0, b.x0, b.y1, b.x1));
    Ok(kept)
}

pub fn pairwise_iou(a: &[BBox], b: &[BBox]) -> Vec<Vec<f64>> {
    a.iter().map(|x| b.iter().map(|y| iou(x, y)).collect()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column matched to row `i`, if any.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.row_to_col.iter().enumerate().filter_map(|(i, c)| c.map(|j| (i, j))).collect()
    }
}

/// Minimum-cost one-to-one assignment of `min(n, m)` pairs (shortest
/// augmenting paths with potentials). Ties resolve toward lower indices.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if n == 0 || m == 0 {
        return Ok(Assignment { row_to_col: vec![None; n], cost: 0.0 });
    }
    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| if transpose { cost[j][i] } else { cost[i][j] };

    // 1-indexed potentials; p[j] is the row matched to column j
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![None; n];
    for j in 1..=cols {
        if p[j] != 0 {
            let (r, c) = if transpose { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) };
            row_to_col[r] = Some(c);
        }
    }
    let cost = row_to_col.iter().enumerate().filter_map(|(i, c)| c.map(|j| cost[i][j])).sum();
    Ok(Assignment { row_to_col, cost })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub label: usize,
    pub gen: usize,
    pub iou: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub reward: f64,
    pub label_boxes: Vec<BBox>,
    pub gen_boxes: Vec<BBox>,
    pub matches: Vec<MatchPair>,
}

/// Mean squared error over `region` of RGB scaled to [0, 1].
pub fn region_mse(a: &Raster, b: &Raster, region: &BBox) -> f64 {
    let mut s = 0.0;
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            let (pa, pb) = (a.pixel(y, x), b.pixel(y, x));
            for c in 0..3 {
                let d = (pa[c] as f64 - pb[c] as f64) / 255.0;
                s += d * d;
            }
        }
    }
    s / (region.area() * 3) as f64
}

/// `(Σ_M (IoU − λ·mse) − γ·(n_label + n_gen − 2|M|)) / max(1, min(n_label, n_gen))`.
pub fn combine(matches: &[(f64, f64)], n_label: usize, n_gen: usize, p: &RewardParams) -> f64 {
    let score = matches.iter().fold(0.0, |s, (i, m)| s + (i - p.lambda_mse * m));
    let unmatched = (n_label + n_gen - 2 * matches.len()) as f64;
    (score - p.gamma_pen * unmatched) / (n_label.min(n_gen).max(1)) as f64
}

/// Scores a generated next frame against the real one, relative to the
/// current frame.
pub fn dynamic_reward_report(x_t: &Raster, x_gen: &Raster, x_real: &Raster, p: &RewardParams) -> Result<RewardReport> {
    if !x_t.same_dims(x_gen) || !x_t.same_dims(x_real) {
        return Err(Error::DimensionMismatch("reward rasters differ in size".into()));
    }
    let label_boxes = detect_regions(x_t, x_real, p)?;
    let gen_boxes = detect_regions(x_t, x_gen, p)?;
    let ious = pairwise_iou(&label_boxes, &gen_boxes);
    let neg: Vec<Vec<f64>> = ious.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let assignment = hungarian(&neg)?;
    let matches: Vec<MatchPair> = assignment
        .pairs()
        .into_iter()
        .filter(|&(i, j)| ious[i][j] >= p.tau_iou)
        .map(|(i, j)| {
            let region = label_boxes[i].union_box(&gen_boxes[j]);
            MatchPair { label: i, gen: j, iou: ious[i][j], mse: region_mse(x_real, x_gen, &region) }
        })
        .collect();
    let pairs: Vec<(f64, f64)> = matches.iter().map(|m| (m.iou, m.mse)).collect();
    let reward = combine(&pairs, label_boxes.len(), gen_boxes.len(), p);
    Ok(RewardReport { reward, label_boxes, gen_boxes, matches })
}

pub fn dynamic_reward(x_t: &Raster, x_gen: &Raster, x_real: &Raster, p: &RewardParams) -> Result<f64> {
    dynamic_reward_report(x_t, x_gen, x_real, p).map(|r| r.reward)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressSign {
    Compress,
    Incompress,
}

pub const COMPRESSION_LEVEL: u32 = 6;

/// `∓ c / c_raw` where `c` is the deflate size of the raw RGB bytes.
pub fn compressibility_reward(x: &Raster, sign: CompressSign) -> f64 {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(COMPRESSION_LEVEL));
    enc.write_all(&x.data).expect("writing to a Vec cannot fail");
    let c = enc.finish().expect("writing to a Vec cannot fail").len() as f64;
    let ratio = c / x.data.len().max(1) as f64;
    match sign {
        CompressSign::Compress => -ratio,
        CompressSign::Incompress => ratio,
    }
}

#[cfg(test)]
mod tests;
