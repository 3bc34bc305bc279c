//! Evaluation protocols: mask IoU, center-point and golden-standard
//! iterative clicking, and boundary precision/recall on Sobel edges.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, ColorField, LabelMap, CHANNELS};
use crate::mask::BinaryMask;
use crate::prompt::{prompt_mask, PromptPoint, DEFAULT_THRESHOLD};

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Centroid of the set pixels, snapped to the nearest set pixel
/// (ties resolved in row-major order).
pub fn center_point(mask: &BinaryMask) -> Result<PromptPoint> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let mut best: Option<(f64, PromptPoint)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !mask.get(x, y) {
                continue;
            }
            let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            if best.map_or(true, |(b, _)| d < b) {
                best = Some((d, PromptPoint::new(x, y)));
            }
        }
    }
    Ok(best.expect("mask has at least one pixel").1)
}

/// 8-connected components of the set pixels, each as a mask, in order of
/// their first pixel (row-major).
pub fn connected_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits()[start] || seen[start] {
            continue;
        }
        let mut comp = BinaryMask::empty(w, h);
        seen[start] = true;
        queue.push_back(start);
        while let Some(j) = queue.pop_front() {
            let (x, y) = ((j % w) as isize, (j / w) as isize);
            comp.set(x as usize, y as usize, true);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let k = ny as usize * w + nx as usize;
                    if mask.bits()[k] && !seen[k] {
                        seen[k] = true;
                        queue.push_back(k);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Next golden-standard click: the center of the largest connected region
/// of ground truth not yet covered by the prediction.
pub fn next_golden_point(gt: &BinaryMask, pred: &BinaryMask) -> Result<PromptPoint> {
    let uncovered = gt.difference(pred)?;
    let components = connected_components(&uncovered);
    // Components come out in first-pixel order, so keeping the first of
    // equal-sized ones breaks ties by smallest row-major first pixel.
    let mut largest: Option<(usize, &BinaryMask)> = None;
    for c in &components {
        let n = c.count();
        if largest.map_or(true, |(m, _)| n > m) {
            largest = Some((n, c));
        }
    }
    let (_, comp) = largest.ok_or(Error::FullyCovered)?;
    center_point(comp)
}

/// Per-instance IoU after each click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceClicks {
    pub instance: u32,
    pub area: usize,
    pub clicks: Vec<PromptPoint>,
    pub iou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickEvaluation {
    pub instances: Vec<InstanceClicks>,
    /// `mean_iou[k]` is the mean over instances after `k + 1` clicks.
    pub mean_iou: Vec<f64>,
}

/// Golden-standard iterative prompting. The first click is the center of
/// each ground-truth mask; later clicks go to the center of the largest
/// uncovered region. Once an instance is fully covered, its last IoU is
/// carried forward. With no instances, `mean_iou` is empty.
pub fn iterative_prompt_eval(field: &ColorField, labels: &LabelMap, max_clicks: usize) -> Result<ClickEvaluation> {
    iterative_prompt_eval_with(field, labels, max_clicks, DEFAULT_THRESHOLD)
}

pub fn iterative_prompt_eval_with(
    field: &ColorField,
    labels: &LabelMap,
    max_clicks: usize,
    threshold: f64,
) -> Result<ClickEvaluation> {
    if max_clicks < 1 {
        return Err(Error::InvalidArgument("max_clicks ≥ 1 required".into()));
    }
    field.same_dims(labels)?;
    let mut instances = Vec::with_capacity(labels.instance_count());
    for id in 1..=labels.instance_count() as u32 {
        let gt = labels.mask_of(id);
        let mut clicks = vec![center_point(&gt)?];
        let mut pred = prompt_mask(field, &clicks, threshold)?;
        let mut iou = vec![mask_iou(&gt, &pred)?];
        while iou.len() < max_clicks {
            match next_golden_point(&gt, &pred) {
                Ok(p) => {
                    clicks.push(p);
                    pred = prompt_mask(field, &clicks, threshold)?;
                    iou.push(mask_iou(&gt, &pred)?);
                }
                Err(Error::FullyCovered) => {
                    let last = *iou.last().expect("one click recorded");
                    iou.push(last);
                }
                Err(e) => return Err(e),
            }
        }
        instances.push(InstanceClicks {
            instance: id,
            area: gt.count(),
            clicks,
            iou,
        });
    }
    let mean_iou = if instances.is_empty() {
        Vec::new()
    } else {
        (0..max_clicks)
            .map(|k| instances.iter().map(|r| r.iou[k]).sum::<f64>() / instances.len() as f64)
            .collect()
    };
    Ok(ClickEvaluation { instances, mean_iou })
}

/// Sobel strengths and the thinned (non-max suppressed) edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub strength: Vec<f64>,
    pub thinned: Vec<bool>,
}

impl EdgeMap {
    /// Builds an edge map from explicit scores; every positive score is
    /// treated as a thinned edge pixel.
    pub fn from_scores(width: usize, height: usize, strength: Vec<f64>) -> Result<Self> {
        if strength.len() != width * height {
            return Err(Error::InvalidArgument("score grid has the wrong size".into()));
        }
        let thinned = strength.iter().map(|&s| s > 0.0).collect();
        Ok(Self {
            width,
            height,
            strength,
            thinned,
        })
    }

    pub fn thinned_mask(&self) -> BinaryMask {
        BinaryMask::new(self.width, self.height, self.thinned.clone()).expect("valid dims")
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Per-channel 3×3 Sobel (replicated borders), L2 strength over the six
/// channel derivatives, orientation from the channel-summed derivatives,
/// and non-maximum suppression along the quantized gradient direction.
pub fn edges_from_field(field: &ColorField) -> EdgeMap {
    let (w, h) = (field.width(), field.height());
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut strength = vec![0.0; w * h];
    let mut gx_sum = vec![0.0; w * h];
    let mut gy_sum = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut gx = [0.0; CHANNELS];
            let mut gy = [0.0; CHANNELS];
            for ky in 0..3 {
                for kx in 0..3 {
                    let sx = clamp(x as isize + kx as isize - 1, w);
                    let sy = clamp(y as isize + ky as isize - 1, h);
                    let p = field.at(sx, sy);
                    for c in 0..CHANNELS {
                        gx[c] += SOBEL_X[ky][kx] * p[c];
                        gy[c] += SOBEL_Y[ky][kx] * p[c];
                    }
                }
            }
            let j = y * w + x;
            strength[j] = (0..CHANNELS)
                .map(|c| gx[c] * gx[c] + gy[c] * gy[c])
                .sum::<f64>()
                .sqrt();
            gx_sum[j] = gx.iter().sum();
            gy_sum[j] = gy.iter().sum();
        }
    }

    let mut thinned = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let j = y * w + x;
            let s = strength[j];
            if s <= 0.0 {
                continue;
            }
            let (dx, dy) = quantized_direction(gx_sum[j], gy_sum[j]);
            let neighbor = |dx: isize, dy: isize| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    0.0
                } else {
                    strength[ny as usize * w + nx as usize]
                }
            };
            thinned[j] = s >= neighbor(dx, dy) && s >= neighbor(-dx, -dy);
        }
    }
    EdgeMap {
        width: w,
        height: h,
        strength,
        thinned,
    }
}

/// Gradient direction rounded to one of the four neighbor axes (0°, 45°,
/// 90°, 135°), returned as a pixel step.
fn quantized_direction(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (1, 0)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

/// Label boundaries: pixels with a 4-neighbor of a different id.
pub fn boundary_mask(labels: &LabelMap) -> BinaryMask {
    let (w, h) = (labels.width(), labels.height());
    BinaryMask::from_fn(w, h, |x, y| {
        let id = labels.at(x, y);
        (x > 0 && labels.at(x - 1, y) != id)
            || (x + 1 < w && labels.at(x + 1, y) != id)
            || (y > 0 && labels.at(x, y - 1) != id)
            || (y + 1 < h && labels.at(x, y + 1) != id)
    })
}

/// Default matching tolerance: 0.75% of the image diagonal.
pub fn default_tolerance(width: usize, height: usize) -> f64 {
    0.0075 * ((width * width + height * height) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrSample {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall samples as the score threshold sweeps high to low.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve {
    pub samples: Vec<PrSample>,
}

/// Sweeps every distinct score of the thinned edges from high to low. At
/// each step the newly admitted edge pixels are matched, nearest first, to
/// ground-truth pixels not matched yet and within `tolerance`. A prediction
/// without edges yields a single zero sample.
pub fn edge_pr_curve(pred: &EdgeMap, gt_edges: &BinaryMask, tolerance: f64) -> Result<PrCurve> {
    ensure_same_dims(pred.width, pred.height, gt_edges.width(), gt_edges.height())?;
    let w = pred.width;
    let gt: Vec<(usize, usize)> = (0..w * pred.height)
        .filter(|&j| gt_edges.bits()[j])
        .map(|j| (j % w, j / w))
        .collect();
    if gt.is_empty() {
        return Err(Error::InvalidArgument("ground truth has no edge pixels".into()));
    }

    let mut candidates: Vec<(f64, usize)> = (0..w * pred.height)
        .filter(|&j| pred.thinned[j])
        .map(|j| (pred.strength[j], j))
        .collect();
    if candidates.is_empty() {
        return Ok(PrCurve {
            samples: vec![PrSample {
                threshold: 0.0,
                recall: 0.0,
                precision: 0.0,
            }],
        });
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let reach = tolerance.max(0.0);
    let r = reach.floor() as isize;
    let mut gt_index = vec![usize::MAX; w * pred.height];
    for (k, &(x, y)) in gt.iter().enumerate() {
        gt_index[y * w + x] = k;
    }
    let mut gt_matched = vec![false; gt.len()];
    let (mut admitted, mut matched) = (0usize, 0usize);
    let mut samples = Vec::new();

    let mut start = 0;
    while start < candidates.len() {
        let level = candidates[start].0;
        let mut end = start;
        while end < candidates.len() && candidates[end].0 == level {
            end += 1;
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for &(_, j) in &candidates[start..end] {
            let (px, py) = ((j % w) as isize, (j / w) as isize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (gx, gy) = (px + dx, py + dy);
                    if gx < 0 || gy < 0 || gx >= w as isize || gy >= pred.height as isize {
                        continue;
                    }
                    let k = gt_index[gy as usize * w + gx as usize];
                    if k == usize::MAX || gt_matched[k] {
                        continue;
                    }
                    let d = ((dx * dx + dy * dy) as f64).sqrt();
                    if d <= reach {
                        pairs.push((d, j, k));
                    }
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut pred_used = std::collections::HashSet::new();
        for (_, j, k) in pairs {
            if gt_matched[k] || pred_used.contains(&j) {
                continue;
            }
            gt_matched[k] = true;
            pred_used.insert(j);
            matched += 1;
        }
        admitted += end - start;
        samples.push(PrSample {
            threshold: level,
            recall: matched as f64 / gt.len() as f64,
            precision: matched as f64 / admitted as f64,
        });
        start = end;
    }
    Ok(PrCurve { samples })
}

pub const AP_GRID_POINTS: usize = 101;

/// Mean interpolated precision over a uniform 101-point recall grid on
/// `[0, r_max]`. Precision at grid recall `r` is the best precision among
/// samples reaching at least `r`, or 0 if none does.
pub fn edge_ap_at_recall(curve: &PrCurve, r_max: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..AP_GRID_POINTS {
        let r = r_max * k as f64 / (AP_GRID_POINTS - 1) as f64;
        let p = curve
            .samples
            .iter()
            .filter(|s| s.recall >= r)
            .map(|s| s.precision)
            .fold(0.0, f64::max);
        total += p;
    }
    total / AP_GRID_POINTS as f64
}
