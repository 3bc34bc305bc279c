//! Point-prompted mask extraction from a color field.
//!
//! Each prompt point yields a query color (a Gaussian-weighted average of the
//! field around the point), a similarity map `min(1, 1/‖F − q‖)` rescaled to
//! `[0, 1]`, and a joint bilateral smoothing of that map guided by the field.
//! The per-point maps are merged by per-pixel maximum and thresholded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{color_distance, ensure_same_dims, min_max, squared_distance, ColorField, Rgb, CHANNELS};
use crate::mask::BinaryMask;

/// Default mask threshold on the merged similarity map.
pub const DEFAULT_THRESHOLD: f64 = 3.0 / 255.0;
/// Query Gaussian standard deviation as a fraction of (W, H).
pub const QUERY_SIGMA_FRACTION: f64 = 0.01;
pub const BILATERAL_WINDOW: usize = 9;
pub const BILATERAL_SIGMA_SPATIAL: f64 = BILATERAL_WINDOW as f64 / 4.0;
pub const BILATERAL_SIGMA_RANGE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: usize,
    pub y: usize,
}

impl PromptPoint {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        if self.x >= width || self.y >= height {
            return Err(Error::OutOfBounds {
                x: self.x,
                y: self.y,
                width,
                height,
            });
        }
        Ok(())
    }
}

/// H×W scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SimilarityMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Min-max rescale to `[0, 1]`; a constant map becomes all ones.
    pub fn normalized(mut self) -> Self {
        let (lo, hi) = min_max(&self.values);
        if hi > lo {
            let span = hi - lo;
            for v in &mut self.values {
                *v = ((*v - lo) / span).clamp(0.0, 1.0);
            }
        } else {
            self.values.iter_mut().for_each(|v| *v = 1.0);
        }
        self
    }

    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.values.iter().map(|&v| v > threshold).collect(),
        )
        .expect("map dimensions are valid")
    }
}

/// Gaussian support radius for a given sigma: ±3σ, at least one pixel.
fn gaussian_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

/// Half-extent in pixels `(x, y)` of the query window for a W×H field.
pub fn query_radius(width: usize, height: usize) -> (usize, usize) {
    (
        gaussian_radius(QUERY_SIGMA_FRACTION * width as f64),
        gaussian_radius(QUERY_SIGMA_FRACTION * height as f64),
    )
}

/// Gaussian-weighted average color around `point` with σ = 0.01·(W, H),
/// truncated at ±3σ per axis.
pub fn query_vector(field: &ColorField, point: PromptPoint) -> Result<Rgb> {
    let (w, h) = (field.width(), field.height());
    point.check_bounds(w, h)?;
    let sx = QUERY_SIGMA_FRACTION * w as f64;
    let sy = QUERY_SIGMA_FRACTION * h as f64;
    let rx = gaussian_radius(sx) as isize;
    let ry = gaussian_radius(sy) as isize;

    let mut acc = [0.0; CHANNELS];
    let mut total = 0.0;
    for dy in -ry..=ry {
        let y = point.y as isize + dy;
        if y < 0 || y >= h as isize {
            continue;
        }
        let wy = (-(dy * dy) as f64 / (2.0 * sy * sy)).exp();
        for dx in -rx..=rx {
            let x = point.x as isize + dx;
            if x < 0 || x >= w as isize {
                continue;
            }
            let wt = wy * (-(dx * dx) as f64 / (2.0 * sx * sx)).exp();
            let p = field.at(x as usize, y as usize);
            for c in 0..CHANNELS {
                acc[c] += wt * p[c];
            }
            total += wt;
        }
    }
    Ok([acc[0] / total, acc[1] / total, acc[2] / total])
}

/// Raw similarity `min(1, 1/‖F − q‖)`; distances ≤ 1 map to exactly 1.
pub fn raw_similarity(field: &ColorField, query: &Rgb) -> SimilarityMap {
    let values = (0..field.len_pixels())
        .map(|j| {
            let d = color_distance(&field.pixel(j), query);
            if d <= 1.0 {
                1.0
            } else {
                1.0 / d
            }
        })
        .collect();
    SimilarityMap {
        width: field.width(),
        height: field.height(),
        values,
    }
}

/// Raw similarity followed by min-max normalization.
pub fn similarity_map(field: &ColorField, query: &Rgb) -> SimilarityMap {
    raw_similarity(field, query).normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilateralParams {
    pub window: usize,
    pub sigma_spatial: f64,
    pub sigma_range: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            window: BILATERAL_WINDOW,
            sigma_spatial: BILATERAL_SIGMA_SPATIAL,
            sigma_range: BILATERAL_SIGMA_RANGE,
        }
    }
}

/// Joint bilateral filter of `map`, with range weights taken from `guide`.
/// Border pixels average over the neighbors that exist.
pub fn joint_bilateral_smooth(
    map: &SimilarityMap,
    guide: &ColorField,
    params: &BilateralParams,
) -> Result<SimilarityMap> {
    ensure_same_dims(guide.width(), guide.height(), map.width, map.height)?;
    if params.window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "bilateral window must be odd, got {}",
            params.window
        )));
    }
    let (w, h) = (map.width, map.height);
    let r = (params.window / 2) as isize;
    let inv_2s2 = 1.0 / (2.0 * params.sigma_spatial * params.sigma_spatial);
    let inv_2r2 = 1.0 / (2.0 * params.sigma_range * params.sigma_range);

    let side = params.window;
    let mut spatial = vec![0.0; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            spatial[((dy + r) as usize) * side + (dx + r) as usize] =
                (-((dx * dx + dy * dy) as f64) * inv_2s2).exp();
        }
    }

    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = guide.at(x as usize, y as usize);
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let gs = spatial[((dy + r) as usize) * side + (dx + r) as usize];
                    let gr = (-squared_distance(&guide.at(xx as usize, yy as usize), &center) * inv_2r2).exp();
                    let wt = gs * gr;
                    num += wt * map.values[yy as usize * w + xx as usize];
                    den += wt;
                }
            }
            out[y as usize * w + x as usize] = num / den;
        }
    }
    Ok(SimilarityMap {
        width: w,
        height: h,
        values: out,
    })
}

/// Smoothed, normalized similarity for a single prompt.
pub fn point_similarity(field: &ColorField, point: PromptPoint, params: &BilateralParams) -> Result<SimilarityMap> {
    let q = query_vector(field, point)?;
    let sim = similarity_map(field, &q);
    joint_bilateral_smooth(&sim, field, params)
}

/// Per-pixel maximum over the per-point maps.
pub fn merged_similarity(
    field: &ColorField,
    points: &[PromptPoint],
    params: &BilateralParams,
) -> Result<SimilarityMap> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("at least one prompt point is required".into()));
    }
    for p in points {
        p.check_bounds(field.width(), field.height())?;
    }
    let mut merged: Option<SimilarityMap> = None;
    for &p in points {
        let map = point_similarity(field, p, params)?;
        merged = Some(match merged {
            None => map,
            Some(mut acc) => {
                for (a, b) in acc.values.iter_mut().zip(&map.values) {
                    *a = a.max(*b);
                }
                acc
            }
        });
    }
    Ok(merged.expect("points is non-empty"))
}

/// Binary mask for a set of prompt points: merged map `> threshold`.
pub fn prompt_mask(field: &ColorField, points: &[PromptPoint], threshold: f64) -> Result<BinaryMask> {
    prompt_mask_with(field, points, threshold, &BilateralParams::default())
}

pub fn prompt_mask_with(
    field: &ColorField,
    points: &[PromptPoint],
    threshold: f64,
    params: &BilateralParams,
) -> Result<BinaryMask> {
    Ok(merged_similarity(field, points, params)?.threshold(threshold))
}
