//! Grid types and per-instance bookkeeping.
//!
//! A [`ColorField`] is a dense H×W×3 grid of real colors (row-major,
//! channels interleaved). A [`LabelMap`] assigns every pixel an instance id,
//! with 0 reserved for background and the remaining ids forming `1..=n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

pub type Rgb = [f64; CHANNELS];

#[derive(Debug, Clone, PartialEq)]
pub struct ColorField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ColorField {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(CHANNELS))
            .ok_or(Error::InvalidDimensions {
                width,
                height,
                reason: "size overflows",
            })?;
        if values.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} values for {width}x{height}x3, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Result<Self> {
        check_dims(width, height)?;
        let values = (0..width * height).flat_map(|_| color).collect();
        Self::new(width, height, values)
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, [0.0; CHANNELS])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw values. Callers must keep them finite.
    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> Rgb {
        let o = index * CHANNELS;
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Rgb {
        self.pixel(y * self.width + x)
    }

    pub fn set_pixel(&mut self, index: usize, color: Rgb) {
        let o = index * CHANNELS;
        self.values[o..o + CHANNELS].copy_from_slice(&color);
    }

    pub fn same_dims<T: Grid>(&self, other: &T) -> Result<()> {
        ensure_same_dims(self.width, self.height, other.width(), other.height())
    }
}

/// Anything with grid dimensions.
pub trait Grid {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
}

impl Grid for ColorField {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
}

impl Grid for LabelMap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
}

pub(crate) fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidDimensions {
            width,
            height,
            reason: "width and height must be at least 1",
        });
    }
    Ok(())
}

pub(crate) fn ensure_same_dims(w: usize, h: usize, ow: usize, oh: usize) -> Result<()> {
    if w != ow || h != oh {
        return Err(Error::DimensionMismatch {
            expected_w: w,
            expected_h: h,
            got_w: ow,
            got_h: oh,
        });
    }
    Ok(())
}

/// Per-pixel instance ids. Ids present are exactly `{1, …, n}` (plus 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    instance_count: u32,
}

impl LabelMap {
    /// Builds a label map, rejecting gaps in the id sequence.
    pub fn new(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        check_dims(width, height)?;
        if ids.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "expected {} ids for {width}x{height}, got {}",
                width * height,
                ids.len()
            )));
        }
        let max = ids.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; max as usize + 1];
        for &id in &ids {
            seen[id as usize] = true;
        }
        if let Some(missing) = seen.iter().skip(1).position(|s| !s) {
            return Err(Error::MissingId {
                missing: missing as u32 + 1,
            });
        }
        Ok(Self {
            width,
            height,
            ids,
            instance_count: max,
        })
    }

    /// Builds a label map from arbitrary ids, renumbering the instances that
    /// appear to `1..=n` in ascending order of their original id. Returns the
    /// `(original, compacted)` pairs for every instance id.
    pub fn compacted(width: usize, height: usize, ids: Vec<u32>) -> Result<(Self, Vec<(u32, u32)>)> {
        check_dims(width, height)?;
        let mut present: Vec<u32> = ids.iter().copied().filter(|&id| id != 0).collect();
        present.sort_unstable();
        present.dedup();
        let remap: Vec<(u32, u32)> = present
            .iter()
            .enumerate()
            .map(|(k, &orig)| (orig, k as u32 + 1))
            .collect();
        let ids = ids
            .into_iter()
            .map(|id| {
                if id == 0 {
                    0
                } else {
                    let k = present.binary_search(&id).expect("id collected above");
                    k as u32 + 1
                }
            })
            .collect();
        Ok((Self::new(width, height, ids)?, remap))
    }

    pub fn background(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Self::new(width, height, vec![0; width * height])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of instances `n`, excluding background.
    #[inline]
    pub fn instance_count(&self) -> usize {
        self.instance_count as usize
    }

    #[inline]
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    /// Boolean mask of the pixels carrying `id`.
    pub fn mask_of(&self, id: u32) -> crate::mask::BinaryMask {
        crate::mask::BinaryMask::from_fn(self.width, self.height, |x, y| self.at(x, y) == id)
    }
}

/// Pixel counts and (optionally) mean colors for ids `0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    counts: Vec<usize>,
    total: usize,
    means: Option<Vec<Rgb>>,
}

impl InstanceStats {
    /// `|S_i|`
    pub fn count(&self, id: usize) -> usize {
        self.counts[id]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `|T_i| = |Ω| − |S_i|`
    pub fn complement(&self, id: usize) -> usize {
        self.total - self.counts[id]
    }

    pub fn instance_count(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn means(&self) -> Option<&[Rgb]> {
        self.means.as_deref()
    }

    pub fn mean(&self, id: usize) -> Option<Rgb> {
        self.means.as_ref().map(|m| m[id])
    }
}

/// Counts `|S_i|` for every id `0..=n`.
pub fn instance_pixel_sets(labels: &LabelMap) -> InstanceStats {
    let mut counts = vec![0usize; labels.instance_count() + 1];
    for &id in labels.ids() {
        counts[id as usize] += 1;
    }
    InstanceStats {
        counts,
        total: labels.ids().len(),
        means: None,
    }
}

/// Mean color per instance. The background mean is pinned to black
/// regardless of what the field predicts there.
pub fn instance_means(field: &ColorField, labels: &LabelMap) -> Result<InstanceStats> {
    field.same_dims(labels)?;
    let mut stats = instance_pixel_sets(labels);
    let mut sums = vec![[0.0f64; CHANNELS]; stats.counts.len()];
    for (j, &id) in labels.ids().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let p = field.pixel(j);
        let s = &mut sums[id as usize];
        for c in 0..CHANNELS {
            s[c] += p[c];
        }
    }
    let means = sums
        .iter()
        .zip(&stats.counts)
        .enumerate()
        .map(|(i, (s, &n))| {
            if i == 0 {
                [0.0; CHANNELS]
            } else {
                let n = n as f64;
                [s[0] / n, s[1] / n, s[2] / n]
            }
        })
        .collect();
    stats.means = Some(means);
    Ok(stats)
}

/// Separation every encoded color must keep from black and from each other.
pub const MIN_COLOR_SEPARATION: f64 = 48.0;

/// Separation the encoder aims for before settling for the best candidate.
/// Similarity maps are thresholded at 3/255 after min-max normalization, so
/// a color at distance `d` from the query survives unless `1/d` is below
/// roughly 0.012; 96 clears that with margin.
pub const TARGET_COLOR_SEPARATION: f64 = 96.0;

const COLOR_ATTEMPTS: usize = 1000;

/// Result of painting a label map with one constant color per instance.
#[derive(Debug, Clone)]
pub struct ColorEncoding {
    pub field: ColorField,
    /// `colors[i]` for `i` in `0..=n`; `colors[0]` is black.
    pub colors: Vec<Rgb>,
    /// Smallest pairwise distance among all colors, black included.
    /// `None` when `n = 0`.
    pub min_separation: Option<f64>,
}

/// Paints every instance a constant integer-valued color, background black.
///
/// Each color is rejection-sampled from a seeded generator until it lies at
/// least [`TARGET_COLOR_SEPARATION`] from black and all earlier colors; after
/// the attempt cap the candidate with the largest clearance is kept.
pub fn encode_labels_as_colors(labels: &LabelMap, seed: u64) -> ColorEncoding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors: Vec<Rgb> = vec![[0.0; CHANNELS]];
    for _ in 0..labels.instance_count() {
        let mut best: Option<(f64, Rgb)> = None;
        for _ in 0..COLOR_ATTEMPTS {
            let cand: Rgb = [
                rng.gen_range(0..=255u8) as f64,
                rng.gen_range(0..=255u8) as f64,
                rng.gen_range(0..=255u8) as f64,
            ];
            let clearance = colors
                .iter()
                .map(|c| color_distance(c, &cand))
                .fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(d, _)| clearance > d) {
                best = Some((clearance, cand));
            }
            if clearance >= TARGET_COLOR_SEPARATION {
                break;
            }
        }
        colors.push(best.expect("at least one attempt").1);
    }

    let mut min_separation: Option<f64> = None;
    for a in 0..colors.len() {
        for b in a + 1..colors.len() {
            let d = color_distance(&colors[a], &colors[b]);
            min_separation = Some(min_separation.map_or(d, |m: f64| m.min(d)));
        }
    }

    let values = labels
        .ids()
        .iter()
        .flat_map(|&id| colors[id as usize])
        .collect();
    let field = ColorField::new(labels.width(), labels.height(), values)
        .expect("dimensions come from a valid label map");
    ColorEncoding {
        field,
        colors,
        min_separation,
    }
}

#[inline]
pub fn color_distance(a: &Rgb, b: &Rgb) -> f64 {
    squared_distance(a, b).sqrt()
}

#[inline]
pub fn squared_distance(a: &Rgb, b: &Rgb) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

/// Affine min-max map of the joint 3-channel range onto `[0, 255]`.
/// A constant input maps to all zeros.
pub fn normalize_field(width: usize, height: usize, raw: Vec<f64>) -> Result<ColorField> {
    let mut field = ColorField::new(width, height, raw)?;
    normalize_in_place(field.values_mut());
    Ok(field)
}

pub(crate) fn normalize_in_place(values: &mut [f64]) {
    let (lo, hi) = min_max(values);
    if hi > lo {
        let scale = 255.0 / (hi - lo);
        for v in values.iter_mut() {
            *v = ((*v - lo) * scale).clamp(0.0, 255.0);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Returns `(min, max)`; `(+inf, -inf)` for an empty slice.
pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}
