//! Procedural flat-shaded scenes of rectangles, circles and triangles drawn
//! back to front, with per-pixel instance labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::center_point;
use crate::field::{check_dims, color_distance, ColorField, LabelMap, Rgb};
use crate::mask::BinaryMask;
use crate::prompt::query_radius;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillMode {
    Flat,
    /// Stripes alternating between the base color and a shifted tone.
    TwoTone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    pub fill: FillMode,
    /// Shapes left with fewer visible pixels are redrawn elsewhere.
    pub min_visible_pixels: usize,
    /// Also redraw when the prompt query window around an instance's center
    /// click would reach outside the instance.
    pub clear_center: bool,
    /// Shape radius range as a fraction of `min(width, height)`.
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            min_shapes: 2,
            max_shapes: 6,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Circle, ShapeKind::Triangle],
            fill: FillMode::Flat,
            min_visible_pixels: 4,
            clear_center: true,
            min_size: 0.08,
            max_size: 0.22,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        check_dims(self.width, self.height)?;
        if self.min_shapes < 1 || self.max_shapes < self.min_shapes {
            return Err(Error::InvalidArgument(format!(
                "shape count range {}..={} is invalid (need 1 ≤ min ≤ max)",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidArgument("no shape kinds enabled".into()));
        }
        if !(self.min_size > 0.0 && self.max_size >= self.min_size) {
            return Err(Error::InvalidArgument("invalid shape size range".into()));
        }
        Ok(())
    }
}

/// Minimum distance between any two shape colors and the background.
pub const SHAPE_COLOR_SEPARATION: f64 = 32.0;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rectangle { cx: f64, cy: f64, half_w: f64, half_h: f64 },
    Circle { cx: f64, cy: f64, radius: f64 },
    Triangle { vertices: [(f64, f64); 3] },
}

impl Shape {
    /// Point test at a pixel center.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Rectangle { cx, cy, half_w, half_h } => (px - cx).abs() <= half_w && (py - cy).abs() <= half_h,
            Shape::Circle { cx, cy, radius } => (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius,
            Shape::Triangle { vertices: [a, b, c] } => {
                let cross = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0);
                let (d1, d2, d3) = (cross(a, b), cross(b, c), cross(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub shape: Shape,
    pub color: Rgb,
    pub visible_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ColorField,
    pub labels: LabelMap,
    pub background: Rgb,
    pub shapes: Vec<PlacedShape>,
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [
        rng.gen_range(0..=255u8) as f64,
        rng.gen_range(0..=255u8) as f64,
        rng.gen_range(0..=255u8) as f64,
    ]
}

fn random_shape(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Shape {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let scale = w.min(h);
    let radius = rng.gen_range(spec.min_size..=spec.max_size) * scale;
    let cx = rng.gen_range(0.0..w);
    let cy = rng.gen_range(0.0..h);
    match *spec.kinds.choose(rng).expect("kinds validated non-empty") {
        ShapeKind::Rectangle => {
            let aspect = rng.gen_range(0.6..1.6f64);
            Shape::Rectangle {
                cx,
                cy,
                half_w: radius * aspect.sqrt(),
                half_h: radius / aspect.sqrt(),
            }
        }
        ShapeKind::Circle => Shape::Circle { cx, cy, radius },
        ShapeKind::Triangle => {
            let start = rng.gen_range(0.0..std::f64::consts::TAU);
            let third = std::f64::consts::TAU / 3.0;
            let mut vertices = [(0.0, 0.0); 3];
            for (k, v) in vertices.iter_mut().enumerate() {
                let a = start + third * k as f64 + rng.gen_range(-0.35..0.35);
                *v = (cx + radius * a.cos(), cy + radius * a.sin());
            }
            Shape::Triangle { vertices }
        }
    }
}

/// Renders a scene. Shapes are drawn in order; a shape that would end up
/// (or leave an earlier shape) with fewer than `min_visible_pixels` visible
/// pixels is resampled, up to [`MAX_PLACEMENT_ATTEMPTS`] times.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let background = random_color(&mut rng);

    let mut owner = vec![0u32; w * h];
    let mut visible: Vec<usize> = Vec::new();
    let mut shapes: Vec<PlacedShape> = Vec::new();
    let mut colors: Vec<Rgb> = vec![background];

    for index in 0..count {
        let id = index as u32 + 1;
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let shape = random_shape(&mut rng, spec);
            let color = random_color(&mut rng);
            if colors.iter().any(|c| color_distance(c, &color) < SHAPE_COLOR_SEPARATION) {
                continue;
            }
            let mut covered = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        covered.push(y * w + x);
                    }
                }
            }
            if covered.len() < spec.min_visible_pixels {
                continue;
            }
            let mut lost = vec![0usize; visible.len()];
            for &j in &covered {
                if owner[j] != 0 {
                    lost[owner[j] as usize - 1] += 1;
                }
            }
            if visible
                .iter()
                .zip(&lost)
                .any(|(&v, &l)| v - l < spec.min_visible_pixels)
            {
                continue;
            }
            let mut trial = owner.clone();
            for &j in &covered {
                trial[j] = id;
            }
            if spec.clear_center && !(1..=id).all(|k| center_is_clear(&trial, w, h, k)) {
                continue;
            }
            for (v, l) in visible.iter_mut().zip(&lost) {
                *v -= l;
            }
            owner = trial;
            visible.push(covered.len());
            colors.push(color);
            shapes.push(PlacedShape {
                shape,
                color,
                visible_pixels: 0,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement {
                shape: index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }
    for (s, &v) in shapes.iter_mut().zip(&visible) {
        s.visible_pixels = v;
    }

    let stripes: Vec<(bool, usize)> = shapes
        .iter()
        .map(|_| (rng.gen_bool(0.5), rng.gen_range(2..=5usize)))
        .collect();
    let mut values = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let id = owner[y * w + x];
            let color = if id == 0 {
                background
            } else {
                let k = id as usize - 1;
                let base = shapes[k].color;
                match spec.fill {
                    FillMode::Flat => base,
                    FillMode::TwoTone => {
                        let (vertical, period) = stripes[k];
                        let phase = if vertical { x } else { y } / period;
                        if phase % 2 == 0 {
                            base
                        } else {
                            second_tone(&base)
                        }
                    }
                }
            };
            values.extend_from_slice(&color);
        }
    }

    Ok(Scene {
        image: ColorField::new(w, h, values)?,
        labels: LabelMap::new(w, h, owner)?,
        background,
        shapes,
    })
}

/// Whether the query window of [`query_vector`] around the center click of
/// instance `id` stays inside the instance.
fn center_is_clear(owner: &[u32], w: usize, h: usize, id: u32) -> bool {
    let mask = BinaryMask::from_fn(w, h, |x, y| owner[y * w + x] == id);
    let Ok(c) = center_point(&mask) else { return false };
    let (rx, ry) = query_radius(w, h);
    let (x0, x1) = (c.x.saturating_sub(rx), (c.x + rx).min(w - 1));
    let (y0, y1) = (c.y.saturating_sub(ry), (c.y + ry).min(h - 1));
    (y0..=y1).all(|y| (x0..=x1).all(|x| owner[y * w + x] == id))
}

/// The stripe color paired with `base`: 48 units toward the far end of
/// each channel.
fn second_tone(base: &Rgb) -> Rgb {
    let shift = |v: f64| if v < 128.0 { v + 48.0 } else { v - 48.0 };
    [shift(base[0]), shift(base[1]), shift(base[2])]
}
