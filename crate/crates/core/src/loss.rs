//! Instance coloring loss and its analytic gradient.
//!
//! The objective has three parts, all evaluated in `[0, 255]` color units:
//!
//! * variance: smooth-ℓ1 pull of each pixel toward its instance mean,
//!   averaged per instance;
//! * separation: a saturating `1 / (1 + ‖p − μ_i‖²)` penalty on every pixel
//!   outside instance `i`, weighted by `1 / (√|S_i| · |T_i|)`;
//! * mean separation: the same saturating penalty between every pair of
//!   instance means, normalized by `n(n + 1)`.
//!
//! The background mean is the constant black, so it never receives gradient.
//! Every other mean is a function of the predictions, and the gradient flows
//! through it.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{squared_distance, ColorField, LabelMap, Rgb, CHANNELS};

const IGNORED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sep: f64,
    pub lambda_mean: f64,
    pub smooth_l1_beta: f64,
    pub enable_var: bool,
    pub enable_sep: bool,
    pub enable_mean: bool,
    /// At most this many instances are supervised per image; the largest
    /// are kept and the pixels of the rest are left out of every sum.
    pub instance_cap: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sep: 300.0,
            lambda_mean: 300.0,
            smooth_l1_beta: 1.0,
            enable_var: true,
            enable_sep: true,
            enable_mean: true,
            instance_cap: 1250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_var: f64,
    pub l_sep: f64,
    pub l_mean: f64,
    pub total: f64,
}

/// `∂ total / ∂ p_{j,c}`, laid out like a [`ColorField`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GradField {
    pub fn pixel(&self, index: usize) -> Rgb {
        let o = index * CHANNELS;
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[inline]
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// The instances and pixels that take part in the loss.
struct Supervision {
    /// Per-pixel instance index in `0..=n`, or [`IGNORED`].
    labels: Vec<u32>,
    counts: Vec<usize>,
    /// Number of non-ignored pixels (`|Ω|`).
    included: usize,
}

impl Supervision {
    fn new(labels: &LabelMap, cap: usize) -> Self {
        let n = labels.instance_count();
        let mut counts = vec![0usize; n + 1];
        for &id in labels.ids() {
            counts[id as usize] += 1;
        }
        if n <= cap {
            return Self {
                labels: labels.ids().to_vec(),
                included: labels.ids().len(),
                counts,
            };
        }

        let mut order: Vec<u32> = (1..=n as u32).collect();
        order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
        let mut kept = order[..cap].to_vec();
        kept.sort_unstable();
        let mut remap = vec![IGNORED; n + 1];
        remap[0] = 0;
        for (k, &id) in kept.iter().enumerate() {
            remap[id as usize] = k as u32 + 1;
        }
        let mapped: Vec<u32> = labels.ids().iter().map(|&id| remap[id as usize]).collect();
        let mut new_counts = vec![0usize; cap + 1];
        for &id in &mapped {
            if id != IGNORED {
                new_counts[id as usize] += 1;
            }
        }
        Self {
            included: new_counts.iter().sum(),
            labels: mapped,
            counts: new_counts,
        }
    }

    fn instance_count(&self) -> usize {
        self.counts.len() - 1
    }

    fn means(&self, field: &ColorField) -> Vec<Rgb> {
        let mut sums = vec![[0.0; CHANNELS]; self.counts.len()];
        for (j, &id) in self.labels.iter().enumerate() {
            if id == 0 || id == IGNORED {
                continue;
            }
            let p = field.pixel(j);
            let s = &mut sums[id as usize];
            for c in 0..CHANNELS {
                s[c] += p[c];
            }
        }
        sums.iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(i, (s, &n))| {
                if i == 0 || n == 0 {
                    [0.0; CHANNELS]
                } else {
                    let n = n as f64;
                    [s[0] / n, s[1] / n, s[2] / n]
                }
            })
            .collect()
    }

    /// `1 / (√|S_i| · |T_i|)`, or `None` when `T_i` is empty. An empty
    /// background set counts as size 1 under the root.
    fn sep_weight(&self, i: usize) -> Option<f64> {
        let inside = self.counts[i];
        let outside = self.included - inside;
        if outside == 0 {
            return None;
        }
        Some(1.0 / ((inside.max(1) as f64).sqrt() * outside as f64))
    }
}

fn var_term(field: &ColorField, sup: &Supervision, means: &[Rgb], beta: f64) -> f64 {
    let mut per_instance = vec![0.0; sup.counts.len()];
    for (j, &id) in sup.labels.iter().enumerate() {
        if id == IGNORED {
            continue;
        }
        let p = field.pixel(j);
        let mu = &means[id as usize];
        let acc = &mut per_instance[id as usize];
        for c in 0..CHANNELS {
            *acc += smooth_l1(p[c] - mu[c], beta);
        }
    }
    per_instance
        .iter()
        .zip(&sup.counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s / n as f64)
        .sum()
}

fn sep_term(field: &ColorField, sup: &Supervision, means: &[Rgb]) -> f64 {
    let mut total = 0.0;
    for (i, mu) in means.iter().enumerate() {
        let Some(w) = sup.sep_weight(i) else { continue };
        let mut acc = 0.0;
        for (j, &id) in sup.labels.iter().enumerate() {
            if id == IGNORED || id as usize == i {
                continue;
            }
            acc += 1.0 / (1.0 + squared_distance(&field.pixel(j), mu));
        }
        total += w * acc;
    }
    total
}

fn mean_term(sup: &Supervision, means: &[Rgb]) -> f64 {
    let n = sup.instance_count();
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for a in 0..=n {
        for b in a + 1..=n {
            acc += 1.0 / (1.0 + squared_distance(&means[a], &means[b]));
        }
    }
    acc / (n * (n + 1)) as f64
}

/// Intra-instance variance term, background included (pulled to black).
pub fn loss_var(field: &ColorField, labels: &LabelMap, beta: f64) -> Result<f64> {
    field.same_dims(labels)?;
    let sup = Supervision::new(labels, usize::MAX);
    let means = sup.means(field);
    Ok(var_term(field, &sup, &means, beta))
}

/// Inter-instance separation term over `i = 0..=n`.
pub fn loss_sep(field: &ColorField, labels: &LabelMap) -> Result<f64> {
    field.same_dims(labels)?;
    let sup = Supervision::new(labels, usize::MAX);
    let means = sup.means(field);
    Ok(sep_term(field, &sup, &means))
}

/// Mean-level separation term; zero when there are no instances.
pub fn loss_mean(field: &ColorField, labels: &LabelMap) -> Result<f64> {
    field.same_dims(labels)?;
    let sup = Supervision::new(labels, usize::MAX);
    let means = sup.means(field);
    Ok(mean_term(&sup, &means))
}

fn report(field: &ColorField, sup: &Supervision, means: &[Rgb], weights: &LossWeights) -> LossReport {
    let l_var = if weights.enable_var {
        var_term(field, sup, means, weights.smooth_l1_beta)
    } else {
        0.0
    };
    let l_sep = if weights.enable_sep {
        sep_term(field, sup, means)
    } else {
        0.0
    };
    let l_mean = if weights.enable_mean {
        mean_term(sup, means)
    } else {
        0.0
    };
    LossReport {
        l_var,
        l_sep,
        l_mean,
        total: l_var + weights.lambda_sep * l_sep + weights.lambda_mean * l_mean,
    }
}

pub fn loss_total(field: &ColorField, labels: &LabelMap, weights: &LossWeights) -> Result<LossReport> {
    field.same_dims(labels)?;
    let sup = Supervision::new(labels, weights.instance_cap);
    let means = sup.means(field);
    Ok(report(field, &sup, &means, weights))
}

pub fn loss_gradient(field: &ColorField, labels: &LabelMap, weights: &LossWeights) -> Result<GradField> {
    Ok(loss_and_gradient(field, labels, weights)?.1)
}

/// Loss report and gradient in one pass over the shared means.
pub fn loss_and_gradient(
    field: &ColorField,
    labels: &LabelMap,
    weights: &LossWeights,
) -> Result<(LossReport, GradField)> {
    field.same_dims(labels)?;
    let sup = Supervision::new(labels, weights.instance_cap);
    let means = sup.means(field);
    let report = report(field, &sup, &means, weights);

    let n = sup.instance_count();
    let mut grad = vec![0.0; field.values().len()];
    // ∂L/∂μ_i, distributed to S_i at the end.
    let mut mean_grad = vec![[0.0; CHANNELS]; n + 1];

    if weights.enable_var {
        let beta = weights.smooth_l1_beta;
        let mut dsum = vec![[0.0; CHANNELS]; n + 1];
        for (j, &id) in sup.labels.iter().enumerate() {
            if id == IGNORED {
                continue;
            }
            let p = field.pixel(j);
            let mu = &means[id as usize];
            let inv = 1.0 / sup.counts[id as usize] as f64;
            for c in 0..CHANNELS {
                let d = smooth_l1_grad(p[c] - mu[c], beta);
                grad[j * CHANNELS + c] += inv * d;
                dsum[id as usize][c] += d;
            }
        }
        for i in 1..=n {
            let inv = 1.0 / sup.counts[i] as f64;
            for c in 0..CHANNELS {
                mean_grad[i][c] -= inv * dsum[i][c];
            }
        }
    }

    if weights.enable_sep {
        let lambda = weights.lambda_sep;
        for (i, mu) in means.iter().enumerate() {
            let Some(w) = sup.sep_weight(i) else { continue };
            let mut acc = [0.0; CHANNELS];
            for (j, &id) in sup.labels.iter().enumerate() {
                if id == IGNORED || id as usize == i {
                    continue;
                }
                let p = field.pixel(j);
                let d = [p[0] - mu[0], p[1] - mu[1], p[2] - mu[2]];
                let f = 1.0 / (1.0 + d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
                let h = 2.0 * f * f * w * lambda;
                for c in 0..CHANNELS {
                    grad[j * CHANNELS + c] -= h * d[c];
                    acc[c] += h * d[c];
                }
            }
            if i > 0 {
                for c in 0..CHANNELS {
                    mean_grad[i][c] += acc[c];
                }
            }
        }
    }

    if weights.enable_mean && n > 0 {
        let scale = weights.lambda_mean / (n * (n + 1)) as f64;
        for a in 0..=n {
            for b in a + 1..=n {
                let d = [
                    means[a][0] - means[b][0],
                    means[a][1] - means[b][1],
                    means[a][2] - means[b][2],
                ];
                let f = 1.0 / (1.0 + d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
                let h = -2.0 * f * f * scale;
                for c in 0..CHANNELS {
                    mean_grad[a][c] += h * d[c];
                    mean_grad[b][c] -= h * d[c];
                }
            }
        }
    }

    // μ_0 is constant; every other mean is the average over S_i.
    let per_pixel: Vec<Rgb> = mean_grad
        .iter()
        .zip(&sup.counts)
        .enumerate()
        .map(|(i, (g, &n))| {
            if i == 0 || n == 0 {
                [0.0; CHANNELS]
            } else {
                let inv = 1.0 / n as f64;
                [g[0] * inv, g[1] * inv, g[2] * inv]
            }
        })
        .collect();
    for (j, &id) in sup.labels.iter().enumerate() {
        if id == 0 || id == IGNORED {
            continue;
        }
        let g = &per_pixel[id as usize];
        for c in 0..CHANNELS {
            grad[j * CHANNELS + c] += g[c];
        }
    }

    Ok((
        report,
        GradField {
            width: field.width(),
            height: field.height(),
            values: grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::encode_labels_as_colors;
    use approx::assert_relative_eq;

    fn field(w: usize, h: usize, v: &[f64]) -> ColorField {
        ColorField::new(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn var_zero_on_perfect_coloring() {
        let labels = LabelMap::new(3, 2, vec![0, 1, 1, 2, 2, 0]).unwrap();
        let enc = encode_labels_as_colors(&labels, 4);
        assert_eq!(loss_var(&enc.field, &labels, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn var_two_pixel_instance() {
        // Instance pixels have channel-0 values {0, 2}; mean 1, each deviates by 1.
        let labels = LabelMap::new(2, 1, vec![1, 1]).unwrap();
        let f = field(2, 1, &[0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(loss_var(&f, &labels, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn var_background_pixel_pulled_to_black() {
        let labels = LabelMap::new(1, 1, vec![0]).unwrap();
        let f = field(1, 1, &[100.0, 0.0, 0.0]);
        assert_eq!(loss_var(&f, &labels, 1.0).unwrap(), 99.5);
    }

    #[test]
    fn sep_all_black_pair() {
        let labels = LabelMap::new(2, 1, vec![1, 0]).unwrap();
        let f = ColorField::zeros(2, 1).unwrap();
        assert_eq!(loss_sep(&f, &labels).unwrap(), 2.0);
    }

    #[test]
    fn sep_separated_pair() {
        let labels = LabelMap::new(2, 1, vec![1, 0]).unwrap();
        let f = field(2, 1, &[255.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(loss_sep(&f, &labels).unwrap(), 2.0 / 65026.0, max_relative = 1e-15);
        assert_relative_eq!(loss_sep(&f, &labels).unwrap(), 3.075e-5, max_relative = 1e-3);
    }

    #[test]
    fn sep_whole_image_instance_keeps_background_term() {
        // T_1 is empty, so only i = 0 remains: |S_0| = 0 counts as 1 under the
        // root, |T_0| = 2, and both pixels sit at distance² 4 from black.
        let labels = LabelMap::new(2, 1, vec![1, 1]).unwrap();
        let f = field(2, 1, &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let expected = (1.0 / 2.0) * (1.0 / 5.0 + 1.0 / 5.0);
        assert_eq!(loss_sep(&f, &labels).unwrap(), expected);
    }

    #[test]
    fn mean_single_instance_at_black() {
        let labels = LabelMap::new(2, 1, vec![1, 0]).unwrap();
        let f = ColorField::zeros(2, 1).unwrap();
        assert_eq!(loss_mean(&f, &labels).unwrap(), 0.5);
    }

    #[test]
    fn mean_single_instance_far() {
        // ‖μ_1 − μ_0‖² = 30² + 3² + 90 = 999
        let labels = LabelMap::new(2, 1, vec![1, 0]).unwrap();
        let f = field(2, 1, &[30.0, 3.0, 90.0f64.sqrt(), 0.0, 0.0, 0.0]);
        let d2 = squared_distance(&f.pixel(0), &[0.0; 3]);
        assert_relative_eq!(d2, 999.0, max_relative = 1e-12);
        assert_relative_eq!(loss_mean(&f, &labels).unwrap(), 5e-4, max_relative = 1e-12);
    }

    #[test]
    fn mean_no_instances() {
        let labels = LabelMap::background(2, 2).unwrap();
        let f = field(2, 2, &[9.0; 12]);
        assert_eq!(loss_mean(&f, &labels).unwrap(), 0.0);
    }

    #[test]
    fn total_composes_components() {
        let labels = LabelMap::new(2, 1, vec![1, 0]).unwrap();
        let f = ColorField::zeros(2, 1).unwrap();
        let r = loss_total(&f, &labels, &LossWeights::default()).unwrap();
        assert_eq!(r.l_var, 0.0);
        assert_eq!(r.l_sep, 2.0);
        assert_eq!(r.l_mean, 0.5);
        assert_eq!(r.total, 750.0);
    }

    #[test]
    fn zero_lambdas_reduce_to_var() {
        let labels = LabelMap::new(3, 1, vec![1, 0, 1]).unwrap();
        let f = field(3, 1, &[1.0, 2.0, 3.0, 40.0, 5.0, 6.0, 70.0, 8.0, 9.0]);
        let w = LossWeights {
            lambda_sep: 0.0,
            lambda_mean: 0.0,
            ..LossWeights::default()
        };
        let r = loss_total(&f, &labels, &w).unwrap();
        assert_eq!(r.total, r.l_var);
    }

    #[test]
    fn disabled_terms_match_manual_recombination() {
        let labels = LabelMap::new(3, 2, vec![1, 0, 1, 2, 2, 0]).unwrap();
        let f = field(
            3,
            2,
            &[1.0, 2.0, 3.0, 40.0, 5.0, 6.0, 70.0, 8.0, 9.0, 3.0, 3.0, 3.0, 200.0, 1.0, 4.0, 9.0, 9.0, 9.0],
        );
        let full = loss_total(&f, &labels, &LossWeights::default()).unwrap();
        let w = LossWeights {
            enable_sep: false,
            ..LossWeights::default()
        };
        let r = loss_total(&f, &labels, &w).unwrap();
        assert_eq!(r.l_sep, 0.0);
        assert_eq!(r.total, full.l_var + 0.0 + w.lambda_mean * full.l_mean);
        assert_eq!(r.total.to_bits(), (full.l_var + w.lambda_mean * full.l_mean).to_bits());
    }

    #[test]
    fn var_only_gradient_vanishes_at_perfect_coloring() {
        let labels = LabelMap::new(3, 2, vec![0, 1, 1, 2, 2, 0]).unwrap();
        let enc = encode_labels_as_colors(&labels, 4);
        let w = LossWeights {
            enable_sep: false,
            enable_mean: false,
            ..LossWeights::default()
        };
        let g = loss_gradient(&enc.field, &labels, &w).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn cap_keeps_largest_instances() {
        // Instance 1 has one pixel, instance 2 has three; a cap of 1 keeps 2.
        let labels = LabelMap::new(5, 1, vec![0, 1, 2, 2, 2]).unwrap();
        let f = field(5, 1, &[0.0, 0.0, 0.0, 50.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0]);
        let capped = LossWeights {
            instance_cap: 1,
            ..LossWeights::default()
        };
        let r = loss_total(&f, &labels, &capped).unwrap();
        // Equivalent to dropping pixel 1 entirely.
        let reduced_labels = LabelMap::new(4, 1, vec![0, 1, 1, 1]).unwrap();
        let reduced = field(4, 1, &[0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0]);
        let expected = loss_total(&reduced, &reduced_labels, &LossWeights::default()).unwrap();
        assert_eq!(r, expected);
        let g = loss_gradient(&f, &labels, &capped).unwrap();
        assert_eq!(g.pixel(1), [0.0; 3]);
    }

    #[test]
    fn cap_not_reached_is_identical() {
        let labels = LabelMap::new(3, 2, vec![1, 0, 1, 2, 2, 0]).unwrap();
        let f = field(
            3,
            2,
            &[1.0, 2.0, 3.0, 40.0, 5.0, 6.0, 70.0, 8.0, 9.0, 3.0, 3.0, 3.0, 200.0, 1.0, 4.0, 9.0, 9.0, 9.0],
        );
        let a = loss_and_gradient(&f, &labels, &LossWeights::default()).unwrap();
        let b = loss_and_gradient(
            &f,
            &labels,
            &LossWeights {
                instance_cap: 2,
                ..LossWeights::default()
            },
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translation_changes_background_terms_only() {
        let labels = LabelMap::new(4, 1, vec![1, 1, 2, 0]).unwrap();
        let base = field(4, 1, &[10.0, 20.0, 30.0, 14.0, 22.0, 30.0, 100.0, 100.0, 100.0, 0.0, 0.0, 0.0]);
        let shifted = field(
            4,
            1,
            &base.values().iter().enumerate().map(|(k, v)| v + [5.0, -3.0, 7.0][k % 3]).collect::<Vec<_>>(),
        );
        // Instance terms of the variance loss only see deviations from the mean.
        let inst = LabelMap::new(3, 1, vec![1, 1, 2]).unwrap();
        let inst_base = field(3, 1, &base.values()[..9]);
        let inst_shift = field(3, 1, &shifted.values()[..9]);
        assert_relative_eq!(
            loss_var(&inst_base, &inst, 1.0).unwrap(),
            loss_var(&inst_shift, &inst, 1.0).unwrap(),
            max_relative = 1e-12
        );
        // The background term is anchored at black, so the full loss moves.
        assert_ne!(
            loss_var(&base, &labels, 1.0).unwrap(),
            loss_var(&shifted, &labels, 1.0).unwrap()
        );
        assert_ne!(loss_sep(&base, &labels).unwrap(), loss_sep(&shifted, &labels).unwrap());
    }
}
