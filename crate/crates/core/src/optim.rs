//! Gradient-based minimization of the instance coloring loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ColorField, LabelMap};
use crate::loss::{loss_and_gradient, loss_total, LossReport, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    GradientDescent,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            iterations: 500,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidArgument("iterations ≥ 1 required".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One step of plain gradient descent or Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Stepper {
    config: OptimConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Stepper {
    pub fn new(config: OptimConfig, len: usize) -> Self {
        let (m, v) = match config.optimizer {
            OptimizerKind::Adam => (vec![0.0; len], vec![0.0; len]),
            OptimizerKind::GradientDescent => (Vec::new(), Vec::new()),
        };
        Self { config, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            OptimizerKind::GradientDescent => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
                let bc1 = 1.0 - b1.powi(self.t);
                let bc2 = 1.0 - b2.powi(self.t);
                for k in 0..params.len() {
                    let g = grad[k];
                    self.m[k] = b1 * self.m[k] + (1.0 - b1) * g;
                    self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g;
                    let m_hat = self.m[k] / bc1;
                    let v_hat = self.v[k] / bc2;
                    params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub report: LossReport,
    pub millis: f64,
}

/// Loss before each update, plus wall-clock per iteration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub entries: Vec<TraceEntry>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The loss history without timings; what determinism is asserted on.
    pub fn reports(&self) -> Vec<LossReport> {
        self.entries.iter().map(|e| e.report).collect()
    }

    pub fn first(&self) -> Option<&LossReport> {
        self.entries.first().map(|e| &e.report)
    }

    pub fn last(&self) -> Option<&LossReport> {
        self.entries.last().map(|e| &e.report)
    }
}

/// Optimizes the color field itself against `labels`, starting from a
/// uniform random field in `[0, 255]`. Returns the field after the final
/// update and one trace entry per iteration.
pub fn optimize_direct_field(
    labels: &LabelMap,
    weights: &LossWeights,
    config: &OptimConfig,
) -> Result<(ColorField, TrainTrace)> {
    config.validate()?;
    if labels.instance_count() == 0 {
        return Err(Error::InvalidArgument(
            "direct-field optimization needs at least one instance".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let len = labels.width() * labels.height() * 3;
    let init: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..=255.0)).collect();
    let mut field = ColorField::new(labels.width(), labels.height(), init)?;
    let mut stepper = Stepper::new(*config, len);
    let mut trace = TrainTrace::default();

    for iteration in 0..config.iterations {
        let start = Instant::now();
        let (report, grad) = loss_and_gradient(&field, labels, weights)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        stepper.step(field.values_mut(), &grad.values);
        if field.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        trace.entries.push(TraceEntry {
            report,
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((field, trace))
}

/// Smallest denominator used when comparing gradients.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|a − b| / max(|a|, |b|, floor)`
#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the analytic loss gradient against central differences
/// `(L(p + ε) − L(p − ε)) / 2ε` on every coordinate and returns the largest
/// relative error.
pub fn finite_difference_check(
    field: &ColorField,
    labels: &LabelMap,
    weights: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (_, grad) = loss_and_gradient(field, labels, weights)?;
    let mut probe = field.clone();
    let mut worst = 0.0f64;
    for k in 0..field.values().len() {
        let orig = field.values()[k];
        probe.values_mut()[k] = orig + epsilon;
        let plus = loss_total(&probe, labels, weights)?.total;
        probe.values_mut()[k] = orig - epsilon;
        let minus = loss_total(&probe, labels, weights)?.total;
        probe.values_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(grad.values[k], numeric));
    }
    Ok(worst)
}

/// Random field in `[0, 255)` with random labels using every id in
/// `0..=instances`, for gradient checks.
pub fn random_check_case(width: usize, height: usize, instances: u32, seed: u64) -> Result<(ColorField, LabelMap)> {
    if (width * height) < instances as usize + 1 {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} cannot hold {instances} instances plus background"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let ids: Vec<u32> = (0..width * height).map(|_| rng.gen_range(0..=instances)).collect();
        let labels = match LabelMap::new(width, height, ids) {
            Ok(l) if l.instance_count() == instances as usize => l,
            _ => continue,
        };
        let values = (0..width * height * 3).map(|_| rng.gen_range(0.0..255.0)).collect();
        return Ok((ColorField::new(width, height, values)?, labels));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::encode_labels_as_colors;

    #[test]
    fn random_check_case_uses_every_id() {
        let (field, labels) = random_check_case(3, 2, 5, 1).unwrap();
        assert_eq!(labels.instance_count(), 5);
        assert_eq!(field.len_pixels(), 6);
        assert!(random_check_case(2, 2, 4, 1).is_err());
    }

    fn square_labels() -> LabelMap {
        let mut ids = vec![0u32; 16 * 16];
        for y in 4..12 {
            for x in 4..12 {
                ids[y * 16 + x] = 1;
            }
        }
        LabelMap::new(16, 16, ids).unwrap()
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = OptimConfig {
            iterations: 0,
            ..OptimConfig::default()
        };
        let err = optimize_direct_field(&square_labels(), &LossWeights::default(), &cfg).unwrap_err();
        assert!(err.to_string().contains("iterations ≥ 1"));
    }

    #[test]
    fn background_only_labels_rejected() {
        let labels = LabelMap::background(4, 4).unwrap();
        assert!(optimize_direct_field(&labels, &LossWeights::default(), &OptimConfig::default()).is_err());
    }

    #[test]
    fn single_square_converges() {
        let cfg = OptimConfig::default();
        let (field, trace) = optimize_direct_field(&square_labels(), &LossWeights::default(), &cfg).unwrap();
        assert_eq!(trace.len(), 500);
        let final_report = loss_total(&field, &square_labels(), &LossWeights::default()).unwrap();
        assert!(final_report.l_var < 1.0, "l_var {}", final_report.l_var);
        assert!(final_report.total < trace.first().unwrap().total);
    }

    #[test]
    fn optimization_is_deterministic() {
        let cfg = OptimConfig {
            iterations: 40,
            ..OptimConfig::default()
        };
        let (fa, ta) = optimize_direct_field(&square_labels(), &LossWeights::default(), &cfg).unwrap();
        let (fb, tb) = optimize_direct_field(&square_labels(), &LossWeights::default(), &cfg).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(ta.reports(), tb.reports());
    }

    #[test]
    fn gradient_descent_lowers_loss() {
        let cfg = OptimConfig {
            optimizer: OptimizerKind::GradientDescent,
            learning_rate: 1.0,
            iterations: 50,
            ..OptimConfig::default()
        };
        let (_, trace) = optimize_direct_field(&square_labels(), &LossWeights::default(), &cfg).unwrap();
        assert!(trace.last().unwrap().total < trace.first().unwrap().total);
    }

    #[test]
    fn fd_check_on_perfect_coloring_is_below_floor() {
        let labels = square_labels();
        let enc = encode_labels_as_colors(&labels, 2);
        let w = LossWeights {
            enable_sep: false,
            enable_mean: false,
            ..LossWeights::default()
        };
        let err = finite_difference_check(&enc.field, &labels, &w, 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_check_rejects_bad_epsilon() {
        let labels = square_labels();
        let enc = encode_labels_as_colors(&labels, 2);
        assert!(finite_difference_check(&enc.field, &labels, &LossWeights::default(), 0.0).is_err());
    }
}
