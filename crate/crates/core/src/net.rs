//! A three-layer convolutional color-field predictor trained with the
//! instance coloring loss. Backpropagation is written out by hand for the
//! fixed architecture, including the final min-max normalization.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ColorField, LabelMap, CHANNELS};
use crate::loss::{loss_and_gradient, loss_total, LossReport, LossWeights};
use crate::optim::{relative_error, OptimConfig, OptimizerKind, Stepper, TraceEntry, TrainTrace};

/// `(in_channels, out_channels)` of each 3×3 convolution.
pub const LAYERS: [(usize, usize); 3] = [(3, 16), (16, 16), (16, 3)];
const KERNEL: usize = 9;

pub const CHECKPOINT_FORMAT: &str = "icl-tinynet";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Offset of each layer's weights and biases in the flat parameter vector.
fn layout() -> [(usize, usize); 3] {
    let mut out = [(0, 0); 3];
    let mut at = 0;
    for (slot, &(cin, cout)) in out.iter_mut().zip(&LAYERS) {
        let w = at;
        at += cin * cout * KERNEL;
        *slot = (w, at);
        at += cout;
    }
    out
}

pub fn parameter_count() -> usize {
    LAYERS.iter().map(|&(cin, cout)| cin * cout * KERNEL + cout).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    params: Vec<f64>,
}

impl TinyNet {
    /// He-uniform weights drawn from `seed`, zero biases.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; parameter_count()];
        for (&(cin, cout), &(w, _)) in LAYERS.iter().zip(&layout()) {
            let bound = (6.0 / (cin * KERNEL) as f64).sqrt();
            for p in &mut params[w..w + cin * cout * KERNEL] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Self { params }
    }

    pub fn zeros() -> Self {
        Self { params: vec![0.0; parameter_count()] }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != parameter_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                parameter_count(),
                params.len()
            )));
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let (w, b) = layout()[k];
        let cout = LAYERS[k].1;
        (&self.params[w..b], &self.params[b..b + cout])
    }

    fn forward(&self, image: &ColorField) -> Forward {
        let (w, h) = (image.width(), image.height());
        let hw = w * h;
        let mut input = vec![0.0; CHANNELS * hw];
        for (p, px) in image.values().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                input[c * hw + p] = px[c] / 255.0;
            }
        }
        let (w1, b1) = self.layer(0);
        let (w2, b2) = self.layer(1);
        let (w3, b3) = self.layer(2);
        let mut a1 = conv_forward(&input, w, h, LAYERS[0], w1, b1);
        relu(&mut a1);
        let mut a2 = conv_forward(&a1, w, h, LAYERS[1], w2, b2);
        relu(&mut a2);
        let out = conv_forward(&a2, w, h, LAYERS[2], w3, b3);
        let mut raw = vec![0.0; CHANNELS * hw];
        for p in 0..hw {
            for c in 0..CHANNELS {
                raw[p * CHANNELS + c] = out[c * hw + p] * 255.0;
            }
        }
        Forward { width: w, height: h, input, a1, a2, raw }
    }

    /// Network output before normalization, interleaved per pixel.
    pub fn raw_output(&self, image: &ColorField) -> Vec<f64> {
        self.forward(image).raw
    }

    /// Loss of the normalized prediction and its gradient with respect to
    /// every parameter.
    pub fn loss_and_param_gradient(
        &self,
        image: &ColorField,
        labels: &LabelMap,
        weights: &LossWeights,
    ) -> Result<(LossReport, Vec<f64>)> {
        image.same_dims(labels)?;
        let fwd = self.forward(image);
        let (field, norm) = normalize_with_backward(fwd.width, fwd.height, &fwd.raw);
        let (report, grad) = loss_and_gradient(&field, labels, weights)?;
        let d_raw = norm.backward(field.values(), &grad.values);
        Ok((report, self.backward(&fwd, &d_raw)))
    }

    fn backward(&self, fwd: &Forward, d_raw: &[f64]) -> Vec<f64> {
        let (w, h) = (fwd.width, fwd.height);
        let hw = w * h;
        let mut grad = vec![0.0; self.params.len()];
        let lay = layout();

        let mut d_out = vec![0.0; CHANNELS * hw];
        for p in 0..hw {
            for c in 0..CHANNELS {
                d_out[c * hw + p] = d_raw[p * CHANNELS + c] * 255.0;
            }
        }
        let mut d_a2 = conv_backward(&fwd.a2, &d_out, w, h, LAYERS[2], self.layer(2).0, &mut grad, lay[2]);
        relu_backward(&fwd.a2, &mut d_a2);
        let mut d_a1 = conv_backward(&fwd.a1, &d_a2, w, h, LAYERS[1], self.layer(1).0, &mut grad, lay[1]);
        relu_backward(&fwd.a1, &mut d_a1);
        conv_backward(&fwd.input, &d_a1, w, h, LAYERS[0], self.layer(0).0, &mut grad, lay[0]);
        grad
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint(&ckpt).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (k, (&(cin, cout), &(w, b))) in LAYERS.iter().zip(&layout()).enumerate() {
            tensors.push(Tensor {
                name: format!("conv{}.weight", k + 1),
                shape: vec![cout, cin, 3, 3],
                data: self.params[w..b].to_vec(),
            });
            tensors.push(Tensor {
                name: format!("conv{}.bias", k + 1),
                shape: vec![cout],
                data: self.params[b..b + cout].to_vec(),
            });
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let expected = Self::zeros().to_checkpoint();
        if ckpt.tensors.len() != expected.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                expected.tensors.len(),
                ckpt.tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(parameter_count());
        for (got, want) in ckpt.tensors.iter().zip(&expected.tensors) {
            if got.name != want.name || got.shape != want.shape || got.data.len() != want.data.len() {
                return Err(Error::InvalidArgument(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
            params.extend_from_slice(&got.data);
        }
        Self::from_params(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<Tensor>,
}

struct Forward {
    width: usize,
    height: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    raw: Vec<f64>,
}

/// Planar 3×3 convolution with zero padding.
fn conv_forward(
    input: &[f64],
    w: usize,
    h: usize,
    (cin, cout): (usize, usize),
    weights: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let hw = w * h;
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for k in 0..KERNEL {
                let wk = weights[(o * cin + i) * KERNEL + k];
                let (dy, dx) = (k / 3, k % 3);
                for_each_tap(w, h, dy, dx, |dst, s| plane[dst] += wk * src[s]);
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients into `grad` and returns the
/// gradient with respect to `input`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    d_out: &[f64],
    w: usize,
    h: usize,
    (cin, cout): (usize, usize),
    weights: &[f64],
    grad: &mut [f64],
    (w_at, b_at): (usize, usize),
) -> Vec<f64> {
    let hw = w * h;
    let mut d_in = vec![0.0; cin * hw];
    for o in 0..cout {
        let g = &d_out[o * hw..(o + 1) * hw];
        grad[b_at + o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            let dst = &mut d_in[i * hw..(i + 1) * hw];
            for k in 0..KERNEL {
                let idx = (o * cin + i) * KERNEL + k;
                let wk = weights[idx];
                let (dy, dx) = (k / 3, k % 3);
                let mut acc = 0.0;
                for_each_tap(w, h, dy, dx, |p, s| {
                    acc += g[p] * src[s];
                    dst[s] += wk * g[p];
                });
                grad[w_at + idx] += acc;
            }
        }
    }
    d_in
}

/// Calls `f(out_index, in_index)` for every output pixel whose tap
/// `(dy, dx)` (0..3, centered at 1) lands inside the image.
#[inline]
fn for_each_tap(w: usize, h: usize, dy: usize, dx: usize, mut f: impl FnMut(usize, usize)) {
    let y_lo = usize::from(dy == 0);
    let y_hi = if dy == 2 { h - 1 } else { h };
    let x_lo = usize::from(dx == 0);
    let x_hi = if dx == 2 { w - 1 } else { w };
    for y in y_lo..y_hi {
        let sy = y + dy - 1;
        for x in x_lo..x_hi {
            f(y * w + x, sy * w + x + dx - 1);
        }
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn relu_backward(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Joint min-max normalization to `[0, 255]`, remembering what the
/// backward pass needs.
struct NormBackward {
    argmin: usize,
    argmax: usize,
    range: f64,
}

fn normalize_with_backward(w: usize, h: usize, raw: &[f64]) -> (ColorField, NormBackward) {
    let (mut argmin, mut argmax) = (0, 0);
    for (k, &v) in raw.iter().enumerate() {
        if v < raw[argmin] {
            argmin = k;
        }
        if v > raw[argmax] {
            argmax = k;
        }
    }
    let range = raw[argmax] - raw[argmin];
    let values = if range > 0.0 {
        raw.iter().map(|&v| ((v - raw[argmin]) * (255.0 / range)).clamp(0.0, 255.0)).collect()
    } else {
        vec![0.0; raw.len()]
    };
    let field = ColorField::new(w, h, values).expect("dimensions come from a valid image");
    (field, NormBackward { argmin, argmax, range })
}

impl NormBackward {
    fn backward(&self, out: &[f64], d_out: &[f64]) -> Vec<f64> {
        if self.range <= 0.0 {
            return vec![0.0; out.len()];
        }
        let scale = 255.0 / self.range;
        let mut d_raw: Vec<f64> = d_out.iter().map(|g| g * scale).collect();
        let (mut d_max, mut d_min) = (0.0, 0.0);
        for (&g, &y) in d_out.iter().zip(out) {
            d_max -= g * y / self.range;
            d_min += g * (y - 255.0) / self.range;
        }
        d_raw[self.argmax] += d_max;
        d_raw[self.argmin] += d_min;
        d_raw
    }
}

/// Normalized color field predicted for `image`.
pub fn predict(net: &TinyNet, image: &ColorField) -> ColorField {
    let fwd = net.forward(image);
    normalize_with_backward(fwd.width, fwd.height, &fwd.raw).0
}

/// Default settings for [`train_tiny_net`].
pub fn tiny_net_config() -> OptimConfig {
    OptimConfig {
        learning_rate: 1e-3,
        iterations: 2000,
        optimizer: OptimizerKind::Adam,
        ..OptimConfig::default()
    }
}

/// Trains a network initialized as `TinyNet::new(config.seed)` with one
/// image per step. Images are visited in a
/// seeded random order that is reshuffled every epoch.
pub fn train_tiny_net(
    dataset: &[(ColorField, LabelMap)],
    weights: &LossWeights,
    config: &OptimConfig,
) -> Result<(TinyNet, TrainTrace)> {
    config.validate()?;
    let Some((first, _)) = dataset.first() else {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    };
    for (image, labels) in dataset {
        first.same_dims(image)?;
        image.same_dims(labels)?;
    }
    let mut net = TinyNet::new(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut stepper = Stepper::new(*config, net.params.len());
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = Vec::new();

    for iteration in 0..config.iterations {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let pick = order.pop().expect("refilled above");
        let start = Instant::now();
        let (image, labels) = &dataset[pick];
        let (report, grad) = net.loss_and_param_gradient(image, labels, weights)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        stepper.step(&mut net.params, &grad);
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        trace.entries.push(TraceEntry {
            report,
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((net, trace))
}

/// Central-difference check of the parameter gradient of
/// `loss_total(predict(net, image))` over the parameters at `indices`.
/// Returns the largest relative error.
pub fn parameter_gradient_check(
    net: &TinyNet,
    image: &ColorField,
    labels: &LabelMap,
    weights: &LossWeights,
    indices: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let (_, analytic) = net.loss_and_param_gradient(image, labels, weights)?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for &k in indices {
        let orig = probe.params[k];
        probe.params[k] = orig + epsilon;
        let plus = loss_total(&predict(&probe, image), labels, weights)?.total;
        probe.params[k] = orig - epsilon;
        let minus = loss_total(&predict(&probe, image), labels, weights)?.total;
        probe.params[k] = orig;
        worst = worst.max(relative_error(analytic[k], (plus - minus) / (2.0 * epsilon)));
    }
    Ok(worst)
}
