//! Compact patch CNN: two 3×3 "same" convolutions with ReLU and 2×2 max
//! pooling, dropout, one hidden ReLU layer and a softmax output. Parameters
//! live in one flat vector so the optimizer and gradient checks can treat
//! them uniformly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "droplex-cnn";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub patch_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
    pub dropout_conv: f64,
    pub dropout_hidden: f64,
    /// Fixed input scale; keeps absolute magnitude informative.
    pub input_scale: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            conv1_channels: 32,
            conv2_channels: 64,
            hidden: 128,
            dropout_conv: 0.25,
            dropout_hidden: 0.5,
            input_scale: 1.0 / 800.0,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 4 || self.patch_size % 4 != 0 {
            return Err(Error::InvalidParameter(format!(
                "patch_size must be a positive multiple of 4, got {}",
                self.patch_size
            )));
        }
        if self.conv1_channels == 0 || self.conv2_channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter("layer widths must be >= 1".into()));
        }
        for p in [self.dropout_conv, self.dropout_hidden] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("dropout must lie in [0, 1), got {p}")));
            }
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::InvalidParameter("input_scale must be > 0".into()));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let s = self.patch_size / 4;
        self.conv2_channels * s * s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset patience.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
            threshold: 1e-4,
            min_lr: 0.0,
        }
    }
}

/// Halves the learning rate once the monitored loss stops improving for
/// more than `patience` epochs.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    cfg: SchedulerConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, cfg: SchedulerConfig) -> Self {
        Self {
            cfg,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.cfg.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.cfg.patience {
            self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub scheduler: SchedulerConfig,
    pub folds: usize,
    pub frames_per_region: usize,
    /// Share of the training data held out to drive the scheduler.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 16,
            lr: 0.001,
            scheduler: SchedulerConfig::default(),
            folds: 5,
            frames_per_region: 50,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.folds == 0 || self.frames_per_region == 0 {
            return Err(Error::InvalidParameter(
                "epochs, batch, folds and frames_per_region must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidParameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::InvalidParameter("validation_fraction must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    w4: usize,
    b4: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &CnnConfig, classes: usize) -> Self {
        let (c1, c2, h) = (cfg.conv1_channels, cfg.conv2_channels, cfg.hidden);
        let w1 = 0;
        let b1 = w1 + c1 * 9;
        let w2 = b1 + c1;
        let b2 = w2 + c2 * c1 * 9;
        let w3 = b2 + c2;
        let b3 = w3 + h * cfg.flat_features();
        let w4 = b3 + h;
        let b4 = w4 + classes * h;
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            w4,
            b4,
            total: b4 + classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub architecture: CnnConfig,
    pub classes: Vec<String>,
    pub parameter_count: usize,
}

/// A CNN with its parameters; serializes to a JSON dump with an
/// architecture header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct Cnn {
    cfg: CnnConfig,
    classes: Vec<String>,
    params: Vec<f64>,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    header: ModelHeader,
    params: Vec<f64>,
}

impl TryFrom<ModelFile> for Cnn {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.header.format != MODEL_FORMAT || f.header.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model format {} v{}",
                f.header.format, f.header.version
            )));
        }
        let mut cnn = Cnn::zeros(&f.header.architecture, f.header.classes)?;
        if f.params.len() != cnn.params.len() {
            return Err(Error::Schema(format!(
                "model has {} parameters, architecture needs {}",
                f.params.len(),
                cnn.params.len()
            )));
        }
        cnn.params = f.params;
        Ok(cnn)
    }
}

impl From<Cnn> for ModelFile {
    fn from(c: Cnn) -> Self {
        ModelFile {
            header: c.header(),
            params: c.params,
        }
    }
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    x: Vec<f64>,
    z1: Vec<f64>,
    p1: Vec<f64>,
    arg1: Vec<usize>,
    z2: Vec<f64>,
    arg2: Vec<usize>,
    flat: Vec<f64>,
    mask1: Option<Vec<f64>>,
    zh: Vec<f64>,
    h: Vec<f64>,
    mask2: Option<Vec<f64>>,
    probs: Vec<f64>,
}

fn conv3x3_forward(input: &[f64], c_in: usize, n: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * n * n];
    for o in 0..c_out {
        let plane = &mut out[o * n * n..(o + 1) * n * n];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..c_in {
            let src = &input[i * n * n..(i + 1) * n * n];
            let k = &w[(o * c_in + i) * 9..(o * c_in + i + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    for y in 0..n {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= n as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * n..(sy as usize + 1) * n];
                        let orow = &mut plane[y * n..(y + 1) * n];
                        for x in 0..n {
                            let sx = x as isize + kx as isize - 1;
                            if sx >= 0 && sx < n as isize {
                                orow[x] += wv * srow[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    n: usize,
    w: &[f64],
    c_out: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let mut din = need_input.then(|| vec![0.0; c_in * n * n]);
    for o in 0..c_out {
        let g = &dout[o * n * n..(o + 1) * n * n];
        db[o] += g.iter().sum::<f64>();
        for i in 0..c_in {
            let src = &input[i * n * n..(i + 1) * n * n];
            let base = (o * c_in + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in 0..n {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= n as isize {
                            continue;
                        }
                        for x in 0..n {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= n as isize {
                                continue;
                            }
                            let si = sy as usize * n + sx as usize;
                            let gv = g[y * n + x];
                            acc += gv * src[si];
                            if let Some(d) = din.as_mut() {
                                d[i * n * n + si] += gv * wv;
                            }
                        }
                    }
                    dw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
    din
}

/// 2×2 max pooling with stride 2 after ReLU. Returns outputs and the flat
/// input index of each winner.
fn relu_maxpool(z: &[f64], channels: usize, n: usize) -> (Vec<f64>, Vec<usize>) {
    let m = n / 2;
    let mut out = Vec::with_capacity(channels * m * m);
    let mut arg = Vec::with_capacity(channels * m * m);
    for c in 0..channels {
        for y in 0..m {
            for x in 0..m {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = c * n * n + (2 * y + dy) * n + 2 * x + dx;
                    let v = z[i].max(0.0);
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to the winning pre-activations, through ReLU.
fn maxpool_relu_backward(dout: &[f64], arg: &[usize], z: &[f64], len: usize) -> Vec<f64> {
    let mut d = vec![0.0; len];
    for (g, &i) in dout.iter().zip(arg) {
        if z[i] > 0.0 {
            d[i] += g;
        }
    }
    d
}

fn dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Cnn {
    fn zeros(cfg: &CnnConfig, classes: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        if classes.len() < 2 {
            return Err(Error::Degenerate(format!("need >= 2 classes, got {}", classes.len())));
        }
        let layout = Layout::new(cfg, classes.len());
        Ok(Self {
            cfg: cfg.clone(),
            params: vec![0.0; layout.total],
            classes,
            layout,
        })
    }

    /// He-normal weights, zero biases.
    pub fn new(cfg: &CnnConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        let mut cnn = Self::zeros(cfg, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = cnn.layout;
        let fans = [
            (l.w1, l.b1, 9),
            (l.w2, l.b2, cfg.conv1_channels * 9),
            (l.w3, l.b3, cfg.flat_features()),
            (l.w4, l.b4, cfg.hidden),
        ];
        for (start, end, fan_in) in fans {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for p in &mut cnn.params[start..end] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(cnn)
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            architecture: self.cfg.clone(),
            classes: self.classes.clone(),
            parameter_count: self.params.len(),
        }
    }

    fn check_input(&self, patch: &[f64]) -> Result<()> {
        let n = self.cfg.patch_size;
        if patch.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected_rows: n,
                expected_cols: n,
                rows: patch.len() / n.max(1),
                cols: n,
            });
        }
        Ok(())
    }

    fn forward(&self, patch: &[f64], rng: Option<&mut ChaCha8Rng>) -> Trace {
        let (cfg, l, p) = (&self.cfg, &self.layout, &self.params);
        let (n, c1, c2, hid, k) = (cfg.patch_size, cfg.conv1_channels, cfg.conv2_channels, cfg.hidden, self.classes.len());
        let x: Vec<f64> = patch.iter().map(|v| v * cfg.input_scale).collect();
        let z1 = conv3x3_forward(&x, 1, n, &p[l.w1..l.b1], &p[l.b1..l.w2], c1);
        let (p1, arg1) = relu_maxpool(&z1, c1, n);
        let z2 = conv3x3_forward(&p1, c1, n / 2, &p[l.w2..l.b2], &p[l.b2..l.w3], c2);
        let (mut flat, arg2) = relu_maxpool(&z2, c2, n / 2);
        let (mut mask1, mut mask2) = (None, None);
        let mut rng = rng;
        if let Some(r) = rng.as_deref_mut() {
            if cfg.dropout_conv > 0.0 {
                let m = dropout_mask(flat.len(), cfg.dropout_conv, r);
                flat.iter_mut().zip(&m).for_each(|(v, m)| *v *= m);
                mask1 = Some(m);
            }
        }
        let w3 = &p[l.w3..l.b3];
        let f = flat.len();
        let zh: Vec<f64> = (0..hid)
            .map(|j| p[l.b3 + j] + w3[j * f..(j + 1) * f].iter().zip(&flat).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mut h: Vec<f64> = zh.iter().map(|v| v.max(0.0)).collect();
        if let Some(r) = rng.as_deref_mut() {
            if cfg.dropout_hidden > 0.0 {
                let m = dropout_mask(h.len(), cfg.dropout_hidden, r);
                h.iter_mut().zip(&m).for_each(|(v, m)| *v *= m);
                mask2 = Some(m);
            }
        }
        let w4 = &p[l.w4..l.b4];
        let logits: Vec<f64> = (0..k)
            .map(|c| p[l.b4 + c] + w4[c * hid..(c + 1) * hid].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Trace {
            probs: softmax(&logits),
            x,
            z1,
            p1,
            arg1,
            z2,
            arg2,
            flat,
            mask1,
            zh,
            h,
            mask2,
        }
    }

    fn backward(&self, t: &Trace, label: usize, grad: &mut [f64]) {
        let (cfg, l, p) = (&self.cfg, &self.layout, &self.params);
        let (n, c1, c2, hid, k) = (cfg.patch_size, cfg.conv1_channels, cfg.conv2_channels, cfg.hidden, self.classes.len());
        let f = t.flat.len();
        let mut dlogits = t.probs.clone();
        dlogits[label] -= 1.0;
        let mut dh = vec![0.0; hid];
        for c in 0..k {
            let g = dlogits[c];
            grad[l.b4 + c] += g;
            for j in 0..hid {
                grad[l.w4 + c * hid + j] += g * t.h[j];
                dh[j] += g * p[l.w4 + c * hid + j];
            }
        }
        if let Some(m) = &t.mask2 {
            dh.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
        }
        let mut dflat = vec![0.0; f];
        for j in 0..hid {
            if t.zh[j] <= 0.0 {
                continue;
            }
            let g = dh[j];
            grad[l.b3 + j] += g;
            let row = l.w3 + j * f;
            for i in 0..f {
                grad[row + i] += g * t.flat[i];
                dflat[i] += g * p[row + i];
            }
        }
        if let Some(m) = &t.mask1 {
            dflat.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
        }
        let dz2 = maxpool_relu_backward(&dflat, &t.arg2, &t.z2, t.z2.len());
        let (gw2, rest) = grad[l.w2..].split_at_mut(l.b2 - l.w2);
        let dp1 = conv3x3_backward(&t.p1, c1, n / 2, &p[l.w2..l.b2], c2, &dz2, gw2, &mut rest[..c2], true)
            .expect("input gradient requested");
        let dz1 = maxpool_relu_backward(&dp1, &t.arg1, &t.z1, t.z1.len());
        let (gw1, rest) = grad[l.w1..].split_at_mut(l.b1 - l.w1);
        conv3x3_backward(&t.x, 1, n, &p[l.w1..l.b1], c1, &dz1, gw1, &mut rest[..c1], false);
    }

    /// Class probabilities for one patch (no dropout).
    pub fn predict_proba(&self, patch: &[f64]) -> Result<Vec<f64>> {
        self.check_input(patch)?;
        Ok(self.forward(patch, None).probs)
    }

    pub fn predict(&self, patch: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(patch)?))
    }

    /// Mean cross-entropy over a batch and its gradient. Dropout is applied
    /// only when `rng` is given.
    pub fn loss_and_grad(&self, patches: &[&[f64]], labels: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<f64>)> {
        self.check_batch(patches, labels)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let mut rng = rng;
        for (x, &y) in patches.iter().zip(labels) {
            let t = self.forward(x, rng.as_deref_mut());
            loss -= t.probs[y].max(1e-300).ln();
            self.backward(&t, y, &mut grad);
        }
        let scale = 1.0 / patches.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    /// Mean cross-entropy without dropout.
    pub fn loss(&self, patches: &[&[f64]], labels: &[usize]) -> Result<f64> {
        self.check_batch(patches, labels)?;
        let total: f64 = patches
            .iter()
            .zip(labels)
            .map(|(x, &y)| -self.forward(x, None).probs[y].max(1e-300).ln())
            .sum();
        Ok(total / patches.len() as f64)
    }

    fn check_batch(&self, patches: &[&[f64]], labels: &[usize]) -> Result<()> {
        if patches.is_empty() || patches.len() != labels.len() {
            return Err(Error::InsufficientData("batch must be nonempty with one label per patch".into()));
        }
        for x in patches {
            self.check_input(x)?;
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.classes.len()) {
            return Err(Error::InvalidParameter(format!("label {y} out of range")));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub monitor_loss: f64,
    pub lr: f64,
}

/// Trains on `(patches, labels)`. A validation share of the data drives the
/// plateau scheduler; with no validation share the training loss does.
pub fn fit_cnn(
    patches: &[&[f64]],
    labels: &[usize],
    classes: Vec<String>,
    cfg: &CnnConfig,
    tc: &TrainConfig,
) -> Result<(Cnn, Vec<EpochStats>)> {
    tc.validate()?;
    let k = classes.len();
    if patches.len() != labels.len() {
        return Err(Error::InvalidParameter("one label per patch required".into()));
    }
    let mut present = vec![false; k];
    for &y in labels {
        if y >= k {
            return Err(Error::InvalidParameter(format!("label {y} out of range")));
        }
        present[y] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::Degenerate("training data must contain >= 2 classes".into()));
    }
    if patches.len() < tc.batch {
        return Err(Error::InsufficientData(format!(
            "need at least one batch ({}) of samples, got {}",
            tc.batch,
            patches.len()
        )));
    }
    let mut model = Cnn::new(cfg, classes, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (patches.len() as f64 * tc.validation_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_x: Vec<&[f64]> = val_idx.iter().map(|&i| patches[i]).collect();
    let val_y: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
    let mut adam = Adam::new(model.params.len());
    let mut sched = ReduceOnPlateau::new(tc.lr, tc.scheduler);
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        train_idx.shuffle(&mut rng);
        let lr = sched.lr();
        let mut total = 0.0;
        for chunk in train_idx.chunks(tc.batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| patches[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = model.loss_and_grad(&xs, &ys, Some(&mut rng))?;
            total += loss * chunk.len() as f64;
            adam.update(&mut model.params, &grad, lr);
        }
        let train_loss = total / train_idx.len() as f64;
        let monitor_loss = if val_x.is_empty() {
            train_loss
        } else {
            model.loss(&val_x, &val_y)?
        };
        sched.step(monitor_loss);
        history.push(EpochStats {
            epoch,
            train_loss,
            monitor_loss,
            lr,
        });
    }
    Ok((model, history))
}
