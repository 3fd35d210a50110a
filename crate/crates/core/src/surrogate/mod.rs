//! Volumetric U-Net surrogate of the MSSI field: three architecture variants,
//! Adam training with early stopping, a global-max head and its reverse-mode
//! gradient with respect to the input densities.

pub mod autodiff;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::grid::{GridDims, ScalarField};
use crate::rng::substream;

pub use autodiff::{Gradients, Tape, Tensor, Var};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    /// Spatial attention on the bottleneck.
    SpatialAttention,
    /// Additive attention gates on the skip connections.
    AttentionGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub variant: Variant,
    /// Encoder channels per level, bottleneck last.
    #[serde(default = "default_ladder")]
    pub ladder: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_attention_kernel")]
    pub attention_kernel: usize,
}

fn default_ladder() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

fn default_kernel() -> usize {
    3
}

fn default_attention_kernel() -> usize {
    7
}

impl UNetSpec {
    pub fn new(variant: Variant) -> Self {
        Self { variant, ladder: default_ladder(), kernel: default_kernel(), attention_kernel: default_attention_kernel() }
    }

    pub fn levels(&self) -> usize {
        self.ladder.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.ladder.len() < 2 || self.ladder.contains(&0) {
            return Err(Error::InvalidParameter("ladder needs at least two nonzero channel counts".into()));
        }
        if self.kernel % 2 == 0 || self.attention_kernel % 2 == 0 {
            return Err(Error::InvalidParameter("kernel sizes must be odd".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in declared order.
    fn layout(&self) -> Vec<(String, [usize; 5])> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.w"), [cout, cin, k, k, k]));
            out.push((format!("{name}.b"), [1, cout, 1, 1, 1]));
        };
        let (c, k, l) = (&self.ladder, self.kernel, self.levels());
        for lvl in 0..=l {
            let cin = if lvl == 0 { 1 } else { c[lvl - 1] };
            let tag = if lvl == l { "bottleneck".to_string() } else { format!("enc{lvl}") };
            conv(format!("{tag}.a"), cin, c[lvl], k);
            conv(format!("{tag}.b"), c[lvl], c[lvl], k);
        }
        if self.variant == Variant::SpatialAttention {
            conv("attention".into(), 2, 1, self.attention_kernel);
        }
        for lvl in (0..l).rev() {
            conv(format!("dec{lvl}.up"), c[lvl + 1], c[lvl], k);
            if self.variant == Variant::AttentionGate {
                let f = (c[lvl] / 2).max(1);
                conv(format!("gate{lvl}.x"), c[lvl], f, 1);
                conv(format!("gate{lvl}.g"), c[lvl + 1], f, 1);
                conv(format!("gate{lvl}.psi"), f, 1, 1);
            }
            conv(format!("dec{lvl}.a"), 2 * c[lvl], c[lvl], k);
            conv(format!("dec{lvl}.b"), c[lvl], c[lvl], k);
        }
        conv("out".into(), c[0], 1, 1);
        out
    }
}

/// Intermediate results of one forward pass.
pub struct Forward {
    pub input: Var,
    pub output: Var,
    /// Attention-gate coefficients, finest level first.
    pub gates: Vec<Var>,
    pub spatial_map: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub spec: UNetSpec,
    pub params: Vec<Tensor>,
    pub names: Vec<String>,
    /// Fixed multiplier on the last layer, set from the training labels.
    pub output_scale: f64,
}

impl UNet {
    /// Glorot-uniform weights and zero biases from the seed's init stream.
    pub fn new(spec: UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(seed, "surrogate.init");
        let mut net = Self::zeros(spec)?;
        for (p, name) in net.params.iter_mut().zip(&net.names) {
            if name.ends_with(".w") {
                let [cout, cin, k, _, _] = p.shape;
                let k3 = (k * k * k) as f64;
                let a = (6.0 / ((cin as f64 + cout as f64) * k3)).sqrt();
                p.data.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: UNetSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        Ok(Self {
            params: layout.iter().map(|(_, s)| Tensor::zeros(*s)).collect(),
            names: layout.into_iter().map(|(n, _)| n).collect(),
            spec,
            output_scale: 1.0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn multiple(&self) -> usize {
        1 << self.spec.levels()
    }

    /// Grid padded up to multiples of `2^levels`.
    pub fn padded_dims(&self, d: GridDims) -> [usize; 3] {
        let m = self.multiple();
        [d.nx.div_ceil(m) * m, d.ny.div_ceil(m) * m, d.nz.div_ceil(m) * m]
    }

    fn pad(&self, f: &ScalarField) -> Tensor {
        let d = f.dims;
        let [px, py, pz] = self.padded_dims(d);
        let mut t = Tensor::zeros([1, 1, px, py, pz]);
        for k in 0..d.nz {
            for j in 0..d.ny {
                let src = d.index(0, j, k);
                let dst = px * (j + py * k);
                t.data[dst..dst + d.nx].copy_from_slice(&f.values[src..src + d.nx]);
            }
        }
        t
    }

    fn crop(&self, t: &Tensor, d: GridDims) -> ScalarField {
        let [px, py, _] = [t.shape[2], t.shape[3], t.shape[4]];
        let mut values = Vec::with_capacity(d.len());
        for k in 0..d.nz {
            for j in 0..d.ny {
                let src = px * (j + py * k);
                values.extend_from_slice(&t.data[src..src + d.nx]);
            }
        }
        ScalarField { dims: d, values }
    }

    /// Records the network on `tape`, starting from a padded input.
    pub fn record(&self, tape: &mut Tape<'_>, input: Tensor) -> Forward {
        let mut next = 0;
        let mut take = || {
            let i = next;
            next += 2;
            (i, i + 1)
        };
        let conv_relu = |tape: &mut Tape<'_>, x: Var, (w, b): (usize, usize)| {
            let y = tape.conv(x, w, b);
            tape.relu(y)
        };
        let l = self.spec.levels();
        let input = tape.input(input);
        let mut x = input;
        let mut skips = Vec::with_capacity(l);
        for _ in 0..l {
            x = conv_relu(tape, x, take());
            x = conv_relu(tape, x, take());
            skips.push(x);
            x = tape.max_pool2(x);
        }
        x = conv_relu(tape, x, take());
        x = conv_relu(tape, x, take());
        let mut spatial_map = None;
        if self.spec.variant == Variant::SpatialAttention {
            let stats = tape.channel_stats(x);
            let (w, b) = take();
            let logits = tape.conv(stats, w, b);
            let map = tape.sigmoid(logits);
            check_unit_interval(tape.value(map));
            x = tape.mul_channels(map, x);
            spatial_map = Some(map);
        }
        let mut gates = Vec::new();
        for lvl in (0..l).rev() {
            let coarse = x;
            let up = tape.upsample2(coarse);
            let up = conv_relu(tape, up, take());
            let mut skip = skips[lvl];
            if self.spec.variant == Variant::AttentionGate {
                let (wx, bx) = take();
                let (wg, bg) = take();
                let (wp, bp) = take();
                let theta = tape.conv(skip, wx, bx);
                let phi = tape.conv(coarse, wg, bg);
                let phi = tape.upsample2(phi);
                let sum = tape.add(theta, phi);
                let act = tape.relu(sum);
                let psi = tape.conv(act, wp, bp);
                let alpha = tape.sigmoid(psi);
                check_unit_interval(tape.value(alpha));
                skip = tape.mul_channels(alpha, skip);
                gates.push(alpha);
            }
            let cat = tape.concat(skip, up);
            x = conv_relu(tape, cat, take());
            x = conv_relu(tape, x, take());
        }
        let (w, b) = take();
        let raw = tape.conv(x, w, b);
        let output = tape.scale(raw, self.output_scale);
        gates.reverse();
        Forward { input, output, gates, spatial_map }
    }

    /// Predicted MSSI field on the input's grid.
    pub fn predict(&self, rho: &ScalarField) -> ScalarField {
        let mut tape = Tape::new(&self.params);
        let fwd = self.record(&mut tape, self.pad(rho));
        self.crop(tape.value(fwd.output), rho.dims)
    }

    /// Attention-gate coefficients on the input grid, finest level first.
    pub fn gate_fields(&self, rho: &ScalarField) -> Vec<ScalarField> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.record(&mut tape, self.pad(rho));
        fwd.gates
            .iter()
            .map(|g| {
                let t = tape.value(*g);
                let [px, py, pz] = self.padded_dims(rho.dims);
                let (sx, sy, sz) = (px / t.shape[2], py / t.shape[3], pz / t.shape[4]);
                let d = rho.dims;
                let mut values = Vec::with_capacity(d.len());
                for k in 0..d.nz {
                    for j in 0..d.ny {
                        for i in 0..d.nx {
                            values.push(t.data[i / sx + t.shape[2] * (j / sy + t.shape[3] * (k / sz))]);
                        }
                    }
                }
                ScalarField { dims: d, values }
            })
            .collect()
    }

    fn head_mask(&self, d: GridDims, mask: Option<&[bool]>) -> Vec<bool> {
        let [px, py, pz] = self.padded_dims(d);
        let mut m = vec![false; px * py * pz];
        for k in 0..d.nz {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    m[i + px * (j + py * k)] = mask.is_none_or(|mk| mk[d.index(i, j, k)]);
                }
            }
        }
        m
    }

    /// Largest prediction over the voxels allowed by `mask`.
    pub fn predict_max(&self, rho: &ScalarField, mask: Option<&[bool]>) -> f64 {
        let mut tape = Tape::new(&self.params);
        let fwd = self.record(&mut tape, self.pad(rho));
        let head = self.head_mask(rho.dims, mask);
        let z = tape.global_max(fwd.output, Some(&head));
        tape.value(z).data[0]
    }

    /// `zeta` and its gradient with respect to every input density. The max
    /// head passes the whole gradient to its (lowest-index) winner.
    pub fn input_gradient(&self, rho: &ScalarField, mask: Option<&[bool]>) -> GradResult {
        let mut tape = Tape::new(&self.params);
        let fwd = self.record(&mut tape, self.pad(rho));
        let head = self.head_mask(rho.dims, mask);
        let z = tape.global_max(fwd.output, Some(&head));
        let max_mssi = tape.value(z).data[0];
        let grads = tape.backward(z, Tensor::from_vec([1, 1, 1, 1, 1], vec![1.0]));
        let g = grads.of(fwd.input).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(fwd.input).shape));
        GradResult { max_mssi, input_gradient: self.crop(&g, rho.dims) }
    }
}

fn check_unit_interval(t: &Tensor) {
    assert!(t.data.iter().all(|a| (0.0..=1.0).contains(a)), "attention coefficient outside [0, 1]");
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub max_mssi: f64,
    pub input_gradient: ScalarField,
}

pub const MRE_EPS: f64 = 1e-8;

/// Mean of `|y - p| / (eps + max(|y|, |p|))` over the voxels allowed by `mask`.
pub fn mre(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::SizeMismatch { expected: truth.len(), actual: pred.len() });
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (p, y)) in pred.iter().zip(truth).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        sum += (y - p).abs() / (MRE_EPS + y.abs().max(p.abs()));
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Material voxels of a design, where MRE is scored.
pub fn material_mask(geometry: &ScalarField) -> Vec<bool> {
    geometry.values.iter().map(|r| *r >= 0.5).collect()
}

/// One training pair: density volume and its MSSI label.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub input: ScalarField,
    pub target: ScalarField,
}

/// Geometry/label pairs of labelled samples.
pub fn pairs(samples: &[SampleRecord]) -> Result<Vec<Pair>> {
    samples
        .iter()
        .map(|s| match &s.label {
            Some(l) => Ok(Pair { input: s.geometry.clone(), target: l.clone() }),
            None => Err(Error::InvalidParameter(format!("sample {} has no label", s.id))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    4
}

fn default_epochs() -> usize {
    150
}

fn default_patience() -> usize {
    5
}

fn default_min_delta() -> f64 {
    1e-9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            min_delta: default_min_delta(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 || self.min_delta < 0.0 {
            return Err(Error::InvalidParameter("training needs lr > 0, batch, patience and epochs >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mre: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[Tensor]) -> Self {
        Self { m: params.iter().map(|p| vec![0.0; p.len()]).collect(), v: params.iter().map(|p| vec![0.0; p.len()]).collect(), t: 0 }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (p, ((g, m), v)) in params.iter_mut().zip(grads.iter().zip(&mut self.m).zip(&mut self.v)) {
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

impl UNet {
    /// Mean squared error of one pair in units of the output scale, with
    /// parameter gradients when requested.
    fn pair_loss(&self, pair: &Pair, with_grad: bool) -> (f64, Option<Vec<Option<Tensor>>>) {
        let mut tape = Tape::new(&self.params);
        let fwd = self.record(&mut tape, self.pad(&pair.input));
        let out = tape.value(fwd.output);
        let target = self.pad(&pair.target);
        let valid = self.head_mask(pair.input.dims, None);
        let n = pair.input.dims.len() as f64;
        let s2 = self.output_scale * self.output_scale;
        let mut loss = 0.0;
        let mut seed = Tensor::zeros(out.shape);
        for i in 0..out.len() {
            if valid[i] {
                let r = out.data[i] - target.data[i];
                loss += r * r / (n * s2);
                seed.data[i] = 2.0 * r / (n * s2);
            }
        }
        if !with_grad {
            return (loss, None);
        }
        let grads = tape.backward(fwd.output, seed);
        (loss, Some(grads.params))
    }

    /// Mean loss and mean MRE (over material voxels) of a set of pairs.
    pub fn evaluate(&self, pairs: &[Pair]) -> Result<(f64, f64)> {
        if pairs.is_empty() {
            return Ok((0.0, 0.0));
        }
        let rows: Vec<Result<(f64, f64)>> = pairs
            .par_iter()
            .map(|p| {
                let (loss, _) = self.pair_loss(p, false);
                let pred = self.predict(&p.input);
                Ok((loss, mre(&pred.values, &p.target.values, Some(&material_mask(&p.input)))?))
            })
            .collect();
        let (mut l, mut m) = (0.0, 0.0);
        for r in rows {
            let (a, b) = r?;
            l += a;
            m += b;
        }
        Ok((l / pairs.len() as f64, m / pairs.len() as f64))
    }

    /// Output scale = largest label magnitude in `pairs` (1 if all zero).
    pub fn fit_output_scale(&mut self, pairs: &[Pair]) {
        let m = pairs.iter().flat_map(|p| p.target.values.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        self.output_scale = if m > 0.0 { m } else { 1.0 };
    }
}

/// Adam on the mean squared error with early stopping on the validation loss
/// (training loss when `val` is empty); the best epoch's weights are restored.
pub fn train(net: &mut UNet, train: &[Pair], val: &[Pair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut adam = Adam::new(&net.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = substream(cfg.seed, "surrogate.shuffle");
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, net.params.clone());
    let mut waited = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Option<Vec<Option<Tensor>>>)> =
                batch.par_iter().map(|&i| net.pair_loss(&train[i], true)).collect();
            let mut grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.len()]).collect();
            let inv = 1.0 / batch.len() as f64;
            for (loss, g) in results {
                train_loss += loss;
                for (acc, gp) in grads.iter_mut().zip(g.into_iter().flatten()) {
                    if let Some(t) = gp {
                        acc.iter_mut().zip(&t.data).for_each(|(a, b)| *a += inv * b);
                    }
                }
            }
            adam.step(&mut net.params, &grads, cfg.lr);
        }
        train_loss /= train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let (val_loss, val_mre) = if val.is_empty() { (train_loss, 0.0) } else { net.evaluate(val)? };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, val_mre });
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, epoch, net.params.clone());
            waited = 0;
        } else {
            waited += 1;
            if waited >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    net.params = best.2;
    Ok(TrainOutcome { history, best_epoch: best.1, stopped_early })
}
