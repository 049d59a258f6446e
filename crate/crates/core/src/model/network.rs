//! Forward and backward passes, loss, and the SGD update.

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Model, Weights};
use crate::conv::{conv2d_batch_backward, conv2d_batch_forward};
use crate::error::{Error, Result};
use crate::rotation::RotationPair;
use crate::surrogate::{
    binarized_weight_backward, binarized_weight_forward, surrogate_backward, surrogate_forward,
    BinarizedWeight, WeightQuantizer,
};
use crate::tensor::{matmul_t, Tensor};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Everything real-valued; the `binarize` flags are ignored.
    Real,
    /// Binarized layers use `F(w~)` weights and quantized activations.
    FedBnn,
    /// `sign(w~)` weights (or `sign(w)` without server weights) and sign activations.
    EvalBinary,
    /// Stored weights used verbatim, sign activations at binarized layers.
    Binary,
}

/// Activation quantizer used by binarized layers during FedBNN training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationQuant {
    /// The same annealed `F` as the weights.
    #[default]
    Surrogate,
    /// `sign` forward, clipped identity backward.
    Ste,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub tk: (f64, f64),
    pub act_quant: ActivationQuant,
    /// Batch statistics in batch norm (otherwise running statistics).
    pub train: bool,
    pub lambda_one: bool,
    pub w_server: Option<&'a Weights>,
}

impl<'a> ForwardOptions<'a> {
    pub fn real(train: bool) -> Self {
        Self {
            mode: Mode::Real,
            tk: (1.0, 1.0),
            act_quant: ActivationQuant::Surrogate,
            train,
            lambda_one: false,
            w_server: None,
        }
    }

    pub fn fedbnn(w_server: &'a Weights, tk: (f64, f64), train: bool) -> Self {
        Self {
            mode: Mode::FedBnn,
            tk,
            w_server: Some(w_server),
            ..Self::real(train)
        }
    }

    pub fn eval_binary(w_server: Option<&'a Weights>) -> Self {
        Self {
            mode: Mode::EvalBinary,
            w_server,
            ..Self::real(false)
        }
    }

    pub fn binary() -> Self {
        Self {
            mode: Mode::Binary,
            ..Self::real(false)
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum InputQuant {
    Surrogate { t: f64, k: f64 },
    Sign,
}

impl InputQuant {
    fn forward(self, x: &Tensor) -> Tensor {
        match self {
            InputQuant::Surrogate { t, k } => surrogate_forward(x, t, k),
            InputQuant::Sign => x.sign(),
        }
    }

    fn backward(self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        match self {
            InputQuant::Surrogate { t, k } => g.mul(&surrogate_backward(x, t, k)),
            InputQuant::Sign => x.zip_map(g, |a, b| if a.abs() <= 1.0 { b } else { 0.0 }),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
struct WeightCache {
    effective: Tensor,
    binarized: Option<BinarizedWeight>,
}

#[derive(Clone, Debug)]
enum LayerCache {
    Conv {
        x: Tensor,
        xq: Option<(Tensor, InputQuant)>,
        weight: WeightCache,
        stride: usize,
        pad: usize,
        pad_value: f64,
        bn: Option<BnCache>,
        /// Post-norm output, kept for the ReLU mask.
        y: Tensor,
        relu: bool,
    },
    Pool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Dense {
        x_shape: Vec<usize>,
        x: Tensor,
        xq: Option<(Tensor, InputQuant)>,
        weight: WeightCache,
    },
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    version: u64,
    mode: Mode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub w: Tensor,
    pub bn_scale: Option<Tensor>,
    pub bn_shift: Option<Tensor>,
    pub omega: f64,
    pub theta: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrads>,
    /// Per-layer `(mean, unbiased var)` from training-mode batch norm.
    pub batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// For each spec layer, whether it is followed (after pooling) by a
/// binarized trainable layer.
pub(crate) fn feeds_binarized(spec: &super::ModelSpec) -> Vec<bool> {
    let layers = &spec.layers;
    (0..layers.len())
        .map(|i| {
            layers[i + 1..]
                .iter()
                .find(|l| l.is_trainable())
                .is_some_and(|l| l.binarize())
        })
        .collect()
}

fn effective_weight(
    model: &Model,
    j: usize,
    opts: &ForwardOptions,
) -> Result<WeightCache> {
    let layer = &model.layers[j];
    if !layer.binarize || opts.mode == Mode::Real || opts.mode == Mode::Binary {
        return Ok(WeightCache {
            effective: layer.w.clone(),
            binarized: None,
        });
    }
    let server = match (opts.w_server, opts.mode) {
        (Some(s), _) => Some(&s.layers.get(j).ok_or_else(|| Error::Protocol("server weights too shallow".into()))?.w),
        (None, Mode::FedBnn) => {
            return Err(Error::Protocol("fedbnn forward needs server weights".into()))
        }
        (None, _) => None,
    };
    let Some(server) = server else {
        return Ok(WeightCache {
            effective: layer.w.sign(),
            binarized: None,
        });
    };
    layer.w.same_shape(server)?;
    let identity;
    let rot = match &layer.rot {
        Some(r) => r,
        None => {
            identity = RotationPair::identity(crate::rotation::Matricization::for_weight_shape(layer.w.shape())?);
            &identity
        }
    };
    let quantizer = match opts.mode {
        Mode::FedBnn => WeightQuantizer::Surrogate {
            t: opts.tk.0,
            k: opts.tk.1,
        },
        _ => WeightQuantizer::Sign,
    };
    let bw = binarized_weight_forward(&layer.w, server, rot, &layer.mix, opts.lambda_one, quantizer)?;
    Ok(WeightCache {
        effective: bw.effective.clone(),
        binarized: (opts.mode == Mode::FedBnn).then_some(bw),
    })
}

fn input_quant(binarize: bool, opts: &ForwardOptions) -> Option<InputQuant> {
    if !binarize {
        return None;
    }
    match (opts.mode, opts.act_quant) {
        (Mode::Real, _) => None,
        (Mode::FedBnn, ActivationQuant::Surrogate) => Some(InputQuant::Surrogate {
            t: opts.tk.0,
            k: opts.tk.1,
        }),
        _ => Some(InputQuant::Sign),
    }
}

pub(crate) fn batch_norm_forward(
    z: &mut Tensor,
    bn: &super::BatchNorm,
    train: bool,
) -> BnCache {
    let [b, c, h, w] = z.shape()[..] else {
        unreachable!("conv output is 4-D")
    };
    let hw = h * w;
    let n = (b * hw) as f64;
    let (mean, var, batch_stats) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                mean[ch] += z.data()[base..base + hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                var[ch] += z.data()[base..base + hw]
                    .iter()
                    .map(|x| (x - mean[ch]) * (x - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let unbiased = var.iter().map(|v| v * n / (n - 1.0).max(1.0)).collect();
        (mean.clone(), var, Some((mean, unbiased)))
    } else {
        (
            bn.running_mean.data().to_vec(),
            bn.running_var.data().to_vec(),
            None,
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(z.shape());
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let (sc, sh) = (bn.scale.data()[ch], bn.shift.data()[ch]);
            for i in base..base + hw {
                let xh = (z.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = xh;
                z.data_mut()[i] = sc * xh + sh;
            }
        }
    }
    BnCache {
        xhat,
        inv_std,
        batch_stats,
    }
}

/// Returns `(grad_z, grad_scale, grad_shift)`.
fn batch_norm_backward(
    g: &Tensor,
    cache: &BnCache,
    scale: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, c, h, w] = g.shape()[..] else {
        unreachable!("conv output is 4-D")
    };
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                gshift[ch] += g.data()[i];
                gscale[ch] += g.data()[i] * cache.xhat.data()[i];
            }
        }
    }
    let mut gz = Tensor::zeros(g.shape());
    let train = cache.batch_stats.is_some();
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let k = scale.data()[ch] * cache.inv_std[ch];
            for i in base..base + hw {
                gz.data_mut()[i] = if train {
                    k * (g.data()[i] - gshift[ch] / n - cache.xhat.data()[i] * gscale[ch] / n)
                } else {
                    k * g.data()[i]
                };
            }
        }
    }
    (gz, Tensor::from_vec(gscale), Tensor::from_vec(gshift))
}

pub(crate) fn max_pool_forward(x: &Tensor, size: usize) -> (Tensor, Vec<usize>) {
    let [b, c, h, w] = x.shape()[..] else {
        unreachable!("pool input is 4-D")
    };
    let (oh, ow) = (h / size, w / size);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0; b * c * oh * ow];
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * size * w + j * size;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = base + (i * size + di) * w + j * size + dj;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.data_mut()[o] = x.data()[best];
                argmax[o] = best;
                o += 1;
            }
        }
    }
    (out, argmax)
}

/// Runs the network on a `b x c x h x w` batch and returns `b x n_classes` logits.
pub fn forward(model: &Model, input: &Tensor, opts: &ForwardOptions) -> Result<(Tensor, ForwardCache)> {
    let expected = &model.spec.input;
    if input.ndim() != 4 || input.shape()[1..] != expected[..] {
        return Err(Error::dim(format!(
            "input {:?} does not match model input {:?}",
            input.shape(),
            expected
        )));
    }
    let feeds = feeds_binarized(&model.spec);
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(model.spec.layers.len());
    let mut j = 0;
    for (i, spec) in model.spec.layers.iter().enumerate() {
        match *spec {
            LayerSpec::Conv {
                stride,
                pad,
                binarize,
                ..
            } => {
                let layer = &model.layers[j];
                let weight = effective_weight(model, j, opts)?;
                let q = input_quant(binarize, opts);
                let xq = q.map(|q| (q.forward(&x), q));
                let pad_value = if q.is_some() { -1.0 } else { 0.0 };
                let mut z = conv2d_batch_forward(
                    xq.as_ref().map_or(&x, |(t, _)| t),
                    &weight.effective,
                    stride,
                    pad,
                    pad_value,
                )?;
                let bn = layer.bn.as_ref().map(|bn| batch_norm_forward(&mut z, bn, opts.train));
                let relu = !(feeds[i] && opts.mode != Mode::Real);
                let y = z;
                let out = if relu { y.map(|v| v.max(0.0)) } else { y.clone() };
                caches.push(LayerCache::Conv {
                    x,
                    xq,
                    weight,
                    stride,
                    pad,
                    pad_value,
                    bn,
                    y,
                    relu,
                });
                x = out;
                j += 1;
            }
            LayerSpec::MaxPool { size } => {
                let (out, argmax) = max_pool_forward(&x, size);
                caches.push(LayerCache::Pool {
                    in_shape: x.shape().to_vec(),
                    argmax,
                });
                x = out;
            }
            LayerSpec::Dense { binarize, .. } => {
                let b = x.shape()[0];
                let x_shape = x.shape().to_vec();
                let flat = x.into_reshape(&[b, x_shape[1..].iter().product()])?;
                let weight = effective_weight(model, j, opts)?;
                let q = input_quant(binarize, opts);
                let xq = q.map(|q| (q.forward(&flat), q));
                let out = matmul_t(xq.as_ref().map_or(&flat, |(t, _)| t), false, &weight.effective, true)?;
                caches.push(LayerCache::Dense {
                    x_shape,
                    x: flat,
                    xq,
                    weight,
                });
                x = out;
                j += 1;
            }
        }
    }
    Ok((
        x,
        ForwardCache {
            layers: caches,
            version: model.version,
            mode: opts.mode,
        },
    ))
}

fn weight_grads(
    model: &Model,
    j: usize,
    cache: &WeightCache,
    grad_effective: Tensor,
    opts: &ForwardOptions,
) -> Result<LayerGrads> {
    let layer = &model.layers[j];
    let (w, omega, theta, gamma) = match &cache.binarized {
        None => (grad_effective, 0.0, 0.0, 0.0),
        Some(bw) => {
            let server = &opts
                .w_server
                .ok_or_else(|| Error::Protocol("fedbnn backward needs server weights".into()))?
                .layers[j]
                .w;
            let identity;
            let rot = match &layer.rot {
                Some(r) => r,
                None => {
                    identity = RotationPair::identity(crate::rotation::Matricization::for_weight_shape(layer.w.shape())?);
                    &identity
                }
            };
            let g = binarized_weight_backward(
                bw,
                &grad_effective,
                &layer.w,
                server,
                rot,
                &layer.mix,
                opts.lambda_one,
                WeightQuantizer::Surrogate {
                    t: opts.tk.0,
                    k: opts.tk.1,
                },
            )?;
            (g.w, g.omega, g.theta, g.gamma)
        }
    };
    Ok(LayerGrads {
        w,
        bn_scale: None,
        bn_shift: None,
        omega,
        theta,
        gamma,
    })
}

/// Backpropagates `dL/dlogits` through the cached forward pass.
///
/// `opts` must be the options the forward pass ran with.
pub fn backward(
    model: &Model,
    cache: &ForwardCache,
    grad_logits: &Tensor,
    opts: &ForwardOptions,
) -> Result<GradientBundle> {
    if cache.version != model.version {
        return Err(Error::StaleCache(format!(
            "cache from parameter version {}, model is at {}",
            cache.version, model.version
        )));
    }
    if cache.mode != opts.mode {
        return Err(Error::Protocol(format!(
            "forward ran in {:?}, backward asked for {:?}",
            cache.mode, opts.mode
        )));
    }
    if matches!(opts.mode, Mode::EvalBinary | Mode::Binary) {
        return Err(Error::Domain(format!("no backward pass in {:?} mode", opts.mode)));
    }
    let n_trainable = model.layers.len();
    let mut grads: Vec<Option<LayerGrads>> = vec![None; n_trainable];
    let mut stats: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; n_trainable];
    let mut g = grad_logits.clone();
    let mut j = n_trainable;
    for (idx, lc) in cache.layers.iter().enumerate().rev() {
        let first = idx == 0;
        match lc {
            LayerCache::Dense {
                x_shape,
                x,
                xq,
                weight,
            } => {
                j -= 1;
                let input = xq.as_ref().map_or(x, |(t, _)| t);
                let gw = matmul_t(&g, true, input, false)?;
                let mut gx = g.matmul(&weight.effective)?;
                if let Some((_, q)) = xq {
                    gx = q.backward(x, &gx)?;
                }
                grads[j] = Some(weight_grads(model, j, weight, gw, opts)?);
                g = gx.into_reshape(x_shape)?;
            }
            LayerCache::Pool { in_shape, argmax } => {
                let mut gi = Tensor::zeros(in_shape);
                for (o, &src) in argmax.iter().enumerate() {
                    gi.data_mut()[src] += g.data()[o];
                }
                g = gi;
            }
            LayerCache::Conv {
                x,
                xq,
                weight,
                stride,
                pad,
                pad_value,
                bn,
                y,
                relu,
            } => {
                j -= 1;
                if *relu {
                    g = g.zip_map(y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })?;
                }
                let (mut bn_scale, mut bn_shift) = (None, None);
                if let (Some(bc), Some(params)) = (bn, &model.layers[j].bn) {
                    let (gz, gs, gb) = batch_norm_backward(&g, bc, &params.scale);
                    g = gz;
                    bn_scale = Some(gs);
                    bn_shift = Some(gb);
                    stats[j] = bc.batch_stats.clone();
                }
                let input = xq.as_ref().map_or(x, |(t, _)| t);
                let (gi, gw) = conv2d_batch_backward(
                    input,
                    &weight.effective,
                    &g,
                    *stride,
                    *pad,
                    *pad_value,
                    !first,
                )?;
                let mut lg = weight_grads(model, j, weight, gw, opts)?;
                lg.bn_scale = bn_scale;
                lg.bn_shift = bn_shift;
                grads[j] = Some(lg);
                if let Some(mut gi) = gi {
                    if let Some((_, q)) = xq {
                        gi = q.backward(x, &gi)?;
                    }
                    g = gi;
                }
            }
        }
    }
    Ok(GradientBundle {
        layers: grads
            .into_iter()
            .map(|g| g.expect("every trainable layer visited"))
            .collect(),
        batch_stats: stats,
    })
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = match logits.shape() {
        [b, c] => (*b, *c),
        s => return Err(Error::dim(format!("logits must be 2-D, got {s:?}"))),
    };
    if labels.len() != b || b == 0 {
        return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Domain(format!("label {y} out of range for {c} classes")));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        let gr = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (k, gv) in gr.iter_mut().enumerate() {
            *gv = (row[k] - m).exp() / z / b as f64;
        }
        gr[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

/// Number of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> usize {
    predict(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdOptions {
    pub lr: f64,
    /// Clip binarized-layer weights to `[-1, 1]` after the step.
    pub clip_binarized: bool,
    pub freeze_omega: bool,
    pub freeze_theta: bool,
    pub freeze_gamma: bool,
    pub bn_momentum: f64,
}

impl SgdOptions {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            clip_binarized: false,
            freeze_omega: false,
            freeze_theta: false,
            freeze_gamma: false,
            bn_momentum: 0.1,
        }
    }
}

/// Plain SGD on weights, batch-norm affine terms and mixing scalars;
/// also folds the batch statistics into the running statistics.
pub fn sgd_step(model: &mut Model, grads: &GradientBundle, opts: &SgdOptions) -> Result<()> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::dim("gradient bundle does not match model"));
    }
    let lr = opts.lr;
    for ((layer, g), stats) in model.layers.iter_mut().zip(&grads.layers).zip(&grads.batch_stats) {
        layer.w.axpy(-lr, &g.w)?;
        if opts.clip_binarized && layer.binarize {
            layer.w.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
        if let Some(bn) = &mut layer.bn {
            if let Some(gs) = &g.bn_scale {
                bn.scale.axpy(-lr, gs)?;
            }
            if let Some(gb) = &g.bn_shift {
                bn.shift.axpy(-lr, gb)?;
            }
            if let Some((mean, var)) = stats {
                let m = opts.bn_momentum;
                for (r, &v) in bn.running_mean.data_mut().iter_mut().zip(mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, &v) in bn.running_var.data_mut().iter_mut().zip(var) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
        if !opts.freeze_omega {
            layer.mix.omega -= lr * g.omega;
        }
        if !opts.freeze_theta {
            layer.mix.theta -= lr * g.theta;
        }
        if !opts.freeze_gamma {
            layer.mix.gamma -= lr * g.gamma;
        }
    }
    if !model.layers.iter().all(|l| l.w.is_finite()) {
        return Err(Error::Numeric("non-finite weights after sgd step".into()));
    }
    model.version += 1;
    Ok(())
}

/// Step decay: the base rate until `decay_start`, then halved at the start
/// of every `decay_every` rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_start: usize,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.1,
            decay_start: 200,
            decay_every: 100,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, round: usize) -> f64 {
        if round < self.decay_start || self.decay_every == 0 {
            return self.base;
        }
        let halvings = 1 + (round - self.decay_start) / self.decay_every;
        self.base * 0.5f64.powi(halvings.min(1000) as i32)
    }
}
