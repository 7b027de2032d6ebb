//! Forward and backward passes over a [`ModelSpec`].
//!
//! Activations are kept batch-major and row-major: an image batch is
//! `[N, C, H, W]`, a flat batch is `[N, F]`. Each parametrised layer reads its
//! tensors from the [`ParamSet`] in layout order, so a cursor over the entries
//! is enough to locate them.

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::spec::{ActShape, Layer, ModelSpec};
use crate::tensor::{gemm, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv {
        /// im2col buffers, one `[C*k*k, OH*OW]` block per example.
        cols: Vec<f32>,
        bn: Option<BnCache>,
    },
    Pool {
        argmax: Vec<u32>,
    },
    Relu {
        active: Vec<bool>,
    },
    Flatten,
    Dense {
        input: Vec<f32>,
    },
}

/// Everything backward needs from a forward pass, plus the batch statistics
/// a train-mode pass wants written into the running BN buffers.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    mode: Mode,
    layers: Vec<LayerCache>,
    logits: Vec<f32>,
    classes: usize,
    /// (entry index, new value) for running mean/var buffers.
    running: Vec<(usize, Vec<f32>)>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Writes the running-statistic updates of a train-mode pass into `params`.
    pub fn commit_running_stats(&self, params: &mut ParamSet) {
        for (idx, values) in &self.running {
            params.entries_mut()[*idx]
                .tensor
                .data_mut()
                .copy_from_slice(values);
        }
    }
}

fn image(shape: ActShape) -> (usize, usize, usize) {
    match shape {
        ActShape::Image { c, h, w } => (c, h, w),
        ActShape::Flat(_) => unreachable!("validated spec routes images to image layers"),
    }
}

/// Runs the network on `batch` (shape `[N, C, H, W]` matching the model input).
///
/// In train mode batch-norm normalises with batch statistics; the resulting
/// running-stat updates are held in the cache until
/// [`ForwardCache::commit_running_stats`] is called. Eval mode uses the stored
/// running statistics and leaves `params` untouched.
pub fn forward(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    mode: Mode,
) -> Result<(Tensor, ForwardCache)> {
    let shapes = spec.shapes()?;
    params.check_layout(spec)?;
    let n = match batch.shape() {
        [n, c, h, w] if [*c, *h, *w] == spec.input => *n,
        other => {
            return Err(Error::ShapeMismatch {
                context: format!("{} input", spec.layer_label(0)),
                expected: [vec![0], spec.input.to_vec()].concat(),
                actual: other.to_vec(),
            })
        }
    };

    let entries = params.entries();
    let mut cursor = 0;
    let mut x = batch.data().to_vec();
    let [c0, h0, w0] = spec.input;
    let mut in_shape = ActShape::Image {
        c: c0,
        h: h0,
        w: w0,
    };
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut running = Vec::new();

    for (li, layer) in spec.layers.iter().enumerate() {
        let out_shape = shapes[li];
        match *layer {
            Layer::Conv {
                out_channels,
                kernel,
                padding,
                batch_norm,
                ..
            } => {
                let (c, h, w) = image(in_shape);
                let (_, oh, ow) = image(out_shape);
                let weight = entries[cursor].tensor.data();
                let bias = entries[cursor + 1].tensor.data();
                let krows = c * kernel * kernel;
                let p = oh * ow;
                let mut cols = vec![0.0f32; n * krows * p];
                let mut y = vec![0.0f32; n * out_channels * p];
                for b in 0..n {
                    let xin = &x[b * c * h * w..(b + 1) * c * h * w];
                    let col = &mut cols[b * krows * p..(b + 1) * krows * p];
                    im2col(xin, c, h, w, kernel, padding, oh, ow, col);
                    let out = &mut y[b * out_channels * p..(b + 1) * out_channels * p];
                    gemm(weight, col, out, out_channels, krows, p, false, false, 0.0);
                    for (o, row) in out.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[o]);
                    }
                }
                let bn = if batch_norm {
                    let scale = entries[cursor + 2].tensor.data();
                    let shift = entries[cursor + 3].tensor.data();
                    let rmean = entries[cursor + 4].tensor.data();
                    let rvar = entries[cursor + 5].tensor.data();
                    match mode {
                        Mode::Train => {
                            let (cache, mean, var) =
                                bn_train(&mut y, n, out_channels, p, scale, shift);
                            let m = (n * p) as f32;
                            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                            let new_mean: Vec<f32> = rmean
                                .iter()
                                .zip(&mean)
                                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                                .collect();
                            let new_var: Vec<f32> = rvar
                                .iter()
                                .zip(&var)
                                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * unbias)
                                .collect();
                            running.push((cursor + 4, new_mean));
                            running.push((cursor + 5, new_var));
                            Some(cache)
                        }
                        Mode::Eval => {
                            bn_eval(&mut y, n, out_channels, p, scale, shift, rmean, rvar);
                            None
                        }
                    }
                } else {
                    None
                };
                cursor += if batch_norm { 6 } else { 2 };
                caches.push(LayerCache::Conv { cols, bn });
                x = y;
            }
            Layer::MaxPool { window } => {
                let (c, h, w) = image(in_shape);
                let (_, oh, ow) = image(out_shape);
                let mut y = vec![0.0f32; n * c * oh * ow];
                let mut argmax = vec![0u32; y.len()];
                for bc in 0..n * c {
                    let plane = &x[bc * h * w..(bc + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut at = 0usize;
                            for di in 0..window {
                                for dj in 0..window {
                                    let idx = (i * window + di) * w + j * window + dj;
                                    if plane[idx] > best {
                                        best = plane[idx];
                                        at = idx;
                                    }
                                }
                            }
                            let o = bc * oh * ow + i * ow + j;
                            y[o] = best;
                            argmax[o] = at as u32;
                        }
                    }
                }
                caches.push(LayerCache::Pool { argmax });
                x = y;
            }
            Layer::Relu => {
                let active: Vec<bool> = x.iter().map(|v| *v > 0.0).collect();
                x.iter_mut().for_each(|v| *v = v.max(0.0));
                caches.push(LayerCache::Relu { active });
            }
            Layer::Flatten => caches.push(LayerCache::Flatten),
            Layer::Dense { inputs, outputs } => {
                let weight = entries[cursor].tensor.data();
                let bias = entries[cursor + 1].tensor.data();
                let mut y = vec![0.0f32; n * outputs];
                gemm(&x, weight, &mut y, n, inputs, outputs, false, true, 0.0);
                for row in y.chunks_mut(outputs) {
                    row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
                }
                cursor += 2;
                caches.push(LayerCache::Dense { input: x });
                x = y;
            }
        }
        in_shape = out_shape;
    }

    let classes = in_shape.len();
    let logits = Tensor::new(vec![n, classes], x.clone())?;
    Ok((
        logits,
        ForwardCache {
            batch: n,
            mode,
            layers: caches,
            logits: x,
            classes,
            running,
        },
    ))
}

/// Mean softmax cross-entropy and its gradient with respect to every tensor.
///
/// Running-statistic entries of the returned gradient set are zero.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamSet,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<(f32, ParamSet)> {
    if cache.mode != Mode::Train {
        return Err(Error::Incongruent {
            what: "forward cache",
            detail: "backward needs a train-mode forward pass".into(),
        });
    }
    let n = cache.batch;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "labels".into(),
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    let classes = cache.classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let shapes = spec.shapes()?;
    let (loss, mut dy) = softmax_cross_entropy(&cache.logits, labels, classes);

    let mut grads = params.zeros_like();
    let layout = spec.param_layout();
    // cursor for each parametrised layer, in forward order
    let mut first_slot = vec![0usize; spec.layers.len()];
    {
        let mut seen = vec![false; spec.layers.len()];
        for (i, slot) in layout.iter().enumerate() {
            if !seen[slot.layer_index] {
                seen[slot.layer_index] = true;
                first_slot[slot.layer_index] = i;
            }
        }
    }
    let first_param_layer = spec
        .layers
        .iter()
        .position(|l| matches!(l, Layer::Conv { .. } | Layer::Dense { .. }));

    let entries = params.entries();
    for li in (0..spec.layers.len()).rev() {
        let in_shape = if li == 0 {
            let [c, h, w] = spec.input;
            ActShape::Image { c, h, w }
        } else {
            shapes[li - 1]
        };
        let out_shape = shapes[li];
        // Nothing upstream needs a gradient before the first parametrised layer.
        let need_dx = first_param_layer.is_some_and(|f| li > f);
        match (&spec.layers[li], &cache.layers[li]) {
            (
                Layer::Conv {
                    out_channels,
                    kernel,
                    padding,
                    ..
                },
                LayerCache::Conv { cols, bn },
            ) => {
                let (c, h, w) = image(in_shape);
                let (_, oh, ow) = image(out_shape);
                let cur = first_slot[li];
                let p = oh * ow;
                let krows = c * kernel * kernel;
                if let Some(bn) = bn {
                    let scale = entries[cur + 2].tensor.data();
                    let (dscale, dshift) = bn_backward(&mut dy, bn, n, *out_channels, p, scale);
                    grads.entries_mut()[cur + 2]
                        .tensor
                        .data_mut()
                        .copy_from_slice(&dscale);
                    grads.entries_mut()[cur + 3]
                        .tensor
                        .data_mut()
                        .copy_from_slice(&dshift);
                }
                let weight = entries[cur].tensor.data();
                let mut dw = vec![0.0f32; out_channels * krows];
                let mut db = vec![0.0f32; *out_channels];
                let mut dx = if need_dx {
                    vec![0.0f32; n * c * h * w]
                } else {
                    Vec::new()
                };
                let mut dcol = vec![0.0f32; krows * p];
                for b in 0..n {
                    let dout = &dy[b * out_channels * p..(b + 1) * out_channels * p];
                    let col = &cols[b * krows * p..(b + 1) * krows * p];
                    gemm(dout, col, &mut dw, *out_channels, p, krows, false, true, 1.0);
                    for (o, row) in dout.chunks(p).enumerate() {
                        db[o] += row.iter().sum::<f32>();
                    }
                    if need_dx {
                        gemm(weight, dout, &mut dcol, krows, *out_channels, p, true, false, 0.0);
                        let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                        col2im(&dcol, c, h, w, *kernel, *padding, oh, ow, dxb);
                    }
                }
                grads.entries_mut()[cur].tensor.data_mut().copy_from_slice(&dw);
                grads.entries_mut()[cur + 1]
                    .tensor
                    .data_mut()
                    .copy_from_slice(&db);
                dy = dx;
            }
            (Layer::MaxPool { .. }, LayerCache::Pool { argmax }) => {
                if !need_dx {
                    break;
                }
                let (c, h, w) = image(in_shape);
                let (_, oh, ow) = image(out_shape);
                let mut dx = vec![0.0f32; n * c * h * w];
                for bc in 0..n * c {
                    for o in 0..oh * ow {
                        let k = bc * oh * ow + o;
                        dx[bc * h * w + argmax[k] as usize] += dy[k];
                    }
                }
                dy = dx;
            }
            (Layer::Relu, LayerCache::Relu { active }) => {
                if !need_dx {
                    break;
                }
                dy.iter_mut()
                    .zip(active)
                    .for_each(|(g, a)| if !a { *g = 0.0 });
            }
            (Layer::Flatten, LayerCache::Flatten) => {}
            (Layer::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
                let cur = first_slot[li];
                let weight = entries[cur].tensor.data();
                let mut dw = vec![0.0f32; outputs * inputs];
                gemm(&dy, input, &mut dw, *outputs, n, *inputs, true, false, 0.0);
                let mut db = vec![0.0f32; *outputs];
                for row in dy.chunks(*outputs) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                grads.entries_mut()[cur].tensor.data_mut().copy_from_slice(&dw);
                grads.entries_mut()[cur + 1]
                    .tensor
                    .data_mut()
                    .copy_from_slice(&db);
                if need_dx {
                    let mut dx = vec![0.0f32; n * inputs];
                    gemm(&dy, weight, &mut dx, n, *outputs, *inputs, false, false, 0.0);
                    dy = dx;
                } else {
                    break;
                }
            }
            _ => unreachable!("cache built from the same spec"),
        }
    }
    Ok((loss, grads))
}

/// Mean cross-entropy and `d loss / d logits`.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f32, Vec<f32>) {
    let n = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += (log_sum - row[label]) as f64;
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (k, gv) in g.iter_mut().enumerate() {
            let p = (row[k] - log_sum).exp();
            *gv = (p - if k == label { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    ((loss / n as f64) as f32, grad)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for i in 0..oh {
                    let yi = (i + ki) as isize - pad as isize;
                    for j in 0..ow {
                        let xj = (j + kj) as isize - pad as isize;
                        dst[i * ow + j] = if yi >= 0 && (yi as usize) < h && xj >= 0 && (xj as usize) < w {
                            x[(ch * h + yi as usize) * w + xj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &col[row * p..(row + 1) * p];
                for i in 0..oh {
                    let yi = (i + ki) as isize - pad as isize;
                    if yi < 0 || yi as usize >= h {
                        continue;
                    }
                    for j in 0..ow {
                        let xj = (j + kj) as isize - pad as isize;
                        if xj >= 0 && (xj as usize) < w {
                            dx[(ch * h + yi as usize) * w + xj as usize] += src[i * ow + j];
                        }
                    }
                }
            }
        }
    }
}

/// Normalises `y` in place with batch statistics; returns the cache plus the
/// biased batch mean and variance per channel.
fn bn_train(
    y: &mut [f32],
    n: usize,
    channels: usize,
    p: usize,
    scale: &[f32],
    shift: &[f32],
) -> (BnCache, Vec<f32>, Vec<f32>) {
    let m = (n * p) as f64;
    let mut mean = vec![0.0f32; channels];
    let mut var = vec![0.0f32; channels];
    let mut inv_std = vec![0.0f32; channels];
    let mut xhat = vec![0.0f32; y.len()];
    for ch in 0..channels {
        let mut s = 0.0f64;
        for b in 0..n {
            s += y[(b * channels + ch) * p..][..p]
                .iter()
                .map(|v| *v as f64)
                .sum::<f64>();
        }
        let mu = s / m;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += y[(b * channels + ch) * p..][..p]
                .iter()
                .map(|v| (*v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        let v = sq / m;
        let istd = 1.0 / (v + BN_EPS as f64).sqrt();
        mean[ch] = mu as f32;
        var[ch] = v as f32;
        inv_std[ch] = istd as f32;
        for b in 0..n {
            let off = (b * channels + ch) * p;
            for i in off..off + p {
                let xh = ((y[i] as f64 - mu) * istd) as f32;
                xhat[i] = xh;
                y[i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    (BnCache { xhat, inv_std }, mean, var)
}

#[allow(clippy::too_many_arguments)]
fn bn_eval(
    y: &mut [f32],
    n: usize,
    channels: usize,
    p: usize,
    scale: &[f32],
    shift: &[f32],
    mean: &[f32],
    var: &[f32],
) {
    for b in 0..n {
        for ch in 0..channels {
            let istd = 1.0 / (var[ch] + BN_EPS).sqrt();
            let off = (b * channels + ch) * p;
            for v in &mut y[off..off + p] {
                *v = scale[ch] * (*v - mean[ch]) * istd + shift[ch];
            }
        }
    }
}

/// Replaces `dy` (gradient w.r.t. the BN output) with the gradient w.r.t. its
/// input; returns the scale and shift gradients.
fn bn_backward(
    dy: &mut [f32],
    cache: &BnCache,
    n: usize,
    channels: usize,
    p: usize,
    scale: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let m = (n * p) as f32;
    let mut dscale = vec![0.0f32; channels];
    let mut dshift = vec![0.0f32; channels];
    for ch in 0..channels {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let off = (b * channels + ch) * p;
            for i in off..off + p {
                sum_dy += dy[i] as f64;
                sum_dy_xhat += (dy[i] * cache.xhat[i]) as f64;
            }
        }
        dscale[ch] = sum_dy_xhat as f32;
        dshift[ch] = sum_dy as f32;
        let g = scale[ch];
        let k = g * cache.inv_std[ch] / m;
        let (s1, s2) = (sum_dy as f32, sum_dy_xhat as f32);
        for b in 0..n {
            let off = (b * channels + ch) * p;
            for i in off..off + p {
                dy[i] = k * (m * dy[i] - s1 - cache.xhat[i] * s2);
            }
        }
    }
    (dscale, dshift)
}
