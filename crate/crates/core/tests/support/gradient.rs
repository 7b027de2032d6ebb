//! Central-difference gradient oracle over an independent f64 forward pass.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use subfed::nn::{backward, forward, init_params, Layer, Mode, ModelSpec, ParamSet};
use subfed::Tensor;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const BN_EPS: f64 = 1e-5;

/// Loss of the network in f64, plus the ReLU and max-pool decisions taken.
fn reference_loss(spec: &ModelSpec, params: &[Vec<f64>], x: &[f64], n: usize, labels: &[usize]) -> (f64, Vec<u32>) {
    let [mut c, mut h, mut w] = spec.input;
    let mut act = x.to_vec();
    let mut pattern = Vec::new();
    let mut cursor = 0;
    for layer in &spec.layers {
        match *layer {
            Layer::Conv {
                out_channels: oc,
                kernel: k,
                padding: pad,
                batch_norm,
                ..
            } => {
                let wt = &params[cursor];
                let bias = &params[cursor + 1];
                let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
                let mut y = vec![0.0; n * oc * oh * ow];
                for b in 0..n {
                    for o in 0..oc {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut s = bias[o];
                                for ci in 0..c {
                                    for ki in 0..k {
                                        for kj in 0..k {
                                            let (r, q) = ((i + ki) as isize - pad as isize, (j + kj) as isize - pad as isize);
                                            if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                                continue;
                                            }
                                            let xv = act[((b * c + ci) * h + r as usize) * w + q as usize];
                                            s += wt[((o * c + ci) * k + ki) * k + kj] * xv;
                                        }
                                    }
                                }
                                y[((b * oc + o) * oh + i) * ow + j] = s;
                            }
                        }
                    }
                }
                if batch_norm {
                    let (scale, shift) = (&params[cursor + 2], &params[cursor + 3]);
                    let m = (n * oh * ow) as f64;
                    for o in 0..oc {
                        let idx: Vec<usize> = (0..n)
                            .flat_map(|b| (0..oh * ow).map(move |p| (b * oc + o) * oh * ow + p))
                            .collect();
                        let mean = idx.iter().map(|&t| y[t]).sum::<f64>() / m;
                        let var = idx.iter().map(|&t| (y[t] - mean).powi(2)).sum::<f64>() / m;
                        let istd = 1.0 / (var + BN_EPS).sqrt();
                        for &t in &idx {
                            y[t] = scale[o] * (y[t] - mean) * istd + shift[o];
                        }
                    }
                    cursor += 6;
                } else {
                    cursor += 2;
                }
                act = y;
                (c, h, w) = (oc, oh, ow);
            }
            Layer::MaxPool { window } => {
                let (oh, ow) = (h / window, w / window);
                let mut y = vec![0.0; n * c * oh * ow];
                for bc in 0..n * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let (mut best, mut at) = (f64::NEG_INFINITY, 0u32);
                            for di in 0..window {
                                for dj in 0..window {
                                    let v = act[bc * h * w + (i * window + di) * w + j * window + dj];
                                    if v > best {
                                        best = v;
                                        at = (di * window + dj) as u32;
                                    }
                                }
                            }
                            y[(bc * oh + i) * ow + j] = best;
                            pattern.push(at);
                        }
                    }
                }
                act = y;
                (h, w) = (oh, ow);
            }
            Layer::Relu => {
                for v in act.iter_mut() {
                    pattern.push((*v > 0.0) as u32);
                    *v = v.max(0.0);
                }
            }
            Layer::Flatten => {
                (c, h, w) = (c * h * w, 1, 1);
            }
            Layer::Dense { inputs, outputs } => {
                let (wt, bias) = (&params[cursor], &params[cursor + 1]);
                let mut y = vec![0.0; n * outputs];
                for b in 0..n {
                    for o in 0..outputs {
                        y[b * outputs + o] =
                            bias[o] + (0..inputs).map(|i| wt[o * inputs + i] * act[b * inputs + i]).sum::<f64>();
                    }
                }
                cursor += 2;
                act = y;
                (c, h, w) = (outputs, 1, 1);
            }
        }
    }
    let classes = c * h * w;
    let mut loss = 0.0;
    for b in 0..n {
        let row = &act[b * classes..(b + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[labels[b]];
    }
    (loss / n as f64, pattern)
}

fn conv(i: usize, o: usize, k: usize, p: usize, bn: bool) -> Layer {
    Layer::Conv {
        in_channels: i,
        out_channels: o,
        kernel: k,
        padding: p,
        batch_norm: bn,
    }
}

/// A small random network; `variant` cycles through structural families so
/// that every layer type appears.
fn random_spec(rng: &mut ChaCha8Rng, variant: usize) -> ModelSpec {
    let classes = rng.random_range(2..=4);
    if variant % 4 == 3 {
        let d = rng.random_range(3..=8);
        let hidden = rng.random_range(2..=6);
        return ModelSpec::new(
            "mlp",
            [1, 1, d],
            vec![Layer::Flatten, Layer::Dense { inputs: d, outputs: hidden }, Layer::Relu, Layer::Dense { inputs: hidden, outputs: classes }],
        )
        .unwrap();
    }
    let c = rng.random_range(1..=3);
    let side = rng.random_range(5..=7);
    let mut layers = Vec::new();
    let (mut ch, mut s) = (c, side);
    let convs = 1 + variant % 2;
    for _ in 0..convs {
        let k = rng.random_range(1..=3);
        let p = rng.random_range(0..=1);
        let oc = rng.random_range(2..=4);
        let bn = variant % 4 != 2 && rng.random_bool(0.6);
        layers.push(conv(ch, oc, k, p, bn));
        layers.push(Layer::Relu);
        ch = oc;
        s = s + 2 * p - k + 1;
        if s >= 4 && rng.random_bool(0.6) {
            layers.push(Layer::MaxPool { window: 2 });
            s /= 2;
        }
    }
    layers.push(Layer::Flatten);
    let mut width = ch * s * s;
    if rng.random_bool(0.5) {
        let hidden = rng.random_range(3..=6);
        layers.push(Layer::Dense { inputs: width, outputs: hidden });
        layers.push(Layer::Relu);
        width = hidden;
    }
    layers.push(Layer::Dense { inputs: width, outputs: classes });
    ModelSpec::new("random", [c, side, side], layers).unwrap()
}

pub struct Outcome {
    layers: Vec<&'static str>,
    checked: usize,
    skipped: usize,
    worst: f64,
}

fn check_spec(spec: &ModelSpec, seed: u64) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet = init_params(spec, seed).unwrap();
    for e in params.entries_mut() {
        if e.role.is_learnable() {
            for v in e.tensor.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += (0.3 * z) as f32;
            }
        }
    }
    let n = 4;
    let len: usize = spec.input.iter().product();
    let x: Vec<f32> = (0..n * len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    let classes = spec.classes();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let batch = Tensor::new(vec![n, spec.input[0], spec.input[1], spec.input[2]], x.clone()).unwrap();
    let (_, cache) = forward(spec, &params, &batch, Mode::Train).unwrap();
    let (_, grads) = backward(spec, &params, &cache, &labels).unwrap();

    let base: Vec<Vec<f64>> = params.entries().iter().map(|e| e.tensor.data().iter().map(|&v| v as f64).collect()).collect();
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let (_, pattern) = reference_loss(spec, &base, &x64, n, &labels);

    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for (ei, entry) in params.entries().iter().enumerate() {
        if !entry.role.is_learnable() {
            continue;
        }
        let analytic: Vec<f64> = grads.entries()[ei].tensor.data().iter().map(|&v| v as f64).collect();
        let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
        for q in 0..analytic.len() {
            let mut p = base.clone();
            p[ei][q] = base[ei][q] + H;
            let (lp, pp) = reference_loss(spec, &p, &x64, n, &labels);
            p[ei][q] = base[ei][q] - H;
            let (lm, pm) = reference_loss(spec, &p, &x64, n, &labels);
            if pp != pattern || pm != pattern {
                skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * H);
            diff2 += (analytic[q] - fd).powi(2);
            a2 += analytic[q].powi(2);
            f2 += fd.powi(2);
            checked += 1;
        }
        let scale = a2.sqrt().max(f2.sqrt());
        if f2.sqrt() < 1e-7 {
            // A bias feeding batch-norm has identically zero gradient.
            if a2.sqrt() >= 1e-5 {
                return Err(format!("{}: {}.{} should have zero gradient", spec.name, entry.layer, entry.role));
            }
        } else if scale > 1e-8 {
            let rel = diff2.sqrt() / scale;
            if rel >= TOL {
                return Err(format!("{}: {}.{} relative error {rel:.2e}", spec.name, entry.layer, entry.role));
            }
            worst = worst.max(rel);
        }
    }
    let mut layers = Vec::new();
    for l in &spec.layers {
        layers.push(match l {
            Layer::Conv { batch_norm: true, .. } => "conv+bn",
            Layer::Conv { .. } => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        });
    }
    Ok(Outcome {
        layers,
        checked,
        skipped,
        worst,
    })
}

pub struct Summary {
    pub specs: usize,
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Checks `specs` random networks. Coordinates whose perturbation flips a
/// ReLU or max-pool decision are skipped, at most one in twenty.
pub fn run_oracle(specs: usize) -> Result<Summary, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut seen = std::collections::BTreeSet::new();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for i in 0..specs {
        let spec = random_spec(&mut rng, i);
        let o = check_spec(&spec, 100 + i as u64)?;
        seen.extend(o.layers);
        checked += o.checked;
        skipped += o.skipped;
        worst = worst.max(o.worst);
    }
    for kind in ["conv", "conv+bn", "maxpool", "relu", "flatten", "dense"] {
        if !seen.contains(kind) {
            return Err(format!("no spec exercised {kind}"));
        }
    }
    if skipped * 20 > checked {
        return Err(format!("too many coordinates near a kink: {skipped} of {checked}"));
    }
    Ok(Summary {
        specs,
        checked,
        skipped,
        worst,
    })
}
