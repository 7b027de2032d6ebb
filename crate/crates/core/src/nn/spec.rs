use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamRole;

/// One layer of a feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Square-kernel stride-1 convolution, optionally followed by batch-norm.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        batch_norm: bool,
    },
    MaxPool {
        window: usize,
    },
    Relu,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

/// Activation shape between layers, without the batch extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Image { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Image { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        }
    }
}

/// Learnable tensor slot produced by the parameter layout of a spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    /// Index into `ModelSpec::layers` of the owning layer.
    pub layer_index: usize,
}

/// Static description of a conv layer, used by FLOP counting and channel pruning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvInfo {
    pub name: String,
    pub layer_index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// Builds a spec and checks that every layer composes with its predecessor.
    pub fn new(name: impl Into<String>, input: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            input,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Built-in architectures by name.
    ///
    /// `cnn5-mnist` and `lenet5-cifar` have fixed input shapes; the synthetic
    /// specs adapt to whatever input they are given.
    pub fn builtin(name: &str, input: [usize; 3], classes: usize) -> Result<Self> {
        let fixed = |want: [usize; 3]| -> Result<()> {
            if input != want {
                return Err(Error::InvalidSpec {
                    index: 0,
                    layer: name.to_string(),
                    reason: format!("expects input {want:?}, dataset provides {input:?}"),
                });
            }
            Ok(())
        };
        let layers = match name {
            "cnn5-mnist" => {
                fixed([1, 28, 28])?;
                vec![
                    conv(1, 10, 5, 2, true),
                    Layer::Relu,
                    Layer::MaxPool { window: 2 },
                    conv(10, 20, 5, 0, true),
                    Layer::Relu,
                    Layer::MaxPool { window: 2 },
                    Layer::Flatten,
                    dense(500, 50),
                    Layer::Relu,
                    dense(50, classes),
                ]
            }
            "lenet5-cifar" => {
                fixed([3, 32, 32])?;
                vec![
                    conv(3, 6, 5, 0, true),
                    Layer::Relu,
                    Layer::MaxPool { window: 2 },
                    conv(6, 16, 5, 0, true),
                    Layer::Relu,
                    Layer::MaxPool { window: 2 },
                    Layer::Flatten,
                    dense(400, 120),
                    Layer::Relu,
                    dense(120, 84),
                    Layer::Relu,
                    dense(84, classes),
                ]
            }
            "mlp-synth" => {
                let n = input.iter().product();
                vec![Layer::Flatten, dense(n, 32), Layer::Relu, dense(32, classes)]
            }
            "cnn-synth" => {
                let [c, h, w] = input;
                let (oh, ow) = ((h - 2) / 2, (w - 2) / 2);
                vec![
                    conv(c, 8, 3, 0, true),
                    Layer::Relu,
                    Layer::MaxPool { window: 2 },
                    Layer::Flatten,
                    dense(8 * oh * ow, 32),
                    Layer::Relu,
                    dense(32, classes),
                ]
            }
            other => {
                return Err(Error::InvalidSpec {
                    index: 0,
                    layer: other.to_string(),
                    reason: "unknown built-in model".into(),
                })
            }
        };
        Self::new(name, input, layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Output shape of each layer, in order.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input;
        let mut cur = ActShape::Image { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| Error::InvalidSpec {
                index,
                layer: self.layer_label(index),
                reason,
            };
            cur = match (*layer, cur) {
                (
                    Layer::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        padding,
                        ..
                    },
                    ActShape::Image { c, h, w },
                ) => {
                    if in_channels != c {
                        return Err(fail(format!("expects {in_channels} input channels, got {c}")));
                    }
                    if kernel == 0 || out_channels == 0 {
                        return Err(fail("zero-sized kernel or channel count".into()));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(fail(format!("kernel {kernel} larger than padded input {h}x{w}")));
                    }
                    ActShape::Image {
                        c: out_channels,
                        h: h + 2 * padding - kernel + 1,
                        w: w + 2 * padding - kernel + 1,
                    }
                }
                (Layer::MaxPool { window }, ActShape::Image { c, h, w }) => {
                    if window == 0 || h < window || w < window {
                        return Err(fail(format!("window {window} does not fit {h}x{w}")));
                    }
                    ActShape::Image {
                        c,
                        h: h / window,
                        w: w / window,
                    }
                }
                (Layer::Relu, s) => s,
                (Layer::Flatten, s) => ActShape::Flat(s.len()),
                (Layer::Dense { inputs, outputs }, ActShape::Flat(n)) => {
                    if inputs != n {
                        return Err(fail(format!("expects {inputs} inputs, got {n}")));
                    }
                    if outputs == 0 {
                        return Err(fail("zero outputs".into()));
                    }
                    ActShape::Flat(outputs)
                }
                (_, s) => {
                    return Err(fail(format!("cannot accept activation of shape {:?}", s.dims())))
                }
            };
            out.push(cur);
        }
        match cur {
            ActShape::Flat(_) if !self.layers.is_empty() => Ok(out),
            _ => Err(Error::InvalidSpec {
                index: self.layers.len().saturating_sub(1),
                layer: "output".into(),
                reason: "network must end in a flat logit vector".into(),
            }),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.shapes()
            .ok()
            .and_then(|s| s.last().map(ActShape::len))
            .unwrap_or(0)
    }

    /// Display name of a parametrised layer: `conv1`, `conv2`, `fc1`, ...
    /// Non-parametrised layers get `kind@index`.
    pub fn layer_label(&self, index: usize) -> String {
        let nth = |pred: fn(&Layer) -> bool| {
            self.layers[..=index].iter().filter(|l| pred(l)).count()
        };
        match self.layers.get(index) {
            Some(Layer::Conv { .. }) => format!("conv{}", nth(|l| matches!(l, Layer::Conv { .. }))),
            Some(Layer::Dense { .. }) => format!("fc{}", nth(|l| matches!(l, Layer::Dense { .. }))),
            Some(Layer::MaxPool { .. }) => format!("maxpool@{index}"),
            Some(Layer::Relu) => format!("relu@{index}"),
            Some(Layer::Flatten) => format!("flatten@{index}"),
            None => format!("layer@{index}"),
        }
    }

    /// Ordered tensor slots of a parameter set for this spec.
    pub fn param_layout(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = self.layer_label(i);
            let mut push = |role, shape: Vec<usize>| {
                slots.push(ParamSlot {
                    layer: name.clone(),
                    role,
                    shape,
                    layer_index: i,
                })
            };
            match *layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    batch_norm,
                    ..
                } => {
                    push(ParamRole::Weight, vec![out_channels, in_channels, kernel, kernel]);
                    push(ParamRole::Bias, vec![out_channels]);
                    if batch_norm {
                        for role in [
                            ParamRole::BnScale,
                            ParamRole::BnShift,
                            ParamRole::BnRunningMean,
                            ParamRole::BnRunningVar,
                        ] {
                            push(role, vec![out_channels]);
                        }
                    }
                }
                Layer::Dense { inputs, outputs } => {
                    push(ParamRole::Weight, vec![outputs, inputs]);
                    push(ParamRole::Bias, vec![outputs]);
                }
                _ => {}
            }
        }
        slots
    }

    pub fn conv_layers(&self) -> Vec<ConvInfo> {
        let shapes = match self.shapes() {
            Ok(s) => s,
            Err(_) => return Vec::new(),
        };
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match *l {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    batch_norm,
                    ..
                } => {
                    let (out_h, out_w) = match shapes[i] {
                        ActShape::Image { h, w, .. } => (h, w),
                        ActShape::Flat(_) => unreachable!("conv output is an image"),
                    };
                    Some(ConvInfo {
                        name: self.layer_label(i),
                        layer_index: i,
                        in_channels,
                        out_channels,
                        kernel,
                        out_h,
                        out_w,
                        batch_norm,
                    })
                }
                _ => None,
            })
            .collect()
    }

    /// Count of learnable scalars (weights, biases, BN scale/shift).
    pub fn learnable_count(&self) -> usize {
        self.param_layout()
            .iter()
            .filter(|s| s.role.is_learnable())
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    pub fn conv_channel_count(&self) -> usize {
        self.conv_layers().iter().map(|c| c.out_channels).sum()
    }
}

fn conv(inp: usize, out: usize, kernel: usize, padding: usize, batch_norm: bool) -> Layer {
    Layer::Conv {
        in_channels: inp,
        out_channels: out,
        kernel,
        padding,
        batch_norm,
    }
}

fn dense(inputs: usize, outputs: usize) -> Layer {
    Layer::Dense { inputs, outputs }
}
