use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::spec::{Layer, ModelSpec};
use crate::pruning::SparsityMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: String,
    pub kept_in: usize,
    pub kept_out: usize,
    pub flops: u64,
    pub dense_flops: u64,
}

/// Convolution FLOPs of one forward pass over a single example.
///
/// A multiply-accumulate counts as two FLOPs. Batch-norm, pooling and
/// activations are ignored. Dense-layer FLOPs are only filled in when asked
/// for and never enter the reduction factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopProfile {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
    pub dense_total: u64,
    pub reduction: f64,
    pub fc_flops: Option<u64>,
}

/// FLOPs for `kept_out[i]` surviving output channels of the `i`-th conv layer.
///
/// A conv layer's input channels are the previous conv layer's kept outputs
/// when it consumes them directly, otherwise its full input width.
pub fn conv_flops(spec: &ModelSpec, kept_out: &[usize]) -> Result<FlopProfile> {
    let convs = spec.conv_layers();
    if kept_out.len() != convs.len() {
        return Err(Error::ShapeMismatch {
            context: "keep-sets per conv layer".into(),
            expected: vec![convs.len()],
            actual: vec![kept_out.len()],
        });
    }
    let mut layers = Vec::with_capacity(convs.len());
    let mut prev: Option<(usize, usize)> = None;
    for (c, &kout) in convs.iter().zip(kept_out) {
        if kout > c.out_channels {
            return Err(Error::ShapeMismatch {
                context: format!("kept channels of {}", c.name),
                expected: vec![c.out_channels],
                actual: vec![kout],
            });
        }
        let kin = match prev {
            Some((full, kept)) if full == c.in_channels => kept,
            _ => c.in_channels,
        };
        let per = |i: usize, o: usize| (2 * i * c.kernel * c.kernel * o * c.out_h * c.out_w) as u64;
        layers.push(LayerFlops {
            layer: c.name.clone(),
            kept_in: kin,
            kept_out: kout,
            flops: per(kin, kout),
            dense_flops: per(c.in_channels, c.out_channels),
        });
        prev = Some((c.out_channels, kout));
    }
    let total = layers.iter().map(|l| l.flops).sum();
    let dense_total: u64 = layers.iter().map(|l| l.dense_flops).sum();
    Ok(FlopProfile {
        layers,
        total,
        dense_total,
        reduction: if total == 0 { f64::INFINITY } else { dense_total as f64 / total as f64 },
        fc_flops: None,
    })
}

/// Profile at a mask's channel keep-sets. Conv layers without batch-norm
/// keep every channel.
pub fn conv_flops_for_mask(spec: &ModelSpec, mask: &SparsityMask) -> Result<FlopProfile> {
    let kept: Vec<usize> = spec
        .conv_layers()
        .iter()
        .map(|c| {
            mask.channels()
                .iter()
                .find(|k| k.layer == c.name)
                .map_or(c.out_channels, |k| k.keep.iter().filter(|b| **b).count())
        })
        .collect();
    conv_flops(spec, &kept)
}

/// Dense-layer FLOPs of one forward pass, for debugging only.
pub fn dense_flops(spec: &ModelSpec) -> u64 {
    spec.layers
        .iter()
        .map(|l| match *l {
            Layer::Dense { inputs, outputs } => (2 * inputs * outputs) as u64,
            _ => 0,
        })
        .sum()
}

impl FlopProfile {
    pub fn with_fc(mut self, spec: &ModelSpec) -> Self {
        self.fc_flops = Some(dense_flops(spec));
        self
    }
}
