use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::spec::ModelSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamRole {
    /// Running statistics are state, not trained parameters.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(
            self,
            ParamRole::BnScale | ParamRole::BnShift | ParamRole::BnRunningMean | ParamRole::BnRunningVar
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::BnScale => "bn-scale",
            ParamRole::BnShift => "bn-shift",
            ParamRole::BnRunningMean => "bn-running-mean",
            ParamRole::BnRunningVar => "bn-running-var",
        }
    }
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

/// Ordered collection of a model's tensors, keyed by (layer, role).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i]
                .iter()
                .any(|o| o.layer == e.layer && o.role == e.role)
            {
                return Err(Error::Incongruent {
                    what: "param set",
                    detail: format!("duplicate entry {}.{}", e.layer, e.role),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Zero-filled set laid out for `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            entries: spec
                .param_layout()
                .into_iter()
                .map(|s| ParamEntry {
                    layer: s.layer,
                    role: s.role,
                    tensor: Tensor::zeros(&s.shape),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    layer: e.layer.clone(),
                    role: e.role,
                    tensor: Tensor::zeros(e.tensor.shape()),
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, layer: &str, role: ParamRole) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.role == role)
            .map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, layer: &str, role: ParamRole) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.layer == layer && e.role == role)
            .map(|e| &mut e.tensor)
    }

    pub fn index_of(&self, layer: &str, role: ParamRole) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.layer == layer && e.role == role)
    }

    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role.is_learnable())
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// Same keys, order and shapes entry by entry.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Incongruent {
                what: "param sets",
                detail: format!("{} vs {} entries", self.entries.len(), other.entries.len()),
            });
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.layer != b.layer || a.role != b.role || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Incongruent {
                    what: "param sets",
                    detail: format!(
                        "{}.{}{:?} vs {}.{}{:?}",
                        a.layer,
                        a.role,
                        a.tensor.shape(),
                        b.layer,
                        b.role,
                        b.tensor.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn check_layout(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.param_layout();
        if layout.len() != self.entries.len() {
            return Err(Error::Incongruent {
                what: "params for spec",
                detail: format!("{} slots vs {} entries", layout.len(), self.entries.len()),
            });
        }
        for (slot, e) in layout.iter().zip(&self.entries) {
            if slot.layer != e.layer || slot.role != e.role || slot.shape != e.tensor.shape() {
                return Err(Error::Incongruent {
                    what: "params for spec",
                    detail: format!("{}.{} expected {:?}", slot.layer, slot.role, slot.shape),
                });
            }
        }
        Ok(())
    }

    /// Number of exactly-zero scalars across learnable entries.
    pub fn learnable_zeros(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role.is_learnable())
            .map(|e| e.tensor.data().iter().filter(|v| **v == 0.0).count())
            .sum()
    }
}

/// Deterministic initial parameters for `spec`.
///
/// Weights are drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`; biases and
/// BN shifts start at 0, BN scales and running variances at 1.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = spec
        .param_layout()
        .into_iter()
        .map(|slot| {
            let n: usize = slot.shape.iter().product();
            let data = match slot.role {
                ParamRole::Weight => {
                    let (fan_in, fan_out) = match slot.shape.as_slice() {
                        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
                        [o, i] => (*i, *o),
                        _ => unreachable!("weights are 2-d or 4-d"),
                    };
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                ParamRole::BnScale | ParamRole::BnRunningVar => vec![1.0; n],
                ParamRole::Bias | ParamRole::BnShift | ParamRole::BnRunningMean => vec![0.0; n],
            };
            ParamEntry {
                layer: slot.layer,
                role: slot.role,
                tensor: Tensor::new(slot.shape, data).expect("layout shape matches data"),
            }
        })
        .collect();
    Ok(ParamSet { entries })
}
