use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamRole, ParamSet};

/// Which tensors the unstructured (per-position) part of a mask governs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coverage {
    /// Weights and biases of every conv and dense layer; BN excluded.
    ConvAndDense,
    /// Weights and biases of dense layers only.
    DenseOnly,
    /// Nothing: a purely structured mask.
    None,
}

/// Which domain a mask was derived over, and therefore which bits
/// [`mask_distance`] compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Unstructured,
    Structured,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskTensor {
    pub layer: String,
    pub role: ParamRole,
    pub bits: Vec<bool>,
    /// Governed by the unstructured part.
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelKeep {
    pub layer: String,
    pub keep: Vec<bool>,
    /// Index of this conv layer's weight entry.
    pub(crate) weight_entry: usize,
    /// Weight entry of the conv layer that consumes this one's output channels.
    pub(crate) next_conv_weight: Option<usize>,
}

/// Binary mask over every tensor of a [`ParamSet`] plus per-conv-layer
/// channel keep-sets.
///
/// Bitmaps are aligned one-to-one with the parameter entries. Bits on BN
/// running statistics mirror the owning channel's keep bit; they are used by
/// aggregation only and never counted as parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    tensors: Vec<MaskTensor>,
    channels: Vec<ChannelKeep>,
    kind: MaskKind,
    coverage: Coverage,
}

impl SparsityMask {
    /// All-ones mask laid out like `params`.
    pub fn dense(params: &ParamSet, coverage: Coverage) -> Self {
        let dense_layers: Vec<&str> = params
            .entries()
            .iter()
            .filter(|e| e.role == ParamRole::Weight && e.tensor.shape().len() == 2)
            .map(|e| e.layer.as_str())
            .collect();
        let tensors = params
            .entries()
            .iter()
            .map(|e| {
                let is_wb = matches!(e.role, ParamRole::Weight | ParamRole::Bias);
                let covered = match coverage {
                    Coverage::ConvAndDense => is_wb,
                    Coverage::DenseOnly => is_wb && dense_layers.contains(&e.layer.as_str()),
                    Coverage::None => false,
                };
                MaskTensor {
                    layer: e.layer.clone(),
                    role: e.role,
                    bits: vec![true; e.tensor.len()],
                    covered,
                }
            })
            .collect();
        Self {
            tensors,
            channels: channel_layout(params),
            kind: match coverage {
                Coverage::None => MaskKind::Structured,
                _ => MaskKind::Unstructured,
            },
            coverage,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn coverage(&self) -> Coverage {
        self.coverage
    }

    pub(crate) fn with_kind(mut self, kind: MaskKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn tensors(&self) -> &[MaskTensor] {
        &self.tensors
    }

    pub fn channels(&self) -> &[ChannelKeep] {
        &self.channels
    }

    pub fn bits(&self, entry: usize) -> &[bool] {
        &self.tensors[entry].bits
    }

    pub fn set_bit(&mut self, entry: usize, pos: usize, keep: bool) {
        self.tensors[entry].bits[pos] = keep;
    }

    pub(crate) fn bits_mut(&mut self, entry: usize) -> &mut [bool] {
        &mut self.tensors[entry].bits
    }

    pub(crate) fn channels_mut(&mut self) -> &mut [ChannelKeep] {
        &mut self.channels
    }

    /// Checks that the bitmaps line up with `params` entry by entry.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Incongruent {
                what: "mask and params",
                detail: format!("{} bitmaps vs {} entries", self.tensors.len(), params.len()),
            });
        }
        for (t, e) in self.tensors.iter().zip(params.entries()) {
            if t.layer != e.layer || t.role != e.role || t.bits.len() != e.tensor.len() {
                return Err(Error::Incongruent {
                    what: "mask and params",
                    detail: format!("bitmap {}.{} does not match {}.{}", t.layer, t.role, e.layer, e.role),
                });
            }
        }
        Ok(())
    }

    pub fn check_congruent(&self, other: &SparsityMask) -> Result<()> {
        let same_tensors = self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.layer == b.layer && a.role == b.role && a.bits.len() == b.bits.len()
            });
        let same_channels = self.channels.len() == other.channels.len()
            && self
                .channels
                .iter()
                .zip(&other.channels)
                .all(|(a, b)| a.layer == b.layer && a.keep.len() == b.keep.len());
        if !same_tensors || !same_channels {
            return Err(Error::Incongruent {
                what: "masks",
                detail: "bitmap layouts differ".into(),
            });
        }
        Ok(())
    }

    /// Positions in the unstructured domain.
    pub fn covered_len(&self) -> usize {
        self.tensors.iter().filter(|t| t.covered).map(|t| t.bits.len()).sum()
    }

    pub fn covered_zeros(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.covered)
            .map(|t| t.bits.iter().filter(|b| !**b).count())
            .sum()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.iter().map(|c| c.keep.len()).sum()
    }

    pub fn pruned_channels(&self) -> usize {
        self.channels
            .iter()
            .map(|c| c.keep.iter().filter(|k| !**k).count())
            .sum()
    }

    /// Fraction of the unstructured domain that is pruned.
    pub fn unstructured_sparsity(&self) -> f64 {
        ratio(self.covered_zeros(), self.covered_len())
    }

    /// Fraction of BN-ranked conv channels that are pruned.
    pub fn channel_sparsity(&self) -> f64 {
        ratio(self.pruned_channels(), self.channel_count())
    }

    fn in_prunable_domain(&self, i: usize) -> bool {
        let t = &self.tensors[i];
        if !t.role.is_learnable() {
            return false;
        }
        if t.covered {
            return true;
        }
        matches!(self.kind, MaskKind::Structured | MaskKind::Combined)
            && self.channels.iter().any(|c| c.layer == t.layer)
    }

    /// Learnable positions this mask can prune: the unstructured domain plus,
    /// for structured masks, every tensor of a BN-ranked conv layer.
    pub fn prunable_len(&self) -> usize {
        (0..self.tensors.len())
            .filter(|&i| self.in_prunable_domain(i))
            .map(|i| self.tensors[i].bits.len())
            .sum()
    }

    pub fn prunable_zeros(&self) -> usize {
        (0..self.tensors.len())
            .filter(|&i| self.in_prunable_domain(i))
            .map(|i| self.tensors[i].bits.iter().filter(|b| !**b).count())
            .sum()
    }

    /// Overall sparsity in `[0, 1]` over the prunable domain.
    pub fn sparsity(&self) -> f64 {
        ratio(self.prunable_zeros(), self.prunable_len())
    }

    /// Learnable positions kept by this mask.
    pub fn retained_learnable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.role.is_learnable())
            .map(|t| t.bits.iter().filter(|b| **b).count())
            .sum()
    }

    pub fn learnable_len(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.role.is_learnable())
            .map(|t| t.bits.len())
            .sum()
    }

    /// Zero positions across learnable tensors, as (entry, flat index) pairs.
    pub fn zero_set(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, t) in self.tensors.iter().enumerate() {
            if !t.role.is_learnable() {
                continue;
            }
            out.extend(t.bits.iter().enumerate().filter(|(_, b)| !**b).map(|(j, _)| (i, j)));
        }
        out
    }

    /// True if every position pruned by `other` is also pruned here.
    pub fn zeros_superset_of(&self, other: &SparsityMask) -> bool {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .all(|(a, b)| a.bits.iter().zip(&b.bits).all(|(x, y)| *y || !*x))
    }

    /// Elementwise AND of bitmaps and keep-sets.
    pub fn intersect(&self, other: &SparsityMask) -> Result<SparsityMask> {
        self.check_congruent(other)?;
        let mut out = self.clone();
        for (a, b) in out.tensors.iter_mut().zip(&other.tensors) {
            a.bits.iter_mut().zip(&b.bits).for_each(|(x, y)| *x &= *y);
            a.covered |= b.covered;
        }
        for (a, b) in out.channels.iter_mut().zip(&other.channels) {
            a.keep.iter_mut().zip(&b.keep).for_each(|(x, y)| *x &= *y);
        }
        if self.kind != other.kind {
            out.kind = MaskKind::Combined;
        }
        Ok(out)
    }

    /// Total bits when every learnable position is sent as one bit.
    pub fn payload_bits(&self) -> usize {
        self.learnable_len()
    }

    /// Packs the learnable bitmaps: a header of (layer, role, bit length)
    /// records followed by each bitmap as little-endian packed bytes
    /// (position `i` lives in byte `i / 8`, bit `i % 8`).
    ///
    /// Layout: `b"SFMK"`, version `u8 = 1`, entry count `u32`; per entry a
    /// `u16` name length, the UTF-8 name, a role byte and a `u32` bit length;
    /// then the payloads in header order. Integers are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let learnable: Vec<&MaskTensor> =
            self.tensors.iter().filter(|t| t.role.is_learnable()).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(learnable.len() as u32).to_le_bytes());
        for t in &learnable {
            out.extend_from_slice(&(t.layer.len() as u16).to_le_bytes());
            out.extend_from_slice(t.layer.as_bytes());
            out.push(role_code(t.role));
            out.extend_from_slice(&(t.bits.len() as u32).to_le_bytes());
        }
        for t in &learnable {
            out.extend(pack_bits(&t.bits));
        }
        out
    }

    /// Overwrites this mask's learnable bitmaps from [`SparsityMask::to_bytes`]
    /// output and rebuilds the channel keep-sets from the BN scale bits.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let decoded = decode_bitmaps(bytes)?;
        let learnable: Vec<usize> = (0..self.tensors.len())
            .filter(|&i| self.tensors[i].role.is_learnable())
            .collect();
        if decoded.len() != learnable.len() {
            return Err(Error::Incongruent {
                what: "encoded mask",
                detail: format!("{} bitmaps vs {} learnable tensors", decoded.len(), learnable.len()),
            });
        }
        for (&i, (layer, role, bits)) in learnable.iter().zip(decoded) {
            let t = &mut self.tensors[i];
            if t.layer != layer || t.role != role || t.bits.len() != bits.len() {
                return Err(Error::Incongruent {
                    what: "encoded mask",
                    detail: format!("{layer}.{role} does not match {}.{}", t.layer, t.role),
                });
            }
            t.bits = bits;
        }
        let scales: Vec<(String, Vec<bool>)> = self
            .tensors
            .iter()
            .filter(|t| t.role == ParamRole::BnScale)
            .map(|t| (t.layer.clone(), t.bits.clone()))
            .collect();
        for (layer, bits) in scales {
            if let Some(ch) = self.channels.iter_mut().find(|c| c.layer == layer) {
                ch.keep = bits.clone();
            }
            for t in self.tensors.iter_mut().filter(|t| {
                t.layer == layer && matches!(t.role, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
            }) {
                t.bits = bits.clone();
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"SFMK";
const FORMAT_VERSION: u8 = 1;

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn role_code(role: ParamRole) -> u8 {
    match role {
        ParamRole::Weight => 0,
        ParamRole::Bias => 1,
        ParamRole::BnScale => 2,
        ParamRole::BnShift => 3,
        ParamRole::BnRunningMean => 4,
        ParamRole::BnRunningVar => 5,
    }
}

fn role_from_code(code: u8) -> Option<ParamRole> {
    Some(match code {
        0 => ParamRole::Weight,
        1 => ParamRole::Bias,
        2 => ParamRole::BnScale,
        3 => ParamRole::BnShift,
        4 => ParamRole::BnRunningMean,
        5 => ParamRole::BnRunningVar,
        _ => return None,
    })
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, b) in bits.iter().enumerate() {
        if *b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Incongruent {
        what: "encoded mask",
        detail: detail.into(),
    }
}

/// Parses the packed format written by [`SparsityMask::to_bytes`].
pub fn decode_bitmaps(bytes: &[u8]) -> Result<Vec<(String, ParamRole, Vec<bool>)>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if take(1)?[0] != FORMAT_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut header = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| bad("layer name is not UTF-8"))?
            .to_string();
        let role = role_from_code(take(1)?[0]).ok_or_else(|| bad("unknown role code"))?;
        let bits = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        header.push((name, role, bits));
    }
    let mut out = Vec::with_capacity(header.len());
    for (name, role, nbits) in header {
        let packed = take(nbits.div_ceil(8))?;
        let bits = (0..nbits).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        out.push((name, role, bits));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Channel keep-sets for every BN conv layer, with the entry indices needed
/// to propagate a pruned channel into the next conv layer's input slice.
fn channel_layout(params: &ParamSet) -> Vec<ChannelKeep> {
    let entries = params.entries();
    let convs: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.role == ParamRole::Weight && e.tensor.shape().len() == 4)
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::new();
    for (k, &wi) in convs.iter().enumerate() {
        let layer = &entries[wi].layer;
        let Some(scale) = params.get(layer, ParamRole::BnScale) else {
            continue;
        };
        let out_ch = entries[wi].tensor.shape()[0];
        // the next weight entry in order must be a conv fed by this layer
        let next_weight = entries[wi + 1..]
            .iter()
            .position(|e| e.role == ParamRole::Weight)
            .map(|off| wi + 1 + off);
        let next_conv_weight = match (next_weight, convs.get(k + 1)) {
            (Some(nw), Some(&nc)) if nw == nc && entries[nc].tensor.shape()[1] == out_ch => Some(nc),
            _ => None,
        };
        out.push(ChannelKeep {
            layer: layer.clone(),
            keep: vec![true; scale.len()],
            weight_entry: wi,
            next_conv_weight,
        });
    }
    out
}

/// Normalised Hamming distance between two masks over the domain their kind
/// governs: unstructured positions, channel keep bits, or both.
pub fn mask_distance(a: &SparsityMask, b: &SparsityMask) -> Result<f64> {
    a.check_congruent(b)?;
    if a.kind != b.kind {
        return Err(Error::Incongruent {
            what: "masks",
            detail: format!("cannot compare {:?} with {:?}", a.kind, b.kind),
        });
    }
    let mut diff = 0usize;
    let mut domain = 0usize;
    if matches!(a.kind, MaskKind::Unstructured | MaskKind::Combined) {
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            if !(x.covered || y.covered) {
                continue;
            }
            domain += x.bits.len();
            diff += x.bits.iter().zip(&y.bits).filter(|(p, q)| p != q).count();
        }
    }
    if matches!(a.kind, MaskKind::Structured | MaskKind::Combined) {
        for (x, y) in a.channels.iter().zip(&b.channels) {
            domain += x.keep.len();
            diff += x.keep.iter().zip(&y.keep).filter(|(p, q)| p != q).count();
        }
    }
    Ok(ratio(diff, domain))
}

/// Elementwise product of `params` with the mask's learnable bitmaps.
pub fn apply_mask(params: &ParamSet, mask: &SparsityMask) -> Result<ParamSet> {
    let mut out = params.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place(params: &mut ParamSet, mask: &SparsityMask) -> Result<()> {
    mask.check_params(params)?;
    for (e, t) in params.entries_mut().iter_mut().zip(&mask.tensors) {
        if !e.role.is_learnable() {
            continue;
        }
        for (v, keep) in e.tensor.data_mut().iter_mut().zip(&t.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(())
}
