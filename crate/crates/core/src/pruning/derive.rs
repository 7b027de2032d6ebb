use crate::error::{Error, Result};
use crate::nn::params::{ParamRole, ParamSet};
use crate::pruning::mask::{Coverage, MaskKind, SparsityMask};

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..100.0).contains(&fraction) || fraction.is_nan() {
        return Err(Error::FractionOutOfRange(fraction));
    }
    Ok(())
}

/// Number of positions a `fraction`-percent cut removes from `n`.
pub fn prune_count(fraction: f64, n: usize) -> usize {
    ((fraction / 100.0) * n as f64).floor() as usize
}

/// Magnitude mask over the `coverage` domain.
///
/// Exactly `floor(fraction% * N)` positions are zeroed, where `N` is the size
/// of the dense covered domain. The zeroed positions are those with the
/// smallest absolute value, ties broken by ascending flat index across the
/// covered tensors in entry order.
pub fn derive_unstructured_mask(
    params: &ParamSet,
    fraction: f64,
    coverage: Coverage,
) -> Result<SparsityMask> {
    check_fraction(fraction)?;
    let mut mask = SparsityMask::dense(params, coverage);
    let covered: Vec<usize> = (0..params.len())
        .filter(|&i| mask.tensors()[i].covered)
        .collect();
    let mut ranked: Vec<(f32, usize, usize)> = Vec::with_capacity(mask.covered_len());
    for &i in &covered {
        for (j, v) in params.entries()[i].tensor.data().iter().enumerate() {
            ranked.push((v.abs(), i, j));
        }
    }
    let count = prune_count(fraction, ranked.len());
    if count == 0 {
        return Ok(mask);
    }
    // (entry, position) pairs already sort in flat-index order
    let cmp = |a: &(f32, usize, usize), b: &(f32, usize, usize)| {
        a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2)))
    };
    if count < ranked.len() {
        ranked.select_nth_unstable_by(count - 1, cmp);
    }
    for &(_, i, j) in &ranked[..count] {
        mask.set_bit(i, j, false);
    }
    Ok(mask)
}

/// Channel mask ranked by batch-norm scale magnitude.
///
/// The scales of every BN layer are pooled; the `floor(fraction% * C)`
/// smallest (ties by layer order, then channel index) are removed, skipping
/// any channel whose removal would leave its layer empty. A removed channel
/// zeroes its filter, bias, BN scale and shift, and the matching input slice
/// of the next conv layer.
pub fn derive_channel_mask(params: &ParamSet, fraction: f64) -> Result<SparsityMask> {
    check_fraction(fraction)?;
    let mut mask = SparsityMask::dense(params, Coverage::None);
    if mask.channels().is_empty() {
        return Err(Error::NoBatchNorm);
    }
    let mut ranked: Vec<(f32, usize, usize)> = Vec::new();
    for (li, ch) in mask.channels().iter().enumerate() {
        let scale = params
            .get(&ch.layer, ParamRole::BnScale)
            .expect("channel layout built from BN entries");
        ranked.extend(scale.data().iter().enumerate().map(|(c, s)| (s.abs(), li, c)));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let target = prune_count(fraction, ranked.len());
    let mut kept: Vec<usize> = mask.channels().iter().map(|c| c.keep.len()).collect();
    let mut removed = 0;
    for &(_, li, c) in &ranked {
        if removed == target {
            break;
        }
        if kept[li] <= 1 {
            continue;
        }
        kept[li] -= 1;
        mask.channels_mut()[li].keep[c] = false;
        removed += 1;
    }
    propagate_channels(&mut mask, params);
    Ok(mask)
}

/// Writes channel keep-sets into the bitmaps of the affected tensors.
pub(crate) fn propagate_channels(mask: &mut SparsityMask, params: &ParamSet) {
    let channels = mask.channels().to_vec();
    for ch in &channels {
        let out_ch = ch.keep.len();
        let w_shape = params.entries()[ch.weight_entry].tensor.shape().to_vec();
        let per_filter: usize = w_shape[1..].iter().product();
        for (c, keep) in ch.keep.iter().enumerate() {
            if *keep {
                continue;
            }
            mask.bits_mut(ch.weight_entry)[c * per_filter..(c + 1) * per_filter].fill(false);
            for role in [
                ParamRole::Bias,
                ParamRole::BnScale,
                ParamRole::BnShift,
                ParamRole::BnRunningMean,
                ParamRole::BnRunningVar,
            ] {
                if let Some(i) = params.index_of(&ch.layer, role) {
                    mask.bits_mut(i)[c] = false;
                }
            }
            if let Some(nw) = ch.next_conv_weight {
                let shape = params.entries()[nw].tensor.shape().to_vec();
                debug_assert_eq!(shape[1], out_ch);
                let k2 = shape[2] * shape[3];
                let bits = mask.bits_mut(nw);
                for o in 0..shape[0] {
                    let start = (o * shape[1] + c) * k2;
                    bits[start..start + k2].fill(false);
                }
            }
        }
    }
}

/// Mask kind of a hybrid client: structured channels plus dense-layer positions.
pub fn hybrid_dense_mask(params: &ParamSet) -> SparsityMask {
    SparsityMask::dense(params, Coverage::DenseOnly).with_kind(MaskKind::Combined)
}
