use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::engine::{backward, forward, Mode};
use crate::nn::optim::{sgd_step, OptimizerState};
use crate::nn::params::ParamSet;
use crate::nn::spec::ModelSpec;
use crate::pruning::SparsityMask;

const EVAL_BATCH: usize = 256;

/// One pass over `indices` in a shuffled order, in minibatches of
/// `batch_size`. Returns the mean minibatch loss, or `Ok(None)` if the loss
/// became non-finite (the caller attaches client and round context).
pub fn train_epoch<R: Rng>(
    spec: &ModelSpec,
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    mask: Option<&SparsityMask>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Option<f32>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut total = 0.0f64;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let (x, y) = data.batch(chunk);
        let (_, cache) = forward(spec, params, &x, Mode::Train)?;
        let (loss, grads) = backward(spec, params, &cache, &y)?;
        if !loss.is_finite() {
            return Ok(None);
        }
        cache.commit_running_stats(params);
        sgd_step(params, &grads, opt, mask)?;
        total += loss as f64;
        batches += 1;
    }
    if !params.is_finite() {
        return Ok(None);
    }
    Ok(Some(if batches == 0 { 0.0 } else { (total / batches as f64) as f32 }))
}

/// Top-1 accuracy in percent on `indices`, eval-mode batch-norm.
pub fn evaluate(spec: &ModelSpec, params: &ParamSet, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let classes = spec.classes();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let (logits, _) = forward(spec, params, &x, Mode::Eval)?;
        for (row, label) in logits.data().chunks(classes).zip(&y) {
            // first maximum wins, so ties resolve deterministically
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            if best == *label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / indices.len() as f64)
}
