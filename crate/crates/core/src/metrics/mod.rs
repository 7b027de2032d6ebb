//! Communication cost, convolution FLOPs, parameter reduction and accuracy summaries.

mod cost;
mod flops;
mod summary;

pub use cost::{
    comm_cost_closed_form, downlink_bits, uplink_bits, ClosedFormCost, CostEntry, CostLedger, BITS_PER_MASK_POSITION,
    BITS_PER_SCALAR,
};
pub use flops::{conv_flops, conv_flops_for_mask, dense_flops, FlopProfile, LayerFlops};
pub use summary::{accuracy_summary, param_reduction, AccuracySummary};
