//! Mask derivation, mask arithmetic and the per-client prune gates.

mod derive;
mod mask;
mod schedule;

pub use derive::{derive_channel_mask, derive_unstructured_mask, hybrid_dense_mask, prune_count};
pub use mask::{
    apply_mask, apply_mask_in_place, decode_bitmaps, mask_distance, ChannelKeep, Coverage, MaskKind,
    MaskTensor, SparsityMask,
};
pub use schedule::{should_prune, PruneKind, PruneSchedule};
