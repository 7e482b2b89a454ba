//! Paired dataset loading, augmentation and batching.

mod augment;
mod batches;
mod dataset;
pub mod synth;

pub use augment::{
    apply_flip, augment, augment_flip, augment_patch_swap, draw_flip, AugmentConfig, Flip, Patch,
    PatchSwap,
};
pub use batches::{batches_per_epoch, epoch_order, make_batches, make_epoch_batches, Batches};
pub use dataset::{
    list_pairs, load_lol, load_lol_with_split, load_pair, DatasetSplit, ImagePair, PairFiles,
    LOL_TRAIN_COUNT,
};
