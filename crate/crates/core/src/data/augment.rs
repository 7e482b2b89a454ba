//! Paired augmentations. Geometric transforms apply to both images; the
//! patch swap edits only the low-light input.

use rand::Rng;

use super::ImagePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

pub fn apply_flip(pair: &ImagePair, flip: Flip) -> ImagePair {
    let (low, reference) = match flip {
        Flip::None => return pair.clone(),
        Flip::Horizontal => (pair.low.flip_horizontal(), pair.reference.flip_horizontal()),
        Flip::Vertical => (pair.low.flip_vertical(), pair.reference.flip_vertical()),
    };
    ImagePair { low, reference, id: pair.id.clone() }
}

/// With probability 1/2 no flip; otherwise horizontal or vertical with
/// equal probability.
pub fn draw_flip<R: Rng + ?Sized>(rng: &mut R) -> Flip {
    if !rng.random_bool(0.5) {
        Flip::None
    } else if rng.random_bool(0.5) {
        Flip::Horizontal
    } else {
        Flip::Vertical
    }
}

pub fn augment_flip<R: Rng + ?Sized>(pair: &ImagePair, rng: &mut R) -> ImagePair {
    apply_flip(pair, draw_flip(rng))
}

/// Square region `[top, top + size) x [left, left + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patch {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Patch {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.size).contains(&y) && (self.left..self.left + self.size).contains(&x)
    }
}

/// Outcome of a patch swap attempt.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSwap {
    pub pair: ImagePair,
    /// `None` when the image was too small and the pair is unchanged.
    pub patch: Option<Patch>,
    pub warning: Option<String>,
}

/// Copies a uniformly placed `size x size` region of the reference into the
/// same position of the low-light image.
pub fn augment_patch_swap<R: Rng + ?Sized>(pair: &ImagePair, size: usize, rng: &mut R) -> PatchSwap {
    let (h, w) = pair.low.dims();
    if size == 0 || h < size || w < size {
        let warning = format!("pair {}: {h}x{w} is smaller than the {size}px swap patch; skipped", pair.id);
        log::warn!("{warning}");
        return PatchSwap { pair: pair.clone(), patch: None, warning: Some(warning) };
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let patch = Patch { top, left, size };
    let mut low = pair.low.clone();
    for y in top..top + size {
        for x in left..left + size {
            low.set_pixel(y, x, pair.reference.pixel(y, x));
        }
    }
    PatchSwap { pair: ImagePair { low, reference: pair.reference.clone(), id: pair.id.clone() }, patch: Some(patch), warning: None }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Probability of applying the patch swap to a sample.
    pub patch_swap_prob: f64,
    pub patch_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, patch_swap_prob: 0.5, patch_size: 100 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { flip: false, patch_swap_prob: 0.0, patch_size: 100 }
    }
}

/// Flip, then (with the configured probability) patch swap.
pub fn augment<R: Rng + ?Sized>(pair: &ImagePair, cfg: &AugmentConfig, rng: &mut R) -> ImagePair {
    let flipped = if cfg.flip { augment_flip(pair, rng) } else { pair.clone() };
    if cfg.patch_swap_prob > 0.0 && rng.random_bool(cfg.patch_swap_prob.min(1.0)) {
        augment_patch_swap(&flipped, cfg.patch_size, rng).pair
    } else {
        flipped
    }
}
