use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImagePair;
use crate::error::{Error, Result};

const SHUFFLE_STREAM: u64 = 0;
const CROP_STREAM: u64 = 1;

fn epoch_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

pub fn batches_per_epoch(num_pairs: usize, batch_size: usize) -> usize {
    num_pairs.div_ceil(batch_size)
}

/// Permutation of `0..n` for the given epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, SHUFFLE_STREAM));
    order
}

/// One epoch of shuffled batches. Crop windows are drawn up front so the
/// batches can be produced lazily or skipped without changing later ones.
#[derive(Debug)]
pub struct Batches<'a> {
    pairs: &'a [ImagePair],
    order: Vec<usize>,
    crops: Vec<Option<(usize, usize, usize)>>,
    batch_size: usize,
    next: usize,
}

impl Batches<'_> {
    pub fn len(&self) -> usize {
        batches_per_epoch(self.order.len(), self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Vec<ImagePair>>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next * self.batch_size;
        if start >= self.order.len() {
            return None;
        }
        self.next += 1;
        let end = (start + self.batch_size).min(self.order.len());
        let batch = (start..end)
            .map(|slot| {
                let pair = &self.pairs[self.order[slot]];
                match self.crops[slot] {
                    None => Ok(pair.clone()),
                    Some((top, left, size)) => Ok(ImagePair {
                        low: pair.low.crop(top, left, size, size)?,
                        reference: pair.reference.crop(top, left, size, size)?,
                        id: pair.id.clone(),
                    }),
                }
            })
            .collect();
        Some(batch)
    }

    fn nth(&mut self, n: usize) -> Option<Self::Item> {
        self.next += n;
        self.next()
    }
}

/// Batches for the first epoch.
pub fn make_batches(pairs: &[ImagePair], batch_size: usize, crop: Option<usize>, seed: u64) -> Result<Batches<'_>> {
    make_epoch_batches(pairs, batch_size, crop, seed, 0)
}

/// Shuffled batches for `epoch`, with an optional random square crop that
/// uses the same window for both images of a pair. The final partial batch
/// is kept.
pub fn make_epoch_batches(
    pairs: &[ImagePair],
    batch_size: usize,
    crop: Option<usize>,
    seed: u64,
    epoch: u64,
) -> Result<Batches<'_>> {
    if pairs.is_empty() {
        return Err(Error::Argument("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let order = epoch_order(pairs.len(), seed, epoch);
    let mut rng = epoch_rng(seed, epoch, CROP_STREAM);
    let crops = order
        .iter()
        .map(|&i| match crop {
            None => Ok(None),
            Some(size) => {
                let (h, w) = pairs[i].low.dims();
                if size == 0 || size > h || size > w {
                    return Err(Error::Dimension(format!(
                        "crop {size} does not fit pair {} of size {h}x{w}",
                        pairs[i].id
                    )));
                }
                Ok(Some((rng.random_range(0..=h - size), rng.random_range(0..=w - size), size)))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Batches { pairs, order, crops, batch_size, next: 0 })
}
