use serde::{Deserialize, Serialize};

use super::ArchSpec;
use crate::error::{Error, Result};

/// Latent code `f = [c | l]`: the first `content_dim` entries are the
/// content span, the remainder the luminance span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    values: Vec<f32>,
    content_dim: usize,
}

impl LatentVector {
    pub fn new(values: Vec<f32>, arch: &ArchSpec) -> Result<Self> {
        if values.len() != arch.latent_dim {
            return Err(Error::Dimension(format!(
                "latent has {} entries, architecture expects {}",
                values.len(),
                arch.latent_dim
            )));
        }
        Ok(Self { values, content_dim: arch.content_dim() })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn content(&self) -> &[f32] {
        &self.values[..self.content_dim]
    }

    pub fn luminance(&self) -> &[f32] {
        &self.values[self.content_dim..]
    }

    /// `(content, luminance)` spans of this latent.
    pub fn split(&self) -> (&[f32], &[f32]) {
        self.values.split_at(self.content_dim)
    }
}

/// Joins a content span and a luminance span into one latent.
pub fn concat_features(content: &[f32], luminance: &[f32], arch: &ArchSpec) -> Result<LatentVector> {
    if content.len() != arch.content_dim() || luminance.len() != arch.luminance_dim {
        return Err(Error::Dimension(format!(
            "content/luminance lengths {}/{} do not match {}/{}",
            content.len(),
            luminance.len(),
            arch.content_dim(),
            arch.luminance_dim
        )));
    }
    let mut values = Vec::with_capacity(arch.latent_dim);
    values.extend_from_slice(content);
    values.extend_from_slice(luminance);
    Ok(LatentVector { values, content_dim: content.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch(latent_dim: usize, luminance_dim: usize) -> ArchSpec {
        ArchSpec { depth: 1, base_channels: 1, latent_dim, luminance_dim }
    }

    #[test]
    fn split_partition() {
        let a = arch(8, 2);
        let f = LatentVector::new((1..=8).map(|v| v as f32).collect(), &a).unwrap();
        let (c, l) = f.split();
        assert_eq!(c, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(l, &[7.0, 8.0]);

        let z = LatentVector::new(vec![0.0; 8], &a).unwrap();
        assert!(z.content().iter().chain(z.luminance()).all(|v| *v == 0.0));
    }

    #[test]
    fn concat_cases() {
        let a = arch(3, 1);
        let f = concat_features(&[1.0, 2.0], &[3.0], &a).unwrap();
        assert_eq!(f.values(), &[1.0, 2.0, 3.0]);
        assert!(matches!(concat_features(&[1.0], &[3.0], &a), Err(Error::Dimension(_))));
        assert!(LatentVector::new(vec![0.0; 4], &a).is_err());
    }

    proptest! {
        #[test]
        fn split_then_concat_is_identity(values in proptest::collection::vec(-10.0f32..10.0, 2..40), frac in 0.01f64..0.99) {
            let n = values.len();
            let lum = ((n as f64 * frac) as usize).clamp(1, n - 1);
            let a = arch(n, lum);
            let f = LatentVector::new(values, &a).unwrap();
            let (c, l) = f.split();
            prop_assert_eq!(concat_features(c, l, &a).unwrap(), f);
        }
    }
}
