use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the U-shaped network.
///
/// Stage `s` of the encoder has `base_channels * 2^s` channels; the
/// bottleneck keeps the channel count of the last stage. The latent vector
/// has `latent_dim` entries, the last `luminance_dim` of which form the
/// luminance span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub luminance_dim: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self { depth: 4, base_channels: 32, latent_dim: 256, luminance_dim: 32 }
    }
}

impl ArchSpec {
    pub const MAX_DEPTH: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > Self::MAX_DEPTH {
            return Err(Error::Config(format!(
                "depth must be in 1..={}, got {}",
                Self::MAX_DEPTH,
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.luminance_dim == 0 || self.luminance_dim >= self.latent_dim {
            return Err(Error::Config(format!(
                "need 0 < luminance_dim < latent_dim, got {} and {}",
                self.luminance_dim, self.latent_dim
            )));
        }
        Ok(())
    }

    pub fn content_dim(&self) -> usize {
        self.latent_dim - self.luminance_dim
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.depth - 1)
    }

    /// Input sides must be multiples of this.
    pub fn alignment(&self) -> usize {
        1 << self.depth
    }

    /// Smallest aligned side not below `side`.
    pub fn padded_side(&self, side: usize) -> usize {
        side.div_ceil(self.alignment()) * self.alignment()
    }

    pub fn summary(&self) -> String {
        format!(
            "depth={} base_channels={} latent_dim={} luminance_dim={}",
            self.depth, self.base_channels, self.latent_dim, self.luminance_dim
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let a = ArchSpec::default();
        a.validate().unwrap();
        assert_eq!(a.content_dim(), 224);
        assert_eq!((0..4).map(|s| a.stage_channels(s)).collect::<Vec<_>>(), vec![32, 64, 128, 256]);
        assert_eq!(a.bottleneck_channels(), 256);
        assert_eq!(a.padded_side(600), 608);
        assert_eq!(a.padded_side(400), 400);
    }

    #[test]
    fn rejects_bad_dims() {
        let bad = ArchSpec { luminance_dim: 256, ..ArchSpec::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ArchSpec { luminance_dim: 0, ..ArchSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ArchSpec { depth: 0, ..ArchSpec::default() };
        assert!(bad.validate().is_err());
    }
}
