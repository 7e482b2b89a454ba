use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ArchSpec;
use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    ConcatFc,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }

    fn is_weight(&self) -> bool {
        self.name.ends_with(".weight")
    }
}

/// Indices of a convolution's weight and bias in [`Layout::entries`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIdx {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: usize,
    pub din: usize,
    pub dout: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderStageIdx {
    pub up: ConvIdx,
    pub conv1: ConvIdx,
    pub conv2: ConvIdx,
}

/// Ordered list of every parameter array plus typed handles into it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub arch: ArchSpec,
    pub entries: Vec<ParamEntry>,
    pub encoder: Vec<[ConvIdx; 2]>,
    pub bottleneck: [ConvIdx; 2],
    pub projection: LinearIdx,
    pub concat_fc: LinearIdx,
    /// Indexed by stage, finest first.
    pub decoder: Vec<DecoderStageIdx>,
    pub output: ConvIdx,
}

impl Layout {
    pub fn new(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let mut entries = Vec::new();
        let conv = |entries: &mut Vec<ParamEntry>, name: String, cin, cout, k, group| {
            let weight = entries.len();
            entries.push(ParamEntry { name: format!("{name}.weight"), shape: vec![cout, cin, k, k], group });
            entries.push(ParamEntry { name: format!("{name}.bias"), shape: vec![cout], group });
            ConvIdx { weight, bias: weight + 1, cin, cout, k }
        };
        let linear = |entries: &mut Vec<ParamEntry>, name: &str, din, dout, group| {
            let weight = entries.len();
            entries.push(ParamEntry { name: format!("{name}.weight"), shape: vec![dout, din], group });
            entries.push(ParamEntry { name: format!("{name}.bias"), shape: vec![dout], group });
            LinearIdx { weight, bias: weight + 1, din, dout }
        };

        let enc = ParamGroup::Encoder;
        let mut encoder = Vec::with_capacity(arch.depth);
        let mut cin = 3;
        for s in 0..arch.depth {
            let ch = arch.stage_channels(s);
            let c1 = conv(&mut entries, format!("encoder.stage{s}.conv1"), cin, ch, 3, enc);
            let c2 = conv(&mut entries, format!("encoder.stage{s}.conv2"), ch, ch, 3, enc);
            encoder.push([c1, c2]);
            cin = ch;
        }
        let cb = arch.bottleneck_channels();
        let bottleneck = [
            conv(&mut entries, "encoder.bottleneck.conv1".into(), cb, cb, 3, enc),
            conv(&mut entries, "encoder.bottleneck.conv2".into(), cb, cb, 3, enc),
        ];
        let projection = linear(&mut entries, "encoder.projection", cb, arch.latent_dim, enc);
        let concat_fc = linear(&mut entries, "concat.fc", arch.latent_dim, cb, ParamGroup::ConcatFc);

        let dec = ParamGroup::Decoder;
        let mut decoder = Vec::with_capacity(arch.depth);
        for s in 0..arch.depth {
            let ch = arch.stage_channels(s);
            let below = if s + 1 == arch.depth { cb } else { arch.stage_channels(s + 1) };
            decoder.push(DecoderStageIdx {
                up: conv(&mut entries, format!("decoder.stage{s}.up"), below, ch, 3, dec),
                conv1: conv(&mut entries, format!("decoder.stage{s}.conv1"), 2 * ch, ch, 3, dec),
                conv2: conv(&mut entries, format!("decoder.stage{s}.conv2"), ch, ch, 3, dec),
            });
        }
        let output = conv(&mut entries, "decoder.output".into(), arch.stage_channels(0), 3, 1, dec);

        Ok(Self { arch, entries, encoder, bottleneck, projection, concat_fc, decoder, output })
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(ParamEntry::len).sum()
    }
}

/// All learnable arrays of the network, in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub layout: Arc<Layout>,
    pub arrays: Vec<Vec<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let arrays = layout.entries.iter().map(|e| vec![T::zero(); e.len()]).collect();
        Self { layout, arrays }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.layout.clone())
    }

    pub fn arch(&self) -> ArchSpec {
        self.layout.arch
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &[T] {
        &self.arrays[idx]
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            layout: self.layout.clone(),
            arrays: self.arrays.iter().map(|a| a.iter().map(|v| U::of(v.as_f64())).collect()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().flatten().all(|v| v.is_finite())
    }

    /// Euclidean norm of all arrays in `group`.
    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.layout
            .entries
            .iter()
            .zip(&self.arrays)
            .filter(|(e, _)| e.group == group)
            .flat_map(|(_, a)| a.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a over the little-endian bytes of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.arrays.iter().flatten() {
            for b in v.as_f64().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Network weights plus the number of optimizer steps applied to them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub weights: Params<f32>,
    pub step: u64,
}

impl ModelParams {
    pub fn arch(&self) -> ArchSpec {
        self.weights.arch()
    }

    pub fn checksum(&self) -> u64 {
        self.weights.checksum()
    }
}

/// Deterministic fan-in scaled uniform initialization: weights drawn from
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, biases zero.
pub fn init_params(arch: ArchSpec, seed: u64) -> Result<ModelParams> {
    let layout = Arc::new(Layout::new(arch)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Params::<f32>::zeros(layout.clone());
    for (entry, array) in layout.entries.iter().zip(weights.arrays.iter_mut()) {
        if !entry.is_weight() {
            continue;
        }
        let bound = (6.0 / entry.fan_in() as f64).sqrt();
        for v in array.iter_mut() {
            *v = rng.random_range(-bound..bound) as f32;
        }
    }
    if !weights.is_finite() {
        return Err(Error::Numeric("initial parameters".into()));
    }
    Ok(ModelParams { weights, step: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchSpec {
        ArchSpec { depth: 2, base_channels: 4, latent_dim: 8, luminance_dim: 2 }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params(small(), 1).unwrap();
        let b = init_params(small(), 1).unwrap();
        let c = init_params(small(), 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn invalid_arch_is_config_error() {
        let bad = ArchSpec { luminance_dim: 8, ..small() };
        assert!(matches!(init_params(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn layout_shapes() {
        let layout = Layout::new(ArchSpec::default()).unwrap();
        let names: Vec<&str> = layout.entries.iter().map(|e| e.name.as_str()).collect();
        assert!(names.contains(&"encoder.stage0.conv1.weight"));
        assert!(names.contains(&"concat.fc.weight"));
        assert!(names.contains(&"decoder.output.bias"));
        let fc = &layout.entries[layout.concat_fc.weight];
        assert_eq!(fc.shape, vec![256, 256]);
        assert_eq!(layout.entries[layout.decoder[3].up.weight].shape, vec![256, 256, 3, 3]);
        assert_eq!(layout.entries[layout.decoder[0].conv1.weight].shape, vec![32, 64, 3, 3]);
        let mut seen = std::collections::HashSet::new();
        assert!(names.iter().all(|n| seen.insert(*n)), "names are unique");
    }

    #[test]
    fn biases_start_at_zero_and_weights_are_bounded() {
        let p = init_params(small(), 9).unwrap();
        for (e, a) in p.weights.layout.entries.iter().zip(&p.weights.arrays) {
            if e.name.ends_with(".bias") {
                assert!(a.iter().all(|v| *v == 0.0));
            } else {
                let bound = (6.0 / e.fan_in() as f64).sqrt() as f32;
                assert!(a.iter().all(|v| v.abs() <= bound));
            }
        }
    }
}
