//! The U-shaped enhancement network: encoder with global pooling, latent
//! split into content and luminance spans, feature concatenation module,
//! and decoder fed by the low-light image's skip maps.

mod arch;
mod latent;
pub mod network;
mod params;

pub use arch::ArchSpec;
pub use latent::{concat_features, LatentVector};
pub use params::{
    init_params, ConvIdx, DecoderStageIdx, Layout, LinearIdx, ModelParams, ParamEntry, ParamGroup,
    Params,
};

use crate::error::{Error, Result};
use crate::imaging::ImageRGB;
use crate::nn::{ops, Tensor};

/// Encoder activations handed to the decoder, one per stage, finest first.
#[derive(Clone, Debug)]
pub struct SkipStack {
    pub maps: Vec<Tensor<f32>>,
}

impl SkipStack {
    pub fn sides(&self) -> Vec<(usize, usize)> {
        self.maps.iter().map(|m| (m.h, m.w)).collect()
    }
}

/// Result of one encoder pass over a single image.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub latent: LatentVector,
    pub skips: SkipStack,
    /// `(h, w, channels)` of the bottleneck activation.
    pub bottleneck_shape: (usize, usize, usize),
}

/// Encodes one image whose sides are multiples of `2^depth`.
pub fn encode(img: &ImageRGB, params: &ModelParams) -> Result<Encoding> {
    let x = network::images_to_tensor::<f32>(&[img])?;
    encode_tensor(x, params)
}

fn encode_tensor(x: Tensor<f32>, params: &ModelParams) -> Result<Encoding> {
    let arch = params.arch();
    let tape = network::encoder_forward(&params.weights, x)?;
    let bottleneck_shape = tape.bottleneck_shape();
    let latent = LatentVector::new(tape.latent.clone(), &arch)?;
    let maps = tape.stages.into_iter().map(|s| s.out).collect();
    Ok(Encoding { latent, skips: SkipStack { maps }, bottleneck_shape })
}

/// Reflect-pads the bottom/right edges to the next multiple of `2^depth`
/// and encodes.
pub fn encode_padded(img: &ImageRGB, params: &ModelParams) -> Result<Encoding> {
    let arch = params.arch();
    let x = network::images_to_tensor::<f32>(&[img])?;
    let x = ops::reflect_pad(&x, arch.padded_side(x.h), arch.padded_side(x.w));
    encode_tensor(x, params)
}

/// Maps a latent through the concatenation module's fully connected layer
/// and tiles the result over the bottleneck grid.
pub fn expand(f: &LatentVector, bottleneck_shape: (usize, usize, usize), params: &ModelParams) -> Result<Tensor<f32>> {
    let arch = params.arch();
    let (h, w, ch) = bottleneck_shape;
    if f.len() != arch.latent_dim || ch != arch.bottleneck_channels() || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "cannot expand a {}-latent to {h}x{w}x{ch}",
            f.len()
        )));
    }
    Ok(network::expand_forward(&params.weights, f.values(), 1, h, w))
}

/// Decodes a bottleneck map with the given skips into an image in `(0, 1)`.
pub fn decode(map: Tensor<f32>, skips: &SkipStack, params: &ModelParams) -> Result<ImageRGB> {
    let refs: Vec<&Tensor<f32>> = skips.maps.iter().collect();
    let tape = network::decoder_forward(&params.weights, map, &refs)?;
    Ok(network::tensor_to_images(&tape.out).remove(0))
}

/// Enhances `low` to the brightness of `reference`: content and skip maps
/// come from `low`, the luminance span from `reference`. The output has the
/// size of `low`; the two inputs may differ in size.
pub fn enhance(low: &ImageRGB, reference: &ImageRGB, params: &ModelParams) -> Result<ImageRGB> {
    let lum = encode_padded(reference, params)?;
    enhance_with_luminance(low, lum.latent.luminance(), params)
}

/// Same as [`enhance`] with a precomputed luminance span.
pub fn enhance_with_luminance(low: &ImageRGB, luminance: &[f32], params: &ModelParams) -> Result<ImageRGB> {
    let arch = params.arch();
    let enc = encode_padded(low, params)?;
    let f = concat_features(enc.latent.content(), luminance, &arch)?;
    let map = expand(&f, enc.bottleneck_shape, params)?;
    let out = decode(map, &enc.skips, params)?;
    out.crop(0, 0, low.height(), low.width())
}
