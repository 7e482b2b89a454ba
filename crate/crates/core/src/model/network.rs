//! Encoder, concatenation module and decoder, each with a forward pass that
//! records a tape and a backward pass that consumes it.

use super::params::{ConvIdx, DecoderStageIdx, LinearIdx};
use super::Params;
use crate::error::{Error, Result};
use crate::imaging::ImageRGB;
use crate::nn::{ops, Real, Tensor};

/// Activations of a conv-act, conv-act block.
#[derive(Clone, Debug)]
pub struct BlockTape<T> {
    pub input: Tensor<T>,
    pub mid: Tensor<T>,
    pub out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderTape<T> {
    /// One block per stage, finest first; each `out` is a skip map.
    pub stages: Vec<BlockTape<T>>,
    pub bottleneck: BlockTape<T>,
    /// Globally pooled bottleneck, `n x channels`.
    pub pooled: Vec<T>,
    /// `n x latent_dim`.
    pub latent: Vec<T>,
}

impl<T: Real> EncoderTape<T> {
    pub fn batch(&self) -> usize {
        self.bottleneck.out.n
    }

    pub fn skips(&self) -> Vec<&Tensor<T>> {
        self.stages.iter().map(|s| &s.out).collect()
    }

    /// `(h, w, channels)` of the bottleneck activation.
    pub fn bottleneck_shape(&self) -> (usize, usize, usize) {
        let b = &self.bottleneck.out;
        (b.h, b.w, b.c)
    }

    pub fn latent_row(&self, i: usize) -> &[T] {
        let d = self.latent.len() / self.batch();
        &self.latent[i * d..(i + 1) * d]
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStageTape<T> {
    pub upsampled: Tensor<T>,
    pub up: Tensor<T>,
    pub block: BlockTape<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderTape<T> {
    /// Indexed by stage, finest first.
    pub stages: Vec<DecoderStageTape<T>>,
    /// Logistic output in `(0, 1)`.
    pub out: Tensor<T>,
}

fn weight_bias_mut<T>(arrays: &mut [Vec<T>], weight: usize, bias: usize) -> (&mut [T], &mut [T]) {
    debug_assert_eq!(bias, weight + 1);
    let (a, b) = arrays.split_at_mut(bias);
    (&mut a[weight], &mut b[0])
}

fn conv_act<T: Real>(p: &Params<T>, c: ConvIdx, x: &Tensor<T>) -> Tensor<T> {
    let mut y = ops::conv_forward(x, p.get(c.weight), p.get(c.bias), c.cout, c.k);
    ops::leaky_relu_inplace(&mut y);
    y
}

fn conv_act_backward<T: Real>(
    p: &Params<T>,
    c: ConvIdx,
    x: &Tensor<T>,
    y: &Tensor<T>,
    mut dy: Tensor<T>,
    grads: &mut Params<T>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    ops::leaky_relu_backward_inplace(y, &mut dy);
    let (dw, db) = weight_bias_mut(&mut grads.arrays, c.weight, c.bias);
    ops::conv_backward(x, p.get(c.weight), &dy, c.k, dw, db, want_dx)
}

fn block_forward<T: Real>(p: &Params<T>, convs: [ConvIdx; 2], input: Tensor<T>) -> BlockTape<T> {
    let mid = conv_act(p, convs[0], &input);
    let out = conv_act(p, convs[1], &mid);
    BlockTape { input, mid, out }
}

fn block_backward<T: Real>(
    p: &Params<T>,
    convs: [ConvIdx; 2],
    tape: &BlockTape<T>,
    d_out: Tensor<T>,
    grads: &mut Params<T>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let d_mid = conv_act_backward(p, convs[1], &tape.mid, &tape.out, d_out, grads, true)
        .expect("input gradient requested");
    conv_act_backward(p, convs[0], &tape.input, &tape.mid, d_mid, grads, want_dx)
}

fn linear_backward<T: Real>(
    p: &Params<T>,
    l: LinearIdx,
    x: &[T],
    n: usize,
    dy: &[T],
    grads: &mut Params<T>,
) -> Vec<T> {
    let (dw, db) = weight_bias_mut(&mut grads.arrays, l.weight, l.bias);
    ops::linear_backward(x, n, p.get(l.weight), dy, dw, db)
}

/// Runs the encoder on an `n x 3 x H x W` batch whose sides are multiples
/// of `2^depth`.
pub fn encoder_forward<T: Real>(p: &Params<T>, input: Tensor<T>) -> Result<EncoderTape<T>> {
    let layout = &p.layout;
    let align = layout.arch.alignment();
    if input.c != 3 || input.h % align != 0 || input.w % align != 0 || input.h == 0 || input.w == 0 {
        return Err(Error::Dimension(format!(
            "encoder input {}x{}x{} must have 3 channels and sides divisible by {align}",
            input.c, input.h, input.w
        )));
    }
    let n = input.n;
    let mut stages = Vec::with_capacity(layout.encoder.len());
    let mut x = input;
    for convs in &layout.encoder {
        let tape = block_forward(p, *convs, x);
        x = ops::maxpool2_forward(&tape.out);
        stages.push(tape);
    }
    let bottleneck = block_forward(p, layout.bottleneck, x);
    let pooled = ops::global_avg_pool(&bottleneck.out);
    let proj = layout.projection;
    let latent = ops::linear_forward(&pooled, n, p.get(proj.weight), p.get(proj.bias));
    Ok(EncoderTape { stages, bottleneck, pooled, latent })
}

/// Backpropagates latent and (optionally) skip gradients through the
/// encoder, accumulating into `grads`. Returns the input gradient when
/// `want_dx` is set.
pub fn encoder_backward<T: Real>(
    p: &Params<T>,
    tape: &EncoderTape<T>,
    d_latent: &[T],
    d_skips: Option<&[Tensor<T>]>,
    grads: &mut Params<T>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let layout = &p.layout;
    let n = tape.batch();
    let d_pooled = linear_backward(p, layout.projection, &tape.pooled, n, d_latent, grads);
    let b = &tape.bottleneck.out;
    let d_b = ops::global_avg_pool_backward(&d_pooled, n, b.c, b.h, b.w);
    let mut d_x = block_backward(p, layout.bottleneck, &tape.bottleneck, d_b, grads, true)
        .expect("input gradient requested");
    for s in (0..layout.encoder.len()).rev() {
        let stage = &tape.stages[s];
        let mut d_skip = ops::maxpool2_backward(&stage.out, &d_x);
        if let Some(ds) = d_skips {
            d_skip.add_assign(&ds[s]);
        }
        match block_backward(p, layout.encoder[s], stage, d_skip, grads, s > 0 || want_dx) {
            Some(d) => d_x = d,
            None => return None,
        }
    }
    Some(d_x)
}

/// Concatenation module: fully connected layer from the latent to the
/// bottleneck channel count. Returns `n x channels`.
pub fn concat_fc_forward<T: Real>(p: &Params<T>, latent: &[T], n: usize) -> Vec<T> {
    let fc = p.layout.concat_fc;
    ops::linear_forward(latent, n, p.get(fc.weight), p.get(fc.bias))
}

/// Fully connected projection followed by spatial broadcast to `(h, w)`.
pub fn expand_forward<T: Real>(p: &Params<T>, latent: &[T], n: usize, h: usize, w: usize) -> Tensor<T> {
    let v = concat_fc_forward(p, latent, n);
    ops::broadcast_spatial(&v, n, p.layout.concat_fc.dout, h, w)
}

pub fn expand_backward<T: Real>(p: &Params<T>, latent: &[T], d_map: &Tensor<T>, grads: &mut Params<T>) -> Vec<T> {
    let d_v = ops::broadcast_spatial_backward(d_map);
    linear_backward(p, p.layout.concat_fc, latent, d_map.n, &d_v, grads)
}

/// Decodes a bottleneck-shaped map using skip maps (finest first).
pub fn decoder_forward<T: Real>(p: &Params<T>, map: Tensor<T>, skips: &[&Tensor<T>]) -> Result<DecoderTape<T>> {
    let layout = &p.layout;
    let depth = layout.decoder.len();
    if skips.len() != depth {
        return Err(Error::Dimension(format!("expected {depth} skip maps, got {}", skips.len())));
    }
    if map.c != layout.concat_fc.dout {
        return Err(Error::Dimension(format!(
            "decoder input has {} channels, expected {}",
            map.c, layout.concat_fc.dout
        )));
    }
    let mut stages: Vec<Option<DecoderStageTape<T>>> = (0..depth).map(|_| None).collect();
    let mut x = map;
    for s in (0..depth).rev() {
        let idx: DecoderStageIdx = layout.decoder[s];
        let skip = skips[s];
        if (skip.n, skip.h, skip.w) != (x.n, x.h * 2, x.w * 2) || skip.c != idx.up.cout {
            return Err(Error::Dimension(format!(
                "skip {s} is {}x{}x{}, decoder expects {}x{}x{}",
                skip.c,
                skip.h,
                skip.w,
                idx.up.cout,
                x.h * 2,
                x.w * 2
            )));
        }
        let upsampled = ops::upsample2_forward(&x);
        let up = conv_act(p, idx.up, &upsampled);
        let cat = ops::concat_channels(&up, skip);
        let block = block_forward(p, [idx.conv1, idx.conv2], cat);
        x = block.out.clone();
        stages[s] = Some(DecoderStageTape { upsampled, up, block });
    }
    let o = layout.output;
    let mut out = ops::conv_forward(&x, p.get(o.weight), p.get(o.bias), o.cout, o.k);
    ops::sigmoid_inplace(&mut out);
    Ok(DecoderTape { stages: stages.into_iter().map(|s| s.expect("every stage visited")).collect(), out })
}

/// Returns the gradient with respect to the decoder input map and the
/// gradient for each skip map (finest first).
pub fn decoder_backward<T: Real>(
    p: &Params<T>,
    tape: &DecoderTape<T>,
    d_out: &Tensor<T>,
    grads: &mut Params<T>,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let layout = &p.layout;
    let mut d = d_out.clone();
    ops::sigmoid_backward_inplace(&tape.out, &mut d);
    let o = layout.output;
    let (dw, db) = weight_bias_mut(&mut grads.arrays, o.weight, o.bias);
    let mut d_x = ops::conv_backward(&tape.stages[0].block.out, p.get(o.weight), &d, o.k, dw, db, true)
        .expect("input gradient requested");
    let mut d_skips = Vec::with_capacity(layout.decoder.len());
    for (s, idx) in layout.decoder.iter().enumerate() {
        let st = &tape.stages[s];
        let d_cat = block_backward(p, [idx.conv1, idx.conv2], &st.block, d_x, grads, true)
            .expect("input gradient requested");
        let (d_up, d_skip) = ops::split_channels(&d_cat, idx.up.cout);
        d_skips.push(d_skip);
        let d_upsampled = conv_act_backward(p, idx.up, &st.upsampled, &st.up, d_up, grads, true)
            .expect("input gradient requested");
        d_x = ops::upsample2_backward(&d_upsampled);
    }
    (d_x, d_skips)
}

/// Packs same-sized images into an `n x 3 x H x W` tensor.
pub fn images_to_tensor<T: Real>(images: &[&ImageRGB]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let (h, w) = first.dims();
    let mut t = Tensor::zeros(images.len(), 3, h, w);
    let plane = h * w;
    for (i, img) in images.iter().enumerate() {
        first.same_dims(img)?;
        let dst = t.sample_mut(i);
        for (j, px) in img.as_slice().chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + j] = T::of(px[c]);
            }
        }
    }
    Ok(t)
}

/// Unpacks an `n x 3 x H x W` tensor into images (values are not range-checked).
pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Vec<ImageRGB> {
    assert_eq!(t.c, 3, "RGB tensor expected");
    let plane = t.plane();
    (0..t.n)
        .map(|i| {
            let src = t.sample(i);
            let mut data = Vec::with_capacity(plane * 3);
            for j in 0..plane {
                for c in 0..3 {
                    data.push(src[c * plane + j].as_f64());
                }
            }
            ImageRGB::from_raw_unchecked(t.h, t.w, data).expect("tensor shape is valid")
        })
        .collect()
}
