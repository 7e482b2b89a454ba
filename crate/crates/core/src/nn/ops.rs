//! Forward and backward kernels for the layers the U-shaped network uses.
//! All convolutions are stride 1 with "same" zero padding.

use super::{gemm, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Unfolds one `c x h x w` sample into a `(c * k * k) x (h * w)` matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..x0.min(w)].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (w as isize - dxo).min(w as isize).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + dxo) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in drow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `k x k` convolution; `weight` is `cout x cin x k x k`, `bias` is `cout`.
pub fn conv_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let cin = x.c;
    let kk = cin * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight shape");
    assert_eq!(bias.len(), cout, "conv bias shape");
    let hw = x.plane();
    let mut y = Tensor::zeros(x.n, cout, x.h, x.w);
    for i in 0..x.n {
        let out = y.sample_mut(i);
        for (co, b) in bias.iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(*b);
        }
        if k == 1 {
            gemm(false, false, cout, hw, kk, weight, x.sample(i), T::one(), out);
        } else {
            T::with_scratch(0, kk * hw, |cols| {
                im2col(x.sample(i), cin, x.h, x.w, k, cols);
                gemm(false, false, cout, hw, kk, weight, cols, T::one(), out);
            });
        }
    }
    y
}

/// Accumulates weight and bias gradients into `dweight`/`dbias` and, when
/// `want_dx`, returns the gradient with respect to the input.
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    k: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Tensor<T>> {
    let cin = x.c;
    let cout = dy.c;
    let kk = cin * k * k;
    let hw = x.plane();
    let mut dx = want_dx.then(|| Tensor::zeros_like(x));
    for i in 0..x.n {
        let g = dy.sample(i);
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += g[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        if k == 1 {
            gemm(false, true, cout, kk, hw, g, x.sample(i), T::one(), dweight);
            if let Some(dx) = dx.as_mut() {
                gemm(true, false, kk, hw, cout, weight, g, T::one(), dx.sample_mut(i));
            }
            continue;
        }
        T::with_scratch(0, kk * hw, |cols| {
            im2col(x.sample(i), cin, x.h, x.w, k, cols);
            gemm(false, true, cout, kk, hw, g, cols, T::one(), dweight);
        });
        if let Some(dx) = dx.as_mut() {
            T::with_scratch(1, kk * hw, |dcols| {
                gemm(true, false, kk, hw, cout, weight, g, T::zero(), dcols);
                col2im(dcols, cin, x.h, x.w, k, dx.sample_mut(i));
            });
        }
    }
    dx
}

pub fn leaky_relu_inplace<T: Real>(t: &mut Tensor<T>) {
    let slope = T::of(LEAKY_SLOPE);
    t.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v *= slope;
        }
    });
}

/// Multiplies `dy` by the activation derivative, read off the activation output.
pub fn leaky_relu_backward_inplace<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    let slope = T::of(LEAKY_SLOPE);
    dy.data.iter_mut().zip(&y.data).for_each(|(d, v)| {
        if *v < T::zero() {
            *d *= slope;
        }
    });
}

pub fn sigmoid_inplace<T: Real>(t: &mut Tensor<T>) {
    t.data.iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
}

pub fn sigmoid_backward_inplace<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    dy.data.iter_mut().zip(&y.data).for_each(|(d, v)| *d *= *v * (T::one() - *v));
}

/// 2x2 max pooling with stride 2; ties resolve to the first element in
/// row-major order.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for (src, dst) in x.data.chunks_exact(x.plane()).zip(y.data.chunks_exact_mut(oh * ow)) {
        for oy in 0..oh {
            let r0 = &src[2 * oy * x.w..];
            let r1 = &src[(2 * oy + 1) * x.w..];
            for ox in 0..ow {
                let m = r0[2 * ox].max(r0[2 * ox + 1]).max(r1[2 * ox]).max(r1[2 * ox + 1]);
                dst[oy * ow + ox] = m;
            }
        }
    }
    y
}

pub fn maxpool2_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros_like(x);
    let (oh, ow) = (dy.h, dy.w);
    let w = x.w;
    for ((src, g), dst) in x
        .data
        .chunks_exact(x.plane())
        .zip(dy.data.chunks_exact(oh * ow))
        .zip(dx.data.chunks_exact_mut(x.plane()))
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = [
                    2 * oy * w + 2 * ox,
                    2 * oy * w + 2 * ox + 1,
                    (2 * oy + 1) * w + 2 * ox,
                    (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = idx[0];
                for &j in &idx[1..] {
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                dst[best] += g[oy * ow + ox];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for (src, dst) in x.data.chunks_exact(x.plane()).zip(y.data.chunks_exact_mut(oh * ow)) {
        for oy in 0..oh {
            let srow = &src[(oy / 2) * x.w..(oy / 2 + 1) * x.w];
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks_exact(dy.plane()).zip(dx.data.chunks_exact_mut(h * w)) {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                dst[(oy / 2) * w + ox / 2] += src[oy * dy.w + ox];
            }
        }
    }
    dx
}

/// Channel-wise concatenation `[a, b]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial shape");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

/// Splits a gradient of a concatenation back into its two parts.
pub fn split_channels<T: Real>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let cb = d.c - ca;
    let (la, lb) = (ca * d.plane(), cb * d.plane());
    let mut da = Vec::with_capacity(d.n * la);
    let mut db = Vec::with_capacity(d.n * lb);
    for i in 0..d.n {
        let s = d.sample(i);
        da.extend_from_slice(&s[..la]);
        db.extend_from_slice(&s[la..]);
    }
    (Tensor::from_vec(d.n, ca, d.h, d.w, da), Tensor::from_vec(d.n, cb, d.h, d.w, db))
}

/// Per-channel spatial mean; returns an `n x c` row-major matrix.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let inv = T::of(1.0 / x.plane() as f64);
    x.data.chunks_exact(x.plane()).map(|p| p.iter().copied().sum::<T>() * inv).collect()
}

pub fn global_avg_pool_backward<T: Real>(d: &[T], n: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let inv = T::of(1.0 / (h * w) as f64);
    let mut data = Vec::with_capacity(n * c * h * w);
    for g in d {
        data.extend(std::iter::repeat_n(*g * inv, h * w));
    }
    Tensor::from_vec(n, c, h, w, data)
}

/// Tiles an `n x c` matrix across an `h x w` grid.
pub fn broadcast_spatial<T: Real>(v: &[T], n: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    assert_eq!(v.len(), n * c, "broadcast source shape");
    let mut data = Vec::with_capacity(n * c * h * w);
    for g in v {
        data.extend(std::iter::repeat_n(*g, h * w));
    }
    Tensor::from_vec(n, c, h, w, data)
}

pub fn broadcast_spatial_backward<T: Real>(d: &Tensor<T>) -> Vec<T> {
    d.data.chunks_exact(d.plane()).map(|p| p.iter().copied().sum::<T>()).collect()
}

/// Fully connected layer over rows of an `n x din` matrix; `weight` is `dout x din`.
pub fn linear_forward<T: Real>(x: &[T], n: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let dout = bias.len();
    let din = weight.len() / dout;
    let mut y: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
    gemm(false, true, n, dout, din, x, weight, T::one(), &mut y);
    y
}

pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let dout = dbias.len();
    let din = weight.len() / dout;
    for row in dy.chunks_exact(dout) {
        dbias.iter_mut().zip(row).for_each(|(b, g)| *b += *g);
    }
    gemm(true, false, dout, din, n, dy, x, T::one(), dweight);
    let mut dx = vec![T::zero(); n * din];
    gemm(false, false, n, din, dout, dy, weight, T::zero(), &mut dx);
    dx
}

/// Mirror index for reflect padding of arbitrary width (repeats the
/// reflection when the padding exceeds the side).
#[inline]
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges up to `(h, w)`.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    assert!(h >= x.h && w >= x.w, "padding cannot shrink");
    if (h, w) == (x.h, x.w) {
        return x.clone();
    }
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    for (src, dst) in x.data.chunks_exact(x.plane()).zip(y.data.chunks_exact_mut(h * w)) {
        for yy in 0..h {
            let sy = reflect_index(yy, x.h);
            for xx in 0..w {
                dst[yy * w + xx] = src[sy * x.w + reflect_index(xx, x.w)];
            }
        }
    }
    y
}

/// Adjoint of [`reflect_pad`] back to `(h, w)`.
pub fn reflect_pad_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    if (h, w) == (dy.h, dy.w) {
        return dy.clone();
    }
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks_exact(dy.plane()).zip(dx.data.chunks_exact_mut(h * w)) {
        for yy in 0..dy.h {
            let sy = reflect_index(yy, h);
            for xx in 0..dy.w {
                dst[sy * w + reflect_index(xx, w)] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Keeps the top-left `(h, w)` window.
pub fn crop_top_left<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    assert!(h <= x.h && w <= x.w, "crop larger than tensor");
    if (h, w) == (x.h, x.w) {
        return x.clone();
    }
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    for (src, dst) in x.data.chunks_exact(x.plane()).zip(y.data.chunks_exact_mut(h * w)) {
        for yy in 0..h {
            dst[yy * w..(yy + 1) * w].copy_from_slice(&src[yy * x.w..yy * x.w + w]);
        }
    }
    y
}

/// Adjoint of [`crop_top_left`]: zero-extends to `(h, w)`.
pub fn crop_top_left_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    if (h, w) == (dy.h, dy.w) {
        return dy.clone();
    }
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks_exact(dy.plane()).zip(dx.data.chunks_exact_mut(h * w)) {
        for yy in 0..dy.h {
            dst[yy * w..yy * w + dy.w].copy_from_slice(&src[yy * dy.w..(yy + 1) * dy.w]);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    fn rand_vec(len: usize, seed: u64) -> Vec<f64> {
        rand_tensor(1, 1, 1, len, seed).data
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct convolution used as the reference for the GEMM path.
    fn conv_naive(x: &Tensor<f64>, wt: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros(x.n, cout, x.h, x.w);
        for n in 0..x.n {
            for co in 0..cout {
                for yy in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = b[co];
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let xi = ((n * x.c + ci) * x.h + sy as usize) * x.w + sx as usize;
                                    acc += wt[((co * x.c + ci) * k + ky) * k + kx] * x.data[xi];
                                }
                            }
                        }
                        y.data[((n * cout + co) * x.h + yy) * x.w + xx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        for (k, h, w) in [(3, 5, 7), (3, 1, 1), (3, 2, 3), (1, 4, 4)] {
            let x = rand_tensor(2, 3, h, w, 1);
            let wt = rand_vec(4 * 3 * k * k, 2);
            let b = rand_vec(4, 3);
            let y = conv_forward(&x, &wt, &b, 4, k);
            let r = conv_naive(&x, &wt, &b, 4, k);
            for (a, e) in y.data.iter().zip(&r.data) {
                assert!((a - e).abs() < 1e-12, "k={k} {h}x{w}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        for k in [1, 3] {
            let x = rand_tensor(2, 3, 6, 5, 4);
            let wt = rand_vec(4 * 3 * k * k, 5);
            let b = vec![0.0; 4];
            let dy = rand_tensor(2, 4, 6, 5, 6);
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; 4];
            let dx = conv_backward(&x, &wt, &dy, k, &mut dw, &mut db, true).unwrap();
            // <dy, conv(x)> is bilinear in (x, w): both gradients follow from it.
            let y = conv_forward(&x, &wt, &b, 4, k);
            let lhs = dot(&dy.data, &y.data);
            assert!((dot(&dx.data, &x.data) - lhs).abs() < 1e-9);
            assert!((dot(&dw, &wt) - lhs).abs() < 1e-9);
            let total: f64 = dy.data.iter().sum();
            assert!((db.iter().sum::<f64>() - total).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_upsample_broadcast_adjoints() {
        let x = rand_tensor(2, 3, 4, 6, 7);
        let y = maxpool2_forward(&x);
        assert_eq!(y.shape(), [2, 3, 2, 3]);
        let dy = rand_tensor(2, 3, 2, 3, 8);
        let dx = maxpool2_backward(&x, &dy);
        assert!((dot(&dx.data, &x.data) - dot(&dy.data, &y.data)).abs() < 1e-12);

        let u = upsample2_forward(&y);
        assert_eq!(u.shape(), [2, 3, 4, 6]);
        let du = rand_tensor(2, 3, 4, 6, 9);
        let back = upsample2_backward(&du);
        assert!((dot(&back.data, &y.data) - dot(&du.data, &u.data)).abs() < 1e-12);

        let v = rand_vec(6, 10);
        let b = broadcast_spatial(&v, 2, 3, 4, 5);
        let db = rand_tensor(2, 3, 4, 5, 11);
        assert!((dot(&broadcast_spatial_backward(&db), &v) - dot(&db.data, &b.data)).abs() < 1e-12);

        let g = global_avg_pool(&x);
        let dg = rand_vec(6, 12);
        let gb = global_avg_pool_backward(&dg, 2, 3, 4, 6);
        assert!((dot(&gb.data, &x.data) - dot(&dg, &g)).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_is_adjoint() {
        let x = rand_vec(2 * 5, 13);
        let wt = rand_vec(3 * 5, 14);
        let bias = vec![0.0; 3];
        let y = linear_forward(&x, 2, &wt, &bias);
        let dy = rand_vec(6, 15);
        let mut dw = vec![0.0; 15];
        let mut db = vec![0.0; 3];
        let dx = linear_backward(&x, 2, &wt, &dy, &mut dw, &mut db);
        let lhs = dot(&dy, &y);
        assert!((dot(&dx, &x) - lhs).abs() < 1e-12);
        assert!((dot(&dw, &wt) - lhs).abs() < 1e-12);
    }

    #[test]
    fn pad_and_crop_adjoints() {
        for (h, w, ph, pw) in [(5, 3, 8, 16), (1, 2, 4, 4), (4, 4, 4, 4)] {
            let x = rand_tensor(1, 2, h, w, 16);
            let p = reflect_pad(&x, ph, pw);
            assert_eq!(p.shape(), [1, 2, ph, pw]);
            assert_eq!(crop_top_left(&p, h, w), x);
            let dp = rand_tensor(1, 2, ph, pw, 17);
            let back = reflect_pad_backward(&dp, h, w);
            assert!((dot(&back.data, &x.data) - dot(&dp.data, &p.data)).abs() < 1e-12);
            let dc = rand_tensor(1, 2, h, w, 18);
            let ext = crop_top_left_backward(&dc, ph, pw);
            assert!((dot(&ext.data, &p.data) - dot(&dc.data, &crop_top_left(&p, h, w).data)).abs() < 1e-12);
        }
        let x = Tensor::from_vec(1, 1, 1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(reflect_pad(&x, 1, 7).data, vec![1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = rand_tensor(2, 2, 3, 3, 19);
        let b = rand_tensor(2, 3, 3, 3, 20);
        let c = concat_channels(&a, &b);
        assert_eq!(c.c, 5);
        let (da, db) = split_channels(&c, 2);
        assert_eq!((da, db), (a, b));
    }

    #[test]
    fn activations() {
        let mut t = Tensor::from_vec(1, 1, 1, 3, vec![-2.0, 0.0, 3.0]);
        leaky_relu_inplace(&mut t);
        assert_eq!(t.data, vec![-0.2, 0.0, 3.0]);
        let mut d = Tensor::from_vec(1, 1, 1, 3, vec![1.0, 1.0, 1.0]);
        leaky_relu_backward_inplace(&t, &mut d);
        assert_eq!(d.data, vec![0.1, 1.0, 1.0]);

        let mut s = Tensor::from_vec(1, 1, 1, 2, vec![0.0, 50.0]);
        sigmoid_inplace(&mut s);
        assert_eq!(s.data[0], 0.5);
        assert!(s.data[1] <= 1.0);
    }
}
