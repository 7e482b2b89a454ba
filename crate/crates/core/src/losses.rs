//! Training objectives: L1 reconstruction, content and luminance feature
//! losses on latent spans, and HSV hue/saturation consistency.
//!
//! Every `*_with_grad` function returns the loss together with its gradient
//! with respect to each differentiable input. Image gradients use the
//! interleaved layout of [`ImageRGB::as_slice`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{cosine_similarity_with_grad, hsv_pixel_with_grad, ImageRGB};
use crate::model::{encode_padded, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the feature loss in the total.
    pub lambda_f: f64,
    /// Margin of the luminance triplet loss.
    pub alpha_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_f: 2.0, alpha_margin: 0.08 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f > 0.0 && self.lambda_f.is_finite()) {
            return Err(Error::Config(format!("lambda_f must be positive, got {}", self.lambda_f)));
        }
        if !(self.alpha_margin >= 0.0 && self.alpha_margin.is_finite()) {
            return Err(Error::Config(format!("alpha_margin must be >= 0, got {}", self.alpha_margin)));
        }
        Ok(())
    }
}

/// Individual loss terms before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_r: f64,
    pub l_f_c: f64,
    pub l_f_l: f64,
    pub l_c_h: f64,
    pub l_c_s: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_f_c: f64,
    pub l_f_l: f64,
    pub l_c_h: f64,
    pub l_c_s: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(parts: LossParts, cfg: &LossConfig) -> Result<Self> {
        let total = total_loss(&parts, cfg)?;
        let LossParts { l_r, l_f_c, l_f_l, l_c_h, l_c_s } = parts;
        Ok(Self { l_r, l_f_c, l_f_l, l_c_h, l_c_s, total })
    }

    pub fn parts(&self) -> LossParts {
        LossParts { l_r: self.l_r, l_f_c: self.l_f_c, l_f_l: self.l_f_l, l_c_h: self.l_c_h, l_c_s: self.l_c_s }
    }
}

fn check_vec_lengths(what: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{what}: lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn reconstruction_loss(pred: &ImageRGB, reference: &ImageRGB) -> Result<f64> {
    Ok(reconstruction_loss_with_grad(pred, reference)?.0)
}

pub fn reconstruction_loss_with_grad(pred: &ImageRGB, reference: &ImageRGB) -> Result<(f64, Vec<f64>)> {
    pred.same_dims(reference)?;
    let n = pred.as_slice().len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(p, r)| {
            let d = p - r;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Euclidean distance between content spans.
pub fn content_feature_loss(c_p: &[f64], c_i: &[f64]) -> Result<f64> {
    Ok(content_feature_loss_with_grad(c_p, c_i)?.0)
}

/// Returns `(loss, d/dc_p, d/dc_i)`; the gradient at zero distance is zero.
pub fn content_feature_loss_with_grad(c_p: &[f64], c_i: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_vec_lengths("content feature loss", c_p, c_i)?;
    let dist = c_p.iter().zip(c_i).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if dist == 0.0 {
        return Ok((0.0, vec![0.0; c_p.len()], vec![0.0; c_i.len()]));
    }
    let d_p: Vec<f64> = c_p.iter().zip(c_i).map(|(a, b)| (a - b) / dist).collect();
    let d_i = d_p.iter().map(|g| -g).collect();
    Ok((dist, d_p, d_i))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Triplet hinge `max(0, D(l_p, l_r) - D(l_p, l_i) + alpha)` with `D` the
/// squared Euclidean distance.
pub fn luminance_feature_loss(l_p: &[f64], l_r: &[f64], l_i: &[f64], alpha: f64) -> Result<f64> {
    Ok(luminance_feature_loss_with_grad(l_p, l_r, l_i, alpha)?.0)
}

/// Returns `(loss, d/dl_p, d/dl_r, d/dl_i)`. The hinge has zero subgradient
/// when inactive or exactly at the kink.
pub fn luminance_feature_loss_with_grad(
    l_p: &[f64],
    l_r: &[f64],
    l_i: &[f64],
    alpha: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_vec_lengths("luminance feature loss", l_p, l_r)?;
    check_vec_lengths("luminance feature loss", l_p, l_i)?;
    if !(alpha >= 0.0) {
        return Err(Error::Argument(format!("margin must be >= 0, got {alpha}")));
    }
    let inner = squared_distance(l_p, l_r) - squared_distance(l_p, l_i) + alpha;
    let n = l_p.len();
    if inner <= 0.0 {
        return Ok((0.0, vec![0.0; n], vec![0.0; n], vec![0.0; n]));
    }
    let mut d_p = Vec::with_capacity(n);
    let mut d_r = Vec::with_capacity(n);
    let mut d_i = Vec::with_capacity(n);
    for k in 0..n {
        let (p, r, i) = (l_p[k], l_r[k], l_i[k]);
        d_p.push(2.0 * (p - r) - 2.0 * (p - i));
        d_r.push(-2.0 * (p - r));
        d_i.push(2.0 * (p - i));
    }
    Ok((inner, d_p, d_r, d_i))
}

pub fn feature_loss(c_p: &[f64], c_i: &[f64], l_p: &[f64], l_r: &[f64], l_i: &[f64], alpha: f64) -> Result<f64> {
    Ok(content_feature_loss(c_p, c_i)? + luminance_feature_loss(l_p, l_r, l_i, alpha)?)
}

/// `(1 - cos(H_pred, H_low), 1 - cos(S_pred, S_low))` over whole-image
/// flattened hue and saturation channels.
pub fn content_consistency_loss(pred: &ImageRGB, low: &ImageRGB) -> Result<(f64, f64)> {
    let (h, s, _) = content_consistency_loss_with_grad(pred, low)?;
    Ok((h, s))
}

/// Returns `(l_c_h, l_c_s, d(l_c_h + l_c_s)/d pred)`.
pub fn content_consistency_loss_with_grad(pred: &ImageRGB, low: &ImageRGB) -> Result<(f64, f64, Vec<f64>)> {
    pred.same_dims(low)?;
    let n = pred.num_pixels();
    let mut hp = Vec::with_capacity(n);
    let mut sp = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n);
    for px in pred.pixels() {
        let (h, s, _, dh, ds) = hsv_pixel_with_grad(px);
        hp.push(h);
        sp.push(s);
        jac.push((dh, ds));
    }
    let mut hl = Vec::with_capacity(n);
    let mut sl = Vec::with_capacity(n);
    for px in low.pixels() {
        let (h, s, _, _, _) = hsv_pixel_with_grad(px);
        hl.push(h);
        sl.push(s);
    }
    let (cos_h, d_hp, _) = cosine_similarity_with_grad(&hp, &hl)?;
    let (cos_s, d_sp, _) = cosine_similarity_with_grad(&sp, &sl)?;
    let mut grad = Vec::with_capacity(n * 3);
    for (j, (dh, ds)) in jac.iter().enumerate() {
        for c in 0..3 {
            grad.push(-d_hp[j] * dh[c] - d_sp[j] * ds[c]);
        }
    }
    Ok((1.0 - cos_h, 1.0 - cos_s, grad))
}

/// `L_r + lambda (L_f_c + L_f_l) + L_c_H + L_c_S`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64> {
    for (name, v) in [
        ("l_r", parts.l_r),
        ("l_f_c", parts.l_f_c),
        ("l_f_l", parts.l_f_l),
        ("l_c_h", parts.l_c_h),
        ("l_c_s", parts.l_c_s),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} = {v}")));
        }
    }
    Ok(parts.l_r + cfg.lambda_f * (parts.l_f_c + parts.l_f_l) + parts.l_c_h + parts.l_c_s)
}

/// Everything the objective of one sample depends on.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub pred: &'a ImageRGB,
    pub reference: &'a ImageRGB,
    pub low: &'a ImageRGB,
    pub c_p: &'a [f64],
    pub c_i: &'a [f64],
    pub l_p: &'a [f64],
    pub l_r: &'a [f64],
    pub l_i: &'a [f64],
}

/// Gradients of the total loss with respect to each differentiable input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub pred: Vec<f64>,
    pub c_p: Vec<f64>,
    pub c_i: Vec<f64>,
    pub l_p: Vec<f64>,
    pub l_r: Vec<f64>,
    pub l_i: Vec<f64>,
}

/// Evaluates every term for one sample and the gradient of the total.
pub fn total_loss_with_grad(x: &LossInputs<'_>, cfg: &LossConfig) -> Result<(LossReport, LossGrads)> {
    let (l_r, g_rec) = reconstruction_loss_with_grad(x.pred, x.reference)?;
    let (l_f_c, g_cp, g_ci) = content_feature_loss_with_grad(x.c_p, x.c_i)?;
    let (l_f_l, g_lp, g_lr, g_li) = luminance_feature_loss_with_grad(x.l_p, x.l_r, x.l_i, cfg.alpha_margin)?;
    let (l_c_h, l_c_s, g_con) = content_consistency_loss_with_grad(x.pred, x.low)?;
    let report = LossReport::new(LossParts { l_r, l_f_c, l_f_l, l_c_h, l_c_s }, cfg)?;
    let lam = cfg.lambda_f;
    let scale = |v: Vec<f64>| v.into_iter().map(|g| lam * g).collect::<Vec<_>>();
    let grads = LossGrads {
        pred: g_rec.iter().zip(&g_con).map(|(a, b)| a + b).collect(),
        c_p: scale(g_cp),
        c_i: scale(g_ci),
        l_p: scale(g_lp),
        l_r: scale(g_lr),
        l_i: scale(g_li),
    };
    Ok((report, grads))
}

/// Mean squared latent distance between the luminance spans of each
/// `(low, reference)` pair.
pub fn calibrate_margin(pairs: &[(ImageRGB, ImageRGB)], params: &ModelParams) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("margin calibration needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (low, reference) in pairs {
        let a = encode_padded(low, params)?;
        let b = encode_padded(reference, params)?;
        let la: Vec<f64> = a.latent.luminance().iter().map(|v| f64::from(*v)).collect();
        let lb: Vec<f64> = b.latent.luminance().iter().map(|v| f64::from(*v)).collect();
        total += squared_distance(&la, &lb);
    }
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{hsv_to_rgb_pixel, rgb_to_hsv_pixel};
    use crate::model::{init_params, ArchSpec};
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> ImageRGB {
        ImageRGB::from_fn(h, w, f)
    }

    #[test]
    fn reconstruction_cases() {
        let a = img(4, 4, |y, x| [0.1 * y as f64, 0.1 * x as f64, 0.2]);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let b = img(4, 4, |y, x| [0.1 * y as f64 + 0.1, 0.1 * x as f64 + 0.1, 0.3]);
        assert!((reconstruction_loss(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        let zero = ImageRGB::filled(3, 3, [0.0; 3]);
        let one = ImageRGB::filled(3, 3, [1.0; 3]);
        assert_eq!(reconstruction_loss(&zero, &one).unwrap(), 1.0);
        assert!(matches!(reconstruction_loss(&zero, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn content_feature_cases() {
        assert_eq!(content_feature_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(content_feature_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!((content_feature_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(content_feature_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn luminance_feature_cases() {
        // l_p = l_r and D(l_p, l_i) = 0.5.
        let lp = [0.5, 0.5];
        let li = [0.5 - 0.5f64.sqrt(), 0.5];
        assert!((squared_distance(&lp, &li) - 0.5).abs() < 1e-12);
        assert_eq!(luminance_feature_loss(&lp, &lp, &li, 0.08).unwrap(), 0.0);
        assert!((luminance_feature_loss(&lp, &lp, &lp, 0.08).unwrap() - 0.08).abs() < 1e-15);
        let v = luminance_feature_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], 0.08).unwrap();
        assert!((v - 1.08).abs() < 1e-15);
        assert!(luminance_feature_loss(&[0.0], &[0.0, 1.0], &[0.0], 0.08).is_err());
    }

    #[test]
    fn feature_loss_sums_terms() {
        assert_eq!(feature_loss(&[0.0], &[0.0], &[0.0], &[0.0], &[0.0], 0.0).unwrap(), 0.0);
        let v = feature_loss(&[3.0, 4.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], 0.08).unwrap();
        assert!((v - 6.08).abs() < 1e-12);
    }

    #[test]
    fn consistency_cases() {
        let low = img(5, 6, |y, x| [0.2 + 0.1 * (x % 3) as f64, 0.1 + 0.05 * y as f64, 0.4]);
        let (lh, ls) = content_consistency_loss(&low, &low).unwrap();
        assert!(lh.abs() < 1e-12 && ls.abs() < 1e-12);

        // Scaling V alone keeps H and S.
        let brighter = img(5, 6, |y, x| {
            let [h, s, v] = rgb_to_hsv_pixel(low.pixel(y, x));
            hsv_to_rgb_pixel([h, s, (v * 1.8).min(1.0)])
        });
        let (lh, ls) = content_consistency_loss(&brighter, &low).unwrap();
        assert!(lh.abs() < 1e-12 && ls.abs() < 1e-12, "{lh} {ls}");

        // Hue vectors with disjoint support are orthogonal.
        let red = [0.9, 0.1, 0.1];
        let green = [0.1, 0.9, 0.1];
        let gray = [0.5, 0.5, 0.5];
        let a = img(1, 2, |_, x| if x == 0 { green } else { gray });
        let b = img(1, 2, |_, x| if x == 0 { red } else { green });
        // H(a) = (1/3, 0), H(b) = (0, 1/3): cosine 0.
        let (lh, _) = content_consistency_loss(&a, &b).unwrap();
        assert!((lh - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(&LossParts::default(), &cfg).unwrap(), 0.0);
        let parts = LossParts { l_r: 1.0, l_f_c: 0.5, l_f_l: 0.5, l_c_h: 0.25, l_c_s: 0.75 };
        assert_eq!(total_loss(&parts, &cfg).unwrap(), 4.0);
        let zero_lambda = LossConfig { lambda_f: 0.0, ..cfg };
        assert_eq!(total_loss(&parts, &zero_lambda).unwrap(), 2.0);
        let bad = LossParts { l_f_l: f64::NAN, ..parts };
        match total_loss(&bad, &cfg) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("l_f_l")),
            other => panic!("{other:?}"),
        }
        assert!(zero_lambda.validate().is_err());
        assert!(LossConfig { alpha_margin: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn calibration() {
        let arch = ArchSpec { depth: 1, base_channels: 2, latent_dim: 6, luminance_dim: 2 };
        let p = init_params(arch, 1).unwrap();
        let a = img(4, 4, |y, x| [0.05 * y as f64, 0.05 * x as f64, 0.1]);
        assert_eq!(calibrate_margin(&[(a.clone(), a.clone())], &p).unwrap(), 0.0);
        assert!(matches!(calibrate_margin(&[], &p), Err(Error::Argument(_))));

        let b = ImageRGB::filled(4, 4, [0.9, 0.8, 0.7]);
        let la: Vec<f64> = encode_padded(&a, &p).unwrap().latent.luminance().iter().map(|v| *v as f64).collect();
        let lb: Vec<f64> = encode_padded(&b, &p).unwrap().latent.luminance().iter().map(|v| *v as f64).collect();
        let one = calibrate_margin(&[(a.clone(), b.clone())], &p).unwrap();
        assert!((one - squared_distance(&la, &lb)).abs() < 1e-12);
        let two = calibrate_margin(&[(a.clone(), b.clone()), (a.clone(), a)], &p).unwrap();
        assert!((two - one / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn terms_are_nonnegative(
            a in proptest::collection::vec(-2.0f64..2.0, 6),
            b in proptest::collection::vec(-2.0f64..2.0, 6),
            c in proptest::collection::vec(-2.0f64..2.0, 6),
            alpha in 0.0f64..1.0,
        ) {
            prop_assert!(content_feature_loss(&a, &b).unwrap() >= 0.0);
            let l = luminance_feature_loss(&a, &b, &c, alpha).unwrap();
            prop_assert!(l >= 0.0);
            if squared_distance(&a, &b) + alpha <= squared_distance(&a, &c) {
                prop_assert_eq!(l, 0.0);
            }
            prop_assert!((luminance_feature_loss(&a, &a, &a, alpha).unwrap() - alpha).abs() < 1e-15);
        }

        #[test]
        fn consistency_in_range(
            p in proptest::collection::vec(0.0f64..=1.0, 48),
            q in proptest::collection::vec(0.0f64..=1.0, 48),
        ) {
            let a = ImageRGB::new(4, 4, p).unwrap();
            let b = ImageRGB::new(4, 4, q).unwrap();
            let (h, s) = content_consistency_loss(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&h) && (0.0..=2.0).contains(&s));
            prop_assert!(reconstruction_loss(&a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn total_is_linear_in_lambda(
            l_r in 0.0f64..1.0, l_f_c in 0.0f64..3.0, l_f_l in 0.0f64..3.0, l_c_h in 0.0f64..2.0, l_c_s in 0.0f64..2.0,
            lam in 0.1f64..5.0,
        ) {
            let parts = LossParts { l_r, l_f_c, l_f_l, l_c_h, l_c_s };
            let cfg = |lambda_f| LossConfig { lambda_f, alpha_margin: 0.08 };
            let slope = total_loss(&parts, &cfg(lam + 1.0)).unwrap() - total_loss(&parts, &cfg(lam)).unwrap();
            prop_assert!((slope - (l_f_c + l_f_l)).abs() < 1e-9);
        }
    }
}
