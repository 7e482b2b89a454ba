//! Benchmark evaluation, the HSV recombination diagnostic and multi-level
//! reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::load_model;
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::imaging::{hsv_to_rgb, mean_value, psnr, rgb_to_hsv, write_atomic, ImageHSV, ImageRGB, MetricReport};
use crate::model::{enhance, ModelParams};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Raw low image against the ground truth.
    pub low_psnr_db: f64,
    pub low_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: MetricReport,
    pub low_mean: MetricReport,
    pub rows: Vec<EvalRow>,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Scores `predict(pair)` against each pair's ground truth, in split order.
pub fn evaluate_with<F>(split: &[ImagePair], mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&ImagePair) -> Result<ImageRGB>,
{
    if split.is_empty() {
        return Err(Error::Argument("evaluation split is empty".into()));
    }
    let mut rows = Vec::with_capacity(split.len());
    for pair in split {
        let pred = predict(pair)?;
        let m = MetricReport::measure(&pred, &pair.reference)?;
        let base = MetricReport::measure(&pair.low, &pair.reference)?;
        rows.push(EvalRow {
            id: pair.id.clone(),
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            low_psnr_db: base.psnr_db,
            low_ssim: base.ssim,
        });
    }
    let report = EvalReport {
        mean: MetricReport {
            psnr_db: mean(rows.iter().map(|r| r.psnr_db)),
            ssim: mean(rows.iter().map(|r| r.ssim)),
        },
        low_mean: MetricReport {
            psnr_db: mean(rows.iter().map(|r| r.low_psnr_db)),
            ssim: mean(rows.iter().map(|r| r.low_ssim)),
        },
        rows,
    };
    Ok(report)
}

/// Enhances each low image with its ground truth as the reference.
pub fn evaluate_model(params: &ModelParams, split: &[ImagePair]) -> Result<EvalReport> {
    evaluate_with(split, |pair| enhance(&pair.low, &pair.reference, params))
}

pub fn evaluate(ckpt: impl AsRef<Path>, split: &[ImagePair]) -> Result<EvalReport> {
    let params = load_model(ckpt)?;
    evaluate_model(&params, split)
}

impl EvalReport {
    /// One row per image plus a final `mean` row. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim,low_psnr_db,low_ssim\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.id, r.psnr_db, r.ssim, r.low_psnr_db, r.low_ssim).unwrap();
        }
        writeln!(
            out,
            "mean,{},{},{},{}",
            self.mean.psnr_db, self.mean.ssim, self.low_mean.psnr_db, self.low_mean.ssim
        )
        .unwrap();
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let mut out = format!("{:<width$}  {:>9}  {:>6}  {:>9}  {:>6}\n", "id", "PSNR(dB)", "SSIM", "low PSNR", "low SSIM");
        for r in &self.rows {
            writeln!(
                out,
                "{:<width$}  {:>9.2}  {:>6.4}  {:>9.2}  {:>6.4}",
                r.id, r.psnr_db, r.ssim, r.low_psnr_db, r.low_ssim
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<width$}  {:>9.2}  {:>6.4}  {:>9.2}  {:>6.4}",
            "mean", self.mean.psnr_db, self.mean.ssim, self.low_mean.psnr_db, self.low_mean.ssim
        )
        .unwrap();
        out
    }
}

/// Published LoL test-set scores `(method, PSNR dB, SSIM)` for comparison.
/// None of these baselines is implemented here.
pub const LITERATURE_LOL: [(&str, f64, f64); 11] = [
    ("CRM", 17.20, 0.64),
    ("Dong", 16.72, 0.58),
    ("LIME", 16.76, 0.56),
    ("MF", 18.79, 0.64),
    ("Retinex-Net", 16.77, 0.56),
    ("MSR", 13.17, 0.48),
    ("NPE", 16.97, 0.59),
    ("GLAD", 19.72, 0.70),
    ("KinD", 20.87, 0.80),
    ("MIRNet", 24.14, 0.83),
    ("reference-guided (published)", 27.90, 0.86),
];

/// The literature rows followed by this report's mean.
pub fn literature_table(report: &EvalReport) -> String {
    let mut out = format!("{:<30}  {:>8}  {:>6}\n", "method", "PSNR(dB)", "SSIM");
    for (name, p, s) in LITERATURE_LOL {
        writeln!(out, "{name:<30}  {p:>8.2}  {s:>6.2}").unwrap();
    }
    writeln!(out, "{:<30}  {:>8.2}  {:>6.2}", "this run", report.mean.psnr_db, report.mean.ssim).unwrap();
    out
}

/// Replaces the value channel of `low` with that of `truth`, keeping
/// `low`'s hue and saturation.
pub fn hsv_recombine(low: &ImageRGB, truth: &ImageRGB) -> Result<ImageRGB> {
    low.same_dims(truth)?;
    let a = rgb_to_hsv(low);
    let b = rgb_to_hsv(truth);
    let mixed = ImageHSV::new(a.height(), a.width(), a.h.clone(), a.s.clone(), b.v.clone())?;
    Ok(hsv_to_rgb(&mixed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsvDiagnostic {
    pub ids: Vec<String>,
    /// Recombined image against the ground truth.
    pub recombined_psnr: Vec<f64>,
    /// Raw low image against the ground truth.
    pub low_psnr: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl HsvDiagnostic {
    pub fn recombined_median(&self) -> f64 {
        median(&self.recombined_psnr)
    }

    pub fn low_median(&self) -> f64 {
        median(&self.low_psnr)
    }
}

/// For each pair, PSNR of (H_low, S_low, V_gt) against the ground truth.
pub fn hsv_recombination_check(split: &[ImagePair]) -> Result<HsvDiagnostic> {
    if split.is_empty() {
        return Err(Error::Argument("diagnostic split is empty".into()));
    }
    let mut d = HsvDiagnostic { ids: Vec::new(), recombined_psnr: Vec::new(), low_psnr: Vec::new() };
    for pair in split {
        let mixed = hsv_recombine(&pair.low, &pair.reference)?;
        d.ids.push(pair.id.clone());
        d.recombined_psnr.push(psnr(&mixed, &pair.reference)?);
        d.low_psnr.push(psnr(&pair.low, &pair.reference)?);
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultilevelEntry {
    pub ref_id: String,
    pub output: ImageRGB,
    pub mean_v: f64,
    pub ref_mean_v: f64,
}

/// Enhances `low` once per reference.
pub fn multilevel_report(params: &ModelParams, low: &ImageRGB, refs: &[(String, ImageRGB)]) -> Result<Vec<MultilevelEntry>> {
    if refs.len() < 2 {
        return Err(Error::Argument(format!("multi-level report needs at least 2 references, got {}", refs.len())));
    }
    refs.iter()
        .map(|(id, r)| {
            let output = enhance(low, r, params)?;
            Ok(MultilevelEntry { ref_id: id.clone(), mean_v: mean_value(&output), ref_mean_v: mean_value(r), output })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{hsv_to_rgb_pixel, rgb_to_hsv_pixel};
    use crate::model::{init_params, ArchSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(h: usize, w: usize, seed: u64) -> ImageRGB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRGB::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn v_scaled(img: &ImageRGB, k: f64) -> ImageRGB {
        ImageRGB::from_fn(img.height(), img.width(), |y, x| {
            let [h, s, v] = rgb_to_hsv_pixel(img.pixel(y, x));
            hsv_to_rgb_pixel([h, s, v * k])
        })
    }

    fn split(n: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let gt = noisy(16, 16, i as u64);
                ImagePair::new(v_scaled(&gt, 0.3), gt, format!("{i}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_hits_the_cap() {
        let r = evaluate_with(&split(3), |p| Ok(p.reference.clone())).unwrap();
        assert_eq!(r.mean.psnr_db, 100.0);
        assert!((r.mean.ssim - 1.0).abs() < 1e-12);
        assert!(r.low_mean.psnr_db < 30.0);
    }

    #[test]
    fn csv_is_stable_and_means_match() {
        let arch = ArchSpec { depth: 2, base_channels: 2, latent_dim: 6, luminance_dim: 2 };
        let p = init_params(arch, 0).unwrap();
        let s = split(4);
        let a = evaluate_model(&p, &s).unwrap();
        let b = evaluate_model(&p, &s).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());

        let csv = a.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        let col = |line: &str, k: usize| -> f64 { line.split(',').nth(k).unwrap().parse().unwrap() };
        let per: Vec<f64> = lines[1..5].iter().map(|l| col(l, 1)).collect();
        let m = col(lines[5], 1);
        assert!((per.iter().sum::<f64>() / 4.0 - m).abs() <= 1e-9);
        assert!(a.to_table().contains("mean"));
        assert!(matches!(evaluate_model(&p, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn recombination_cases() {
        let gt = noisy(12, 12, 3);
        let same = ImagePair::new(gt.clone(), gt.clone(), "same").unwrap();
        let d = hsv_recombination_check(&[same]).unwrap();
        assert_eq!(d.recombined_psnr, vec![100.0]);

        let gray_gt = ImageRGB::from_fn(12, 12, |y, x| [(y * 12 + x) as f64 / 144.0; 3]);
        let gray_low = ImageRGB::from_fn(12, 12, |y, x| [(y * 12 + x) as f64 / 1440.0; 3]);
        let d = hsv_recombination_check(&[ImagePair::new(gray_low, gray_gt, "g").unwrap()]).unwrap();
        assert_eq!(d.recombined_psnr, vec![100.0]);

        // V-scaled pairs recombine to at least the raw-low PSNR.
        let d = hsv_recombination_check(&split(5)).unwrap();
        for (r, l) in d.recombined_psnr.iter().zip(&d.low_psnr) {
            assert!(*r >= l - 1e-6);
        }
        assert!(d.recombined_median() > d.low_median());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn multilevel_contract() {
        let arch = ArchSpec { depth: 2, base_channels: 2, latent_dim: 6, luminance_dim: 2 };
        let p = init_params(arch, 1).unwrap();
        let low = noisy(12, 10, 1);
        let r = noisy(8, 8, 2);
        assert!(matches!(multilevel_report(&p, &low, &[("a".into(), r.clone())]), Err(Error::Argument(_))));
        let out = multilevel_report(&p, &low, &[("a".into(), r.clone()), ("b".into(), r)]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].output, out[1].output);
        assert_eq!(out[0].output.dims(), (12, 10));
    }
    #[test]
    fn literature_table_lists_published_rows_and_this_run() {
        let m = MetricReport { psnr_db: 21.5, ssim: 0.7 };
        let report = EvalReport { mean: m, low_mean: m, rows: vec![] };
        let t = literature_table(&report);
        assert_eq!(t.lines().count(), LITERATURE_LOL.len() + 2);
        assert!(t.contains("27.90") && t.contains("0.86"));
        assert!(t.lines().last().unwrap().starts_with("this run") && t.contains("21.50"));
    }

}
