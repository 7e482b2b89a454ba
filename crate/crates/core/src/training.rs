//! Optimization loop: two encoder passes over the inputs, decoding with the
//! low image's content and the reference's luminance, a third encoder pass
//! over the prediction, and an Adam update on the combined objective.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{augment, batches_per_epoch, load_lol_with_split, make_epoch_batches, AugmentConfig, ImagePair, LOL_TRAIN_COUNT};
use crate::error::{Error, Result};
use crate::imaging::ImageRGB;
use crate::losses::{total_loss_with_grad, LossConfig, LossInputs, LossParts, LossReport};
use crate::model::network::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, expand_backward, expand_forward,
    images_to_tensor, tensor_to_images,
};
use crate::model::{init_params, ArchSpec, ModelParams, Params};
use crate::nn::{ops, Real, Tensor};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub lambda_f: f64,
    pub alpha_margin: f64,
    pub seed: u64,
    /// Square random crop applied to each pair before batching.
    pub crop: Option<usize>,
    /// Write a checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub log_path: PathBuf,
    pub data_root: PathBuf,
    /// Directory receiving checkpoints.
    pub out_dir: PathBuf,
    pub arch: ArchSpec,
    pub augment: AugmentConfig,
    /// Number of leading pairs (in file order) used for training.
    pub train_count: usize,
    /// Stop after this many total steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 1000,
            lambda_f: 2.0,
            alpha_margin: 0.08,
            seed: 0,
            crop: None,
            checkpoint_every: 1000,
            log_path: PathBuf::from("train_log.jsonl"),
            data_root: PathBuf::from("data/LOL"),
            out_dir: PathBuf::from("checkpoints"),
            arch: ArchSpec::default(),
            augment: AugmentConfig::default(),
            train_count: LOL_TRAIN_COUNT,
            max_steps: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.patch_swap_prob) {
            return Err(Error::Config("patch_swap_prob must lie in [0, 1]".into()));
        }
        self.loss_config().validate()?;
        self.arch.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda_f: self.lambda_f, alpha_margin: self.alpha_margin }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Adam<f32>,
    pub step: u64,
    pub epoch: u64,
    /// Drives augmentation draws.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(arch: ArchSpec, seed: u64, adam: AdamConfig) -> Result<Self> {
        let params = init_params(arch, seed)?;
        let optimizer = Adam::new(adam, &params.weights);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(Self { params, optimizer, step: 0, epoch: 0, rng })
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Loss and parameter gradient for one batch, averaged over the batch.
///
/// `lows[i]` and `refs[i]` must share one size within the batch. Inputs are
/// reflect-padded to the network alignment; the prediction is cropped back
/// before the losses and padded again for the encoder pass over it.
pub fn forward_backward<T: Real>(
    p: &Params<T>,
    lows: &[&ImageRGB],
    refs: &[&ImageRGB],
    cfg: &LossConfig,
) -> Result<(LossReport, Params<T>)> {
    if lows.is_empty() || lows.len() != refs.len() {
        return Err(Error::Argument(format!("batch has {} low and {} reference images", lows.len(), refs.len())));
    }
    let arch = p.arch();
    let n = lows.len();
    let (h, w) = lows[0].dims();
    let (ph, pw) = (arch.padded_side(h), arch.padded_side(w));
    let cd = arch.content_dim();
    let dim = arch.latent_dim;

    let pad = |t: Tensor<T>| {
        let (th, tw) = (arch.padded_side(t.h), arch.padded_side(t.w));
        ops::reflect_pad(&t, th, tw)
    };
    let enc_low = encoder_forward(p, pad(images_to_tensor(lows)?))?;
    let enc_ref = encoder_forward(p, pad(images_to_tensor(refs)?))?;

    let mut f = Vec::with_capacity(n * dim);
    for i in 0..n {
        f.extend_from_slice(&enc_low.latent_row(i)[..cd]);
        f.extend_from_slice(&enc_ref.latent_row(i)[cd..]);
    }
    let (bh, bw, _) = enc_low.bottleneck_shape();
    let map = expand_forward(p, &f, n, bh, bw);
    let dec = decoder_forward(p, map, &enc_low.skips())?;
    let pred = ops::crop_top_left(&dec.out, h, w);
    let enc_pred = encoder_forward(p, ops::reflect_pad(&pred, ph, pw))?;
    let preds = tensor_to_images(&pred);

    let inv_n = 1.0 / n as f64;
    let mut sum = LossParts::default();
    let mut d_pred = Tensor::<T>::zeros(n, 3, h, w);
    let mut d_lat_pred = vec![T::zero(); n * dim];
    let mut d_lat_low = vec![T::zero(); n * dim];
    let mut d_lat_ref = vec![T::zero(); n * dim];
    let plane = h * w;
    for i in 0..n {
        let (li, lr, lp) = (enc_low.latent_row(i), enc_ref.latent_row(i), enc_pred.latent_row(i));
        let (c_i, l_i) = (to_f64(&li[..cd]), to_f64(&li[cd..]));
        let l_r = to_f64(&lr[cd..]);
        let (c_p, l_p) = (to_f64(&lp[..cd]), to_f64(&lp[cd..]));
        let inputs = LossInputs {
            pred: &preds[i],
            reference: refs[i],
            low: lows[i],
            c_p: &c_p,
            c_i: &c_i,
            l_p: &l_p,
            l_r: &l_r,
            l_i: &l_i,
        };
        let (report, g) = total_loss_with_grad(&inputs, cfg)?;
        sum.l_r += report.l_r;
        sum.l_f_c += report.l_f_c;
        sum.l_f_l += report.l_f_l;
        sum.l_c_h += report.l_c_h;
        sum.l_c_s += report.l_c_s;

        let dst = d_pred.sample_mut(i);
        for (j, px) in g.pred.chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + j] = T::of(px[c] * inv_n);
            }
        }
        let row = i * dim;
        for k in 0..cd {
            d_lat_pred[row + k] = T::of(g.c_p[k] * inv_n);
            d_lat_low[row + k] = T::of(g.c_i[k] * inv_n);
        }
        for k in 0..dim - cd {
            d_lat_pred[row + cd + k] = T::of(g.l_p[k] * inv_n);
            d_lat_low[row + cd + k] = T::of(g.l_i[k] * inv_n);
            d_lat_ref[row + cd + k] = T::of(g.l_r[k] * inv_n);
        }
    }
    let avg = LossParts {
        l_r: sum.l_r * inv_n,
        l_f_c: sum.l_f_c * inv_n,
        l_f_l: sum.l_f_l * inv_n,
        l_c_h: sum.l_c_h * inv_n,
        l_c_s: sum.l_c_s * inv_n,
    };
    let report = LossReport::new(avg, cfg)?;

    let mut grads = Params::zeros_like(p);
    let d_pred_padded = encoder_backward(p, &enc_pred, &d_lat_pred, None, &mut grads, true)
        .expect("input gradient requested");
    d_pred.add_assign(&ops::reflect_pad_backward(&d_pred_padded, h, w));
    let d_out = ops::crop_top_left_backward(&d_pred, dec.out.h, dec.out.w);
    let (d_map, d_skips) = decoder_backward(p, &dec, &d_out, &mut grads);
    let d_f = expand_backward(p, &f, &d_map, &mut grads);
    for i in 0..n {
        let row = i * dim;
        for k in 0..cd {
            d_lat_low[row + k] += d_f[row + k];
        }
        for k in cd..dim {
            d_lat_ref[row + k] += d_f[row + k];
        }
    }
    encoder_backward(p, &enc_low, &d_lat_low, Some(&d_skips), &mut grads, false);
    encoder_backward(p, &enc_ref, &d_lat_ref, None, &mut grads, false);
    Ok((report, grads))
}

/// One Adam step on `batch`. Fails without touching the state when the
/// loss or the gradient is not finite.
pub fn train_step(state: &mut TrainState, batch: &[ImagePair], cfg: &LossConfig) -> Result<LossReport> {
    let lows: Vec<&ImageRGB> = batch.iter().map(|p| &p.low).collect();
    let refs: Vec<&ImageRGB> = batch.iter().map(|p| &p.reference).collect();
    let (report, grads) = forward_backward(&state.params.weights, &lows, &refs, cfg)?;
    if !grads.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step + 1)));
    }
    state.optimizer.step(&mut state.params.weights, &grads)?;
    state.step += 1;
    state.params.step = state.step;
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_r: f64,
    pub l_f_c: f64,
    pub l_f_l: f64,
    pub l_c_h: f64,
    pub l_c_s: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(step: u64, r: &LossReport) -> Self {
        Self { step, l_r: r.l_r, l_f_c: r.l_f_c, l_f_l: r.l_f_l, l_c_h: r.l_c_h, l_c_s: r.l_c_s, total: r.total }
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line)
                .map_err(|e| Error::Format { field: format!("line {}", i + 1), message: e.to_string() })
        })
        .collect()
}

/// Opens the log for a run starting after `step`: earlier lines are kept
/// verbatim, anything later (from an interrupted run) is dropped.
fn open_log(path: &Path, step: u64) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if step > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let r: LogRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format { field: format!("line {}", i + 1), message: e.to_string() })?;
            if r.step <= step {
                kept.push(line.to_string());
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in kept {
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

fn write_record(out: &mut BufWriter<File>, path: &Path, r: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(r).expect("plain numeric record");
    writeln!(out, "{line}").and_then(|()| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step:08}.ckpt"))
}

/// Total number of steps a configuration runs for `num_pairs` pairs.
pub fn planned_steps(cfg: &TrainConfig, num_pairs: usize) -> u64 {
    let full = cfg.epochs * batches_per_epoch(num_pairs, cfg.batch_size) as u64;
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Loads the training split from `cfg.data_root` and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let split = load_lol_with_split(&cfg.data_root, cfg.train_count)?;
    train_on(cfg, &split.train)
}

/// Trains on in-memory pairs. Returns the path of the final checkpoint.
pub fn train_on(cfg: &TrainConfig, pairs: &[ImagePair]) -> Result<PathBuf> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let mut state = match &cfg.resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            if state.params.arch() != cfg.arch {
                return Err(Error::Config(format!(
                    "checkpoint {} has arch {}, config wants {}",
                    path.display(),
                    state.params.arch().summary(),
                    cfg.arch.summary()
                )));
            }
            state
        }
        None => TrainState::new(cfg.arch, cfg.seed, cfg.adam_config())?,
    };
    state.optimizer.config = cfg.adam_config();
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut log = open_log(&cfg.log_path, state.step)?;
    let loss_cfg = cfg.loss_config();
    let bpe = batches_per_epoch(pairs.len(), cfg.batch_size) as u64;
    let total = planned_steps(cfg, pairs.len());

    while state.step < total {
        let epoch = state.step / bpe;
        let skip = (state.step % bpe) as usize;
        let batches = make_epoch_batches(pairs, cfg.batch_size, cfg.crop, cfg.seed, epoch)?;
        for batch in batches.skip(skip) {
            if state.step >= total {
                break;
            }
            let batch: Vec<ImagePair> = batch?.iter().map(|p| augment(p, &cfg.augment, &mut state.rng)).collect();
            let report = train_step(&mut state, &batch, &loss_cfg)?;
            state.epoch = state.step / bpe;
            write_record(&mut log, &cfg.log_path, &LogRecord::new(state.step, &report))?;
            log::debug!("step {} total {:.6}", state.step, report.total);
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                log.flush().map_err(|e| Error::io(&cfg.log_path, e))?;
                save_checkpoint(&state, checkpoint_path(&cfg.out_dir, state.step))?;
            }
        }
    }
    log.flush().map_err(|e| Error::io(&cfg.log_path, e))?;
    let final_path = cfg.out_dir.join("final.ckpt");
    save_checkpoint(&state, &final_path)?;
    Ok(final_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImageRGB;
    use crate::model::ParamGroup;
    use rand::Rng;

    fn tiny() -> ArchSpec {
        ArchSpec { depth: 2, base_channels: 3, latent_dim: 10, luminance_dim: 3 }
    }

    fn noise(h: usize, w: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ImageRGB {
        ImageRGB::from_fn(h, w, |_, _| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)])
    }

    fn pairs(k: usize, h: usize, w: usize, seed: u64) -> Vec<ImagePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|i| {
                let high = noise(h, w, 0.3, 0.9, &mut rng);
                let low = ImageRGB::from_raw_unchecked(h, w, high.as_slice().iter().map(|v| v * 0.2).collect()).unwrap();
                ImagePair::new(low, high, i.to_string()).unwrap()
            })
            .collect()
    }

    fn total_of(p: &Params<f64>, lows: &[&ImageRGB], refs: &[&ImageRGB], cfg: &LossConfig) -> f64 {
        forward_backward(p, lows, refs, cfg).unwrap().0.total
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        // Odd sizes exercise the pad/crop path.
        let arch = tiny();
        let p = init_params(arch, 5).unwrap().weights.cast::<f64>();
        let data = pairs(2, 7, 6, 9);
        let lows: Vec<&ImageRGB> = data.iter().map(|d| &d.low).collect();
        let refs: Vec<&ImageRGB> = data.iter().map(|d| &d.reference).collect();
        let cfg = LossConfig { lambda_f: 2.0, alpha_margin: 0.5 };
        let (_, g) = forward_backward(&p, &lows, &refs, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = 1e-6;
        let mut checked = 0;
        for (a, entry) in p.layout.entries.iter().enumerate() {
            for _ in 0..3 {
                let i = rng.random_range(0..entry.len());
                let mut plus = p.clone();
                plus.arrays[a][i] += eps;
                let mut minus = p.clone();
                minus.arrays[a][i] -= eps;
                let fd = (total_of(&plus, &lows, &refs, &cfg) - total_of(&minus, &lows, &refs, &cfg)) / (2.0 * eps);
                let an = g.arrays[a][i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "{}[{i}]: analytic {an} vs fd {fd}", entry.name);
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn every_group_gets_gradient() {
        let p = init_params(tiny(), 2).unwrap().weights;
        let data = pairs(2, 8, 8, 3);
        let lows: Vec<&ImageRGB> = data.iter().map(|d| &d.low).collect();
        let refs: Vec<&ImageRGB> = data.iter().map(|d| &d.reference).collect();
        let (_, g) = forward_backward(&p, &lows, &refs, &LossConfig::default()).unwrap();
        assert!(g.is_finite());
        for group in [ParamGroup::Encoder, ParamGroup::ConcatFc, ParamGroup::Decoder] {
            let norm = g.group_norm(group);
            assert!(norm.is_finite() && norm > 0.0, "{group:?}: {norm}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut state = TrainState::new(tiny(), 0, AdamConfig::with_lr(0.0)).unwrap();
        let before = state.params.checksum();
        let r = train_step(&mut state, &pairs(2, 8, 8, 1), &LossConfig::default()).unwrap();
        assert_eq!(state.params.checksum(), before);
        assert!(r.total > 0.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let batch = pairs(2, 8, 8, 4);
        let run = || {
            let mut s = TrainState::new(tiny(), 7, AdamConfig::with_lr(1e-3)).unwrap();
            train_step(&mut s, &batch, &LossConfig::default()).unwrap();
            s.params.checksum()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let batch = pairs(2, 16, 16, 11);
        let mut s = TrainState::new(tiny(), 3, AdamConfig::with_lr(1e-3)).unwrap();
        let cfg = LossConfig::default();
        let mut losses = Vec::new();
        for _ in 0..51 {
            losses.push(train_step(&mut s, &batch, &cfg).unwrap().total);
        }
        let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down >= 45, "only {down}/50 decreasing steps: {losses:?}");
    }

    #[test]
    fn batch_size_mismatch_is_an_argument_error() {
        let p = init_params(tiny(), 0).unwrap().weights;
        let data = pairs(2, 8, 8, 0);
        let r = forward_backward(&p, &[&data[0].low], &[], &LossConfig::default());
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn small_cfg(dir: &Path) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 1,
            seed: 5,
            checkpoint_every: 0,
            log_path: dir.join("log.jsonl"),
            out_dir: dir.join("ckpt"),
            arch: tiny(),
            augment: AugmentConfig { patch_size: 4, ..AugmentConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_of_sixteen_pairs_is_two_steps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let path = train_on(&cfg, &pairs(16, 8, 8, 0)).unwrap();
        let log = read_log(&cfg.log_path).unwrap();
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(load_checkpoint(path).unwrap().step, 2);
        assert_eq!(planned_steps(&TrainConfig::default(), 485), 61_000);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = pairs(6, 8, 8, 2);
        let dir = tempfile::tempdir().unwrap();
        let full = TrainConfig {
            batch_size: 2,
            epochs: 7,
            checkpoint_every: 5,
            crop: Some(4),
            log_path: dir.path().join("full.jsonl"),
            out_dir: dir.path().join("full"),
            ..small_cfg(dir.path())
        };
        train_on(&full, &data).unwrap();

        let first = TrainConfig {
            max_steps: Some(10),
            log_path: dir.path().join("part.jsonl"),
            out_dir: dir.path().join("part"),
            ..full.clone()
        };
        train_on(&first, &data).unwrap();
        let second = TrainConfig {
            max_steps: None,
            resume: Some(checkpoint_path(&first.out_dir, 10)),
            ..first.clone()
        };
        train_on(&second, &data).unwrap();
        let a = fs::read(&full.log_path).unwrap();
        let b = fs::read(&second.log_path).unwrap();
        assert_eq!(read_log(&second.log_path).unwrap().len(), 21);
        assert_eq!(a, b);
        let ca = load_checkpoint(full.out_dir.join("final.ckpt")).unwrap();
        let cb = load_checkpoint(second.out_dir.join("final.ckpt")).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn resume_with_other_arch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let path = train_on(&cfg, &pairs(2, 8, 8, 0)).unwrap();
        let other = TrainConfig {
            arch: ArchSpec { depth: 1, ..tiny() },
            resume: Some(path),
            ..cfg
        };
        assert!(matches!(train_on(&other, &pairs(2, 8, 8, 0)), Err(Error::Config(_))));
    }
}
