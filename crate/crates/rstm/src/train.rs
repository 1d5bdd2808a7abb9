//! Desk-scale training pipeline: synthetic Gaussian-noise data, L1 loss,
//! AdamW with single-cycle cosine annealing, flip augmentation, and the
//! progressive patch/batch scheduler.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, ParamStore};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// AdamW denominator epsilon, applied after the square root.
pub const ADAM_EPS: f64 = 1e-8;

/// Number of held-out evaluation pairs, generated from seed+1.
pub const EVAL_SET_SIZE: usize = 16;

/// Stream salt separating augmentation draws from sample synthesis.
const FLIP_STREAM_SALT: u64 = 0x517c_c1b7_2722_0a95;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub start_iter: usize,
    pub patch_size: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub schedule: Vec<ScheduleEntry>,
    pub seed: u64,
    /// Gaussian noise sigma on the 0-255 scale.
    pub noise_sigma: f64,
    /// Evaluate held-out PSNR every this many iterations (0 = only at end).
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations (0 = only at end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub dataset: DataSource,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Directory(PathBuf),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Config("schedule must not be empty".into()));
        }
        if self.schedule[0].start_iter != 0 {
            return Err(Error::Config("first schedule entry must start at iteration 0".into()));
        }
        for w in self.schedule.windows(2) {
            if w[1].start_iter <= w[0].start_iter {
                return Err(Error::Config("schedule thresholds must be strictly increasing".into()));
            }
        }
        for e in &self.schedule {
            if e.patch_size < 8 || e.patch_size % 8 != 0 {
                return Err(Error::Config(format!(
                    "patch size {} must be >= 8 and divisible by 8",
                    e.patch_size
                )));
            }
            if e.batch_size < 1 {
                return Err(Error::Config("batch size must be >= 1".into()));
            }
        }
        if self.lr_min >= self.lr_max {
            return Err(Error::Config("lr_min must be below lr_max".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// The published 300K-iteration schedule.
    pub fn paper_schedule() -> Vec<ScheduleEntry> {
        [
            (0, 128, 64),
            (92_000, 160, 40),
            (156_000, 192, 32),
            (204_000, 256, 16),
            (240_000, 320, 8),
            (276_000, 384, 8),
        ]
        .into_iter()
        .map(|(start_iter, patch_size, batch_size)| ScheduleEntry {
            start_iter,
            patch_size,
            batch_size,
        })
        .collect()
    }
}

/// AdamW moment buffers, aligned with the parameter store order.
#[derive(Clone, Debug)]
pub struct OptState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let m = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        let v = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        OptState { m, v, t: 0 }
    }
}

/// Mean absolute difference (non-differentiable convenience; the training
/// loop uses the tape's `l1_loss`).
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "l1_loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut acc = T::zero();
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        acc = acc + (a - b).abs();
    }
    Ok(acc / T::f(pred.numel() as f64))
}

/// Single-cycle cosine annealing from lr_max (t=0) to lr_min (t=T);
/// t beyond T clamps to lr_min.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t >= total {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// One decoupled-weight-decay Adam step over the whole store.
/// `grads` must be aligned with the store's iteration order.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut OptState<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (T::f(betas.0), T::f(betas.1));
    let one = T::one();
    let bc1 = T::f(1.0 - betas.0.powi(state.t as i32));
    let bc2 = T::f(1.0 - betas.1.powi(state.t as i32));
    let lr_t = T::f(lr);
    let eps_t = T::f(eps);
    let wd = T::f(weight_decay);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() {
            return Err(Error::Dimension(format!(
                "gradient {} has {} elements, parameter has {}",
                i,
                g.len(),
                p.numel()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((w, &gv), (mv, vv)) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps_t) - lr_t * wd * *w;
        }
    }
    Ok(())
}

/// Returns the (patch, batch) pair of the entry with the largest
/// start_iter <= iter; switches exactly at the threshold.
pub fn progressive_schedule(iter: usize, schedule: &[ScheduleEntry]) -> Result<(usize, usize)> {
    if schedule.is_empty() {
        return Err(Error::Config("empty progressive schedule".into()));
    }
    let mut current = &schedule[0];
    for e in schedule {
        if e.start_iter <= iter {
            current = e;
        } else {
            break;
        }
    }
    Ok((current.patch_size, current.batch_size))
}

/// Procedural clean/noisy patch pair, deterministic per (seed, index).
///
/// The clean image mixes a smooth affine gradient, a few constant
/// rectangles, and a sinusoidal texture, clamped to [0,1]. Noise is
/// unclipped additive Gaussian with standard deviation sigma/255.
pub fn synth_sample(
    seed: u64,
    index: u64,
    patch: usize,
    channels: usize,
    sigma: f64,
) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let p = patch;
    let mut clean = vec![0f32; p * p * channels];
    for ch in 0..channels {
        let base = rng.gen_range(0.2..0.8);
        let gx = rng.gen_range(-0.4..0.4);
        let gy = rng.gen_range(-0.4..0.4);
        let amp = rng.gen_range(0.05..0.2);
        let fx = rng.gen_range(0.5..4.0);
        let fy = rng.gen_range(0.5..4.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..p {
            for x in 0..p {
                let u = x as f64 / p as f64;
                let v = y as f64 / p as f64;
                let val = base
                    + gx * u
                    + gy * v
                    + amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
                clean[(y * p + x) * channels + ch] = val as f32;
            }
        }
        let rects = rng.gen_range(2..6);
        for _ in 0..rects {
            let x0 = rng.gen_range(0..p);
            let y0 = rng.gen_range(0..p);
            let rw = rng.gen_range(1..=p / 2);
            let rh = rng.gen_range(1..=p / 2);
            let delta = rng.gen_range(-0.35..0.35) as f32;
            for y in y0..(y0 + rh).min(p) {
                for x in x0..(x0 + rw).min(p) {
                    clean[(y * p + x) * channels + ch] += delta;
                }
            }
        }
    }
    for v in clean.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let clean = Tensor::new(&[1, p, p, channels], clean).unwrap();
    let noisy = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma / 255.0).unwrap();
        let data: Vec<f32> = clean
            .data()
            .iter()
            .map(|&c| c + normal.sample(&mut rng) as f32)
            .collect();
        Tensor::new(clean.shape(), data).unwrap()
    } else {
        clean.clone()
    };
    (clean, noisy)
}

/// Horizontal/vertical flip of an [n,h,w,c] tensor.
pub fn flip<T: Scalar>(x: &Tensor<T>, horizontal: bool, vertical: bool) -> Tensor<T> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for in_ in 0..n {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for xx in 0..w {
                let sx = if horizontal { w - 1 - xx } else { xx };
                let src = ((in_ * h + sy) * w + sx) * c;
                let dst = ((in_ * h + y) * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Independently applies horizontal and vertical flips, each with
/// probability 1/2.
pub fn augment_flip<T: Scalar, R: Rng>(x: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let h: bool = rng.gen();
    let v: bool = rng.gen();
    flip(x, h, v)
}

/// 10 log10(peak^2 / MSE), capped at 100 dB when the images coincide.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut mse = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.as_f64() - y.as_f64();
        mse += d * d;
    }
    mse /= a.numel() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(100.0))
}

#[derive(Clone, Debug)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub patch: usize,
    pub batch: usize,
    pub loss: f64,
    pub eval_psnr: Option<f64>,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        "iter,lr,patch,batch,loss,eval_psnr"
    }

    pub fn to_csv(&self) -> String {
        match self.eval_psnr {
            Some(p) => format!(
                "{},{:e},{},{},{:e},{}",
                self.iter, self.lr, self.patch, self.batch, self.loss, p
            ),
            None => format!(
                "{},{:e},{},{},{:e},",
                self.iter, self.lr, self.patch, self.batch, self.loss
            ),
        }
    }
}

pub struct TrainResult {
    pub model: Model<f32>,
    pub opt: OptState<f32>,
    pub log: Vec<LogRow>,
    pub final_eval_psnr: Option<f64>,
}

/// Runs the full loop; deterministic given the configs. When `out_dir` is
/// given, writes `metrics.csv` plus periodic and final checkpoints there.
pub fn train_loop(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    train_cfg.validate()?;
    let mut model: Model<f32> = Model::build(model_cfg.clone(), train_cfg.seed)?;
    let mut opt = OptState::new(&model.params);
    let mut log: Vec<LogRow> = Vec::new();
    let channels = model_cfg.in_channels;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = match out_dir {
        Some(dir) => {
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{}", LogRow::csv_header())?;
            Some(f)
        }
        None => None,
    };

    // Held-out pairs come from seed+1 and are never trained on.
    let eval_patch = train_cfg.schedule[0].patch_size;
    let eval_set: Vec<(Tensor<f32>, Tensor<f32>)> = (0..EVAL_SET_SIZE as u64)
        .map(|i| synth_sample(train_cfg.seed + 1, i, eval_patch, channels, train_cfg.noise_sigma))
        .collect();

    let mut sample_index: u64 = 0;
    let mut flip_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ FLIP_STREAM_SALT);
    let mut final_eval = None;

    for it in 0..train_cfg.total_iters {
        let (patch, batch) = progressive_schedule(it, &train_cfg.schedule)?;
        let mut clean_batch = Vec::with_capacity(batch);
        let mut noisy_batch = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (clean, noisy) = sample_pair(train_cfg, sample_index, patch, channels)?;
            sample_index += 1;
            let fh: bool = flip_rng.gen();
            let fv: bool = flip_rng.gen();
            clean_batch.push(flip(&clean, fh, fv));
            noisy_batch.push(flip(&noisy, fh, fv));
        }
        let clean = stack(&clean_batch);
        let noisy = stack(&noisy_batch);

        let mut tape: Tape<f32> = Tape::new();
        let param_ids = model.register_params(&mut tape, true);
        let input = tape.leaf(noisy);
        let target = tape.leaf(clean);
        let restored = model.forward(&mut tape, &param_ids, input)?;
        let loss_id = tape.l1_loss(restored, target)?;
        let loss = tape.value(loss_id).data()[0] as f64;
        if !loss.is_finite() {
            if let Some(dir) = out_dir {
                let _ = write_checkpoint_file(dir.join("abort.ckpt"), &model, Some(&opt), it as u64, train_cfg.seed);
            }
            return Err(Error::Train(format!(
                "non-finite loss {loss} at iteration {it}; state dumped"
            )));
        }
        tape.backward(loss_id)?;
        let grads: Vec<Vec<f32>> = param_ids
            .iter()
            .map(|&id| tape.grad(id).expect("parameter gradient").to_vec())
            .collect();
        drop(tape);

        let lr = cosine_lr(it, train_cfg.total_iters, train_cfg.lr_max, train_cfg.lr_min);
        adamw_step(
            &mut model.params,
            &grads,
            &mut opt,
            lr,
            train_cfg.betas,
            ADAM_EPS,
            train_cfg.weight_decay,
        )?;

        let is_last = it + 1 == train_cfg.total_iters;
        let eval_due = train_cfg.eval_every > 0 && (it + 1) % train_cfg.eval_every == 0;
        let eval_psnr = if eval_due || is_last {
            let p = evaluate(&model, &eval_set)?;
            if is_last {
                final_eval = Some(p);
            }
            Some(p)
        } else {
            None
        };
        let row = LogRow { iter: it, lr, patch, batch, loss, eval_psnr };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
        }
        log.push(row);

        if let Some(dir) = out_dir {
            let ckpt_due = train_cfg.checkpoint_every > 0 && (it + 1) % train_cfg.checkpoint_every == 0;
            if ckpt_due {
                write_checkpoint_file(
                    dir.join(format!("iter_{:07}.ckpt", it + 1)),
                    &model,
                    Some(&opt),
                    (it + 1) as u64,
                    train_cfg.seed,
                )?;
            }
        }
    }

    if let Some(dir) = out_dir {
        write_checkpoint_file(
            dir.join("final.ckpt"),
            &model,
            Some(&opt),
            train_cfg.total_iters as u64,
            train_cfg.seed,
        )?;
    }
    Ok(TrainResult { model, opt, log, final_eval_psnr: final_eval })
}

fn sample_pair(
    cfg: &TrainConfig,
    index: u64,
    patch: usize,
    channels: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    match &cfg.dataset {
        DataSource::Synthetic => Ok(synth_sample(cfg.seed, index, patch, channels, cfg.noise_sigma)),
        DataSource::Directory(dir) => {
            crate::io::directory_sample(dir, cfg.seed, index, patch, channels, cfg.noise_sigma)
        }
    }
}

/// Mean restored PSNR over the held-out set.
pub fn evaluate(model: &Model<f32>, eval_set: &[(Tensor<f32>, Tensor<f32>)]) -> Result<f64> {
    let mut total = 0.0;
    for (clean, noisy) in eval_set {
        let mut tape: Tape<f32> = Tape::new();
        let param_ids = model.register_params(&mut tape, false);
        let input = tape.leaf(noisy.clone());
        let restored = model.forward(&mut tape, &param_ids, input)?;
        total += psnr(tape.value(restored), clean, 1.0)?;
    }
    Ok(total / eval_set.len() as f64)
}

/// Concatenates [1,h,w,c] tensors along the batch axis.
pub fn stack(samples: &[Tensor<f32>]) -> Tensor<f32> {
    let s = samples[0].shape();
    let mut data = Vec::with_capacity(samples.len() * samples[0].numel());
    for t in samples {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[samples.len(), s[1], s[2], s[3]], data).unwrap()
}

fn write_checkpoint_file(
    path: PathBuf,
    model: &Model<f32>,
    opt: Option<&OptState<f32>>,
    iteration: u64,
    seed: u64,
) -> Result<()> {
    let ckpt = crate::io::Checkpoint {
        config: model.cfg.clone(),
        params: model.params.clone(),
        opt: opt.map(|o| crate::io::OptCheckpoint {
            t: o.t,
            m: o.m.clone(),
            v: o.v.clone(),
        }),
        iteration,
        rng_seed: seed,
    };
    crate::io::save_checkpoint(&ckpt, &path)
}
