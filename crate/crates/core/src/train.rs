//! Corpus-level training: clean-speech pre-training of the speech model and
//! noise-dependent training of the encoder plus noise net on noisy audio.

use std::path::Path;

use log::{info, warn};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancement::{enhancement_loss_and_grad, EnhancementParams};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::noise_model::{init_noise_params, NoiseConfig, NoiseVariant};
use crate::optim::{cosine_lr, kl_warmup, Adam, AdamConfig};
use crate::signal::{training_chunks, StftConfig, Waveform};
use crate::speech_prior::{pretrain_loss_and_grad, RvaeConfig, RvaeParams, POWER_FLOOR};

/// Training hyperparameters, readable from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_epochs: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Frames per training segment.
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Monte-Carlo draws per step in noise-dependent training.
    pub mc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr_start: 5e-4,
            lr_end: 1e-8,
            warmup_epochs: 20,
            hidden_dim: 64,
            latent_dim: 16,
            seq_len: 100,
            batch_size: 16,
            seed: 0,
            mc_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
            ("mc_samples", self.mc_samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr_start > 0.0 && self.lr_end >= 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= lr_end <= lr_start, lr_start > 0 (got {} and {})",
                self.lr_start, self.lr_end
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect()
    }
}

/// Everything needed to continue an interrupted run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<P> {
    pub params: P,
    pub adam: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
    pub best: P,
    /// 1-based epoch that produced `best`; 0 before any epoch ran.
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub log: TrainLog,
}

impl<P: Clone> TrainState<P> {
    pub fn new(params: P) -> Self {
        Self {
            best: params.clone(),
            params,
            adam: Adam::new(AdamConfig::default()),
            epoch: 0,
            best_epoch: 0,
            best_valid_loss: f64::INFINITY,
            log: TrainLog::default(),
        }
    }
}

/// Fixed-length power segments for training and validation.
#[derive(Debug, Clone)]
pub struct Segments {
    pub train: Vec<Array2<f64>>,
    pub valid: Vec<Array2<f64>>,
}

impl Segments {
    /// Cuts every waveform into `cfg.seq_len`-frame power segments. Without
    /// validation audio the last tenth of the training segments (at least
    /// one) is held out; a single segment is used for both.
    pub fn from_waveforms(train: &[Waveform], valid: &[Waveform], cfg: &TrainConfig, stft: &StftConfig) -> Result<Self> {
        let cut = |ws: &[Waveform]| -> Result<Vec<Array2<f64>>> {
            let mut out = Vec::new();
            for w in ws {
                out.extend(training_chunks(w, stft, cfg.seq_len)?);
            }
            Ok(out)
        };
        let mut train = cut(train)?;
        let mut valid = cut(valid)?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus(format!(
                "no training audio long enough for one {}-frame segment",
                cfg.seq_len
            )));
        }
        if valid.is_empty() {
            if train.len() == 1 {
                warn!("no validation segments; validating on the single training segment");
                valid = train.clone();
            } else {
                let held = (train.len() / 10).max(1);
                warn!("no validation segments; holding out {held} of {} training segments", train.len());
                valid = train.split_off(train.len() - held);
            }
        }
        Ok(Self { train, valid })
    }
}

type LossFn<'a, P> = dyn Fn(&[&Array2<f64>], &P, &mut dyn RngCore, f64, bool) -> Result<(f64, Vec<Array2<f64>>)> + 'a;

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Diverged { loss, detail, .. } => Error::Diverged { epoch, step, loss, detail },
        other => other,
    }
}

fn mean_loss<P>(segs: &[Array2<f64>], params: &P, cfg: &TrainConfig, loss: &LossFn<'_, P>, epoch: usize) -> Result<f64> {
    let mut rng = epoch_rng(cfg.seed, 0);
    let mut total = 0.0;
    for (step, chunk) in segs.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&Array2<f64>> = chunk.iter().collect();
        let (l, _) = loss(&batch, params, &mut rng, 1.0, false).map_err(|e| diverged(e, epoch, step))?;
        total += l * batch.len() as f64;
    }
    Ok(total / segs.len() as f64)
}

/// Runs epochs `state.epoch + 1 ..= until` with per-epoch shuffling, the
/// cosine schedule and, when `warmup`, the KL ramp.
fn run_epochs<P: Clone>(
    mut state: TrainState<P>,
    segs: &Segments,
    cfg: &TrainConfig,
    until: usize,
    warmup: bool,
    loss: &LossFn<'_, P>,
    tensors: fn(&mut P) -> Vec<&mut Array2<f64>>,
) -> Result<TrainState<P>> {
    cfg.validate()?;
    while state.epoch < until.min(cfg.epochs) {
        let epoch = state.epoch;
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end);
        let kl_weight = if warmup { kl_warmup(epoch, cfg.warmup_epochs) } else { 1.0 };
        let mut rng = epoch_rng(cfg.seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..segs.train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Array2<f64>> = idx.iter().map(|&i| &segs.train[i]).collect();
            let (l, grads) = loss(&batch, &state.params, &mut rng, kl_weight, true).map_err(|e| diverged(e, epoch + 1, step))?;
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch: epoch + 1, step, loss: l, detail: "non-finite gradient".into() });
            }
            total += l * batch.len() as f64;
            state.adam.step(tensors(&mut state.params), &grads, lr);
        }
        let train_loss = total / segs.train.len() as f64;
        let valid_loss = mean_loss(&segs.valid, &state.params, cfg, loss, epoch + 1)?;
        state.epoch += 1;
        info!("epoch {}: train {train_loss:.4}, valid {valid_loss:.4}, lr {lr:.3e}, kl weight {kl_weight:.3}", state.epoch);
        state.log.epochs.push(EpochRecord { epoch: state.epoch, lr, kl_weight, train_loss, valid_loss });
        if valid_loss < state.best_valid_loss {
            state.best_valid_loss = valid_loss;
            state.best_epoch = state.epoch;
            state.best = state.params.clone();
        }
    }
    Ok(state)
}

/// Fresh speech model whose decoder output starts at the per-bin mean power
/// of the training segments.
pub fn init_pretrain(segs: &Segments, cfg: &TrainConfig) -> RvaeParams {
    let n_freq = segs.train[0].nrows();
    let config = RvaeConfig { n_freq, latent_dim: cfg.latent_dim, hidden_dim: cfg.hidden_dim };
    let mut params = RvaeParams::new(config, &mut epoch_rng(cfg.seed, u64::MAX));
    let mut acc = Array1::<f64>::zeros(n_freq);
    let mut frames = 0usize;
    for s in &segs.train {
        acc += &s.sum_axis(Axis(1));
        frames += s.ncols();
    }
    params.set_output_log_power(&(acc / frames as f64).mapv(|p| p.max(POWER_FLOOR).ln()));
    params
}

fn check_freq(segs: &Segments, n_freq: usize) -> Result<()> {
    match segs.train.iter().chain(&segs.valid).find(|s| s.nrows() != n_freq) {
        Some(s) => Err(Error::ShapeMismatch { what: "training segment", expected: (n_freq, s.ncols()), found: s.dim() }),
        None => Ok(()),
    }
}

/// Continues clean-speech pre-training until `until` epochs have run.
pub fn continue_pretrain(state: TrainState<RvaeParams>, segs: &Segments, cfg: &TrainConfig, until: usize) -> Result<TrainState<RvaeParams>> {
    check_freq(segs, state.params.config.n_freq)?;
    let loss = |b: &[&Array2<f64>], p: &RvaeParams, rng: &mut dyn RngCore, kl: f64, g: bool| pretrain_loss_and_grad(b, p, rng, kl, g);
    run_epochs(state, segs, cfg, until, true, &loss, |p| p.tensors_mut())
}

/// Pre-trains the speech model on clean audio for `cfg.epochs` epochs.
pub fn pretrain(train: &[Waveform], valid: &[Waveform], cfg: &TrainConfig, stft: &StftConfig) -> Result<TrainState<RvaeParams>> {
    cfg.validate()?;
    let segs = Segments::from_waveforms(train, valid, cfg, stft)?;
    let state = TrainState::new(init_pretrain(&segs, cfg));
    continue_pretrain(state, &segs, cfg, cfg.epochs)
}

/// Pre-trained speech model plus a fresh noise net of unit initial variance.
pub fn init_nd(pretrained: &RvaeParams, variant: NoiseVariant, cfg: &TrainConfig) -> EnhancementParams {
    let noise_cfg = NoiseConfig {
        n_freq: pretrained.config.n_freq,
        latent_dim: pretrained.config.latent_dim,
        hidden_dim: cfg.hidden_dim,
    };
    let noise = init_noise_params(variant, noise_cfg, 1.0, &mut epoch_rng(cfg.seed, u64::MAX - 1));
    EnhancementParams { rvae: pretrained.clone(), noise }
}

/// Continues noise-dependent training until `until` epochs have run. Only
/// the encoder and the noise net move.
pub fn continue_nd(state: TrainState<EnhancementParams>, segs: &Segments, cfg: &TrainConfig, until: usize) -> Result<TrainState<EnhancementParams>> {
    check_freq(segs, state.params.rvae.config.n_freq)?;
    let mc = cfg.mc_samples;
    let loss = move |b: &[&Array2<f64>], p: &EnhancementParams, rng: &mut dyn RngCore, _kl: f64, g: bool| {
        enhancement_loss_and_grad(b, p, rng, mc, g)
    };
    run_epochs(state, segs, cfg, until, false, &loss, |p| p.trainable_mut())
}

/// Trains encoder and noise net on noisy audio only.
pub fn train_nd(
    noisy_train: &[Waveform],
    noisy_valid: &[Waveform],
    pretrained: &RvaeParams,
    variant: NoiseVariant,
    cfg: &TrainConfig,
    stft: &StftConfig,
) -> Result<TrainState<EnhancementParams>> {
    cfg.validate()?;
    let segs = Segments::from_waveforms(noisy_train, noisy_valid, cfg, stft)?;
    let state = TrainState::new(init_nd(pretrained, variant, cfg));
    continue_nd(state, &segs, cfg, cfg.epochs)
}
