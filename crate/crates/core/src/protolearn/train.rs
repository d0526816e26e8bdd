//! The episodic training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;

use super::sampler::{sample_episode, SpecAugment};
use super::{episode_accuracy, episode_loss};
use crate::config::RunConfig;
use crate::dataset::ClassSource;
use crate::nn::{lr_at_epoch, save_checkpoint, Embedder, RngState, SgdMomentum};
use crate::rng::{substream, substream_indexed};
use crate::{Error, Result};

/// Early-stopping bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_acc: f64,
    pub epochs_without_improvement: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState { epoch: 0, best_val_acc: f64::NEG_INFINITY, epochs_without_improvement: 0, seed }
    }

    /// Record an epoch's validation accuracy; returns true on improvement.
    pub fn observe(&mut self, val_acc: f64) -> bool {
        if val_acc > self.best_val_acc {
            self.best_val_acc = val_acc;
            self.epochs_without_improvement = 0;
            true
        } else {
            self.epochs_without_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.epochs_without_improvement >= patience
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_val_acc: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Train the embedder episodically and keep the best-validation checkpoint.
///
/// Writes `best.ckpt` and `train_log.csv` (epoch, loss, val_accuracy, lr)
/// under `out_dir`. With `cfg.transductive` the evaluation-file classes
/// participate in episode sampling alongside the development classes.
pub fn train(
    cfg: &RunConfig,
    train_sources: &[ClassSource],
    eval_sources: &[ClassSource],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if train_sources.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join("best.ckpt");
    let log_path = out_dir.join("train_log.csv");

    let eval_pool: &[ClassSource] = if cfg.transductive { eval_sources } else { &[] };
    let seg_frames = cfg.segment_frames();
    let sa = cfg.specaugment.then(SpecAugment::default);

    let mut embedder = Embedder::<f32>::init(cfg.embedder(), &mut substream(cfg.seed, "model-init"))?;
    let mut optimizer = SgdMomentum::new(cfg.momentum);
    let mut episode_rng = substream(cfg.seed, "episode");
    let mut state = TrainState::new(cfg.seed);
    let mut log = String::from("epoch,loss,val_accuracy,lr\n");
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        state.epoch = epoch;
        epochs_run = epoch + 1;
        let lr = lr_at_epoch(cfg.lr, cfg.lr_decay, cfg.lr_decay_epochs, epoch);

        let mut loss_sum = 0.0;
        for _ in 0..cfg.episodes_per_epoch {
            let episode = sample_episode(
                train_sources,
                eval_pool,
                cfg.n_way,
                cfg.k_shot,
                seg_frames,
                sa.as_ref(),
                &mut episode_rng,
            )?;
            let el = episode_loss(&mut embedder, &episode, cfg.use_negatives)?;
            let grads = el.gradients(&embedder);
            optimizer.step(&mut embedder, &grads, lr)?;
            loss_sum += el.loss_value;
        }
        let mean_loss = loss_sum / cfg.episodes_per_epoch.max(1) as f64;

        let mut val_rng = substream_indexed(cfg.seed, "val", epoch as u64);
        let mut acc_sum = 0.0;
        for _ in 0..cfg.val_episodes {
            let episode = sample_episode(
                train_sources,
                eval_pool,
                cfg.n_way,
                cfg.k_shot,
                seg_frames,
                None,
                &mut val_rng,
            )?;
            acc_sum += episode_accuracy(&embedder, &episode)?;
        }
        let val_acc = acc_sum / cfg.val_episodes.max(1) as f64;

        let _ = writeln!(log, "{epoch},{mean_loss:.6},{val_acc:.6},{lr:.10e}");

        // ties refresh the checkpoint (the later model has trained longer at
        // the same accuracy); the patience counter only resets on strict
        // improvement
        let tie_or_better = val_acc >= state.best_val_acc;
        state.observe(val_acc);
        if tie_or_better {
            let rng_state = RngState {
                seed: episode_rng.get_seed(),
                word_pos: episode_rng.get_word_pos(),
            };
            save_checkpoint(&embedder, Some(&rng_state), &ckpt_path)?;
        }
        if state.should_stop(cfg.patience) {
            stopped_early = true;
            break;
        }
    }

    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        best_val_acc: state.best_val_acc,
        epochs_run,
        stopped_early,
    })
}

/// Restore an episode RNG from a checkpointed state.
pub fn rng_from_state(state: &RngState) -> rand_chacha::ChaCha8Rng {
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}
