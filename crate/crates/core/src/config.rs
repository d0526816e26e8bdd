//! Run configuration: flat `key = value` text files with CLI overrides.
//!
//! Every field has a default; unknown keys are rejected. The canonical
//! rendering (sorted keys) is hashed into a fingerprint that is recorded in
//! every output manifest, so two runs with identical fingerprints saw
//! identical configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::features::{PcenParams, StftConfig};
use crate::hash::fnv1a64;
use crate::nn::EmbedderConfig;
use crate::postproc::{PostConfig, SplitTrigger};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data
    pub train_root: PathBuf,
    pub eval_root: PathBuf,
    pub sample_rate: u32,

    // features
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub mfcc_coeffs: usize,
    pub delta_width: usize,
    pub pcen_s: f64,
    pub pcen_alpha: f64,
    pub pcen_delta: f64,
    pub pcen_r: f64,
    pub pcen_eps: f64,

    // model
    pub channels: [usize; 3],
    pub pool_t: usize,
    pub pool_f: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,

    // training
    pub n_way: usize,
    pub k_shot: usize,
    pub segment_s: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    pub momentum: f64,
    pub max_epochs: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub patience: usize,
    pub transductive: bool,
    pub use_negatives: bool,
    pub specaugment: bool,

    // detection
    pub threshold: f64,
    pub detect_runs: usize,
    pub negatives_per_run: usize,
    pub min_neg_s: f64,
    pub detect_k: usize,
    pub ensemble: bool,
    pub ensemble_thresholds: Vec<f64>,

    // negative mining
    pub mine_margin_db: f64,
    pub mine_min_run: usize,

    // post-processing
    pub post_split: bool,
    pub post_merge: bool,
    pub post_filter: bool,
    pub post_pad: bool,
    pub post_pad_fraction: f64,
    pub post_split_trigger: SplitTrigger,

    // scoring
    pub min_iou: f64,

    // run control
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_root: PathBuf::from("data/train"),
            eval_root: PathBuf::from("data/eval"),
            sample_rate: 22050,
            win_length: 1024,
            hop_length: 256,
            n_fft: 1024,
            n_mels: 128,
            mfcc_coeffs: 32,
            delta_width: 9,
            pcen_s: 0.025,
            pcen_alpha: 0.98,
            pcen_delta: 2.0,
            pcen_r: 0.5,
            pcen_eps: 1e-6,
            channels: [64, 128, 64],
            pool_t: 4,
            pool_f: 8,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            n_way: 10,
            k_shot: 5,
            segment_s: 0.2,
            lr: 0.001,
            lr_decay: 0.65,
            lr_decay_epochs: 10,
            momentum: 0.9,
            max_epochs: 100,
            episodes_per_epoch: 50,
            val_episodes: 10,
            patience: 10,
            transductive: true,
            use_negatives: true,
            specaugment: false,
            threshold: 0.95,
            detect_runs: 6,
            negatives_per_run: 30,
            min_neg_s: 2.0,
            detect_k: 5,
            ensemble: false,
            ensemble_thresholds: vec![0.5, 0.7, 0.9, 0.99, 0.995],
            mine_margin_db: 0.0,
            mine_min_run: 3,
            post_split: true,
            post_merge: true,
            post_filter: true,
            post_pad: false,
            post_pad_fraction: 0.1,
            post_split_trigger: SplitTrigger::TBar,
            min_iou: 0.3,
            seed: 42,
            workers: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parse a config file, starting from defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected `key = value`", path.display(), lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` override. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
        }
        match key {
            "data.train_root" => self.train_root = PathBuf::from(value),
            "data.eval_root" => self.eval_root = PathBuf::from(value),
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "features.win_length" => self.win_length = parse(key, value)?,
            "features.hop_length" => self.hop_length = parse(key, value)?,
            "features.n_fft" => self.n_fft = parse(key, value)?,
            "features.n_mels" => self.n_mels = parse(key, value)?,
            "features.mfcc_coeffs" => self.mfcc_coeffs = parse(key, value)?,
            "features.delta_width" => self.delta_width = parse(key, value)?,
            "features.pcen_s" => self.pcen_s = parse(key, value)?,
            "features.pcen_alpha" => self.pcen_alpha = parse(key, value)?,
            "features.pcen_delta" => self.pcen_delta = parse(key, value)?,
            "features.pcen_r" => self.pcen_r = parse(key, value)?,
            "features.pcen_eps" => self.pcen_eps = parse(key, value)?,
            "model.channels" => self.channels = parse_channels(value)?,
            "model.pool_t" => self.pool_t = parse(key, value)?,
            "model.pool_f" => self.pool_f = parse(key, value)?,
            "model.leaky_slope" => self.leaky_slope = parse(key, value)?,
            "model.bn_momentum" => self.bn_momentum = parse(key, value)?,
            "model.bn_eps" => self.bn_eps = parse(key, value)?,
            "train.n_way" => self.n_way = parse(key, value)?,
            "train.k_shot" => self.k_shot = parse(key, value)?,
            "train.segment_s" => self.segment_s = parse(key, value)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.lr_decay" => self.lr_decay = parse(key, value)?,
            "train.lr_decay_epochs" => self.lr_decay_epochs = parse(key, value)?,
            "train.momentum" => self.momentum = parse(key, value)?,
            "train.max_epochs" => self.max_epochs = parse(key, value)?,
            "train.episodes_per_epoch" => self.episodes_per_epoch = parse(key, value)?,
            "train.val_episodes" => self.val_episodes = parse(key, value)?,
            "train.patience" => self.patience = parse(key, value)?,
            "train.transductive" => self.transductive = parse_bool(key, value)?,
            "train.use_negatives" => self.use_negatives = parse_bool(key, value)?,
            "train.specaugment" => self.specaugment = parse_bool(key, value)?,
            "detect.threshold" => self.threshold = parse(key, value)?,
            "detect.runs" => self.detect_runs = parse(key, value)?,
            "detect.negatives_per_run" => self.negatives_per_run = parse(key, value)?,
            "detect.min_neg_s" => self.min_neg_s = parse(key, value)?,
            "detect.k" => self.detect_k = parse(key, value)?,
            "detect.ensemble" => self.ensemble = parse_bool(key, value)?,
            "detect.ensemble_thresholds" => {
                self.ensemble_thresholds = parse_list(value)?;
            }
            "mine.margin_db" => self.mine_margin_db = parse(key, value)?,
            "mine.min_run" => self.mine_min_run = parse(key, value)?,
            "post.split" => self.post_split = parse_bool(key, value)?,
            "post.merge" => self.post_merge = parse_bool(key, value)?,
            "post.filter" => self.post_filter = parse_bool(key, value)?,
            "post.pad" => self.post_pad = parse_bool(key, value)?,
            "post.pad_fraction" => self.post_pad_fraction = parse(key, value)?,
            "post.split_trigger" => {
                self.post_split_trigger = match value {
                    "tbar" => SplitTrigger::TBar,
                    "tmax" => SplitTrigger::TMax,
                    other => {
                        return Err(Error::Config(format!(
                            "post.split_trigger must be `tbar` or `tmax`, got {other:?}"
                        )))
                    }
                }
            }
            "score.min_iou" => self.min_iou = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length > self.win_length || self.win_length > self.n_fft {
            return Err(Error::Config(
                "require hop_length <= win_length <= n_fft".into(),
            ));
        }
        if self.n_mels > self.n_fft / 2 + 1 {
            return Err(Error::Config("n_mels exceeds n_fft/2 + 1".into()));
        }
        if self.delta_width.is_multiple_of(2) || self.delta_width < 3 {
            return Err(Error::Config("delta_width must be odd and >= 3".into()));
        }
        if self.mfcc_coeffs > self.n_mels {
            return Err(Error::Config("mfcc_coeffs exceeds n_mels".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("detect.threshold must lie in (0, 1)".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical rendering: one `key = value` line per field, fixed order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("data.train_root", self.train_root.display().to_string());
        put("data.eval_root", self.eval_root.display().to_string());
        put("sample_rate", self.sample_rate.to_string());
        put("features.win_length", self.win_length.to_string());
        put("features.hop_length", self.hop_length.to_string());
        put("features.n_fft", self.n_fft.to_string());
        put("features.n_mels", self.n_mels.to_string());
        put("features.mfcc_coeffs", self.mfcc_coeffs.to_string());
        put("features.delta_width", self.delta_width.to_string());
        put("features.pcen_s", format!("{:e}", self.pcen_s));
        put("features.pcen_alpha", format!("{:e}", self.pcen_alpha));
        put("features.pcen_delta", format!("{:e}", self.pcen_delta));
        put("features.pcen_r", format!("{:e}", self.pcen_r));
        put("features.pcen_eps", format!("{:e}", self.pcen_eps));
        put(
            "model.channels",
            format!("{},{},{}", self.channels[0], self.channels[1], self.channels[2]),
        );
        put("model.pool_t", self.pool_t.to_string());
        put("model.pool_f", self.pool_f.to_string());
        put("model.leaky_slope", format!("{:e}", self.leaky_slope));
        put("model.bn_momentum", format!("{:e}", self.bn_momentum));
        put("model.bn_eps", format!("{:e}", self.bn_eps));
        put("train.n_way", self.n_way.to_string());
        put("train.k_shot", self.k_shot.to_string());
        put("train.segment_s", format!("{:e}", self.segment_s));
        put("train.lr", format!("{:e}", self.lr));
        put("train.lr_decay", format!("{:e}", self.lr_decay));
        put("train.lr_decay_epochs", self.lr_decay_epochs.to_string());
        put("train.momentum", format!("{:e}", self.momentum));
        put("train.max_epochs", self.max_epochs.to_string());
        put("train.episodes_per_epoch", self.episodes_per_epoch.to_string());
        put("train.val_episodes", self.val_episodes.to_string());
        put("train.patience", self.patience.to_string());
        put("train.transductive", self.transductive.to_string());
        put("train.use_negatives", self.use_negatives.to_string());
        put("train.specaugment", self.specaugment.to_string());
        put("detect.threshold", format!("{:e}", self.threshold));
        put("detect.runs", self.detect_runs.to_string());
        put("detect.negatives_per_run", self.negatives_per_run.to_string());
        put("detect.min_neg_s", format!("{:e}", self.min_neg_s));
        put("detect.k", self.detect_k.to_string());
        put("detect.ensemble", self.ensemble.to_string());
        put(
            "detect.ensemble_thresholds",
            self.ensemble_thresholds
                .iter()
                .map(|t| format!("{t:e}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        put("mine.margin_db", format!("{:e}", self.mine_margin_db));
        put("mine.min_run", self.mine_min_run.to_string());
        put("post.split", self.post_split.to_string());
        put("post.merge", self.post_merge.to_string());
        put("post.filter", self.post_filter.to_string());
        put("post.pad", self.post_pad.to_string());
        put("post.pad_fraction", format!("{:e}", self.post_pad_fraction));
        put(
            "post.split_trigger",
            match self.post_split_trigger {
                SplitTrigger::TBar => "tbar".to_string(),
                SplitTrigger::TMax => "tmax".to_string(),
            },
        );
        put("score.min_iou", format!("{:e}", self.min_iou));
        put("seed", self.seed.to_string());
        put("workers", self.workers.to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    /// Configuration fingerprint; changes iff any config value changes.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            win_length: self.win_length,
            hop_length: self.hop_length,
            n_fft: self.n_fft,
            n_mels: self.n_mels,
            sample_rate: self.sample_rate,
        }
    }

    pub fn pcen(&self) -> PcenParams {
        PcenParams {
            s: self.pcen_s,
            alpha: self.pcen_alpha,
            delta: self.pcen_delta,
            r: self.pcen_r,
            eps: self.pcen_eps,
        }
    }

    /// Number of feature bins the embedder sees: PCEN mels plus delta-MFCC
    /// coefficients (coefficient 0 is dropped before the delta).
    pub fn stacked_bins(&self) -> usize {
        self.n_mels + (self.mfcc_coeffs - 1)
    }

    pub fn embedder(&self) -> EmbedderConfig {
        EmbedderConfig {
            in_bins: self.stacked_bins(),
            channels: self.channels,
            pool_t: self.pool_t,
            pool_f: self.pool_f,
            leaky_slope: self.leaky_slope,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    pub fn post(&self) -> PostConfig {
        PostConfig {
            split: self.post_split,
            merge: self.post_merge,
            filter: self.post_filter,
            pad: self.post_pad,
            pad_fraction: self.post_pad_fraction,
            split_trigger: self.post_split_trigger,
        }
    }

    /// Training segment length in STFT frames (at least 4 for the embedder).
    pub fn segment_frames(&self) -> usize {
        let hop_s = self.hop_length as f64 / self.sample_rate as f64;
        ((self.segment_s / hop_s).round() as usize).max(4)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(Error::Config(format!("invalid bool {other:?} for key {key:?}"))),
    }
}

fn parse_channels(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = parse_list(value)?;
    if parts.len() != 3 {
        return Err(Error::Config("model.channels needs exactly 3 entries".into()));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid list entry {p:?}")))
        })
        .collect()
}
