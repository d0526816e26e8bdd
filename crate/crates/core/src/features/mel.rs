//! Mel filterbank and log-mel spectrogram.

use ndarray::Array2;

use super::StftConfig;
use crate::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

/// Triangular mel filterbank, `n_mels x (n_fft/2 + 1)`, spanning 0 Hz to
/// Nyquist on the Slaney mel scale, peak value 1 per filter.
pub fn mel_filterbank(cfg: &StftConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let bins = cfg.n_fft / 2 + 1;
    let nyquist = cfg.sample_rate as f64 / 2.0;

    // n_mels + 2 corner frequencies, equally spaced in mel.
    let mel_max = hz_to_mel(nyquist);
    let corners: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    let mut bank = Array2::<f64>::zeros((cfg.n_mels, bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (corners[m], corners[m + 1], corners[m + 2]);
        let mut row = bank.row_mut(m);
        let mut any = false;
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            row[k] = w;
            any |= w > 0.0;
        }
        if !any {
            return Err(Error::Config(format!(
                "mel filter {m} is empty; n_mels = {} is too large for n_fft = {}",
                cfg.n_mels, cfg.n_fft
            )));
        }
    }
    Ok(bank)
}

/// Center (peak) frequency of each filter in Hz.
pub fn mel_center_frequencies(cfg: &StftConfig) -> Vec<f64> {
    let mel_max = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Apply the filterbank: `frames x bins` power -> `frames x n_mels`.
pub fn apply_filterbank(power: &Array2<f64>, bank: &Array2<f64>) -> Result<Array2<f64>> {
    if power.ncols() != bank.ncols() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, filterbank expects {}",
            power.ncols(),
            bank.ncols()
        )));
    }
    Ok(power.dot(&bank.t()))
}

/// Natural log with a floor, elementwise.
pub fn log_compress(mel: &Array2<f64>) -> Array2<f64> {
    mel.mapv(|v| v.max(LOG_FLOOR).ln())
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}
