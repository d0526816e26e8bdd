//! Short-time Fourier transform power spectrogram.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::StftConfig;
use crate::dataio::AudioClip;
use crate::{Error, Result};

/// Hann-windowed, centered power spectrogram.
///
/// The signal is reflect-padded by `n_fft / 2` on both sides, so frame `t`
/// is centered on sample `t * hop_length` and the frame count is
/// `1 + floor(len / hop_length)`. Output is `frames x (n_fft/2 + 1)` with
/// raw `|X_k|^2` values (no normalization).
pub fn stft_power(clip: &AudioClip, cfg: &StftConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = clip.samples.len();
    if n < cfg.win_length {
        return Err(Error::EmptyInput(format!(
            "clip of {n} samples is shorter than one window ({})",
            cfg.win_length
        )));
    }

    let window = padded_hann(cfg.win_length, cfg.n_fft);
    let half = cfg.n_fft / 2;
    let padded = reflect_pad(&clip.samples, half);
    let frames = 1 + n / cfg.hop_length;
    let bins = cfg.n_fft / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut out = Array2::<f64>::zeros((frames, bins));

    for t in 0..frames {
        let start = t * cfg.hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let mut row = out.row_mut(t);
        for k in 0..bins {
            row[k] = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

/// Periodic Hann window of `win` samples, zero-padded (centered) to `n_fft`.
pub fn padded_hann(win: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let offset = (n_fft - win) / 2;
    for i in 0..win {
        let x = std::f64::consts::TAU * i as f64 / win as f64;
        w[offset + i] = 0.5 * (1.0 - x.cos());
    }
    w
}

/// Reflect-pad without repeating the edge sample (librosa-style).
pub fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    assert!(n >= 2, "reflect padding needs at least 2 samples");
    let period = 2 * (n - 1);
    let reflect = |j: isize| -> usize {
        let mut m = j.rem_euclid(period);
        if m >= n {
            m = period - m;
        }
        m as usize
    };
    (-(pad as isize)..n + pad as isize)
        .map(|j| f64::from(x[reflect(j)]))
        .collect()
}
