//! Per-channel energy normalization.

use ndarray::Array2;

use crate::{Error, Result};

/// PCEN parameters. Defaults follow the common literature values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcenParams {
    /// Smoothing coefficient of the per-bin IIR energy tracker.
    pub s: f64,
    /// Gain normalization strength.
    pub alpha: f64,
    /// Bias of the dynamic range compression.
    pub delta: f64,
    /// Compression exponent.
    pub r: f64,
    /// Stabilizer added to the smoothed energy.
    pub eps: f64,
}

impl Default for PcenParams {
    fn default() -> Self {
        PcenParams { s: 0.025, alpha: 0.98, delta: 2.0, r: 0.5, eps: 1e-6 }
    }
}

/// Apply PCEN to a non-negative mel power spectrogram (`frames x bins`).
///
/// Per bin: `M[t] = (1 - s) * M[t-1] + s * E[t]` with `M[0] = E[0]`, then
/// `out = (E / (eps + M)^alpha + delta)^r - delta^r`.
pub fn pcen(mel_power: &Array2<f64>, params: &PcenParams) -> Result<Array2<f64>> {
    if mel_power.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(
            "PCEN input must be finite and non-negative".into(),
        ));
    }
    let (frames, bins) = mel_power.dim();
    let delta_r = params.delta.powf(params.r);
    let mut out = Array2::<f64>::zeros((frames, bins));
    let mut smooth = vec![0.0f64; bins];
    for t in 0..frames {
        let row = mel_power.row(t);
        let mut out_row = out.row_mut(t);
        for b in 0..bins {
            smooth[b] = if t == 0 {
                row[b]
            } else {
                (1.0 - params.s) * smooth[b] + params.s * row[b]
            };
            let gain = (params.eps + smooth[b]).powf(params.alpha);
            out_row[b] = (row[b] / gain + params.delta).powf(params.r) - delta_r;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_signal_matches_closed_form() {
        // alpha = 1, eps -> 0: output is (1 + delta)^r - delta^r for all t.
        let params = PcenParams { s: 0.05, alpha: 1.0, delta: 2.0, r: 0.5, eps: 1e-12 };
        let mel = Array2::from_elem((60, 4), 3.7);
        let out = pcen(&mel, &params).unwrap();
        let expected = (1.0f64 + 2.0).powf(0.5) - 2.0f64.powf(0.5);
        for &v in out.iter() {
            assert!((v - expected).abs() < 1e-6, "got {v}, want {expected}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mel = Array2::<f64>::zeros((10, 8));
        let out = pcen(&mel, &PcenParams::default()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gain_invariance_in_steady_state() {
        // alpha = 1: scaling the input by 10 changes the steady state < 1%.
        let params = PcenParams { alpha: 1.0, ..PcenParams::default() };
        let frames = 400;
        let mel = Array2::from_elem((frames, 3), 0.8);
        let scaled = mel.mapv(|v| v * 10.0);
        let a = pcen(&mel, &params).unwrap();
        let b = pcen(&scaled, &params).unwrap();
        for t in 200..frames {
            for c in 0..3 {
                let rel = (a[[t, c]] - b[[t, c]]).abs() / a[[t, c]].abs().max(1e-12);
                assert!(rel < 0.01, "frame {t}: {rel}");
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut mel = Array2::<f64>::zeros((4, 2));
        mel[[1, 1]] = f64::NAN;
        assert!(matches!(
            pcen(&mel, &PcenParams::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn outputs_stay_finite_and_nonnegative() {
        let mut mel = Array2::<f64>::zeros((50, 4));
        for t in 0..50 {
            for b in 0..4 {
                mel[[t, b]] = ((t * 7 + b * 13) % 11) as f64 * 1e3;
            }
        }
        let out = pcen(&mel, &PcenParams::default()).unwrap();
        assert!(out.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
