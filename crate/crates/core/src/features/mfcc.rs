//! Mel-frequency cepstral coefficients via an orthonormal DCT-II.

use ndarray::Array2;

use crate::{Error, Result};

/// DCT-II matrix with orthonormal scaling, `n_out x n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n_out, n_in));
    let norm0 = (1.0 / n_in as f64).sqrt();
    let norm = (2.0 / n_in as f64).sqrt();
    for k in 0..n_out {
        let scale = if k == 0 { norm0 } else { norm };
        for n in 0..n_in {
            m[[k, n]] =
                scale * (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / (2 * n_in) as f64).cos();
        }
    }
    m
}

/// First `n_coeff` MFCCs of a log-mel spectrogram (`frames x n_mels`).
pub fn mfcc(log_mel: &Array2<f64>, n_coeff: usize) -> Result<Array2<f64>> {
    let n_mels = log_mel.ncols();
    if n_coeff > n_mels {
        return Err(Error::Config(format!(
            "n_coeff {n_coeff} exceeds mel bin count {n_mels}"
        )));
    }
    let dct = dct_matrix(n_coeff, n_mels);
    Ok(log_mel.dot(&dct.t()))
}
