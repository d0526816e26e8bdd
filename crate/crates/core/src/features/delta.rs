//! Temporal delta (local regression slope) features.

use ndarray::Array2;

use crate::{Error, Result};

/// Per-bin linear-regression slope over a centered window of `width` frames,
/// with edge-replicated padding:
/// `delta[t] = sum_k k * (x[t+k] - x[t-k]) / (2 * sum_k k^2)`, k = 1..(width-1)/2.
pub fn delta(feat: &Array2<f64>, width: usize) -> Result<Array2<f64>> {
    if width < 3 || width.is_multiple_of(2) {
        return Err(Error::Config(format!("delta width must be odd and >= 3, got {width}")));
    }
    let (frames, bins) = feat.dim();
    let half = (width - 1) / 2;
    let denom: f64 = 2.0 * (1..=half).map(|k| (k * k) as f64).sum::<f64>();

    let clamp = |t: isize| -> usize { t.clamp(0, frames as isize - 1) as usize };
    let mut out = Array2::<f64>::zeros((frames, bins));
    for t in 0..frames {
        for k in 1..=half {
            let fwd = feat.row(clamp(t as isize + k as isize));
            let bwd = feat.row(clamp(t as isize - k as isize));
            let w = k as f64;
            let mut row = out.row_mut(t);
            for b in 0..bins {
                row[b] += w * (fwd[b] - bwd[b]);
            }
        }
        out.row_mut(t).mapv_inplace(|v| v / denom);
    }
    Ok(out)
}
