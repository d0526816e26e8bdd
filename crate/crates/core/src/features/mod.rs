//! STFT-based features: log-mel, PCEN, MFCC, delta-MFCC and the stacked
//! PCEN + delta-MFCC model input.
//!
//! Every extractor is a pure function of the clip and parameters. The
//! [`registry`] exposes the extractor family by name for the `features` CLI
//! subcommand.

mod delta;
mod mel;
mod mfcc;
mod pcen;
mod stft;

pub use delta::delta;
pub use mel::{apply_filterbank, log_compress, mel_center_frequencies, mel_filterbank};
pub use mfcc::{dct_matrix, mfcc};
pub use pcen::{pcen, PcenParams};
pub use stft::{padded_hann, reflect_pad, stft_power};

use ndarray::{s, Array2};

use crate::dataio::AudioClip;
use crate::{Error, Result};

/// STFT / mel analysis parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.win_length || self.win_length > self.n_fft {
            return Err(Error::Config(format!(
                "require 0 < hop ({}) <= win ({}) <= n_fft ({})",
                self.hop_length, self.win_length, self.n_fft
            )));
        }
        if self.n_mels == 0 || self.n_mels > self.n_fft / 2 + 1 {
            return Err(Error::Config(format!(
                "n_mels ({}) must lie in [1, n_fft/2 + 1]",
                self.n_mels
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Seconds between consecutive frames.
    pub fn hop_s(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }
}

/// What a feature matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    LinearMel,
    LogMel,
    Pcen,
    Mfcc,
    DeltaMfcc,
    Stacked,
}

impl FeatureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureKind::LinearMel => "mel",
            FeatureKind::LogMel => "logmel",
            FeatureKind::Pcen => "pcen",
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::DeltaMfcc => "delta_mfcc",
            FeatureKind::Stacked => "stacked",
        }
    }
}

/// A `frames x bins` feature matrix with its frame timing.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub kind: FeatureKind,
    /// Seconds per frame hop.
    pub hop_s: f64,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    fn checked(self) -> Result<Self> {
        if self.data.nrows() == 0 {
            return Err(Error::EmptyInput("feature matrix has no frames".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{} features contain non-finite entries",
                self.kind.as_str()
            )));
        }
        Ok(self)
    }
}

/// Everything needed to compute any feature kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureParams {
    pub stft: StftConfig,
    pub pcen: PcenParams,
    /// MFCC coefficients computed from the log-mel spectrum.
    pub mfcc_coeffs: usize,
    /// Regression window of the delta features, in frames (odd).
    pub delta_width: usize,
}

impl FeatureParams {
    /// Bin count of the stacked input: PCEN mels plus delta-MFCCs with
    /// coefficient 0 dropped.
    pub fn stacked_bins(&self) -> usize {
        self.stft.n_mels + self.mfcc_coeffs - 1
    }
}

/// Linear mel power spectrogram (input to PCEN and to negative mining).
pub fn linear_mel(clip: &AudioClip, p: &FeatureParams) -> Result<FeatureMatrix> {
    let power = stft_power(clip, &p.stft)?;
    let bank = mel_filterbank(&p.stft)?;
    FeatureMatrix {
        data: apply_filterbank(&power, &bank)?,
        kind: FeatureKind::LinearMel,
        hop_s: p.stft.hop_s(),
    }
    .checked()
}

pub fn log_mel(clip: &AudioClip, p: &FeatureParams) -> Result<FeatureMatrix> {
    let mel = linear_mel(clip, p)?;
    FeatureMatrix {
        data: log_compress(&mel.data),
        kind: FeatureKind::LogMel,
        hop_s: mel.hop_s,
    }
    .checked()
}

pub fn pcen_feature(clip: &AudioClip, p: &FeatureParams) -> Result<FeatureMatrix> {
    let mel = linear_mel(clip, p)?;
    FeatureMatrix {
        data: pcen(&mel.data, &p.pcen)?,
        kind: FeatureKind::Pcen,
        hop_s: mel.hop_s,
    }
    .checked()
}

pub fn mfcc_feature(clip: &AudioClip, p: &FeatureParams) -> Result<FeatureMatrix> {
    let lm = log_mel(clip, p)?;
    FeatureMatrix {
        data: mfcc(&lm.data, p.mfcc_coeffs)?,
        kind: FeatureKind::Mfcc,
        hop_s: lm.hop_s,
    }
    .checked()
}

/// Delta of the MFCCs with coefficient 0 (the energy term) dropped.
pub fn delta_mfcc_feature(clip: &AudioClip, p: &FeatureParams) -> Result<FeatureMatrix> {
    let c = mfcc_feature(clip, p)?;
    if c.bins() < 2 {
        return Err(Error::Config("delta-MFCC needs at least 2 coefficients".into()));
    }
    let without_c0 = c.data.slice(s![.., 1..]).to_owned();
    FeatureMatrix {
        data: delta(&without_c0, p.delta_width)?,
        kind: FeatureKind::DeltaMfcc,
        hop_s: c.hop_s,
    }
    .checked()
}

/// The model input: PCEN and delta-MFCC concatenated along the bin axis,
/// each block z-scored with statistics computed over the whole file.
pub fn stacked_input(clip: &AudioClip, p: &FeatureParams) -> Result<FeatureMatrix> {
    let pcen_block = pcen_feature(clip, p)?;
    let delta_block = delta_mfcc_feature(clip, p)?;
    debug_assert_eq!(pcen_block.frames(), delta_block.frames());

    let a = zscore(&pcen_block.data);
    let b = zscore(&delta_block.data);
    let frames = a.nrows();
    let bins = a.ncols() + b.ncols();
    let mut data = Array2::<f64>::zeros((frames, bins));
    data.slice_mut(s![.., ..a.ncols()]).assign(&a);
    data.slice_mut(s![.., a.ncols()..]).assign(&b);
    FeatureMatrix { data, kind: FeatureKind::Stacked, hop_s: pcen_block.hop_s }.checked()
}

/// Z-score over all entries of a block; degenerate blocks map to zero.
fn zscore(x: &Array2<f64>) -> Array2<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    x.mapv(|v| (v - mean) / std)
}

/// One entry of the feature-extractor family.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> &'static str;
    fn extract(&self, clip: &AudioClip, params: &FeatureParams) -> Result<FeatureMatrix>;
}

macro_rules! extractor {
    ($ty:ident, $name:expr, $fun:path) => {
        struct $ty;
        impl FeatureExtractor for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn extract(&self, clip: &AudioClip, params: &FeatureParams) -> Result<FeatureMatrix> {
                $fun(clip, params)
            }
        }
    };
}

extractor!(LinearMelExtractor, "mel", linear_mel);
extractor!(LogMelExtractor, "logmel", log_mel);
extractor!(PcenExtractor, "pcen", pcen_feature);
extractor!(MfccExtractor, "mfcc", mfcc_feature);
extractor!(DeltaMfccExtractor, "delta_mfcc", delta_mfcc_feature);
extractor!(StackedExtractor, "stacked", stacked_input);

/// All registered feature extractors.
pub fn registry() -> &'static [&'static dyn FeatureExtractor] {
    static EXTRACTORS: [&dyn FeatureExtractor; 6] = [
        &LinearMelExtractor,
        &LogMelExtractor,
        &PcenExtractor,
        &MfccExtractor,
        &DeltaMfccExtractor,
        &StackedExtractor,
    ];
    &EXTRACTORS
}

/// Look up an extractor by its registered name.
pub fn extractor(name: &str) -> Result<&'static dyn FeatureExtractor> {
    registry()
        .iter()
        .copied()
        .find(|e| e.name() == name)
        .ok_or_else(|| {
            let known: Vec<_> = registry().iter().map(|e| e.name()).collect();
            Error::Config(format!("unknown feature kind {name:?}; known: {}", known.join(", ")))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn params() -> FeatureParams {
        FeatureParams {
            stft: StftConfig {
                win_length: 1024,
                hop_length: 256,
                n_fft: 1024,
                n_mels: 128,
                sample_rate: 22050,
            },
            pcen: PcenParams::default(),
            mfcc_coeffs: 32,
            delta_width: 9,
        }
    }

    fn tone_clip(freq: f64, n: usize) -> AudioClip {
        let samples = (0..n)
            .map(|i| (0.6 * (TAU * freq * i as f64 / 22050.0).sin()) as f32)
            .collect();
        AudioClip::new(samples, 22050).unwrap()
    }

    #[test]
    fn stacked_bin_arithmetic() {
        let p = params();
        let clip = tone_clip(700.0, 22050);
        let st = stacked_input(&clip, &p).unwrap();
        assert_eq!(st.bins(), 128 + 31);
        assert_eq!(st.bins(), p.stacked_bins());
    }

    #[test]
    fn stacked_parts_share_frame_count() {
        let p = params();
        let clip = tone_clip(500.0, 11025);
        let a = pcen_feature(&clip, &p).unwrap();
        let b = delta_mfcc_feature(&clip, &p).unwrap();
        let st = stacked_input(&clip, &p).unwrap();
        assert_eq!(a.frames(), b.frames());
        assert_eq!(st.frames(), a.frames());
    }

    #[test]
    fn stacked_blocks_are_normalized() {
        let p = params();
        let clip = tone_clip(1200.0, 22050);
        let st = stacked_input(&clip, &p).unwrap();
        for block in [st.data.slice(s![.., ..128]), st.data.slice(s![.., 128..])] {
            let n = block.len() as f64;
            let mean = block.sum() / n;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        }
    }

    #[test]
    fn features_are_pure() {
        let p = params();
        let clip = tone_clip(900.0, 8192);
        let a = stacked_input(&clip, &p).unwrap();
        let b = stacked_input(&clip, &p).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn hop_shift_moves_interior_frames() {
        // Shifting the input by one hop shifts interior frames by one.
        // Checked on memoryless features (log-mel) and locally-windowed ones
        // (delta-MFCC); PCEN's causal IIR only converges to this asymptotically.
        let p = params();
        let freq = 620.0;
        let n = 10240;
        let hop = p.stft.hop_length;
        let long = tone_clip(freq, n + hop);
        let shifted = AudioClip::new(long.samples[hop..].to_vec(), 22050).unwrap();
        let base = AudioClip::new(long.samples[..n].to_vec(), 22050).unwrap();

        for extract in [log_mel, delta_mfcc_feature] {
            let fa = extract(&base, &p).unwrap();
            let fb = extract(&shifted, &p).unwrap();
            // Skip frames whose analysis context touches either boundary.
            let guard = p.stft.n_fft / p.stft.hop_length + p.delta_width;
            for t in guard..fb.frames() - guard {
                for b in 0..fa.bins() {
                    let x = fa.data[[t + 1, b]];
                    let y = fb.data[[t, b]];
                    assert!(
                        (x - y).abs() <= 1e-9 * x.abs().max(1.0),
                        "frame {t} bin {b}: {x} vs {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn registry_knows_every_kind() {
        for name in ["mel", "logmel", "pcen", "mfcc", "delta_mfcc", "stacked"] {
            assert_eq!(extractor(name).unwrap().name(), name);
        }
        assert!(extractor("nope").is_err());
    }
}
