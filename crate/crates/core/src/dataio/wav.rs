//! PCM WAV decoding.

use std::path::Path;

use hound::{SampleFormat, WavReader};

use super::AudioClip;
use crate::{Error, Result};

/// Decode a PCM WAV file, mix to mono and resample to `target_rate`.
///
/// Supports 8/16/24/32-bit integer and 32-bit float encodings. Multi-channel
/// input is averaged to mono. Float files whose peak exceeds 1 are scaled
/// down so the decoded buffer stays within [-1, 1].
pub fn load_audio(path: &Path, target_rate: u32) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1i64 << (bits - 1)) as f32;
            decode_all::<i32>(reader, path)?
                .into_iter()
                .map(|s| s as f32 * scale)
                .collect()
        }
        (SampleFormat::Float, 32) => decode_all::<f32>(reader, path)?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported encoding {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };

    if interleaved.is_empty() {
        return Err(Error::EmptyInput(format!("{}: zero-length audio", path.display())));
    }
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Format(format!(
            "{}: sample count not divisible by channel count",
            path.display()
        )));
    }

    let frames = interleaved.len() / channels;
    let mut mono = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0f64;
        for c in 0..channels {
            acc += f64::from(interleaved[f * channels + c]);
        }
        mono.push((acc / channels as f64) as f32);
    }

    let peak = mono.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
    if peak > 1.0 + 1e-6 {
        let inv = 1.0 / peak;
        for x in &mut mono {
            *x *= inv;
        }
    }

    AudioClip::new(mono, spec.sample_rate)?.resampled(target_rate)
}

fn decode_all<S: hound::Sample>(
    reader: WavReader<std::io::BufReader<std::fs::File>>,
    path: &Path,
) -> Result<Vec<S>> {
    reader
        .into_samples::<S>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
