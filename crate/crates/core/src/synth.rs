//! Synthetic tone-over-noise dataset generation.
//!
//! Each class is a harmonic tone burst with a distinct fundamental, placed
//! over pink noise at a configurable SNR. Ground truth is exact by
//! construction; generation is byte-reproducible from the seed. This is the
//! desk-scale stand-in for a real bioacoustics corpus.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::rng::substream;
use crate::{Error, Result};

/// One synthetic sound class.
#[derive(Debug, Clone)]
pub struct SynthClass {
    pub name: String,
    pub f0_hz: f64,
    /// Uniform range of event (pulse) durations in seconds.
    pub dur_range: (f64, f64),
    /// Number of annotated events per file. With `pulses > 1` the events
    /// come in groups separated by short intra-group gaps.
    pub events_per_file: usize,
    /// Tone level over the noise floor, in dB.
    pub snr_db: f64,
    /// Pulses per group; each pulse is its own annotated event.
    pub pulses: usize,
    /// Gap between pulses of one group, in seconds.
    pub pulse_gap: (f64, f64),
    /// Width range of a silent dip carved into the middle of each event
    /// (0 disables). The event stays a single annotated event.
    pub trough_s: (f64, f64),
}

impl SynthClass {
    pub fn simple(name: impl Into<String>, f0_hz: f64, dur_range: (f64, f64), events_per_file: usize, snr_db: f64) -> Self {
        SynthClass {
            name: name.into(),
            f0_hz,
            dur_range,
            events_per_file,
            snr_db,
            pulses: 1,
            pulse_gap: (0.1, 0.14),
            trough_s: (0.0, 0.0),
        }
    }
}

/// The full dataset recipe.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub train_classes: Vec<SynthClass>,
    pub eval_classes: Vec<SynthClass>,
    pub file_duration_s: f64,
    pub sample_rate: u32,
    /// RMS of the pink noise bed; 0 gives tone-over-silence files.
    pub noise_rms: f64,
}

#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub train_files: Vec<PathBuf>,
    pub eval_files: Vec<PathBuf>,
}

impl SynthSpec {
    /// The 12-train / 4-eval benchmark recipe.
    ///
    /// Two evaluation classes use tightly paired pulses (coarse query
    /// windows bridge the pair, which the split stage must undo) and two use
    /// long calls with a silent mid-call dip (the detector fragments them,
    /// which the merge stage must undo).
    pub fn default_benchmark() -> Self {
        let train_f0 = [
            380.0, 540.0, 760.0, 980.0, 1240.0, 1560.0, 1900.0, 2300.0, 2750.0, 3250.0, 3800.0,
            4400.0,
        ];
        let train_classes = train_f0
            .iter()
            .enumerate()
            .map(|(i, &f0)| SynthClass::simple(format!("train{i:02}"), f0, (0.25, 0.5), 14, 25.0))
            .collect();
        let paired = |name: &str, f0: f64| SynthClass {
            name: name.into(),
            f0_hz: f0,
            dur_range: (0.42, 0.5),
            events_per_file: 18,
            snr_db: 28.0,
            pulses: 2,
            pulse_gap: (0.07, 0.09),
            trough_s: (0.0, 0.0),
        };

        let dipped = |name: &str, f0: f64| SynthClass {
            name: name.into(),
            f0_hz: f0,
            dur_range: (1.3, 1.5),
            events_per_file: 14,
            snr_db: 28.0,
            pulses: 1,
            pulse_gap: (0.1, 0.14),
            trough_s: (0.5, 0.6),
        };
        SynthSpec {
            train_classes,
            eval_classes: vec![
                paired("eval00", 460.0),
                dipped("eval01", 870.0),
                paired("eval02", 1720.0),
                dipped("eval03", 2980.0),
            ],
            file_duration_s: 60.0,
            sample_rate: 22050,
            noise_rms: 0.01,
        }
    }

    /// Parse a recipe CSV: `name,f0_hz,dur_min,dur_max,events,snr_db,pulses,split`
    /// where `split` is `train` or `eval`. Lines of the form `key = value`
    /// before the rows set `duration`, `sample_rate` or `noise_rms`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = SynthSpec {
            train_classes: Vec::new(),
            eval_classes: Vec::new(),
            file_duration_s: 60.0,
            sample_rate: 22050,
            noise_rms: 0.01,
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("name,") {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "duration" => {
                        spec.file_duration_s = value.parse().map_err(|_| {
                            Error::Format(format!("{}:{}: bad duration", path.display(), i + 1))
                        })?
                    }
                    "sample_rate" => {
                        spec.sample_rate = value.parse().map_err(|_| {
                            Error::Format(format!("{}:{}: bad sample_rate", path.display(), i + 1))
                        })?
                    }
                    "noise_rms" => {
                        spec.noise_rms = value.parse().map_err(|_| {
                            Error::Format(format!("{}:{}: bad noise_rms", path.display(), i + 1))
                        })?
                    }
                    other => {
                        return Err(Error::Format(format!(
                            "{}:{}: unknown directive {other:?}",
                            path.display(),
                            i + 1
                        )))
                    }
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 8 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 8 columns, got {}",
                    path.display(),
                    i + 1,
                    parts.len()
                )));
            }
            let parse_f = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|_| {
                    Error::Format(format!("{}:{}: bad {what} {s:?}", path.display(), i + 1))
                })
            };
            let mut class = SynthClass::simple(
                parts[0],
                parse_f(parts[1], "f0")?,
                (parse_f(parts[2], "dur_min")?, parse_f(parts[3], "dur_max")?),
                parse_f(parts[4], "events")? as usize,
                parse_f(parts[5], "snr")?,
            );
            class.pulses = (parse_f(parts[6], "pulses")? as usize).max(1);
            match parts[7] {
                "train" => spec.train_classes.push(class),
                "eval" => spec.eval_classes.push(class),
                other => {
                    return Err(Error::Format(format!(
                        "{}:{}: split must be train or eval, got {other:?}",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        if spec.train_classes.is_empty() && spec.eval_classes.is_empty() {
            return Err(Error::Format(format!("{}: no classes", path.display())));
        }
        Ok(spec)
    }
}

/// Generate WAVs and annotation CSVs under `out_dir/train` and `out_dir/eval`.
pub fn make_synthetic_dataset(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<SynthPaths> {
    let train_dir = out_dir.join("train");
    let eval_dir = out_dir.join("eval");
    std::fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;

    let mut train_files = Vec::new();
    for class in &spec.train_classes {
        train_files.push(generate_class_file(spec, class, seed, &train_dir)?);
    }
    let mut eval_files = Vec::new();
    for class in &spec.eval_classes {
        eval_files.push(generate_class_file(spec, class, seed, &eval_dir)?);
    }
    Ok(SynthPaths { train_dir, eval_dir, train_files, eval_files })
}

fn generate_class_file(
    spec: &SynthSpec,
    class: &SynthClass,
    seed: u64,
    dir: &Path,
) -> Result<PathBuf> {
    let rate = spec.sample_rate;
    let n = (spec.file_duration_s * rate as f64).round() as usize;
    let mut rng = substream(seed, &format!("synth/{}", class.name));

    // noise bed
    let mut samples = if spec.noise_rms > 0.0 {
        pink_noise(n, spec.noise_rms, &mut rng)
    } else {
        vec![0.0f64; n]
    };

    // tone level: snr_db over the noise floor (or a fixed level on silence)
    let amp = if spec.noise_rms > 0.0 {
        (spec.noise_rms * 10f64.powf(class.snr_db / 20.0)).min(0.45)
    } else {
        0.3
    };

    // place event groups left to right
    let mut events: Vec<(f64, f64)> = Vec::new();
    let mut t = 0.8 + rng.random_range(0.0..0.4);
    while events.len() < class.events_per_file {
        let mut group_end = t;
        let mut group = Vec::new();
        for p in 0..class.pulses {
            if events.len() + group.len() >= class.events_per_file {
                break;
            }
            let dur = rng.random_range(class.dur_range.0..=class.dur_range.1);
            let start = if p == 0 {
                t
            } else {
                group_end + rng.random_range(class.pulse_gap.0..class.pulse_gap.1)
            };
            let end = start + dur;
            if end + 0.5 > spec.file_duration_s {
                break;
            }
            group.push((start, end));
            group_end = end;
        }
        if group.is_empty() {
            break;
        }
        for &(s, e) in &group {
            let trough = if class.trough_s.1 > 0.0 {
                Some(rng.random_range(class.trough_s.0..=class.trough_s.1))
            } else {
                None
            };
            render_tone(&mut samples, rate, class.f0_hz, amp, s, e, trough);
            events.push((s, e));
        }
        t = group_end + rng.random_range(0.8..1.6);
        if t + class.dur_range.1 + 0.6 > spec.file_duration_s {
            break;
        }
    }
    if events.is_empty() {
        return Err(Error::Config(format!(
            "class {}: file too short for any event",
            class.name
        )));
    }

    // write wav
    let wav_name = format!("{}.wav", class.name);
    let wav_path = dir.join(&wav_name);
    let spec_wav = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(&wav_path, spec_wav).map_err(|e| Error::Format(e.to_string()))?;
    for &s in &samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Format(e.to_string()))?;

    // write annotation csv (full ground truth, one class column)
    let csv_path = dir.join(format!("{}.csv", class.name));
    let mut text = format!("Audiofilename,Starttime,Endtime,{}\n", class.name);
    for &(s, e) in &events {
        text.push_str(&format!("{wav_name},{s:.4},{e:.4},POS\n"));
    }
    std::fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))?;
    Ok(wav_path)
}

/// Harmonic tone with 10 ms Hann edge ramps added into `samples`; an
/// optional Hann-shaped silent trough is carved out of the event center.
fn render_tone(
    samples: &mut [f64],
    rate: u32,
    f0: f64,
    amp: f64,
    start_s: f64,
    end_s: f64,
    trough_s: Option<f64>,
) {
    let nyquist_cap = 0.45 * rate as f64;
    let harmonics: Vec<(f64, f64)> = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25)]
        .iter()
        .filter(|(mult, _)| f0 * mult < nyquist_cap)
        .map(|&(m, a)| (m, a))
        .collect();
    let norm: f64 = harmonics.iter().map(|&(_, a)| a).sum();
    let start = (start_s * rate as f64).round() as usize;
    let end = ((end_s * rate as f64).round() as usize).min(samples.len());
    let ramp = (0.01 * rate as f64).round() as usize;
    let center = (start + end) / 2;
    let trough_half = trough_s.map(|w| (0.5 * w * rate as f64).round() as usize);
    for (i, slot) in samples.iter_mut().enumerate().take(end).skip(start) {
        let k = i - start;
        let tail = end - 1 - i;
        let mut env = if k < ramp {
            0.5 * (1.0 - (std::f64::consts::PI * k as f64 / ramp as f64).cos())
        } else if tail < ramp {
            0.5 * (1.0 - (std::f64::consts::PI * tail as f64 / ramp as f64).cos())
        } else {
            1.0
        };
        if let Some(half) = trough_half {
            let dist = i.abs_diff(center);
            if dist < half {
                // raised-cosine dip: silent at the center, smooth edges
                let x = dist as f64 / half as f64;
                env *= 0.5 * (1.0 - (std::f64::consts::PI * x).cos());
            }
        }
        let t = i as f64 / rate as f64;
        let mut v = 0.0;
        for &(mult, a) in &harmonics {
            v += a * (std::f64::consts::TAU * f0 * mult * t).sin();
        }
        *slot += amp * env * v / norm;
    }
}

/// Paul Kellet's pink noise filter over white noise, scaled to `rms`.
fn pink_noise(n: usize, rms: f64, rng: &mut impl Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let white: f64 = rng.random_range(-1.0..1.0);
        b0 = 0.99765 * b0 + white * 0.0990460;
        b1 = 0.96300 * b1 + white * 0.2965164;
        b2 = 0.57000 * b2 + white * 1.0526913;
        out.push(b0 + b1 + b2 + white * 0.1848);
    }
    let actual_rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if actual_rms > 0.0 {
        let scale = rms / actual_rms;
        for v in &mut out {
            *v *= scale;
        }
    }
    out
}
