//! Audio decoding, resampling and annotation CSV handling.

mod annotations;
mod resample;
mod wav;

pub use annotations::{
    parse_annotation_table, parse_annotations, write_predictions, AnnotationTable,
};
pub use resample::resample;
pub use wav::load_audio;

use crate::{Error, Result};

/// Mono waveform with its sample rate.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Resample to `target_rate`. Identity rates return the buffer unchanged.
    pub fn resampled(&self, target_rate: u32) -> Result<AudioClip> {
        if target_rate == 0 {
            return Err(Error::Validation("target rate must be positive".into()));
        }
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        let out = resample(&self.samples, self.sample_rate, target_rate);
        AudioClip::new(out, target_rate)
    }
}

/// Polarity of an annotated region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Pos,
    Neg,
    Unk,
}

impl Polarity {
    pub fn parse(token: &str) -> Result<Self> {
        match token.trim() {
            "POS" => Ok(Polarity::Pos),
            "NEG" => Ok(Polarity::Neg),
            "UNK" => Ok(Polarity::Unk),
            other => Err(Error::Format(format!(
                "polarity must be POS, NEG or UNK, got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neg => "NEG",
            Polarity::Unk => "UNK",
        }
    }
}

/// One annotated event in one audio file.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationEvent {
    pub file_id: String,
    pub onset_s: f64,
    pub offset_s: f64,
    pub polarity: Polarity,
}

impl AnnotationEvent {
    pub fn new(file_id: impl Into<String>, onset_s: f64, offset_s: f64, polarity: Polarity) -> Result<Self> {
        if onset_s < 0.0 {
            return Err(Error::Validation(format!("onset {onset_s} < 0")));
        }
        if offset_s <= onset_s {
            return Err(Error::Validation(format!(
                "offset {offset_s} must exceed onset {onset_s}"
            )));
        }
        Ok(AnnotationEvent { file_id: file_id.into(), onset_s, offset_s, polarity })
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// A decoded clip plus the annotations of one sound class.
#[derive(Debug, Clone)]
pub struct LabeledFile {
    pub clip: AudioClip,
    pub events: Vec<AnnotationEvent>,
    pub class_name: String,
}

impl LabeledFile {
    /// Events are sorted by onset; events past the clip end are rejected.
    pub fn new(clip: AudioClip, mut events: Vec<AnnotationEvent>, class_name: impl Into<String>) -> Result<Self> {
        let dur = clip.duration_s();
        for ev in &events {
            if ev.offset_s > dur + 1e-6 {
                return Err(Error::Validation(format!(
                    "event [{:.3}, {:.3}) extends past clip duration {:.3}",
                    ev.onset_s, ev.offset_s, dur
                )));
            }
        }
        events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        Ok(LabeledFile { clip, events, class_name: class_name.into() })
    }

    pub fn events_with(&self, polarity: Polarity) -> impl Iterator<Item = &AnnotationEvent> {
        self.events.iter().filter(move |e| e.polarity == polarity)
    }
}
