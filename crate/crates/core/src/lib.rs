//! Few-shot bioacoustic sound event detection.
//!
//! Given an audio recording and K labeled examples of a novel sound class,
//! this crate detects the onset and offset of further occurrences of that
//! class. The pipeline:
//!
//! - [`dataio`] — WAV decoding, resampling, annotation CSV parsing/writing
//! - [`features`] — STFT, mel filterbank, PCEN, MFCC, delta features and the
//!   stacked PCEN + delta-MFCC model input
//! - [`nn`] — a small reverse-mode autodiff engine, the convolutional
//!   embedding network, SGD optimizer and checkpointing
//! - [`protolearn`] — episodic N-way-K-shot metric learning with negative
//!   segments and transductive episode sampling
//! - [`negmine`] — SISNR-based negative segment searching
//! - [`detect`] — adaptive windowing, prototype construction, probability
//!   scoring, thresholding and threshold ensembling
//! - [`postproc`] — split / merge / filter event post-processing
//! - [`score`] — event-based precision / recall / f-measure
//! - [`synth`] — synthetic tone-over-noise dataset generation for desk-scale
//!   benchmarks

pub mod config;
pub mod dataio;
pub mod dataset;
pub mod detect;
pub mod features;
pub mod hash;
pub mod negmine;
pub mod nn;
pub mod postproc;
pub mod protolearn;
pub mod rng;
pub mod score;
pub mod synth;

mod error;

pub use error::{Error, Result};
