//! Negative sample searching.
//!
//! When an evaluation file carries too little labeled negative audio, likely
//! negative frames are located by (1) weighting mel bins by how strongly
//! their energy changes between labeled events and their flanking context,
//! then (2) matching each weighted spectrogram column against the average
//! positive column with SISNR. Frames scoring below the minimum score of the
//! positive frames are treated as negative.

use ndarray::{Array1, Array2};

use crate::features::FeatureMatrix;
use crate::{Error, Result};

/// SISNR scores are clamped to this magnitude to stay finite and plottable.
pub const SISNR_CLAMP_DB: f64 = 60.0;

/// Per-mel-bin weights, min-max normalized into [0, 1].
#[derive(Debug, Clone)]
pub struct FreqWeights {
    pub w: Array1<f64>,
}

/// Per-frame SISNR against the positive template, plus the threshold derived
/// from the positive frames.
#[derive(Debug, Clone)]
pub struct MatchScoreTrack {
    pub scores: Vec<f64>,
    pub threshold_db: f64,
}

/// Half-open frame range `[start, end)`.
pub type FrameRange = (usize, usize);

/// Convert an event's second range to a generous frame range. Events at or
/// past the end of the file collapse to an empty range at `n_frames`.
pub fn event_frames(onset_s: f64, offset_s: f64, hop_s: f64, n_frames: usize) -> FrameRange {
    let start = (((onset_s / hop_s) + 1e-9).floor().max(0.0) as usize).min(n_frames);
    let end = ((offset_s / hop_s) - 1e-9).ceil().max(0.0) as usize;
    let end = end.max(start + 1).min(n_frames).max(start);
    (start, end)
}

/// Weight each mel bin by the mean absolute energy difference between the
/// positive events and the context flanking them.
///
/// The flanking context on each side of an event spans that event's own
/// duration, capped by `max_context_s`, and is truncated at file boundaries
/// and at neighboring events.
pub fn frequency_bin_weights(
    mel: &FeatureMatrix,
    pos_events: &[(f64, f64)],
    max_context_s: f64,
) -> Result<FreqWeights> {
    if pos_events.is_empty() {
        return Err(Error::Input("no positive events to weight against".into()));
    }
    let frames = mel.frames();
    let bins = mel.bins();
    let hop = mel.hop_s;

    let event_ranges: Vec<FrameRange> = pos_events
        .iter()
        .map(|&(on, off)| event_frames(on, off, hop, frames))
        .collect();

    let mut w_raw = Array1::<f64>::zeros(bins);
    let mut used_events = 0usize;
    for (i, &(on, off)) in pos_events.iter().enumerate() {
        let (ev_start, ev_end) = event_ranges[i];
        if ev_start >= ev_end {
            continue;
        }
        let context_s = (off - on).min(max_context_s);
        let ctx_frames = ((context_s / hop).round() as usize).max(1);

        // leading context, truncated at 0 and at the previous event's end
        let lead_floor = event_ranges[..i]
            .iter()
            .map(|&(_, e)| e)
            .max()
            .unwrap_or(0)
            .min(ev_start);
        let lead_start = ev_start.saturating_sub(ctx_frames).max(lead_floor);
        // trailing context, truncated at the file end and the next event
        let trail_cap = event_ranges[i + 1..]
            .iter()
            .map(|&(s, _)| s)
            .min()
            .unwrap_or(frames)
            .max(ev_end)
            .min(frames);
        let trail_end = (ev_end + ctx_frames).min(trail_cap);

        let mut ctx_cols: Vec<usize> = (lead_start..ev_start).collect();
        ctx_cols.extend(ev_end..trail_end);
        if ctx_cols.is_empty() {
            continue;
        }
        used_events += 1;

        let pos_mean = mean_columns(&mel.data, ev_start..ev_end);
        let ctx_mean = mean_columns_indexed(&mel.data, &ctx_cols);
        for b in 0..bins {
            w_raw[b] += (pos_mean[b] - ctx_mean[b]).abs();
        }
    }
    if used_events == 0 {
        return Err(Error::Input(
            "no positive event has any flanking context".into(),
        ));
    }
    w_raw.mapv_inplace(|v| v / used_events as f64);

    // min-max normalize; a constant raw vector carries no band information
    let min = w_raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = w_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = if max - min < 1e-12 {
        Array1::from_elem(bins, 1.0)
    } else {
        w_raw.mapv(|v| (v - min) / (max - min))
    };
    Ok(FreqWeights { w })
}

/// Scale-invariant signal-to-noise ratio in dB, clamped to +-60.
///
/// Both vectors are mean-centered, then the estimate is projected onto the
/// reference; the ratio of projection energy to residual energy is returned.
pub fn sisnr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} entries, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::Input("empty vectors".into()));
    }
    let center = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| x - m).collect()
    };
    let est = center(estimate);
    let refr = center(reference);
    let ref_energy: f64 = refr.iter().map(|v| v * v).sum();
    if ref_energy < 1e-24 {
        return Err(Error::Input("reference is zero after mean-centering".into()));
    }
    let dot: f64 = est.iter().zip(&refr).map(|(a, b)| a * b).sum();
    let scale = dot / ref_energy;
    let target_energy = scale * scale * ref_energy;
    let residual_energy: f64 = est
        .iter()
        .zip(&refr)
        .map(|(e, r)| {
            let d = e - scale * r;
            d * d
        })
        .sum();
    if target_energy < 1e-24 {
        // no correlation with the template at all
        return Ok(-SISNR_CLAMP_DB);
    }
    if residual_energy < 1e-24 {
        return Ok(SISNR_CLAMP_DB);
    }
    let db = 10.0 * (target_energy / residual_energy).log10();
    Ok(db.clamp(-SISNR_CLAMP_DB, SISNR_CLAMP_DB))
}

/// Score every frame of the weighted mel spectrogram against the average
/// positive column.
pub fn match_score_track(
    mel: &FeatureMatrix,
    pos_events: &[(f64, f64)],
    weights: &FreqWeights,
    margin_db: f64,
) -> Result<MatchScoreTrack> {
    let frames = mel.frames();
    let bins = mel.bins();
    if weights.w.len() != bins {
        return Err(Error::Shape(format!(
            "weights cover {} bins, spectrogram has {bins}",
            weights.w.len()
        )));
    }
    let pos_frames = positive_frame_mask(mel, pos_events);
    if !pos_frames.iter().any(|&p| p) {
        return Err(Error::Input("no positive frames within the file".into()));
    }

    // weighted columns and the template = mean over positive columns
    let weighted = mel.data.clone() * weights.w.view().insert_axis(ndarray::Axis(0));
    let mut template = Array1::<f64>::zeros(bins);
    let mut n_pos = 0.0;
    for (t, &positive) in pos_frames.iter().enumerate() {
        if positive {
            template += &weighted.row(t);
            n_pos += 1.0;
        }
    }
    template.mapv_inplace(|v| v / n_pos);
    let template: Vec<f64> = template.to_vec();

    let mut scores = Vec::with_capacity(frames);
    for t in 0..frames {
        let col: Vec<f64> = weighted.row(t).to_vec();
        scores.push(sisnr(&col, &template)?);
    }
    let threshold_db = (0..frames)
        .filter(|&t| pos_frames[t])
        .map(|t| scores[t])
        .fold(f64::INFINITY, f64::min)
        - margin_db;
    Ok(MatchScoreTrack { scores, threshold_db })
}

/// Find negative frame ranges: frames scoring below the threshold, merged
/// into maximal runs of at least `min_run` frames. Positive-labeled frames
/// are never returned.
pub fn search_negative_segments(
    mel: &FeatureMatrix,
    pos_events: &[(f64, f64)],
    weights: &FreqWeights,
    margin_db: f64,
    min_run: usize,
) -> Result<Vec<FrameRange>> {
    let track = match_score_track(mel, pos_events, weights, margin_db)?;
    let pos_frames = positive_frame_mask(mel, pos_events);
    let mut ranges = Vec::new();
    let mut run_start: Option<usize> = None;
    for (t, (score, positive)) in track.scores.iter().zip(&pos_frames).enumerate() {
        let is_neg = *score < track.threshold_db && !positive;
        match (is_neg, run_start) {
            (true, None) => run_start = Some(t),
            (false, Some(s)) => {
                if t - s >= min_run {
                    ranges.push((s, t));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        let end = track.scores.len();
        if end - s >= min_run {
            ranges.push((s, end));
        }
    }
    Ok(ranges)
}

fn positive_frame_mask(mel: &FeatureMatrix, pos_events: &[(f64, f64)]) -> Vec<bool> {
    let frames = mel.frames();
    let mut mask = vec![false; frames];
    for &(on, off) in pos_events {
        let (s, e) = event_frames(on, off, mel.hop_s, frames);
        for m in mask.iter_mut().take(e).skip(s) {
            *m = true;
        }
    }
    mask
}

fn mean_columns(data: &Array2<f64>, range: std::ops::Range<usize>) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(data.ncols());
    let n = range.len().max(1) as f64;
    for t in range {
        acc += &data.row(t);
    }
    acc / n
}

fn mean_columns_indexed(data: &Array2<f64>, cols: &[usize]) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(data.ncols());
    for &t in cols {
        acc += &data.row(t);
    }
    acc / cols.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use ndarray::Array2;

    fn mel_matrix(data: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix { data, kind: FeatureKind::LinearMel, hop_s: 256.0 / 22050.0 }
    }

    /// Synthetic file: a jittered tone in `tone_bin` during events, a faint
    /// random noise floor elsewhere.
    fn tone_file(frames: usize, bins: usize, tone_bin: usize, events: &[(usize, usize)]) -> FeatureMatrix {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rand01 = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f64 / (1u64 << 24) as f64
        };
        let mut data = Array2::from_shape_fn((frames, bins), |_| 1e-3 * rand01());
        // fundamental spread over neighbouring mel bins plus one harmonic,
        // the footprint a real tone leaves through the filterbank
        for &(s, e) in events {
            for t in s..e {
                for (off, amp) in [(0usize, 1.0), (1, 0.7), (2, 0.35), (12, 0.3), (13, 0.15)] {
                    if tone_bin + off < bins {
                        data[[t, tone_bin + off]] = amp * (1.0 + 0.2 * rand01());
                    }
                }
            }
        }
        mel_matrix(data)
    }

    fn to_seconds(r: (usize, usize), hop: f64) -> (f64, f64) {
        (r.0 as f64 * hop, r.1 as f64 * hop)
    }

    #[test]
    fn weights_peak_at_tone_bin() {
        let hop = 256.0 / 22050.0;
        let mel = tone_file(400, 64, 40, &[(100, 130), (250, 280)]);
        let events: Vec<(f64, f64)> =
            [(100, 130), (250, 280)].iter().map(|&r| to_seconds(r, hop)).collect();
        let w = frequency_bin_weights(&mel, &events, f64::INFINITY).unwrap();
        let argmax = (0..64).max_by(|&a, &b| w.w[a].total_cmp(&w.w[b])).unwrap();
        assert_eq!(argmax, 40);
        assert!((w.w[40] - 1.0).abs() < 1e-12);
        assert!(w.w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn noise_gives_no_dominant_bin() {
        // positives and context statistically identical white noise
        let mut state = 0x243f6a88u64;
        let mut noise = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) + 0.5
        };
        let data = Array2::from_shape_fn((600, 32), |_| noise());
        let mel = mel_matrix(data);
        let hop = mel.hop_s;
        let events: Vec<(f64, f64)> =
            [(100, 150), (300, 350)].iter().map(|&r| to_seconds(r, hop)).collect();
        let w = frequency_bin_weights(&mel, &events, f64::INFINITY).unwrap();
        let mut sorted: Vec<f64> = w.w.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        // normalized max is 1 by construction; the median must not collapse
        assert!(
            1.0 / median.max(1e-12) < 3.0,
            "median {median} suggests a spurious dominant bin"
        );
    }

    #[test]
    fn event_at_file_start_uses_trailing_context() {
        let hop = 256.0 / 22050.0;
        let mel = tone_file(200, 16, 8, &[(0, 30)]);
        let events = vec![(0.0, 30.0 * hop)];
        let w = frequency_bin_weights(&mel, &events, f64::INFINITY).unwrap();
        let argmax = (0..16).max_by(|&a, &b| w.w[a].total_cmp(&w.w[b])).unwrap();
        assert_eq!(argmax, 8);
    }

    #[test]
    fn no_events_is_input_error() {
        let mel = tone_file(50, 8, 4, &[]);
        assert!(matches!(
            frequency_bin_weights(&mel, &[], 1.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn sisnr_scale_invariance_and_clamps() {
        let refr: Vec<f64> = (0..64).map(|i| ((i * 37) as f64 * 0.31).sin()).collect();
        let scaled: Vec<f64> = refr.iter().map(|v| 3.7 * v).collect();
        assert_eq!(sisnr(&scaled, &refr).unwrap(), SISNR_CLAMP_DB);

        // orthogonal estimate: +/- alternation against a symmetric reference
        let refr = vec![1.0, 1.0, -1.0, -1.0];
        let orth = vec![1.0, -1.0, 1.0, -1.0];
        assert_eq!(sisnr(&orth, &refr).unwrap(), -SISNR_CLAMP_DB);
    }

    #[test]
    fn sisnr_matches_direct_formula() {
        let mut state = 0x13198a2eu64;
        let mut rand = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for _ in 0..50 {
            let est: Vec<f64> = (0..32).map(|_| rand()).collect();
            let refr: Vec<f64> = (0..32).map(|_| rand()).collect();
            let got = sisnr(&est, &refr).unwrap();

            // direct oracle
            let m_e = est.iter().sum::<f64>() / 32.0;
            let m_r = refr.iter().sum::<f64>() / 32.0;
            let e: Vec<f64> = est.iter().map(|v| v - m_e).collect();
            let r: Vec<f64> = refr.iter().map(|v| v - m_r).collect();
            let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
                / r.iter().map(|v| v * v).sum::<f64>();
            let s: Vec<f64> = r.iter().map(|v| alpha * v).collect();
            let num = s.iter().map(|v| v * v).sum::<f64>();
            let den = e.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let want = (10.0 * (num / den).log10()).clamp(-60.0, 60.0);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn sisnr_alpha_scaling_exact() {
        let refr: Vec<f64> = (0..48).map(|i| ((i * 11) as f64 * 0.7).cos()).collect();
        let est: Vec<f64> = (0..48).map(|i| ((i * 5) as f64 * 0.3).sin() + 0.2).collect();
        let base = sisnr(&est, &refr).unwrap();
        for alpha in [0.1, 2.0, 1234.5] {
            let scaled: Vec<f64> = est.iter().map(|v| alpha * v).collect();
            assert!((sisnr(&scaled, &refr).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_reference_rejected() {
        assert!(matches!(
            sisnr(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn search_finds_silence_not_events() {
        let hop = 256.0 / 22050.0;
        let event_frames: Vec<(usize, usize)> = vec![(60, 100), (200, 240), (330, 370)];
        let mel = tone_file(500, 32, 12, &event_frames);
        let events: Vec<(f64, f64)> = event_frames.iter().map(|&r| to_seconds(r, hop)).collect();
        let w = frequency_bin_weights(&mel, &events, f64::INFINITY).unwrap();
        let ranges = search_negative_segments(&mel, &events, &w, 0.0, 3).unwrap();
        assert!(!ranges.is_empty());

        let mut covered = vec![false; 500];
        for (s, e) in &ranges {
            for t in *s..*e {
                covered[t] = true;
            }
        }
        // no event frame may be covered
        for &(s, e) in &event_frames {
            for t in s..e {
                assert!(!covered[t], "event frame {t} marked negative");
            }
        }
        // at least 95% of silent frames covered
        let silent: Vec<usize> = (0..500)
            .filter(|&t| !event_frames.iter().any(|&(s, e)| t >= s && t < e))
            .collect();
        let hit = silent.iter().filter(|&&t| covered[t]).count();
        assert!(
            hit as f64 >= 0.95 * silent.len() as f64,
            "covered {hit} of {} silent frames",
            silent.len()
        );
    }

    #[test]
    fn positives_everywhere_gives_empty_list() {
        let hop = 256.0 / 22050.0;
        let mel = tone_file(100, 16, 4, &[(0, 100)]);
        let events = vec![(0.0, 100.0 * hop)];
        let w = FreqWeights { w: Array1::from_elem(16, 1.0) };
        let ranges = search_negative_segments(&mel, &events, &w, 0.0, 3).unwrap();
        assert!(ranges.is_empty());
    }

    #[test]
    fn event_frames_is_total() {
        // in-range events
        assert_eq!(event_frames(0.0, 0.1, 0.01, 100), (0, 10));
        // event past the end collapses to an empty range
        let (a, b) = event_frames(5.0, 6.0, 0.01, 100);
        assert!(a <= b && b <= 100);
        assert_eq!(a, b);
        // event straddling the end clamps
        let (a, b) = event_frames(0.95, 1.5, 0.01, 100);
        assert_eq!((a, b), (95, 100));
    }

    #[test]
    fn positive_frames_score_at_or_above_threshold() {
        let hop = 256.0 / 22050.0;
        let event_frames = vec![(20, 50), (80, 110)];
        let mel = tone_file(160, 24, 9, &event_frames);
        let events: Vec<(f64, f64)> = event_frames.iter().map(|&r| to_seconds(r, hop)).collect();
        let w = frequency_bin_weights(&mel, &events, f64::INFINITY).unwrap();
        let track = match_score_track(&mel, &events, &w, 0.0).unwrap();
        for &(s, e) in &event_frames {
            for t in s..e {
                assert!(track.scores[t] >= track.threshold_db);
            }
        }
    }
}
