//! Split / merge / filter post-processing of detected events.
//!
//! All thresholds derive from the durations of the K labeled positive events
//! and the labeled negative gaps: short events are dropped, close small
//! events are merged, and over-long events are split at mined negative
//! intervals.

use crate::detect::DetectionEvent;
use crate::{Error, Result};

/// Duration statistics of the labeled prefix of a file.
#[derive(Debug, Clone)]
pub struct EventStats {
    /// Mean labeled positive duration.
    pub t_bar: f64,
    /// Max labeled positive duration.
    pub t_max: f64,
    /// Min labeled negative duration.
    pub tneg_min: f64,
    /// All labeled negative durations.
    pub tneg_list: Vec<f64>,
}

impl EventStats {
    /// Build from positive durations and negative (gap) durations. When no
    /// negative information exists, the minimum falls back to one STFT hop so
    /// merging stays effectively disabled rather than unbounded.
    pub fn new(pos_durations: &[f64], neg_durations: &[f64], hop_s: f64) -> Result<Self> {
        if pos_durations.is_empty() {
            return Err(Error::Input("no labeled positive events".into()));
        }
        if pos_durations.iter().any(|&d| d <= 0.0) || neg_durations.iter().any(|&d| d <= 0.0) {
            return Err(Error::Validation("durations must be positive".into()));
        }
        let t_bar = pos_durations.iter().sum::<f64>() / pos_durations.len() as f64;
        let t_max = pos_durations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tneg_list = neg_durations.to_vec();
        let tneg_min = tneg_list.iter().copied().fold(f64::INFINITY, f64::min);
        let tneg_min = if tneg_min.is_finite() { tneg_min } else { hop_s };
        Ok(EventStats { t_bar, t_max, tneg_min, tneg_list })
    }
}

/// Which duration statistic triggers splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTrigger {
    /// `2.0 * t_bar` (the default).
    TBar,
    /// `2 * t_max`.
    TMax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostConfig {
    pub split: bool,
    pub merge: bool,
    pub filter: bool,
    pub pad: bool,
    pub pad_fraction: f64,
    pub split_trigger: SplitTrigger,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            split: true,
            merge: true,
            filter: true,
            pad: false,
            pad_fraction: 0.1,
            split_trigger: SplitTrigger::TBar,
        }
    }
}

/// Drop events shorter than `0.4 * t_bar` (inclusive boundary keeps).
pub fn filter_short(events: Vec<DetectionEvent>, stats: &EventStats) -> Vec<DetectionEvent> {
    let min_len = 0.4 * stats.t_bar;
    events
        .into_iter()
        .filter(|e| e.offset_s - e.onset_s >= min_len - 1e-12)
        .collect()
}

/// Merge adjacent events while the pair is jointly short and the gap between
/// them is below the smallest labeled negative duration. Runs to fixpoint.
pub fn merge_adjacent(mut events: Vec<DetectionEvent>, stats: &EventStats) -> Vec<DetectionEvent> {
    loop {
        let mut merged_any = false;
        let mut out: Vec<DetectionEvent> = Vec::with_capacity(events.len());
        let mut it = events.into_iter().peekable();
        while let Some(cur) = it.next() {
            let mut cur = cur;
            while let Some(next) = it.peek() {
                let gap = next.onset_s - cur.offset_s;
                let total = (cur.offset_s - cur.onset_s) + (next.offset_s - next.onset_s);
                if total < 0.8 * stats.t_bar && gap < stats.tneg_min {
                    let next = it.next().unwrap();
                    cur = DetectionEvent {
                        file_id: cur.file_id.clone(),
                        onset_s: cur.onset_s,
                        offset_s: next.offset_s,
                        score: cur.score.max(next.score),
                    };
                    merged_any = true;
                } else {
                    break;
                }
            }
            out.push(cur);
        }
        events = out;
        if !merged_any {
            return events;
        }
    }
}

/// Split events longer than the trigger length at mined negative intervals
/// they contain; pieces are re-checked recursively.
pub fn split_long(
    events: Vec<DetectionEvent>,
    neg_intervals: &[(f64, f64)],
    stats: &EventStats,
    trigger: SplitTrigger,
) -> Vec<DetectionEvent> {
    let limit = match trigger {
        SplitTrigger::TBar => 2.0 * stats.t_bar,
        SplitTrigger::TMax => 2.0 * stats.t_max,
    };
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        split_one(ev, neg_intervals, limit, &mut out);
    }
    out.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    out
}

fn split_one(ev: DetectionEvent, gaps: &[(f64, f64)], limit: f64, out: &mut Vec<DetectionEvent>) {
    let dur = ev.offset_s - ev.onset_s;
    if dur > limit {
        // earliest mined interval strictly inside the event
        let inside = gaps
            .iter()
            .filter(|&&(s, e)| s > ev.onset_s && e < ev.offset_s && e > s)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(&(gap_start, gap_end)) = inside {
            let left = DetectionEvent {
                file_id: ev.file_id.clone(),
                onset_s: ev.onset_s,
                offset_s: gap_start,
                score: ev.score,
            };
            let right = DetectionEvent {
                file_id: ev.file_id.clone(),
                onset_s: gap_end,
                offset_s: ev.offset_s,
                score: ev.score,
            };
            if left.offset_s > left.onset_s {
                out.push(left);
            }
            split_one(right, gaps, limit, out);
            return;
        }
    }
    out.push(ev);
}

/// Extend every event by `margin` on each side, clamped to `[floor_s, ceil_s]`,
/// coalescing any events that come to overlap.
pub fn pad_events(
    events: Vec<DetectionEvent>,
    margin: f64,
    floor_s: f64,
    ceil_s: f64,
) -> Vec<DetectionEvent> {
    let mut padded: Vec<DetectionEvent> = events
        .into_iter()
        .map(|e| DetectionEvent {
            file_id: e.file_id.clone(),
            onset_s: (e.onset_s - margin).max(floor_s),
            offset_s: (e.offset_s + margin).min(ceil_s),
            score: e.score,
        })
        .collect();
    padded.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    let mut out: Vec<DetectionEvent> = Vec::with_capacity(padded.len());
    for ev in padded {
        match out.last_mut() {
            Some(last) if ev.onset_s <= last.offset_s => {
                last.offset_s = last.offset_s.max(ev.offset_s);
                last.score = last.score.max(ev.score);
            }
            _ => out.push(ev),
        }
    }
    out
}

/// Full pipeline: split, pad, merge, filter — each stage toggleable.
pub fn postprocess(
    events: Vec<DetectionEvent>,
    neg_intervals: &[(f64, f64)],
    stats: &EventStats,
    cfg: &PostConfig,
    query_start_s: f64,
    file_end_s: f64,
) -> Vec<DetectionEvent> {
    let mut events = events;
    if cfg.split {
        events = split_long(events, neg_intervals, stats, cfg.split_trigger);
    }
    if cfg.pad {
        events = pad_events(events, cfg.pad_fraction * stats.t_bar, query_start_s, file_end_s);
    }
    if cfg.merge {
        events = merge_adjacent(events, stats);
    }
    if cfg.filter {
        events = filter_short(events, stats);
    }
    events
}
