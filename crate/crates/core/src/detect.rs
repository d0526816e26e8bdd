//! Few-shot detection: adaptive segmentation, prototype construction with
//! randomized negative runs, probability scoring, thresholding and threshold
//! ensembling.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::config::RunConfig;
use crate::dataset::EvalFile;
use crate::negmine;
use crate::nn::{batch_from_segments, Embedder};
use crate::postproc::{postprocess, EventStats};
use crate::rng::substream;
use crate::{Error, Result};

/// One detected (or reference) event.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub file_id: String,
    pub onset_s: f64,
    pub offset_s: f64,
    /// Confidence in [0, 1].
    pub score: f64,
}

/// Sliding-window plan for the query region of one file.
#[derive(Debug, Clone, Copy)]
pub struct SegmentationPlan {
    pub window_s: f64,
    /// Always one third of the window.
    pub hop_s: f64,
    /// Offset of the Kth labeled positive event.
    pub query_start_s: f64,
}

impl SegmentationPlan {
    pub fn new(window_s: f64, query_start_s: f64) -> Self {
        SegmentationPlan { window_s, hop_s: window_s / 3.0, query_start_s }
    }
}

/// Window length as a function of the longest labeled event.
///
/// Events up to 0.1 s get a fixed 8-frame window (8 STFT hops); longer
/// events use the bucketed fractions of `t_max`.
pub fn adaptive_window(t_max_s: f64, frame_hop_s: f64) -> Result<f64> {
    if t_max_s <= 0.0 || !t_max_s.is_finite() {
        return Err(Error::Input(format!("t_max must be positive, got {t_max_s}")));
    }
    Ok(if t_max_s <= 0.1 {
        8.0 * frame_hop_s
    } else if t_max_s <= 0.4 {
        t_max_s
    } else if t_max_s <= 0.8 {
        t_max_s / 2.0
    } else if t_max_s <= 3.0 {
        t_max_s / 4.0
    } else {
        t_max_s / 8.0
    })
}

/// Small re-scoring window (in frames) for negative segment mining, as a
/// function of the smallest labeled negative duration in frames.
pub fn mine_window_frames(tneg_min_frames: f64) -> f64 {
    if tneg_min_frames <= 8.0 {
        8.0
    } else if tneg_min_frames <= 100.0 {
        tneg_min_frames / 2.0
    } else {
        100.0
    }
}

/// Positive probability per query segment.
#[derive(Debug, Clone)]
pub struct ProbabilityTrack {
    pub probs: Vec<f64>,
    /// Segment start times (seconds); each covers `[start, start + window_s)`.
    pub starts: Vec<f64>,
    pub window_s: f64,
}

/// How the negative prototypes are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStrategy {
    /// Several runs, each averaging a fresh random draw of negative-segment
    /// embeddings (the supported mode).
    SampledRuns,
    /// The mean embedding of the entire audio as a single negative
    /// prototype. Kept as a comparison oracle for tests, not a CLI mode.
    WholeAudioMean,
}

/// Positive prototype plus one negative prototype per evaluation run.
#[derive(Debug, Clone)]
pub struct FilePrototypes {
    pub positive: Array1<f32>,
    pub negatives: Vec<Array1<f32>>,
    /// Size of the negative segment pool that was sampled from.
    pub pool_len: usize,
    /// Whether SISNR mining was used to extend the pool.
    pub mined: bool,
    /// Whether the pool fell back to unlabeled query audio.
    pub fallback_unlabeled: bool,
}

/// Frame-domain helpers.
fn window_frames(window_s: f64, hop_s: f64) -> usize {
    ((window_s / hop_s).round() as usize).max(4)
}

/// Slice `[a, b)` from the feature matrix, tiling up to `min_frames` rows.
fn segment_from_frames(stacked: &Array2<f32>, a: usize, b: usize, min_frames: usize) -> Array2<f32> {
    let a = a.min(stacked.nrows().saturating_sub(1));
    let b = b.clamp(a, stacked.nrows());
    let len = (b - a).max(1);
    if len >= min_frames {
        return stacked.slice(ndarray::s![a..a + len, ..]).to_owned();
    }
    let mut out = Array2::<f32>::zeros((min_frames, stacked.ncols()));
    for t in 0..min_frames {
        out.row_mut(t).assign(&stacked.row(a + t % len));
    }
    out
}

/// Sliding windows fully inside `[a, b)`, or one tiled segment when the
/// region is shorter than the window.
fn region_windows(a: usize, b: usize, win: usize, hop: usize) -> Vec<(usize, usize)> {
    if b.saturating_sub(a) < win {
        if b > a {
            vec![(a, b)]
        } else {
            Vec::new()
        }
    } else {
        let mut out = Vec::new();
        let mut s = a;
        while s + win <= b {
            out.push((s, s + win));
            s += hop.max(1);
        }
        out
    }
}

/// Build the positive prototype and the per-run negative prototypes.
///
/// Labeled positive events are embedded whole (adaptive pooling handles the
/// varying lengths). The negative pool is cut from the labeled negative
/// regions; when their total duration is below `cfg.min_neg_s` the pool is
/// extended with SISNR-mined ranges, and if it is still empty it falls back
/// to the unlabeled query region with a warning flag.
pub fn build_prototypes(
    embedder: &Embedder<f32>,
    file: &EvalFile,
    plan: &SegmentationPlan,
    cfg: &RunConfig,
    strategy: NegativeStrategy,
) -> Result<FilePrototypes> {
    let n_frames = file.stacked.nrows();
    let hop_s = file.hop_s;
    let win = window_frames(plan.window_s, hop_s);
    let hop = (win / 3).max(1);

    // positive prototype: each labeled event embedded whole
    let mut pos_embs = Vec::with_capacity(file.labeled_pos.len());
    for ev in &file.labeled_pos {
        let (a, b) = negmine::event_frames(ev.onset_s, ev.offset_s, hop_s, n_frames);
        let seg = segment_from_frames(&file.stacked, a, b, 4);
        pos_embs.push(embedder.embed_segment(&seg)?);
    }
    let positive = mean_embedding(&pos_embs)?;

    // negative pool; a guard of half the analysis window keeps frames whose
    // STFT context smears event energy across the label boundary out of it
    let guard = (cfg.win_length / (2 * cfg.hop_length)).max(1);
    let labeled_neg_s: f64 = file.labeled_neg.iter().map(|e| e.duration_s()).sum();
    let mut regions: Vec<(usize, usize)> = file
        .labeled_neg
        .iter()
        .map(|e| {
            let a = (e.onset_s / hop_s).ceil() as usize + guard;
            let b = ((e.offset_s / hop_s).floor() as usize).saturating_sub(guard);
            (a.min(n_frames), b.min(n_frames))
        })
        .filter(|(a, b)| b > a)
        .collect();

    let mut mined = false;
    if labeled_neg_s < cfg.min_neg_s {
        let pos_spans: Vec<(f64, f64)> =
            file.labeled_pos.iter().map(|e| (e.onset_s, e.offset_s)).collect();
        if let Ok(weights) = negmine::frequency_bin_weights(&file.mel, &pos_spans, f64::INFINITY) {
            if let Ok(ranges) = negmine::search_negative_segments(
                &file.mel,
                &pos_spans,
                &weights,
                cfg.mine_margin_db,
                cfg.mine_min_run,
            ) {
                mined = !ranges.is_empty();
                regions.extend(ranges);
            }
        }
    }

    // prefer full windows; tiled sub-window regions only when nothing else
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for &(a, b) in &regions {
        if b - a >= win {
            pool.extend(region_windows(a, b, win, hop));
        }
    }
    if pool.is_empty() {
        for &(a, b) in &regions {
            pool.extend(region_windows(a, b, win, hop));
        }
    }
    let mut fallback_unlabeled = false;
    if pool.is_empty() {
        fallback_unlabeled = true;
        let qs = (plan.query_start_s / hop_s).floor() as usize;
        pool.extend(region_windows(qs.min(n_frames), n_frames, win, hop));
    }
    if pool.is_empty() {
        return Err(Error::Input(format!(
            "{}: no negative segments available at all",
            file.file_id
        )));
    }

    // embed the pool once
    let segs: Vec<Array2<f32>> = pool
        .iter()
        .map(|&(a, b)| segment_from_frames(&file.stacked, a, b, win))
        .collect();
    let pool_embs = embed_batched(embedder, &segs)?;

    let negatives = match strategy {
        NegativeStrategy::WholeAudioMean => {
            let whole = region_windows(0, n_frames, win, hop);
            let segs: Vec<Array2<f32>> = whole
                .iter()
                .map(|&(a, b)| segment_from_frames(&file.stacked, a, b, win))
                .collect();
            let embs = embed_batched(embedder, &segs)?;
            vec![mean_embedding(&embs)?]
        }
        NegativeStrategy::SampledRuns => {
            let per_run = cfg.negatives_per_run;
            (0..cfg.detect_runs)
                .map(|run| {
                    let mut rng =
                        substream(cfg.seed, &format!("negatives/{}/{run}", file.file_id));
                    let picks = sample_indices(pool_embs.len(), per_run, &mut rng);
                    let members: Vec<Array1<f32>> =
                        picks.into_iter().map(|i| pool_embs[i].clone()).collect();
                    mean_embedding(&members)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    Ok(FilePrototypes {
        positive,
        negatives,
        pool_len: pool_embs.len(),
        mined,
        fallback_unlabeled,
    })
}

/// `count` indices over `len` items: without replacement when possible,
/// with replacement when the pool is smaller than the draw.
fn sample_indices(len: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len >= count {
        let mut idx: Vec<usize> = (0..len).collect();
        for i in 0..count {
            let j = rng.random_range(i..len);
            idx.swap(i, j);
        }
        idx.truncate(count);
        idx
    } else {
        (0..count).map(|_| rng.random_range(0..len)).collect()
    }
}

fn mean_embedding(members: &[Array1<f32>]) -> Result<Array1<f32>> {
    let first = members
        .first()
        .ok_or_else(|| Error::EmptyInput("no embeddings to average".into()))?;
    let mut acc = Array1::<f64>::zeros(first.len());
    for m in members {
        for (a, &v) in acc.iter_mut().zip(m.iter()) {
            *a += f64::from(v);
        }
    }
    let inv = 1.0 / members.len() as f64;
    Ok(acc.mapv(|v| (v * inv) as f32))
}

fn embed_batched(embedder: &Embedder<f32>, segs: &[Array2<f32>]) -> Result<Vec<Array1<f32>>> {
    if segs.is_empty() {
        return Ok(Vec::new());
    }
    // group by equal shape, preserving order
    let mut out: Vec<Option<Array1<f32>>> = vec![None; segs.len()];
    let mut by_shape: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for (i, s) in segs.iter().enumerate() {
        by_shape.entry(s.dim()).or_default().push(i);
    }
    for (_, indices) in by_shape {
        let group: Vec<Array2<f32>> = indices.iter().map(|&i| segs[i].clone()).collect();
        let batch = batch_from_segments(&group)?;
        let emb = embedder.forward_eval(&batch)?;
        for (row, &i) in indices.iter().enumerate() {
            out[i] = Some(emb.row(row).to_owned());
        }
    }
    Ok(out.into_iter().map(|o| o.expect("all segments embedded")).collect())
}

fn euclidean(a: &Array1<f32>, b: &Array1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Score the query region: per segment and run, the probability is the
/// two-way softmax over negated distances to the positive and the run's
/// negative prototype; the final track averages the runs.
pub fn score_queries(
    embedder: &Embedder<f32>,
    file: &EvalFile,
    plan: &SegmentationPlan,
    protos: &FilePrototypes,
) -> Result<ProbabilityTrack> {
    let n_frames = file.stacked.nrows();
    let hop_s = file.hop_s;
    let win = window_frames(plan.window_s, hop_s);

    let mut starts = Vec::new();
    let mut t = plan.query_start_s;
    while t + plan.window_s <= file.duration_s + 1e-9 {
        starts.push(t);
        t += plan.hop_s;
    }
    if starts.is_empty() {
        return Ok(ProbabilityTrack { probs: Vec::new(), starts, window_s: plan.window_s });
    }

    let segs: Vec<Array2<f32>> = starts
        .iter()
        .map(|&s| {
            let sf = ((s / hop_s).round() as usize).min(n_frames.saturating_sub(win));
            segment_from_frames(&file.stacked, sf, (sf + win).min(n_frames), win)
        })
        .collect();
    let embs = embed_batched(embedder, &segs)?;

    let probs: Vec<f64> = embs
        .iter()
        .map(|e| {
            let d_pos = euclidean(e, &protos.positive);
            let mut acc = 0.0;
            for neg in &protos.negatives {
                acc += two_way_probability(d_pos, euclidean(e, neg));
            }
            acc / protos.negatives.len() as f64
        })
        .collect();
    Ok(ProbabilityTrack { probs, starts, window_s: plan.window_s })
}

/// Softmax over negated distances to [positive, negative], positive entry:
/// `exp(-d_pos) / (exp(-d_pos) + exp(-d_neg))`.
pub fn two_way_probability(d_pos: f64, d_neg: f64) -> f64 {
    1.0 / (1.0 + (d_pos - d_neg).exp())
}

/// Maximal runs of segments with probability >= `thr` become events.
/// Overlapping neighbors (runs separated by a single low segment) are
/// clipped so the output stays disjoint.
pub fn threshold_events(track: &ProbabilityTrack, thr: f64, file_id: &str) -> Vec<DetectionEvent> {
    let mut events: Vec<DetectionEvent> = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for (i, &p) in track.probs.iter().enumerate() {
        if p >= thr {
            run = Some(match run {
                None => (i, i),
                Some((s, _)) => (s, i),
            });
        } else if let Some((s, e)) = run.take() {
            events.push(run_event(track, s, e, file_id));
        }
    }
    if let Some((s, e)) = run {
        events.push(run_event(track, s, e, file_id));
    }
    // clip overlaps between adjacent runs
    for i in 1..events.len() {
        if events[i].onset_s < events[i - 1].offset_s {
            events[i - 1].offset_s = events[i].onset_s;
        }
    }
    events.retain(|e| e.offset_s > e.onset_s);
    events
}

fn run_event(track: &ProbabilityTrack, s: usize, e: usize, file_id: &str) -> DetectionEvent {
    let score = track.probs[s..=e].iter().copied().fold(f64::MIN, f64::max);
    DetectionEvent {
        file_id: file_id.to_string(),
        onset_s: track.starts[s],
        offset_s: track.starts[e] + track.window_s,
        score,
    }
}

/// Majority vote across threshold runs: a time region is kept if it is
/// covered by events in at least `ceil(m / 2)` of the `m` runs.
pub fn threshold_ensemble(per_threshold: &[Vec<DetectionEvent>], file_id: &str) -> Vec<DetectionEvent> {
    let m = per_threshold.len();
    if m == 0 {
        return Vec::new();
    }
    if m == 1 {
        return per_threshold[0].clone();
    }
    let need = m.div_ceil(2);
    let mut boundaries: Vec<(f64, i32)> = Vec::new();
    for run in per_threshold {
        for ev in run {
            boundaries.push((ev.onset_s, 1));
            boundaries.push((ev.offset_s, -1));
        }
    }
    boundaries.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));

    let mut kept: Vec<(f64, f64)> = Vec::new();
    let mut active = 0i32;
    let mut region_start: Option<f64> = None;
    for (t, delta) in boundaries {
        let was_enough = active >= need as i32;
        active += delta;
        let is_enough = active >= need as i32;
        match (was_enough, is_enough) {
            (false, true) => region_start = Some(t),
            (true, false) => {
                if let Some(s) = region_start.take() {
                    if t > s {
                        kept.push((s, t));
                    }
                }
            }
            _ => {}
        }
    }
    // merge touching regions
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in kept {
        match merged.last_mut() {
            Some(last) if s <= last.1 + 1e-12 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
        .into_iter()
        .map(|(s, e)| {
            let score = per_threshold
                .iter()
                .flatten()
                .filter(|ev| ev.onset_s < e && ev.offset_s > s)
                .map(|ev| ev.score)
                .fold(0.0f64, f64::max);
            DetectionEvent { file_id: file_id.to_string(), onset_s: s, offset_s: e, score }
        })
        .collect()
}

/// Re-score the query region with a small window (Table-driven from the
/// minimum labeled negative duration) and return the sub-threshold spans.
/// False positives are harmless here, so no filtering is applied.
pub fn mine_split_points(
    embedder: &Embedder<f32>,
    file: &EvalFile,
    protos: &FilePrototypes,
    stats: &EventStats,
    thr: f64,
) -> Result<Vec<(f64, f64)>> {
    let hop_s = file.hop_s;
    let tneg_frames = stats.tneg_min / hop_s;
    let win_frames = mine_window_frames(tneg_frames).round().max(4.0);
    let small = SegmentationPlan::new(win_frames * hop_s, file.query_start_s);
    let track = score_queries(embedder, file, &small, protos)?;

    let mut out = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for (i, &p) in track.probs.iter().enumerate() {
        if p < thr {
            run = Some(match run {
                None => (i, i),
                Some((s, _)) => (s, i),
            });
        } else if let Some((s, e)) = run.take() {
            out.push((track.starts[s], track.starts[e] + track.window_s));
        }
    }
    if let Some((s, e)) = run {
        out.push((track.starts[s], track.starts[e] + track.window_s));
    }
    Ok(out)
}

/// Everything one file's detection produced.
#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub events: Vec<DetectionEvent>,
    pub track: ProbabilityTrack,
    pub plan: SegmentationPlan,
    pub stats: EventStats,
    pub prototypes_mined: bool,
    pub fallback_unlabeled: bool,
}

/// Full per-file detection: plan, prototypes, scoring, thresholding (or
/// threshold ensembling) and post-processing.
pub fn detect_file(embedder: &Embedder<f32>, file: &EvalFile, cfg: &RunConfig) -> Result<DetectOutput> {
    let pos_durations: Vec<f64> = file.labeled_pos.iter().map(|e| e.duration_s()).collect();
    let neg_durations: Vec<f64> = file.labeled_neg.iter().map(|e| e.duration_s()).collect();
    let stats = EventStats::new(&pos_durations, &neg_durations, file.hop_s)?;

    let window_s = adaptive_window(stats.t_max, file.hop_s)?;
    let plan = SegmentationPlan::new(window_s, file.query_start_s);

    let protos = build_prototypes(embedder, file, &plan, cfg, NegativeStrategy::SampledRuns)?;
    let track = score_queries(embedder, file, &plan, &protos)?;

    let post_cfg = cfg.post();
    let neg_intervals = if post_cfg.split {
        mine_split_points(embedder, file, &protos, &stats, cfg.threshold)?
    } else {
        Vec::new()
    };

    let finish = |thr: f64| -> Vec<DetectionEvent> {
        let events = threshold_events(&track, thr, &file.file_id);
        postprocess(
            events,
            &neg_intervals,
            &stats,
            &post_cfg,
            file.query_start_s,
            file.duration_s,
        )
    };

    let events = if cfg.ensemble {
        let runs: Vec<Vec<DetectionEvent>> =
            cfg.ensemble_thresholds.iter().map(|&t| finish(t)).collect();
        threshold_ensemble(&runs, &file.file_id)
    } else {
        finish(cfg.threshold)
    };

    Ok(DetectOutput {
        events,
        track,
        plan,
        stats,
        prototypes_mined: protos.mined,
        fallback_unlabeled: protos.fallback_unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HOP: f64 = 256.0 / 22050.0;

    #[test]
    fn adaptive_window_buckets() {
        // bucketed exactly as published
        assert_eq!(adaptive_window(0.05, HOP).unwrap(), 8.0 * HOP);
        assert_eq!(adaptive_window(0.1, HOP).unwrap(), 8.0 * HOP);
        assert_eq!(adaptive_window(0.3, HOP).unwrap(), 0.3);
        assert_eq!(adaptive_window(0.4, HOP).unwrap(), 0.4);
        assert_eq!(adaptive_window(0.4 + 1e-9, HOP).unwrap(), (0.4 + 1e-9) / 2.0);
        assert_eq!(adaptive_window(0.8, HOP).unwrap(), 0.4);
        assert_eq!(adaptive_window(2.0, HOP).unwrap(), 0.5);
        assert_eq!(adaptive_window(3.0, HOP).unwrap(), 0.75);
        assert_eq!(adaptive_window(4.0, HOP).unwrap(), 0.5);
        assert!(adaptive_window(0.0, HOP).is_err());
        assert!(adaptive_window(-1.0, HOP).is_err());
    }

    #[test]
    fn mine_window_buckets() {
        assert_eq!(mine_window_frames(4.0), 8.0);
        assert_eq!(mine_window_frames(8.0), 8.0);
        assert_eq!(mine_window_frames(50.0), 25.0);
        assert_eq!(mine_window_frames(100.0), 50.0);
        assert_eq!(mine_window_frames(101.0), 100.0);
        assert_eq!(mine_window_frames(1e6), 100.0);
    }

    #[test]
    fn plan_hop_is_third_of_window() {
        let plan = SegmentationPlan::new(0.3, 5.0);
        assert!((plan.hop_s - 0.1).abs() < 1e-9);
    }

    #[test]
    fn two_way_probability_closed_forms() {
        // equidistant -> exactly one half
        assert_eq!(two_way_probability(3.0, 3.0), 0.5);
        // query on the positive prototype, negative 10 away
        let p = two_way_probability(0.0, 10.0);
        assert!((p - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-15);
        assert!(p > 0.9999);
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn averaging_identical_runs_is_a_single_run() {
        let d_pos = 1.3;
        let d_neg = 2.1;
        let single = two_way_probability(d_pos, d_neg);
        let six: f64 = (0..6).map(|_| two_way_probability(d_pos, d_neg)).sum::<f64>() / 6.0;
        // equal up to the rounding of the six-term sum
        assert!((single - six).abs() <= 4.0 * f64::EPSILON, "{single} vs {six}");
    }

    fn track(probs: Vec<f64>, window: f64) -> ProbabilityTrack {
        let hop = window / 3.0;
        let starts = (0..probs.len()).map(|i| 10.0 + i as f64 * hop).collect();
        ProbabilityTrack { probs, starts, window_s: window }
    }

    #[test]
    fn threshold_events_basics() {
        let t = track(vec![0.1, 0.97, 0.98, 0.2], 0.3);
        let evs = threshold_events(&t, 0.95, "f");
        assert_eq!(evs.len(), 1);
        assert!((evs[0].onset_s - 10.1).abs() < 1e-9);
        assert!((evs[0].offset_s - (10.2 + 0.3)).abs() < 1e-9);
        assert!((evs[0].score - 0.98).abs() < 1e-12);

        let none = threshold_events(&track(vec![0.1, 0.2], 0.3), 0.95, "f");
        assert!(none.is_empty());
    }

    #[test]
    fn threshold_nesting() {
        // every event at a high threshold lies inside an event at a lower one
        let probs = vec![0.1, 0.6, 0.7, 0.97, 0.99, 0.7, 0.2, 0.55, 0.96, 0.3];
        let t = track(probs, 0.3);
        let low = threshold_events(&t, 0.5, "f");
        let high = threshold_events(&t, 0.95, "f");
        for h in &high {
            assert!(
                low.iter().any(|l| l.onset_s <= h.onset_s + 1e-9 && h.offset_s <= l.offset_s + 1e-9),
                "high event {h:?} not nested"
            );
        }
    }

    #[test]
    fn events_stay_disjoint_after_clipping() {
        // two runs separated by a single low segment overlap raw; must clip
        let t = track(vec![0.99, 0.99, 0.1, 0.99, 0.99], 0.3);
        let evs = threshold_events(&t, 0.95, "f");
        assert_eq!(evs.len(), 2);
        assert!(evs[0].offset_s <= evs[1].onset_s + 1e-12);
    }

    #[test]
    fn ensemble_majority_rule() {
        let ev = |on: f64, off: f64| DetectionEvent {
            file_id: "f".into(),
            onset_s: on,
            offset_s: off,
            score: 0.9,
        };
        // present in all 5 runs -> kept
        let runs: Vec<Vec<DetectionEvent>> = (0..5).map(|_| vec![ev(1.0, 2.0)]).collect();
        let out = threshold_ensemble(&runs, "f");
        assert_eq!(out.len(), 1);
        assert!((out[0].onset_s - 1.0).abs() < 1e-12);

        // present in only 1 of 5 -> dropped
        let mut runs: Vec<Vec<DetectionEvent>> = vec![vec![ev(1.0, 2.0)]];
        runs.extend((0..4).map(|_| Vec::new()));
        assert!(threshold_ensemble(&runs, "f").is_empty());

        // single run -> identity
        let single = vec![vec![ev(3.0, 4.0)]];
        let out = threshold_ensemble(&single, "f");
        assert_eq!(out, single[0]);
    }

    #[test]
    fn ensemble_partial_overlap() {
        let ev = |on: f64, off: f64| DetectionEvent {
            file_id: "f".into(),
            onset_s: on,
            offset_s: off,
            score: 0.9,
        };
        // 3 runs; [1,2] covered by 2 of 3 -> kept; [2,3] by 1 -> dropped
        let runs = vec![vec![ev(1.0, 2.0)], vec![ev(1.0, 3.0)], vec![ev(0.5, 1.5)]];
        let out = threshold_ensemble(&runs, "f");
        assert_eq!(out.len(), 1);
        assert!((out[0].onset_s - 1.0).abs() < 1e-12);
        assert!((out[0].offset_s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sample_indices_distinct_when_pool_large() {
        let mut rng = substream(1, "t");
        let picks = sample_indices(100, 30, &mut rng);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 30);
    }

    #[test]
    fn region_windows_cover_and_tile() {
        assert_eq!(region_windows(0, 10, 4, 2), vec![(0, 4), (2, 6), (4, 8), (6, 10)]);
        assert_eq!(region_windows(5, 7, 4, 1), vec![(5, 7)]); // shorter than window
        assert!(region_windows(5, 5, 4, 1).is_empty());
    }
}
