//! Cross-module pipeline tests: evaluation-file loading, prototype
//! construction (mining trigger, determinism, baseline strategy), detection
//! determinism and the prediction round trip.

use std::f64::consts::TAU;
use std::path::Path;

use fewsed_core::config::RunConfig;
use fewsed_core::dataio::{parse_annotations, write_predictions};
use fewsed_core::dataset::{load_eval_csvs, transduction_sources};
use fewsed_core::detect::{
    build_prototypes, detect_file, score_queries, DetectionEvent, NegativeStrategy,
    SegmentationPlan,
};
use fewsed_core::features::{linear_mel, FeatureParams};
use fewsed_core::negmine;
use fewsed_core::nn::{Embedder, EmbedderConfig};
use fewsed_core::postproc::SplitTrigger;
use fewsed_core::rng::substream;

use proptest::prelude::*;

/// Small feature/model geometry shared by these tests.
fn test_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("features.n_mels", "16"),
        ("features.mfcc_coeffs", "5"),
        ("model.channels", "2,3,2"),
        ("model.pool_t", "2"),
        ("model.pool_f", "2"),
        ("detect.k", "5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.set("out_dir", dir.to_str().unwrap()).unwrap();
    cfg
}

fn feature_params(cfg: &RunConfig) -> FeatureParams {
    FeatureParams {
        stft: cfg.stft(),
        pcen: cfg.pcen(),
        mfcc_coeffs: cfg.mfcc_coeffs,
        delta_width: cfg.delta_width,
    }
}

/// Write a tone-burst WAV plus its annotation CSV with the given events.
fn write_tone_file(dir: &Path, stem: &str, events: &[(f64, f64)], duration_s: f64) {
    let rate = 22050u32;
    let n = (duration_s * rate as f64) as usize;
    let mut samples = vec![0.0f64; n];
    for &(on, off) in events {
        let i0 = (on * rate as f64) as usize;
        let i1 = ((off * rate as f64) as usize).min(n);
        for (i, s) in samples.iter_mut().enumerate().take(i1).skip(i0) {
            *s = 0.4 * (TAU * 800.0 * i as f64 / rate as f64).sin();
        }
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(dir.join(format!("{stem}.wav")), spec).unwrap();
    for s in samples {
        w.write_sample((s * 32767.0) as i16).unwrap();
    }
    w.finalize().unwrap();

    let mut csv = format!("Audiofilename,Starttime,Endtime,{stem}\n");
    for &(on, off) in events {
        csv.push_str(&format!("{stem}.wav,{on:.4},{off:.4},POS\n"));
    }
    std::fs::write(dir.join(format!("{stem}.csv")), csv).unwrap();
}

fn tiny_embedder(cfg: &RunConfig, seed: u64) -> Embedder<f32> {
    let emb_cfg = EmbedderConfig { ..cfg.embedder() };
    Embedder::init(emb_cfg, &mut substream(seed, "init")).unwrap()
}

#[test]
fn plentiful_labeled_negatives_skip_mining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    // five events widely spaced: > 2 s of labeled gaps
    let events: Vec<(f64, f64)> = (0..5).map(|i| (1.0 + i as f64 * 3.0, 1.4 + i as f64 * 3.0)).collect();
    write_tone_file(dir.path(), "wide", &events, 20.0);
    let files = load_eval_csvs(
        &[dir.path().join("wide.csv")],
        &feature_params(&cfg),
        cfg.sample_rate,
        5,
    )
    .unwrap();
    let emb = tiny_embedder(&cfg, 1);
    let plan = SegmentationPlan::new(0.3, files[0].query_start_s);
    let protos = build_prototypes(&emb, &files[0], &plan, &cfg, NegativeStrategy::SampledRuns).unwrap();
    assert!(!protos.mined, "10+ s of labeled negatives must not trigger mining");
    assert!(!protos.fallback_unlabeled);
    assert_eq!(protos.negatives.len(), cfg.detect_runs);
}

#[test]
fn scarce_labeled_negatives_trigger_mining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    // five events packed tight: about 0.4 s of labeled gaps in total, but
    // plenty of silence after the prefix for the miner to find
    let mut events = Vec::new();
    let mut t = 0.1;
    for _ in 0..5 {
        events.push((t, t + 0.5));
        t += 0.6; // 0.1 s gaps
    }
    write_tone_file(dir.path(), "tight", &events, 20.0);
    let files = load_eval_csvs(
        &[dir.path().join("tight.csv")],
        &feature_params(&cfg),
        cfg.sample_rate,
        5,
    )
    .unwrap();
    let emb = tiny_embedder(&cfg, 2);
    let plan = SegmentationPlan::new(0.3, files[0].query_start_s);
    let protos = build_prototypes(&emb, &files[0], &plan, &cfg, NegativeStrategy::SampledRuns).unwrap();
    assert!(protos.mined, " < 2 s of labeled negatives must trigger mining");
}

#[test]
fn prototype_sampling_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let events: Vec<(f64, f64)> = (0..5).map(|i| (1.0 + i as f64 * 2.0, 1.5 + i as f64 * 2.0)).collect();
    write_tone_file(dir.path(), "det", &events, 15.0);
    let files = load_eval_csvs(
        &[dir.path().join("det.csv")],
        &feature_params(&cfg),
        cfg.sample_rate,
        5,
    )
    .unwrap();
    let emb = tiny_embedder(&cfg, 3);
    let plan = SegmentationPlan::new(0.25, files[0].query_start_s);
    let a = build_prototypes(&emb, &files[0], &plan, &cfg, NegativeStrategy::SampledRuns).unwrap();
    let b = build_prototypes(&emb, &files[0], &plan, &cfg, NegativeStrategy::SampledRuns).unwrap();
    assert_eq!(a.negatives.len(), b.negatives.len());
    for (x, y) in a.negatives.iter().zip(b.negatives.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn whole_audio_baseline_strategy_runs() {
    // the baseline from the ablation: one negative prototype = the mean
    // embedding of the entire audio
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let events: Vec<(f64, f64)> = (0..5).map(|i| (0.5 + i as f64 * 1.5, 1.0 + i as f64 * 1.5)).collect();
    write_tone_file(dir.path(), "base", &events, 12.0);
    let files = load_eval_csvs(
        &[dir.path().join("base.csv")],
        &feature_params(&cfg),
        cfg.sample_rate,
        5,
    )
    .unwrap();
    let emb = tiny_embedder(&cfg, 4);
    let plan = SegmentationPlan::new(0.25, files[0].query_start_s);
    let protos =
        build_prototypes(&emb, &files[0], &plan, &cfg, NegativeStrategy::WholeAudioMean).unwrap();
    assert_eq!(protos.negatives.len(), 1);
    let track = score_queries(&emb, &files[0], &plan, &protos).unwrap();
    assert!(!track.probs.is_empty());
    assert!(track.probs.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn detect_pipeline_is_deterministic_and_respects_query_start() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let events: Vec<(f64, f64)> = (0..6).map(|i| (0.8 + i as f64 * 1.8, 1.3 + i as f64 * 1.8)).collect();
    write_tone_file(dir.path(), "pipe", &events, 14.0);
    let files = load_eval_csvs(
        &[dir.path().join("pipe.csv")],
        &feature_params(&cfg),
        cfg.sample_rate,
        5,
    )
    .unwrap();
    let emb = tiny_embedder(&cfg, 5);
    let out_a = detect_file(&emb, &files[0], &cfg).unwrap();
    let out_b = detect_file(&emb, &files[0], &cfg).unwrap();
    assert_eq!(out_a.events.len(), out_b.events.len());
    for (x, y) in out_a.events.iter().zip(out_b.events.iter()) {
        assert_eq!(x.onset_s, y.onset_s);
        assert_eq!(x.offset_s, y.offset_s);
    }
    for ev in &out_a.events {
        assert!(ev.onset_s >= files[0].query_start_s - 1e-9);
        assert!(ev.offset_s > ev.onset_s);
        assert!((0.0..=1.0).contains(&ev.score));
    }
    assert!(out_a.track.probs.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn mined_split_points_cover_a_short_gap_between_bursts() {
    // Two tone bursts after the labeled prefix, separated by a short silence
    // that a coarse window straddles; the small-window re-scoring must mark
    // an interval covering that gap.
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    // labeled prefix with small gaps (0.15 s), so the Table-driven mining
    // window is fine enough to resolve a 0.2 s silence
    let mut events: Vec<(f64, f64)> = (0..5).map(|i| (0.5 + i as f64 * 0.55, 0.9 + i as f64 * 0.55)).collect();
    // the post-prefix burst pair with a 0.2 s gap
    let gap = (8.0, 8.2);
    events.push((7.5, gap.0));
    events.push((gap.1, 8.7));
    write_tone_file(dir.path(), "bursts", &events, 12.0);

    let files = load_eval_csvs(
        &[dir.path().join("bursts.csv")],
        &feature_params(&cfg),
        cfg.sample_rate,
        5,
    )
    .unwrap();
    let emb = tiny_embedder(&cfg, 12);
    let plan = SegmentationPlan::new(0.5, files[0].query_start_s);
    let protos =
        build_prototypes(&emb, &files[0], &plan, &cfg, NegativeStrategy::SampledRuns).unwrap();
    let stats = fewsed_core::postproc::EventStats::new(&[0.4; 5], &[0.15; 4], files[0].hop_s).unwrap();
    let intervals =
        fewsed_core::detect::mine_split_points(&emb, &files[0], &protos, &stats, cfg.threshold)
            .unwrap();
    let covered = intervals
        .iter()
        .any(|&(a, b)| a <= gap.0 + 0.1 && b >= gap.1 - 0.1);
    assert!(covered, "no mined interval covers the gap {gap:?}: {intervals:?}");
}

#[test]
fn ensemble_detection_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = test_config(dir.path());
    cfg.set("detect.ensemble", "true").unwrap();
    cfg.set("detect.ensemble_thresholds", "0.5,0.7,0.9,0.99,0.995").unwrap();
    let events: Vec<(f64, f64)> = (0..6).map(|i| (0.8 + i as f64 * 1.8, 1.3 + i as f64 * 1.8)).collect();
    write_tone_file(dir.path(), "ens", &events, 14.0);
    let files = load_eval_csvs(
        &[dir.path().join("ens.csv")],
        &feature_params(&cfg),
        cfg.sample_rate,
        5,
    )
    .unwrap();
    let emb = tiny_embedder(&cfg, 6);
    let out = detect_file(&emb, &files[0], &cfg).unwrap();
    for pair in out.events.windows(2) {
        assert!(pair[0].offset_s <= pair[1].onset_s + 1e-9, "ensemble output overlaps");
    }
    for ev in &out.events {
        assert!(ev.onset_s >= files[0].query_start_s - 1e-9);
    }
}

#[test]
fn transduction_sources_only_use_the_labeled_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let events: Vec<(f64, f64)> = (0..8).map(|i| (0.5 + i as f64 * 1.5, 1.0 + i as f64 * 1.5)).collect();
    write_tone_file(dir.path(), "trans", &events, 14.0);
    let files = load_eval_csvs(
        &[dir.path().join("trans.csv")],
        &feature_params(&cfg),
        cfg.sample_rate,
        5,
    )
    .unwrap();
    let sources = transduction_sources(&files);
    assert_eq!(sources.len(), 1);
    let file = &sources[0].files[0];
    let hop = file.hop_s;
    let prefix_end_frame = (files[0].query_start_s / hop).ceil() as usize;
    for &(a, b) in file.pos_regions.iter().chain(file.neg_regions.iter()) {
        assert!(b > a);
        assert!(
            b <= prefix_end_frame + 1,
            "region [{a}, {b}) leaks past the labeled prefix ending at {prefix_end_frame}"
        );
    }
    // exactly the first K events
    assert_eq!(file.pos_regions.len(), 5);
}

#[test]
fn table4_s3_configuration_is_expressible() {
    // Pad + Split + Merge at threshold 0.95, no ensemble
    let mut cfg = RunConfig::default();
    cfg.set("post.pad", "true").unwrap();
    cfg.set("post.split", "true").unwrap();
    cfg.set("post.merge", "true").unwrap();
    cfg.set("post.filter", "false").unwrap();
    cfg.set("detect.threshold", "0.95").unwrap();
    cfg.set("detect.ensemble", "false").unwrap();
    let post = cfg.post();
    assert!(post.pad && post.split && post.merge && !post.filter);
    assert_eq!(post.split_trigger, SplitTrigger::TBar);
    assert!((cfg.threshold - 0.95).abs() < 1e-12);
}

#[test]
fn mining_is_gain_invariant_end_to_end() {
    // scaling the audio by a constant changes the selected ranges by at most
    // one frame at run boundaries
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let events: Vec<(f64, f64)> = vec![(1.0, 1.5), (3.0, 3.5), (5.0, 5.5)];
    write_tone_file(dir.path(), "gain", &events, 8.0);

    let clip = fewsed_core::dataio::load_audio(&dir.path().join("gain.wav"), 22050).unwrap();
    let params = feature_params(&cfg);
    let mel = linear_mel(&clip, &params).unwrap();
    let mut scaled_clip = clip.clone();
    for s in &mut scaled_clip.samples {
        *s *= 0.1;
    }
    let mel_scaled = linear_mel(&scaled_clip, &params).unwrap();

    let w_a = negmine::frequency_bin_weights(&mel, &events, f64::INFINITY).unwrap();
    let w_b = negmine::frequency_bin_weights(&mel_scaled, &events, f64::INFINITY).unwrap();
    let r_a = negmine::search_negative_segments(&mel, &events, &w_a, 0.0, 3).unwrap();
    let r_b = negmine::search_negative_segments(&mel_scaled, &events, &w_b, 0.0, 3).unwrap();
    assert_eq!(r_a.len(), r_b.len());
    for ((a0, a1), (b0, b1)) in r_a.iter().zip(r_b.iter()) {
        assert!(a0.abs_diff(*b0) <= 1, "{a0} vs {b0}");
        assert!(a1.abs_diff(*b1) <= 1, "{a1} vs {b1}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_round_trip_through_csv(
        raw in proptest::collection::vec((0.0f64..1000.0, 0.01f64..50.0), 1..100)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let mut events: Vec<DetectionEvent> = raw
            .iter()
            .enumerate()
            .map(|(i, &(onset, dur))| DetectionEvent {
                file_id: format!("f{}.wav", i % 3),
                onset_s: onset,
                offset_s: onset + dur,
                score: 1.0,
            })
            .collect();
        events.sort_by(|a, b| a.file_id.cmp(&b.file_id).then(a.onset_s.total_cmp(&b.onset_s)));
        write_predictions(&events, &path).unwrap();
        let parsed = parse_annotations(&path).unwrap();
        prop_assert_eq!(parsed.len(), events.len());
        for (ev, back) in events.iter().zip(parsed.iter()) {
            prop_assert_eq!(&back.file_id, &ev.file_id);
            prop_assert!((back.onset_s - ev.onset_s).abs() < 1e-4 + 1e-9);
            prop_assert!((back.offset_s - ev.offset_s).abs() < 1e-4 + 1e-9);
        }
    }

    #[test]
    fn sisnr_is_exactly_scale_invariant(
        scale in 1e-3f64..1e3,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = substream(seed, "prop-sisnr");
        let reference: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let estimate: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = negmine::sisnr(&estimate, &reference).unwrap();
        let scaled: Vec<f64> = estimate.iter().map(|v| v * scale).collect();
        let after = negmine::sisnr(&scaled, &reference).unwrap();
        prop_assert!((base - after).abs() < 1e-9, "{} vs {}", base, after);
    }
}
