//! On-the-fly episode sampling.
//!
//! Classes are drawn uniformly from the union of the development classes and
//! the transductive evaluation-file classes. Segment start offsets are drawn
//! fresh every episode; events shorter than the training segment are tiled
//! (wraparound) to fill the window.

use std::collections::HashSet;

use ndarray::Array2;
use rand::Rng;

use super::Episode;
use crate::dataset::ClassSource;
use crate::{Error, Result};

/// Where a sampled segment came from: `(file index, region index, offset)`.
pub type SegmentPick = (usize, usize, usize);

/// Optional SpecAugment masking applied to training segments.
#[derive(Debug, Clone, Copy)]
pub struct SpecAugment {
    pub time_masks: usize,
    pub max_time_frames: usize,
    pub freq_masks: usize,
    pub max_freq_bins: usize,
}

impl Default for SpecAugment {
    fn default() -> Self {
        SpecAugment { time_masks: 2, max_time_frames: 10, freq_masks: 2, max_freq_bins: 12 }
    }
}

/// Slice `seg_frames` rows out of a region, tiling cyclically when the
/// region is shorter than the window.
fn slice_segment(
    features: &Array2<f32>,
    region: (usize, usize),
    offset: usize,
    seg_frames: usize,
) -> Array2<f32> {
    let (a, b) = region;
    let len = b - a;
    debug_assert!(len > 0);
    if len >= seg_frames {
        features.slice(ndarray::s![a + offset..a + offset + seg_frames, ..]).to_owned()
    } else {
        let bins = features.ncols();
        let mut out = Array2::<f32>::zeros((seg_frames, bins));
        for t in 0..seg_frames {
            let src = a + (offset + t) % len;
            out.row_mut(t).assign(&features.row(src));
        }
        out
    }
}

fn apply_specaugment(seg: &mut Array2<f32>, sa: &SpecAugment, rng: &mut impl Rng) {
    let (frames, bins) = seg.dim();
    for _ in 0..sa.time_masks {
        let max_len = sa.max_time_frames.min(frames / 2).max(1);
        let len = rng.random_range(1..=max_len);
        let start = rng.random_range(0..=frames - len);
        seg.slice_mut(ndarray::s![start..start + len, ..]).fill(0.0);
    }
    for _ in 0..sa.freq_masks {
        let max_len = sa.max_freq_bins.min(bins / 2).max(1);
        let len = rng.random_range(1..=max_len);
        let start = rng.random_range(0..=bins - len);
        seg.slice_mut(ndarray::s![.., start..start + len]).fill(0.0);
    }
}

/// Draw segments from a class's regions, preferring distinct
/// (file, region, offset) picks.
fn sample_segments(
    source: &ClassSource,
    positive: bool,
    count: usize,
    seg_frames: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Array2<f32>>> {
    let mut regions: Vec<(usize, usize, (usize, usize))> = Vec::new();
    for (fi, file) in source.files.iter().enumerate() {
        let list = if positive { &file.pos_regions } else { &file.neg_regions };
        for (ri, &r) in list.iter().enumerate() {
            if r.1 > r.0 {
                regions.push((fi, ri, r));
            }
        }
    }
    if regions.is_empty() {
        return Err(Error::Sampling(format!(
            "class {:?} has no {} audio to sample",
            source.name,
            if positive { "positive" } else { "negative" }
        )));
    }

    let mut seen: HashSet<SegmentPick> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        let (fi, ri, region) = regions[rng.random_range(0..regions.len())];
        let len = region.1 - region.0;
        let offset = if len >= seg_frames {
            rng.random_range(0..=len - seg_frames)
        } else {
            rng.random_range(0..len)
        };
        attempts += 1;
        // prefer distinct start offsets; give up after enough collisions
        if !seen.insert((fi, ri, offset)) && attempts < 64 * count {
            continue;
        }
        out.push(slice_segment(&source.files[fi].stacked, region, offset, seg_frames));
    }
    Ok(out)
}

/// Sample one N-way-K-shot episode from the union of both class pools.
pub fn sample_episode(
    train_classes: &[ClassSource],
    eval_classes: &[ClassSource],
    n_way: usize,
    k_shot: usize,
    seg_frames: usize,
    specaugment: Option<&SpecAugment>,
    rng: &mut impl Rng,
) -> Result<Episode<f32>> {
    let pool: Vec<&ClassSource> = train_classes.iter().chain(eval_classes.iter()).collect();
    if pool.len() < n_way {
        return Err(Error::Sampling(format!(
            "need {n_way} classes, pool holds {}",
            pool.len()
        )));
    }

    // partial Fisher-Yates: first n_way entries are the episode classes
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for i in 0..n_way {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }

    let mut class_names = Vec::with_capacity(n_way);
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    let mut neg_support = Vec::with_capacity(n_way);
    for &ci in indices.iter().take(n_way) {
        let source = pool[ci];
        let mut positives = sample_segments(source, true, 2 * k_shot, seg_frames, rng)?;
        let mut negatives = sample_segments(source, false, k_shot, seg_frames, rng)?;
        if let Some(sa) = specaugment {
            for seg in positives.iter_mut().chain(negatives.iter_mut()) {
                apply_specaugment(seg, sa, rng);
            }
        }
        let queries = positives.split_off(k_shot);
        class_names.push(source.name.clone());
        support.push(positives);
        query.push(queries);
        neg_support.push(negatives);
    }

    Ok(Episode { n_way, k_shot, class_names, support, query, neg_support })
}
