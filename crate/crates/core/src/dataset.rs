//! Dataset loading: turn annotation CSVs plus WAVs into per-class segment
//! sources for episodic training, and per-file contexts for detection.
//!
//! Layout: a directory of `<name>.csv` annotation files in the challenge
//! format, each referencing WAVs (`Audiofilename` column) in the same
//! directory. Evaluation files are treated transductively as one class each,
//! using only their first K labeled positive events and the labeled gaps
//! between them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use crate::dataio::{load_audio, parse_annotation_table, AnnotationEvent, Polarity};
use crate::features::{linear_mel, stacked_input, FeatureMatrix, FeatureParams};
use crate::negmine::event_frames;
use crate::{Error, Result};

/// One file's worth of segments available to a class.
#[derive(Debug, Clone)]
pub struct ClassFile {
    pub file_id: String,
    /// Stacked model-input features, `frames x bins`.
    pub stacked: Arc<Array2<f32>>,
    pub hop_s: f64,
    /// Frame ranges holding this class's positive audio.
    pub pos_regions: Vec<(usize, usize)>,
    /// Frame ranges usable as negatives for this class.
    pub neg_regions: Vec<(usize, usize)>,
}

/// All segment material of one training class.
#[derive(Debug, Clone)]
pub struct ClassSource {
    pub name: String,
    pub files: Vec<ClassFile>,
}

impl ClassSource {
    pub fn total_pos_frames(&self) -> usize {
        self.files
            .iter()
            .map(|f| f.pos_regions.iter().map(|(a, b)| b - a).sum::<usize>())
            .sum()
    }
}

/// Everything detection needs about one evaluation file.
#[derive(Debug, Clone)]
pub struct EvalFile {
    pub file_id: String,
    pub wav_path: PathBuf,
    pub stacked: Arc<Array2<f32>>,
    /// Linear mel spectrogram for negative mining.
    pub mel: Arc<FeatureMatrix>,
    pub hop_s: f64,
    pub duration_s: f64,
    /// The first K labeled positive events, sorted by onset.
    pub labeled_pos: Vec<AnnotationEvent>,
    /// Labeled negatives: explicit NEG rows, or the gaps between the first K
    /// positive events (including the leading gap) when no NEG rows exist.
    pub labeled_neg: Vec<AnnotationEvent>,
    /// End of the Kth labeled positive event; queries start here.
    pub query_start_s: f64,
}

fn conservative_frames(onset_s: f64, offset_s: f64, hop_s: f64, n_frames: usize) -> (usize, usize) {
    let a = (onset_s / hop_s).ceil().max(0.0) as usize;
    let b = (offset_s / hop_s).floor().max(0.0) as usize;
    (a.min(n_frames), b.min(n_frames))
}

fn subtract_regions(total: (usize, usize), cut: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut keep = vec![total];
    for &(cs, ce) in cut {
        let mut next = Vec::new();
        for (s, e) in keep {
            if ce <= s || cs >= e {
                next.push((s, e));
            } else {
                if cs > s {
                    next.push((s, cs));
                }
                if ce < e {
                    next.push((ce, e));
                }
            }
        }
        keep = next;
    }
    keep.into_iter().filter(|(s, e)| e > s).collect()
}

fn list_csvs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("no annotation CSVs under {}", root.display())));
    }
    Ok(out)
}

struct FeatureCache<'a> {
    params: &'a FeatureParams,
    rate: u32,
    stacked: BTreeMap<PathBuf, (Arc<Array2<f32>>, f64)>,
}

impl<'a> FeatureCache<'a> {
    fn new(params: &'a FeatureParams, rate: u32) -> Self {
        FeatureCache { params, rate, stacked: BTreeMap::new() }
    }

    fn stacked(&mut self, wav: &Path) -> Result<(Arc<Array2<f32>>, f64)> {
        if let Some(hit) = self.stacked.get(wav) {
            return Ok(hit.clone());
        }
        let clip = load_audio(wav, self.rate)?;
        let feat = stacked_input(&clip, self.params)?;
        let hop = feat.hop_s;
        let entry = (Arc::new(feat.data.mapv(|v| v as f32)), hop);
        self.stacked.insert(wav.to_path_buf(), entry.clone());
        Ok(entry)
    }
}

/// Load every class of a training directory.
///
/// Per class and file, positive regions come from POS rows (UNK rows are
/// excluded); negative regions come from explicit NEG rows when present,
/// otherwise from audio outside every labeled POS/UNK region of that file.
pub fn load_train_classes(
    root: &Path,
    params: &FeatureParams,
    rate: u32,
) -> Result<Vec<ClassSource>> {
    let mut cache = FeatureCache::new(params, rate);
    // class name -> file id -> (pos, neg, unk) events
    type Triple = (Vec<AnnotationEvent>, Vec<AnnotationEvent>, Vec<AnnotationEvent>);
    let mut by_class: BTreeMap<String, BTreeMap<String, Triple>> = BTreeMap::new();
    let mut occupied: BTreeMap<String, Vec<AnnotationEvent>> = BTreeMap::new();
    let mut wav_dir: BTreeMap<String, PathBuf> = BTreeMap::new();

    for csv in list_csvs(root)? {
        let table = parse_annotation_table(&csv)?;
        let dir = csv.parent().unwrap_or(root).to_path_buf();
        for (class, events) in &table.classes {
            for ev in events {
                wav_dir.entry(ev.file_id.clone()).or_insert_with(|| dir.clone());
                let slot = by_class
                    .entry(class.clone())
                    .or_default()
                    .entry(ev.file_id.clone())
                    .or_default();
                match ev.polarity {
                    Polarity::Pos => slot.0.push(ev.clone()),
                    Polarity::Neg => slot.1.push(ev.clone()),
                    Polarity::Unk => slot.2.push(ev.clone()),
                }
                if ev.polarity != Polarity::Neg {
                    occupied.entry(ev.file_id.clone()).or_default().push(ev.clone());
                }
            }
        }
    }

    let mut sources = Vec::new();
    for (class, files) in by_class {
        let mut class_files = Vec::new();
        for (file_id, (pos, neg, _unk)) in files {
            if pos.is_empty() {
                continue;
            }
            let wav = wav_dir[&file_id].join(&file_id);
            let (stacked, hop_s) = cache.stacked(&wav)?;
            let n_frames = stacked.nrows();

            let pos_regions: Vec<(usize, usize)> = pos
                .iter()
                .map(|e| event_frames(e.onset_s, e.offset_s, hop_s, n_frames))
                .filter(|(a, b)| b > a)
                .collect();

            let neg_regions = if neg.is_empty() {
                // fall back to audio outside any labeled POS/UNK region
                let cuts: Vec<(usize, usize)> = occupied
                    .get(&file_id)
                    .map(|evs| {
                        evs.iter()
                            .map(|e| event_frames(e.onset_s, e.offset_s, hop_s, n_frames))
                            .collect()
                    })
                    .unwrap_or_default();
                subtract_regions((0, n_frames), &cuts)
            } else {
                neg.iter()
                    .map(|e| conservative_frames(e.onset_s, e.offset_s, hop_s, n_frames))
                    .filter(|(a, b)| b > a)
                    .collect()
            };

            class_files.push(ClassFile {
                file_id,
                stacked,
                hop_s,
                pos_regions,
                neg_regions,
            });
        }
        if class_files.iter().any(|f| !f.pos_regions.is_empty()) {
            sources.push(ClassSource { name: class, files: class_files });
        }
    }
    if sources.is_empty() {
        return Err(Error::Config(format!(
            "no classes with positive events under {}",
            root.display()
        )));
    }
    Ok(sources)
}

/// Load evaluation files, keeping only the first `k` labeled positive events
/// per file (plus explicit NEG rows and the gaps between the positives).
pub fn load_eval_files(
    root: &Path,
    params: &FeatureParams,
    rate: u32,
    k: usize,
) -> Result<Vec<EvalFile>> {
    load_eval_csvs(&list_csvs(root)?, params, rate, k)
}

/// As [`load_eval_files`], but over an explicit list of annotation CSVs.
pub fn load_eval_csvs(
    csvs: &[PathBuf],
    params: &FeatureParams,
    rate: u32,
    k: usize,
) -> Result<Vec<EvalFile>> {
    let mut cache = FeatureCache::new(params, rate);
    let mut out = Vec::new();
    for csv in csvs {
        let table = parse_annotation_table(csv)?;
        let dir = csv.parent().map(Path::to_path_buf).unwrap_or_default();
        // group events of the first class column by file
        let mut by_file: BTreeMap<String, (Vec<AnnotationEvent>, Vec<AnnotationEvent>)> =
            BTreeMap::new();
        if let Some((_, events)) = table.classes.first() {
            for ev in events {
                let slot = by_file.entry(ev.file_id.clone()).or_default();
                match ev.polarity {
                    Polarity::Pos => slot.0.push(ev.clone()),
                    Polarity::Neg => slot.1.push(ev.clone()),
                    Polarity::Unk => {}
                }
            }
        }
        for (file_id, (mut pos, neg)) in by_file {
            pos.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
            if pos.len() < k {
                return Err(Error::Input(format!(
                    "{file_id}: only {} labeled positive events, need {k}",
                    pos.len()
                )));
            }
            pos.truncate(k);
            let query_start_s = pos.last().unwrap().offset_s;

            let labeled_neg = if neg.is_empty() {
                derive_gaps(&pos, &file_id)
            } else {
                neg
            };

            let wav = dir.join(&file_id);
            let (stacked, hop_s) = cache.stacked(&wav)?;
            let clip = load_audio(&wav, rate)?;
            let mel = Arc::new(linear_mel(&clip, params)?);
            out.push(EvalFile {
                file_id,
                wav_path: wav,
                duration_s: clip.duration_s(),
                stacked,
                mel,
                hop_s,
                labeled_pos: pos,
                labeled_neg,
                query_start_s,
            });
        }
    }
    Ok(out)
}

/// Gaps between consecutive labeled positives (and before the first one).
fn derive_gaps(pos: &[AnnotationEvent], file_id: &str) -> Vec<AnnotationEvent> {
    let mut gaps = Vec::new();
    let mut cursor = 0.0;
    for ev in pos {
        if ev.onset_s > cursor + 1e-9 {
            gaps.push(AnnotationEvent {
                file_id: file_id.to_string(),
                onset_s: cursor,
                offset_s: ev.onset_s,
                polarity: Polarity::Neg,
            });
        }
        cursor = cursor.max(ev.offset_s);
    }
    gaps
}

/// Treat each evaluation file as one training class (transductive setup):
/// positives from the first K labeled events, negatives from labeled gaps.
/// Files without any usable negative region are skipped.
pub fn transduction_sources(files: &[EvalFile]) -> Vec<ClassSource> {
    let mut out = Vec::new();
    for f in files {
        let n_frames = f.stacked.nrows();
        let pos_regions: Vec<(usize, usize)> = f
            .labeled_pos
            .iter()
            .map(|e| event_frames(e.onset_s, e.offset_s, f.hop_s, n_frames))
            .filter(|(a, b)| b > a)
            .collect();
        let neg_regions: Vec<(usize, usize)> = f
            .labeled_neg
            .iter()
            .map(|e| conservative_frames(e.onset_s, e.offset_s, f.hop_s, n_frames))
            .filter(|(a, b)| b > a)
            .collect();
        if pos_regions.is_empty() || neg_regions.is_empty() {
            continue;
        }
        out.push(ClassSource {
            name: format!("eval:{}", f.file_id),
            files: vec![ClassFile {
                file_id: f.file_id.clone(),
                stacked: Arc::clone(&f.stacked),
                hop_s: f.hop_s,
                pos_regions,
                neg_regions,
            }],
        });
    }
    out
}
