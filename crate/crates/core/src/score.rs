//! Event-based precision / recall / f-measure scoring.
//!
//! A predicted event may match a reference event when their temporal IoU
//! reaches `min_iou`; the scorer computes an exact maximum-cardinality
//! bipartite matching per file, so no greedy-order artifacts appear.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::detect::DetectionEvent;
use crate::{Error, Result};

/// True/false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn precision(&self) -> f64 {
        percentage(self.tp, self.tp + self.fp)
    }
    pub fn recall(&self) -> f64 {
        percentage(self.tp, self.tp + self.fn_)
    }
    pub fn f_measure(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
    pub fn add(&mut self, other: &MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn percentage(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Matching outcome with a per-file breakdown.
#[derive(Debug, Clone, Default)]
pub struct MatchReport {
    pub counts: MatchCounts,
    pub per_file: Vec<(String, MatchCounts)>,
}

impl MatchReport {
    pub fn precision(&self) -> f64 {
        self.counts.precision()
    }
    pub fn recall(&self) -> f64 {
        self.counts.recall()
    }
    pub fn f_measure(&self) -> f64 {
        self.counts.f_measure()
    }
}

/// Temporal intersection-over-union of two events.
pub fn temporal_iou(a: &DetectionEvent, b: &DetectionEvent) -> f64 {
    let inter = (a.offset_s.min(b.offset_s) - a.onset_s.max(b.onset_s)).max(0.0);
    let union = (a.offset_s.max(b.offset_s) - a.onset_s.min(b.onset_s)).max(1e-12);
    inter / union
}

/// Match predictions against references at `min_iou`.
///
/// Both lists may span several files; events within one file and one list
/// must not overlap each other.
pub fn match_events(
    predicted: &[DetectionEvent],
    reference: &[DetectionEvent],
    min_iou: f64,
) -> Result<MatchReport> {
    let pred_by_file = group_by_file(predicted, "predicted")?;
    let ref_by_file = group_by_file(reference, "reference")?;

    let mut files: Vec<&String> = pred_by_file.keys().chain(ref_by_file.keys()).collect();
    files.sort();
    files.dedup();

    let mut report = MatchReport::default();
    for file in files {
        let empty = Vec::new();
        let preds = pred_by_file.get(file).unwrap_or(&empty);
        let refs = ref_by_file.get(file).unwrap_or(&empty);

        let adjacency: Vec<Vec<usize>> = preds
            .iter()
            .map(|p| {
                refs.iter()
                    .enumerate()
                    .filter(|(_, r)| temporal_iou(p, r) >= min_iou)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        let matches = max_bipartite_matching(&adjacency, refs.len());
        let counts = MatchCounts {
            tp: matches,
            fp: preds.len() - matches,
            fn_: refs.len() - matches,
        };
        report.counts.add(&counts);
        report.per_file.push((file.clone(), counts));
    }
    Ok(report)
}

fn group_by_file<'a>(
    events: &'a [DetectionEvent],
    label: &str,
) -> Result<BTreeMap<String, Vec<&'a DetectionEvent>>> {
    let mut map: BTreeMap<String, Vec<&DetectionEvent>> = BTreeMap::new();
    for ev in events {
        map.entry(ev.file_id.clone()).or_default().push(ev);
    }
    for (file, evs) in map.iter_mut() {
        evs.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        for pair in evs.windows(2) {
            if pair[1].onset_s < pair[0].offset_s - 1e-9 {
                return Err(Error::Validation(format!(
                    "{label} events overlap in {file}: [{:.3},{:.3}) and [{:.3},{:.3})",
                    pair[0].onset_s, pair[0].offset_s, pair[1].onset_s, pair[1].offset_s
                )));
            }
        }
    }
    Ok(map)
}

/// Kuhn's augmenting-path algorithm; exact maximum cardinality.
fn max_bipartite_matching(adjacency: &[Vec<usize>], n_right: usize) -> usize {
    let mut match_right: Vec<Option<usize>> = vec![None; n_right];
    let mut matched = 0;
    for left in 0..adjacency.len() {
        let mut visited = vec![false; n_right];
        if augment(left, adjacency, &mut match_right, &mut visited) {
            matched += 1;
        }
    }
    matched
}

fn augment(
    left: usize,
    adjacency: &[Vec<usize>],
    match_right: &mut [Option<usize>],
    visited: &mut [bool],
) -> bool {
    for &right in &adjacency[left] {
        if visited[right] {
            continue;
        }
        visited[right] = true;
        if match_right[right].is_none()
            || augment(match_right[right].unwrap(), adjacency, match_right, visited)
        {
            match_right[right] = Some(left);
            return true;
        }
    }
    false
}

/// Pool per-subset counts into an overall report and render a table with
/// one row per subset plus an Overall row.
pub fn report(subsets: &[(String, MatchReport)]) -> (MatchReport, String) {
    let mut overall = MatchReport::default();
    for (_, r) in subsets {
        overall.counts.add(&r.counts);
        overall.per_file.extend(r.per_file.iter().cloned());
    }
    let mut table = String::new();
    let _ = writeln!(table, "{:<12} {:>9} {:>9} {:>9}", "Subset", "Pre (%)", "Rec (%)", "F (%)");
    for (name, r) in subsets {
        let _ = writeln!(
            table,
            "{:<12} {:>9.2} {:>9.2} {:>9.2}",
            name,
            r.precision(),
            r.recall(),
            r.f_measure()
        );
    }
    let _ = writeln!(
        table,
        "{:<12} {:>9.2} {:>9.2} {:>9.2}",
        "Overall",
        overall.precision(),
        overall.recall(),
        overall.f_measure()
    );
    (overall, table)
}

/// Flat `key = value` summary of a scoring run.
pub fn summary_lines(subsets: &[(String, MatchReport)], overall: &MatchReport) -> String {
    let mut s = String::new();
    let mut emit = |prefix: &str, r: &MatchReport| {
        let _ = writeln!(s, "{prefix}.tp = {}", r.counts.tp);
        let _ = writeln!(s, "{prefix}.fp = {}", r.counts.fp);
        let _ = writeln!(s, "{prefix}.fn = {}", r.counts.fn_);
        let _ = writeln!(s, "{prefix}.precision = {:.4}", r.precision());
        let _ = writeln!(s, "{prefix}.recall = {:.4}", r.recall());
        let _ = writeln!(s, "{prefix}.f_measure = {:.4}", r.f_measure());
    };
    for (name, r) in subsets {
        emit(&format!("subset.{name}"), r);
    }
    emit("overall", overall);
    s
}
