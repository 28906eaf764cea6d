//! Note-level transcription scoring: onset-tolerance matching and F1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::pianoroll::{read_midi_notes, NoteEvent};

pub const DEFAULT_ONSET_TOLERANCE: f64 = 0.05;

/// Onset distances are rounded to this many decimals before comparison,
/// like the common reference evaluator, so that 0.05 s stays inclusive
/// despite float noise.
const DISTANCE_DECIMALS: i32 = 4;

/// Outcome of matching one prediction against one reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(pred index, ref index)` pairs, sorted by pred index.
    pub pairs: Vec<(usize, usize)>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tolerance: f64,
    pub num_pred: usize,
    pub num_ref: usize,
}

impl MatchResult {
    pub fn num_matches(&self) -> usize {
        self.pairs.len()
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn admissible(p: &NoteEvent, r: &NoteEvent, tol: f64) -> bool {
    if p.pitch != r.pitch {
        return false;
    }
    let scale = 10f64.powi(DISTANCE_DECIMALS);
    let d = ((p.onset - r.onset).abs() * scale).round() / scale;
    d <= tol
}

/// Maximum one-to-one matching of notes with equal pitch and onsets within
/// `tol` seconds. Offsets are ignored.
///
/// Two empty sets score 1.0 (identity); otherwise an empty side gives 0.
pub fn match_notes(pred: &[NoteEvent], reference: &[NoteEvent], tol: f64) -> Result<MatchResult> {
    ensure!(
        tol >= 0.0 && tol.is_finite(),
        InvalidArgument,
        "tolerance must be non-negative, got {tol}"
    );
    let adj: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| {
            reference
                .iter()
                .enumerate()
                .filter(|(_, r)| admissible(p, r, tol))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    // Kuhn's augmenting paths.
    let mut ref_match: Vec<Option<usize>> = vec![None; reference.len()];
    for i in 0..pred.len() {
        let mut seen = vec![false; reference.len()];
        augment(i, &adj, &mut seen, &mut ref_match);
    }
    let mut pairs: Vec<(usize, usize)> = ref_match
        .iter()
        .enumerate()
        .filter_map(|(j, m)| m.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();

    let (precision, recall) = match (pred.len(), reference.len()) {
        (0, 0) => (1.0, 1.0),
        (np, nr) => {
            let m = pairs.len() as f64;
            let p = if np == 0 { 0.0 } else { m / np as f64 };
            let r = if nr == 0 { 0.0 } else { m / nr as f64 };
            (p, r)
        }
    };
    Ok(MatchResult {
        pairs,
        precision,
        recall,
        f1: f1_score(precision, recall),
        tolerance: tol,
        num_pred: pred.len(),
        num_ref: reference.len(),
    })
}

fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], ref_match: &mut [Option<usize>]) -> bool {
    for &j in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if ref_match[j].is_none_or(|k| augment(k, adj, seen, ref_match)) {
            ref_match[j] = Some(i);
            return true;
        }
    }
    false
}

/// Score for one file of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileScore {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matches: usize,
    pub num_pred: usize,
    pub num_ref: usize,
}

/// Corpus evaluation: per-file scores, missing counterparts and the
/// macro-averaged F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub files: Vec<FileScore>,
    /// Prediction files without a reference.
    pub missing_reference: Vec<String>,
    /// Reference files without a prediction.
    pub missing_prediction: Vec<String>,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// True when no file could be scored; the averages are then 0.
    pub no_files: bool,
    pub tolerance: f64,
}

impl CorpusReport {
    /// True when every file on both sides found its counterpart.
    pub fn is_complete(&self) -> bool {
        self.missing_reference.is_empty() && self.missing_prediction.is_empty()
    }
}

/// Aggregates already scored files.
pub fn aggregate(
    files: Vec<FileScore>,
    missing_reference: Vec<String>,
    missing_prediction: Vec<String>,
    tolerance: f64,
) -> CorpusReport {
    let n = files.len();
    let mean = |f: fn(&FileScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            files.iter().map(f).sum::<f64>() / n as f64
        }
    };
    CorpusReport {
        macro_f1: mean(|s| s.f1),
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        no_files: n == 0,
        files,
        missing_reference,
        missing_prediction,
        tolerance,
    }
}

fn midi_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_midi = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
        if is_midi && path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Scores every MIDI file in `pred_dir` against the file with the same stem
/// in `ref_dir`. Files are processed in parallel under `exec`.
pub fn evaluate_corpus(pred_dir: &Path, ref_dir: &Path, tol: f64, exec: Execution) -> Result<CorpusReport> {
    ensure!(
        tol >= 0.0 && tol.is_finite(),
        InvalidArgument,
        "tolerance must be non-negative, got {tol}"
    );
    let preds = midi_files(pred_dir)?;
    let refs = midi_files(ref_dir)?;
    let missing_reference: Vec<String> = preds.keys().filter(|k| !refs.contains_key(*k)).cloned().collect();
    let missing_prediction: Vec<String> = refs.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    let common: Vec<(&String, &PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(k, p)| refs.get(k).map(|r| (k, p, r)))
        .collect();

    let scored = exec.map(common.len(), |i| -> Result<FileScore> {
        let (name, p, r) = common[i];
        let pred = read_midi_notes(p)?.notes;
        let reference = read_midi_notes(r)?.notes;
        let m = match_notes(&pred, &reference, tol)?;
        Ok(FileScore {
            name: name.clone(),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            matches: m.num_matches(),
            num_pred: m.num_pred,
            num_ref: m.num_ref,
        })
    });
    let files = scored.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(aggregate(files, missing_reference, missing_prediction, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pianoroll::notes_to_midi;
    use proptest::prelude::*;

    fn note(pitch: u8, onset: f64) -> NoteEvent {
        NoteEvent::new(pitch, onset, onset + 0.25).unwrap()
    }

    /// Exhaustive maximum matching for tiny instances.
    fn brute_force(pred: &[NoteEvent], reference: &[NoteEvent], tol: f64) -> usize {
        fn go(i: usize, pred: &[NoteEvent], reference: &[NoteEvent], used: &mut Vec<bool>, tol: f64) -> usize {
            if i == pred.len() {
                return 0;
            }
            let mut best = go(i + 1, pred, reference, used, tol);
            for j in 0..reference.len() {
                if !used[j] && admissible(&pred[i], &reference[j], tol) {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, pred, reference, used, tol));
                    used[j] = false;
                }
            }
            best
        }
        go(0, pred, reference, &mut vec![false; reference.len()], tol)
    }

    #[test]
    fn identity_scores_one() {
        let notes = vec![note(60, 0.0), note(64, 0.5), note(60, 0.52)];
        let m = match_notes(&notes, &notes, 0.05).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let e = match_notes(&[], &[], 0.05).unwrap();
        assert_eq!(e.f1, 1.0);
    }

    #[test]
    fn shifted_onset_outside_tolerance() {
        let m = match_notes(&[note(60, 1.06)], &[note(60, 1.0)], 0.05).unwrap();
        assert_eq!(m.num_matches(), 0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn boundary_is_inclusive() {
        let m = match_notes(&[note(60, 1.05)], &[note(60, 1.0)], 0.05).unwrap();
        assert_eq!(m.num_matches(), 1);
        let m = match_notes(&[note(60, 0.3)], &[note(60, 0.25)], 0.05).unwrap();
        assert_eq!(m.num_matches(), 1);
    }

    #[test]
    fn pitch_must_agree() {
        let m = match_notes(&[note(61, 1.0)], &[note(60, 1.0)], 0.05).unwrap();
        assert_eq!(m.num_matches(), 0);
    }

    #[test]
    fn partial_recall_example() {
        let reference = vec![note(60, 0.0), note(62, 0.5), note(64, 1.0)];
        let pred = vec![note(60, 0.0), note(64, 1.0)];
        let m = match_notes(&pred, &reference, 0.05).unwrap();
        assert_eq!(m.precision, 1.0);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 0.8).abs() < 1e-12);
        assert_eq!(m.pairs, vec![(0, 0), (1, 2)]);
    }

    #[test]
    fn greedy_would_fail_here() {
        // Greedy pairing of pred 0 with ref 1 would leave pred 1 unmatched.
        let pred = vec![note(60, 1.00), note(60, 1.06)];
        let reference = vec![note(60, 0.96), note(60, 1.04)];
        let m = match_notes(&pred, &reference, 0.05).unwrap();
        assert_eq!(m.num_matches(), 2);
    }

    #[test]
    fn negative_tolerance_rejected() {
        assert!(matches!(match_notes(&[], &[], -0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn aggregate_cases() {
        let empty = aggregate(vec![], vec![], vec![], 0.05);
        assert!(empty.no_files);
        assert_eq!(empty.macro_f1, 0.0);
        let score = |f1| FileScore {
            name: String::new(),
            precision: f1,
            recall: f1,
            f1,
            matches: 0,
            num_pred: 0,
            num_ref: 0,
        };
        assert_eq!(aggregate(vec![score(0.6)], vec![], vec![], 0.05).macro_f1, 0.6);
        let two = aggregate(vec![score(0.6), score(1.0)], vec![], vec![], 0.05);
        assert!((two.macro_f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn corpus_from_directories() {
        let dir = tempfile::tempdir().unwrap();
        let (pd, rd) = (dir.path().join("pred"), dir.path().join("ref"));
        std::fs::create_dir_all(&pd).unwrap();
        std::fs::create_dir_all(&rd).unwrap();
        let reference = vec![note(60, 0.0), note(62, 0.5), note(64, 1.0)];
        notes_to_midi(&reference, rd.join("a.mid")).unwrap();
        notes_to_midi(&reference[..2], pd.join("a.mid")).unwrap();
        notes_to_midi(&reference, rd.join("b.mid")).unwrap();
        notes_to_midi(&reference, pd.join("b.mid")).unwrap();
        notes_to_midi(&reference, rd.join("only_ref.mid")).unwrap();

        let report = evaluate_corpus(&pd, &rd, 0.05, Execution::Sequential).unwrap();
        assert_eq!(report.files.len(), 2);
        assert_eq!(report.missing_prediction, vec!["only_ref".to_string()]);
        assert!(!report.is_complete());
        assert!((report.macro_f1 - 0.9).abs() < 1e-9);
        let parallel = evaluate_corpus(&pd, &rd, 0.05, Execution::default()).unwrap();
        assert_eq!(parallel, report);
    }

    fn small_notes() -> impl Strategy<Value = Vec<NoteEvent>> {
        prop::collection::vec((60u8..63, 0u32..40), 0..=6).prop_map(|v| {
            v.into_iter().map(|(p, k)| note(p, k as f64 * 0.02)).collect()
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(pred in small_notes(), reference in small_notes(), tol in 0.0f64..0.1) {
            let m = match_notes(&pred, &reference, tol).unwrap();
            prop_assert_eq!(m.num_matches(), brute_force(&pred, &reference, tol));
            let mut used_p = vec![false; pred.len()];
            let mut used_r = vec![false; reference.len()];
            for &(i, j) in &m.pairs {
                prop_assert!(!used_p[i] && !used_r[j]);
                used_p[i] = true;
                used_r[j] = true;
                prop_assert!(admissible(&pred[i], &reference[j], tol));
            }
        }

        #[test]
        fn swapping_sides_swaps_precision_and_recall(pred in small_notes(), reference in small_notes()) {
            let a = match_notes(&pred, &reference, 0.05).unwrap();
            let b = match_notes(&reference, &pred, 0.05).unwrap();
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }

        #[test]
        fn larger_tolerance_never_loses_matches(pred in small_notes(), reference in small_notes(), t1 in 0.0f64..0.1, extra in 0.0f64..0.1) {
            let a = match_notes(&pred, &reference, t1).unwrap();
            let b = match_notes(&pred, &reference, t1 + extra).unwrap();
            prop_assert!(b.num_matches() >= a.num_matches());
        }
    }
}
