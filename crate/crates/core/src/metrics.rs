//! Levenshtein alignment counts and corpus error rates.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    fn add(self, other: EditCounts) -> EditCounts {
        EditCounts {
            distance: self.distance + other.distance,
            substitutions: self.substitutions + other.substitutions,
            insertions: self.insertions + other.insertions,
            deletions: self.deletions + other.deletions,
        }
    }

    /// Ordering key: fewest edits, then fewest insertions plus deletions
    /// (i.e. most substitutions).
    fn key(&self) -> (usize, usize) {
        (self.distance, self.insertions + self.deletions)
    }
}

/// Unit-cost edit distance of `hyp` against `reference`. Insertions are
/// extra hypothesis labels, deletions are missed reference labels.
///
/// Among minimum-cost alignments the one with the most substitutions is
/// reported. Since `I − D = |hyp| − |ref|` for every alignment, that choice
/// pins down all three counts.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let cols = reference.len() + 1;
    let mut prev: Vec<EditCounts> = (0..cols)
        .map(|j| EditCounts {
            distance: j,
            deletions: j,
            ..EditCounts::default()
        })
        .collect();
    let mut cur = vec![EditCounts::default(); cols];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = EditCounts {
            distance: i + 1,
            insertions: i + 1,
            ..EditCounts::default()
        };
        for (j, r) in reference.iter().enumerate() {
            let diag = if h == r {
                prev[j]
            } else {
                prev[j].add(EditCounts {
                    distance: 1,
                    substitutions: 1,
                    ..EditCounts::default()
                })
            };
            let ins = prev[j + 1].add(EditCounts {
                distance: 1,
                insertions: 1,
                ..EditCounts::default()
            });
            let del = cur[j].add(EditCounts {
                distance: 1,
                deletions: 1,
                ..EditCounts::default()
            });
            let mut best = diag;
            for cand in [ins, del] {
                if cand.key() < best.key() {
                    best = cand;
                }
            }
            cur[j + 1] = best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub wer: f64,
    pub edits: EditCounts,
    pub reference_labels: usize,
    pub samples: usize,
    pub perplexity: Option<f64>,
    pub fer: Option<f64>,
}

/// Corpus WER: total edits over total reference length. A reference
/// without a transcript is scored against an empty hypothesis.
pub fn evaluate<T: PartialEq>(
    transcripts: &[(String, Vec<T>)],
    references: &[(String, Vec<T>)],
) -> Result<MetricsReport> {
    let refs: BTreeMap<&str, &[T]> = references
        .iter()
        .map(|(id, r)| (id.as_str(), r.as_slice()))
        .collect();
    let mut seen = BTreeMap::new();
    let mut edits = EditCounts::default();
    for (id, hyp) in transcripts {
        let r = refs
            .get(id.as_str())
            .ok_or_else(|| Error::MissingReference(id.clone()))?;
        edits = edits.add(edit_distance(hyp, r));
        seen.insert(id.as_str(), ());
    }
    for (id, r) in &refs {
        if !seen.contains_key(id) {
            edits = edits.add(edit_distance(&[], r));
        }
    }
    let reference_labels: usize = refs.values().map(|r| r.len()).sum();
    Ok(MetricsReport {
        wer: error_rate(edits.distance, reference_labels),
        edits,
        reference_labels,
        samples: refs.len(),
        perplexity: None,
        fer: None,
    })
}

fn error_rate(edits: usize, total: usize) -> f64 {
    match (edits, total) {
        (0, _) => 0.0,
        (_, 0) => f64::INFINITY,
        _ => edits as f64 / total as f64,
    }
}

/// Arithmetic mean, `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
