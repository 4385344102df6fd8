//! Entity-level precision/recall/F1. A predicted entity is a true
//! positive iff its (type, normalized value) pair matches a gold
//! annotation of the same document; duplicates match greedily per value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::document::Document;
use crate::error::ModelError;
use crate::labels::{align_annotations, normalize_value};
use crate::model::{Mode, Model};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub per_type: BTreeMap<String, TypeMetrics>,
    pub micro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    /// micro-F1 restricted to `ambiguous_types`, when any were given
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ambiguous_micro_f1: Option<f64>,
    /// fraction of segments whose predicted class matches alignment
    /// (multitask mode only)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_class_accuracy: Option<f64>,
}

#[derive(Default)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn prf(c: &Counts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Multiset counts of normalized values per entity type.
fn value_counts(items: impl Iterator<Item = (String, String)>) -> BTreeMap<(String, String), usize> {
    let mut m = BTreeMap::new();
    for key in items {
        *m.entry(key).or_insert(0) += 1;
    }
    m
}

pub fn evaluate(
    model: &Model,
    docs: &[Document],
    overlap_threshold: f64,
    ambiguous_types: &[String],
) -> Result<Metrics, ModelError> {
    let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
    let mut support: BTreeMap<String, usize> = BTreeMap::new();
    for t in model.tagset.types() {
        counts.insert(t.clone(), Counts::default());
        support.insert(t.clone(), 0);
    }
    let mut seg_correct = 0usize;
    let mut seg_total = 0usize;

    for doc in docs {
        let pred = model.predict(doc)?;
        let predicted = value_counts(pred.entities.iter().map(|e| {
            (e.entity_type.clone(), normalize_value(&e.surface, model.config.tokenizer))
        }));
        let gold = value_counts(doc.annotations.iter().filter_map(|a| {
            model
                .tagset
                .type_index(&a.entity_type)
                .map(|_| (a.entity_type.clone(), normalize_value(&a.value, model.config.tokenizer)))
        }));
        for (ty, n) in gold.iter().fold(BTreeMap::<&str, usize>::new(), |mut m, ((t, _), c)| {
            *m.entry(t).or_insert(0) += c;
            m
        }) {
            *support.get_mut(ty).unwrap() += n;
        }
        let keys: std::collections::BTreeSet<_> = predicted.keys().chain(gold.keys()).cloned().collect();
        for key in keys {
            let p = predicted.get(&key).copied().unwrap_or(0);
            let g = gold.get(&key).copied().unwrap_or(0);
            let c = counts.get_mut(&key.0).expect("predictions only use tagset types");
            c.tp += p.min(g);
            c.fp += p.saturating_sub(g);
            c.fn_ += g.saturating_sub(p);
        }

        if model.config.mode == Mode::GcnMultitask {
            let aligned = align_annotations(doc, &model.tagset, overlap_threshold, model.config.tokenizer);
            let classes = pred.segment_classes.as_ref().expect("multitask prediction");
            let other = model.tagset.num_types();
            for (got, want) in classes.iter().zip(&aligned.segment_classes) {
                if *got == want.unwrap_or(other) {
                    seg_correct += 1;
                }
                seg_total += 1;
            }
        }
    }

    let mut per_type = BTreeMap::new();
    let mut micro = Counts::default();
    let mut ambiguous = Counts::default();
    for (ty, c) in &counts {
        let (p, r, f1) = prf(c);
        per_type.insert(ty.clone(), TypeMetrics { p, r, f1, support: support[ty] });
        micro.tp += c.tp;
        micro.fp += c.fp;
        micro.fn_ += c.fn_;
        if ambiguous_types.iter().any(|a| a == ty) {
            ambiguous.tp += c.tp;
            ambiguous.fp += c.fp;
            ambiguous.fn_ += c.fn_;
        }
    }
    let (micro_precision, micro_recall, micro_f1) = prf(&micro);
    let ambiguous_micro_f1 = if ambiguous_types.is_empty() { None } else { Some(prf(&ambiguous).2) };
    let segment_class_accuracy =
        (seg_total > 0).then(|| seg_correct as f64 / seg_total as f64);

    Ok(Metrics {
        per_type,
        micro_f1,
        micro_precision,
        micro_recall,
        ambiguous_micro_f1,
        segment_class_accuracy,
    })
}

/// The metrics JSON document written by the evaluate/train commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub per_type: BTreeMap<String, TypeMetrics>,
    pub micro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ambiguous_micro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_class_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn new(mode: Mode, seed: u64, m: Metrics) -> Self {
        MetricsReport {
            mode: mode.as_str().to_string(),
            seed,
            per_type: m.per_type,
            micro_f1: m.micro_f1,
            micro_precision: m.micro_precision,
            micro_recall: m.micro_recall,
            ambiguous_micro_f1: m.ambiguous_micro_f1,
            segment_class_accuracy: m.segment_class_accuracy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // direct counting tests exercise prf/value_counts; full-model
    // evaluation paths are covered by the training tests

    #[test]
    fn prf_hand_values() {
        let c = Counts { tp: 3, fp: 1, fn_: 2 };
        let (p, r, f1) = prf(&c);
        assert!((p - 0.75).abs() < 1e-12);
        assert!((r - 0.6).abs() < 1e-12);
        assert!((f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn empty_counts_give_zero_not_nan() {
        let (p, r, f1) = prf(&Counts::default());
        assert_eq!((p, r, f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicate_values_match_greedily() {
        // two predicted "12.50", one gold -> 1 tp, 1 fp
        let predicted = value_counts(
            vec![("price".to_string(), "12.50".to_string()); 2].into_iter(),
        );
        let gold = value_counts(
            vec![("price".to_string(), "12.50".to_string())].into_iter(),
        );
        let key = ("price".to_string(), "12.50".to_string());
        let p = predicted[&key];
        let g = gold[&key];
        assert_eq!(p.min(g), 1);
        assert_eq!(p.saturating_sub(g), 1);
    }
}
