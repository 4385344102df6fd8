//! IOB tag schema, annotation-to-segment alignment, and entity span
//! extraction from (possibly invalid) predicted tag sequences.

use serde::{Deserialize, Serialize};

use crate::document::{tokenize, Document, TokenizerMode};

/// IOB tagset over an ordered entity schema. Tag 0 is O; entity k owns
/// tags 1+2k (B) and 2+2k (I).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    types: Vec<String>,
}

pub const TAG_O: usize = 0;

impl TagSet {
    pub fn new(types: Vec<String>) -> Self {
        TagSet { types }
    }

    pub fn num_tags(&self) -> usize {
        1 + 2 * self.types.len()
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn type_index(&self, entity_type: &str) -> Option<usize> {
        self.types.iter().position(|t| t == entity_type)
    }

    pub fn begin(&self, type_idx: usize) -> usize {
        1 + 2 * type_idx
    }

    pub fn inside(&self, type_idx: usize) -> usize {
        2 + 2 * type_idx
    }

    pub fn is_begin(&self, tag: usize) -> bool {
        tag != TAG_O && (tag - 1) % 2 == 0
    }

    pub fn is_inside(&self, tag: usize) -> bool {
        tag != TAG_O && (tag - 1) % 2 == 1
    }

    pub fn type_of(&self, tag: usize) -> Option<usize> {
        if tag == TAG_O {
            None
        } else {
            Some((tag - 1) / 2)
        }
    }

    pub fn tag_name(&self, tag: usize) -> String {
        match self.type_of(tag) {
            None => "O".into(),
            Some(k) if self.is_begin(tag) => format!("B-{}", self.types[k]),
            Some(k) => format!("I-{}", self.types[k]),
        }
    }

    /// Gold validity: I-X only after B-X or I-X.
    pub fn is_valid_sequence(&self, tags: &[usize]) -> bool {
        let mut prev = TAG_O;
        for &t in tags {
            if self.is_inside(t) {
                let ty = self.type_of(t);
                if self.type_of(prev) != ty || prev == TAG_O {
                    return false;
                }
            }
            prev = t;
        }
        true
    }
}

/// Per-token gold tags for one segment.
pub type TagSequence = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntitySpan {
    pub entity_type: String,
    pub segment_id: u32,
    /// token index range [start, end) within the segment
    pub token_range: (usize, usize),
    pub surface: String,
}

#[derive(Debug, Clone)]
pub struct AlignedDocument {
    /// one tag sequence per segment, document order
    pub tags: Vec<TagSequence>,
    /// per segment: entity type index, or None for "other"
    pub segment_classes: Vec<Option<usize>>,
    /// annotations matched to a segment but whose value was not found in
    /// the segment text; dropped from supervision
    pub dropped: usize,
    /// annotations with no segment above the overlap threshold
    pub unmatched: usize,
}

/// Whitespace-insensitive canonical form used both for locating values in
/// segment text and for evaluation matching.
pub fn normalize_value(s: &str, mode: TokenizerMode) -> String {
    tokenize(s, mode).join(" ")
}

/// Assign each annotation to the segment with the best overlap ratio
/// above `threshold` (ratio = overlap / min(area_ann, area_seg)), then mark
/// its value tokens B-X/I-X. Everything else, including empty segments, is O.
pub fn align_annotations(
    doc: &Document,
    tagset: &TagSet,
    threshold: f64,
    mode: TokenizerMode,
) -> AlignedDocument {
    let mut tags: Vec<TagSequence> = doc.segments.iter().map(|s| vec![TAG_O; s.tokens.len()]).collect();
    let mut segment_classes: Vec<Option<usize>> = vec![None; doc.segments.len()];
    let mut dropped = 0;
    let mut unmatched = 0;

    for ann in &doc.annotations {
        let Some(type_idx) = tagset.type_index(&ann.entity_type) else {
            continue;
        };
        // best segment by overlap ratio, first index on ties
        let mut best: Option<(usize, f64)> = None;
        for (si, seg) in doc.segments.iter().enumerate() {
            let overlap = ann.bbox.overlap_area(&seg.bbox);
            let ratio = overlap / ann.bbox.area().min(seg.bbox.area());
            if ratio > threshold && best.map_or(true, |(_, r)| ratio > r) {
                best = Some((si, ratio));
            }
        }
        let Some((si, _)) = best else {
            unmatched += 1;
            continue;
        };
        let seg = &doc.segments[si];
        let value_tokens = tokenize(&ann.value, mode);
        match find_subsequence(&seg.tokens, &value_tokens) {
            Some(start) => {
                let end = start + value_tokens.len();
                tags[si][start] = tagset.begin(type_idx);
                for t in &mut tags[si][start + 1..end] {
                    *t = tagset.inside(type_idx);
                }
                segment_classes[si] = Some(type_idx);
            }
            None => dropped += 1,
        }
    }

    AlignedDocument { tags, segment_classes, dropped, unmatched }
}

fn find_subsequence(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

/// Repair-then-extract: a dangling I-X is promoted to B-X; maximal
/// B-X (I-X)* runs become spans.
pub fn decode_entities(
    tags: &[usize],
    tokens: &[String],
    segment_id: u32,
    tagset: &TagSet,
    mode: TokenizerMode,
) -> Vec<EntitySpan> {
    let sep = match mode {
        TokenizerMode::Word => " ",
        TokenizerMode::Char => "",
    };
    let mut spans = Vec::new();
    let mut cur: Option<(usize, usize)> = None; // (type_idx, start)
    for (k, &tag) in tags.iter().enumerate() {
        let ty = tagset.type_of(tag);
        let continues = match (cur, ty) {
            (Some((ct, _)), Some(t)) => tagset.is_inside(tag) && ct == t,
            _ => false,
        };
        if continues {
            continue;
        }
        if let Some((ct, start)) = cur.take() {
            spans.push(make_span(ct, start, k, tokens, segment_id, tagset, sep));
        }
        if let Some(t) = ty {
            // B-X starts a span; a dangling I-X is repaired to B-X
            cur = Some((t, k));
        }
    }
    if let Some((ct, start)) = cur {
        spans.push(make_span(ct, start, tags.len(), tokens, segment_id, tagset, sep));
    }
    spans
}

fn make_span(
    type_idx: usize,
    start: usize,
    end: usize,
    tokens: &[String],
    segment_id: u32,
    tagset: &TagSet,
    sep: &str,
) -> EntitySpan {
    EntitySpan {
        entity_type: tagset.types()[type_idx].clone(),
        segment_id,
        token_range: (start, end),
        surface: tokens[start..end].join(sep),
    }
}
