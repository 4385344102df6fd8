//! Documents as sets of positioned text segments, plus the NDJSON corpus
//! format and the tokenizer.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DocumentError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn overlap_area(&self, other: &BoundingBox) -> f64 {
        let ox = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let oy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ox > 0.0 && oy > 0.0 {
            ox * oy
        } else {
            0.0
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()) {
            return Err("bbox has non-finite coordinates".into());
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("bbox has non-positive size w={} h={}", self.w, self.h));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    Word,
    Char,
}

/// Split on whitespace, keeping punctuation as separate tokens. Char mode
/// emits one token per non-space character (for scripts without spaces).
pub fn tokenize(text: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Char => text.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_string()).collect(),
        TokenizerMode::Word => {
            let mut tokens = Vec::new();
            let mut cur = String::new();
            for c in text.chars() {
                if c.is_whitespace() {
                    if !cur.is_empty() {
                        tokens.push(std::mem::take(&mut cur));
                    }
                } else if c.is_alphanumeric() {
                    cur.push(c);
                } else {
                    if !cur.is_empty() {
                        tokens.push(std::mem::take(&mut cur));
                    }
                    tokens.push(c.to_string());
                }
            }
            if !cur.is_empty() {
                tokens.push(cur);
            }
            tokens
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextSegment {
    pub id: u32,
    pub text: String,
    pub bbox: BoundingBox,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EntityAnnotation {
    #[serde(rename = "type")]
    pub entity_type: String,
    pub value: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: String,
    pub page_w: f64,
    pub page_h: f64,
    pub segments: Vec<TextSegment>,
    pub annotations: Vec<EntityAnnotation>,
}

// Serialized form (one JSON object per corpus line).

#[derive(Debug, Serialize, Deserialize)]
struct SegmentRecord {
    id: u32,
    text: String,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct PageRecord {
    w: f64,
    h: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    #[serde(rename = "type")]
    entity_type: String,
    value: String,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DocumentRecord {
    doc_id: String,
    page: PageRecord,
    segments: Vec<SegmentRecord>,
    #[serde(default)]
    annotations: Vec<AnnotationRecord>,
}

impl Document {
    /// Validate a parsed record and tokenize its segments.
    pub fn from_record(rec: DocumentRecord, mode: TokenizerMode) -> Result<Self, DocumentError> {
        let invalid = |msg: String| DocumentError::Invalid { doc_id: rec.doc_id.clone(), msg };
        if rec.segments.is_empty() {
            return Err(DocumentError::Empty);
        }
        if !(rec.page.w > 0.0 && rec.page.h > 0.0) {
            return Err(invalid("page size must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut segments = Vec::with_capacity(rec.segments.len());
        for s in &rec.segments {
            let bbox = BoundingBox::new(s.bbox[0], s.bbox[1], s.bbox[2], s.bbox[3]);
            bbox.validate().map_err(|e| invalid(format!("segment {}: {e}", s.id)))?;
            if !seen.insert(s.id) {
                return Err(invalid(format!("duplicate segment id {}", s.id)));
            }
            segments.push(TextSegment {
                id: s.id,
                text: s.text.clone(),
                bbox,
                tokens: tokenize(&s.text, mode),
            });
        }
        let annotations = rec
            .annotations
            .iter()
            .map(|a| EntityAnnotation {
                entity_type: a.entity_type.clone(),
                value: a.value.clone(),
                bbox: BoundingBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
            })
            .collect();
        let mut doc = Document {
            doc_id: rec.doc_id,
            page_w: rec.page.w,
            page_h: rec.page.h,
            segments,
            annotations,
        };
        doc.clamp_to_page();
        Ok(doc)
    }

    fn clamp_to_page(&mut self) {
        for s in &mut self.segments {
            s.bbox.x = s.bbox.x.clamp(0.0, (self.page_w - s.bbox.w).max(0.0));
            s.bbox.y = s.bbox.y.clamp(0.0, (self.page_h - s.bbox.h).max(0.0));
        }
    }

    pub fn to_record(&self) -> DocumentRecord {
        DocumentRecord {
            doc_id: self.doc_id.clone(),
            page: PageRecord { w: self.page_w, h: self.page_h },
            segments: self
                .segments
                .iter()
                .map(|s| SegmentRecord {
                    id: s.id,
                    text: s.text.clone(),
                    bbox: [s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h],
                })
                .collect(),
            annotations: self
                .annotations
                .iter()
                .map(|a| AnnotationRecord {
                    entity_type: a.entity_type.clone(),
                    value: a.value.clone(),
                    bbox: [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
                })
                .collect(),
        }
    }

    pub fn segment(&self, id: u32) -> Option<&TextSegment> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Group segments into lines (vertical centers within half the median
    /// segment height), lines top-to-bottom, within a line left-to-right.
    pub fn reading_order(&self) -> Vec<u32> {
        let mut heights: Vec<f64> = self.segments.iter().map(|s| s.bbox.h).collect();
        heights.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_h = heights[heights.len() / 2];
        let tol = 0.5 * median_h;

        let mut order: Vec<&TextSegment> = self.segments.iter().collect();
        order.sort_by(|a, b| {
            a.bbox
                .center()
                .1
                .partial_cmp(&b.bbox.center().1)
                .unwrap()
                .then(a.bbox.x.partial_cmp(&b.bbox.x).unwrap())
                .then(a.id.cmp(&b.id))
        });

        // sweep down, starting a new line when the next center is beyond
        // the tolerance from the current line's anchor
        let mut lines: Vec<Vec<&TextSegment>> = Vec::new();
        let mut anchor_y = f64::NEG_INFINITY;
        for seg in order {
            let cy = seg.bbox.center().1;
            if cy - anchor_y > tol {
                lines.push(Vec::new());
                anchor_y = cy;
            }
            lines.last_mut().unwrap().push(seg);
        }
        let mut out = Vec::with_capacity(self.segments.len());
        for line in &mut lines {
            line.sort_by(|a, b| {
                a.bbox.x.partial_cmp(&b.bbox.x).unwrap().then(a.id.cmp(&b.id))
            });
            out.extend(line.iter().map(|s| s.id));
        }
        out
    }
}

pub fn parse_document(line: &str, mode: TokenizerMode) -> Result<Document, DocumentError> {
    let rec: DocumentRecord = serde_json::from_str(line).map_err(|e| DocumentError::Parse { line: 0, source: e })?;
    Document::from_record(rec, mode)
}

/// Load a newline-delimited JSON corpus file.
pub fn load_corpus(path: &Path, mode: TokenizerMode) -> Result<Vec<Document>, DocumentError> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| DocumentError::Parse { line: i + 1, source: e })?;
        docs.push(Document::from_record(rec, mode)?);
    }
    Ok(docs)
}

pub fn save_corpus(path: &Path, docs: &[Document]) -> Result<(), DocumentError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for doc in docs {
        serde_json::to_writer(&mut w, &doc.to_record()).map_err(|e| {
            DocumentError::Invalid { doc_id: doc.doc_id.clone(), msg: e.to_string() }
        })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: u32, x: f64, y: f64, w: f64, h: f64) -> TextSegment {
        TextSegment {
            id,
            text: String::new(),
            bbox: BoundingBox::new(x, y, w, h),
            tokens: vec![],
        }
    }

    fn doc(segments: Vec<TextSegment>) -> Document {
        Document {
            doc_id: "t".into(),
            page_w: 1000.0,
            page_h: 1000.0,
            segments,
            annotations: vec![],
        }
    }

    #[test]
    fn tokenize_words_and_punct() {
        assert_eq!(tokenize("$5 off!", TokenizerMode::Word), vec!["$", "5", "off", "!"]);
        assert_eq!(tokenize("a-b", TokenizerMode::Word), vec!["a", "-", "b"]);
        assert_eq!(tokenize("", TokenizerMode::Word), Vec::<String>::new());
        assert_eq!(tokenize("ab c", TokenizerMode::Char), vec!["a", "b", "c"]);
    }

    #[test]
    fn minimal_record_loads() {
        let line = r#"{"doc_id":"d1","page":{"w":100,"h":100},"segments":[{"id":0,"text":"hi","bbox":[1,2,10,5]}]}"#;
        let d = parse_document(line, TokenizerMode::Word).unwrap();
        assert_eq!(d.segments.len(), 1);
        assert_eq!(d.segments[0].tokens, vec!["hi"]);
    }

    #[test]
    fn zero_width_rejected_with_segment_id() {
        let line = r#"{"doc_id":"d1","page":{"w":100,"h":100},"segments":[{"id":7,"text":"x","bbox":[1,2,0,5]}]}"#;
        let err = parse_document(line, TokenizerMode::Word).unwrap_err();
        assert!(err.to_string().contains("segment 7"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let line = r#"{"doc_id":"d1","page":{"w":100,"h":100},"segments":[{"id":1,"text":"a","bbox":[0,0,5,5]},{"id":1,"text":"b","bbox":[10,0,5,5]}]}"#;
        assert!(parse_document(line, TokenizerMode::Word).is_err());
    }

    #[test]
    fn roundtrip_identity() {
        let line = r#"{"doc_id":"d1","page":{"w":100,"h":100},"segments":[{"id":0,"text":"hi there","bbox":[1.5,2,10,5]}],"annotations":[{"type":"price","value":"5.00","bbox":[1,1,3,3]}]}"#;
        let d = parse_document(line, TokenizerMode::Word).unwrap();
        let back = serde_json::to_string(&d.to_record()).unwrap();
        let d2 = parse_document(&back, TokenizerMode::Word).unwrap();
        assert_eq!(d.doc_id, d2.doc_id);
        assert_eq!(d.segments[0].bbox, d2.segments[0].bbox);
        assert_eq!(d.segments[0].text, d2.segments[0].text);
        assert_eq!(d.annotations, d2.annotations);
    }

    #[test]
    fn reading_order_same_line_left_right() {
        let d = doc(vec![seg(0, 100.0, 0.0, 10.0, 10.0), seg(1, 0.0, 0.0, 10.0, 10.0)]);
        assert_eq!(d.reading_order(), vec![1, 0]);
    }

    #[test]
    fn reading_order_top_bottom() {
        let d = doc(vec![seg(0, 0.0, 50.0, 10.0, 10.0), seg(1, 0.0, 0.0, 10.0, 10.0)]);
        assert_eq!(d.reading_order(), vec![1, 0]);
    }

    #[test]
    fn reading_order_grid_with_jitter_is_row_major() {
        // 3×3 grid with ±1px jitter, heights 10: expect row-major ids 0..9
        let mut segs = Vec::new();
        let jit = [1.0, -1.0, 0.5, -0.5, 1.0, -1.0, 0.0, 1.0, -0.5];
        for r in 0..3 {
            for c in 0..3 {
                let id = (r * 3 + c) as u32;
                segs.push(seg(id, c as f64 * 50.0, r as f64 * 40.0 + jit[(r * 3 + c) as usize], 20.0, 10.0));
            }
        }
        // shuffle input order
        segs.swap(0, 7);
        segs.swap(2, 5);
        let d = doc(segs);
        assert_eq!(d.reading_order(), (0..9).collect::<Vec<u32>>());
    }
}
