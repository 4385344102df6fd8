//! Synthetic invoice-like document generator. The hard entities are
//! disambiguable only by layout: every document carries a price/tax pair
//! with identical text, and buyer/seller names come from one shared pool,
//! so a tagger that only sees segment text is reduced to guessing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::document::{BoundingBox, Document, EntityAnnotation, TextSegment, TokenizerMode};
use crate::error::ModelError;
use crate::labels::normalize_value;

pub const PAGE_W: f64 = 612.0;
pub const PAGE_H: f64 = 792.0;
const CHAR_W: f64 = 7.2;
const LINE_H: f64 = 12.0;
const KEY_GAP: f64 = 8.0;

pub fn entity_types() -> Vec<String> {
    ["invoice_no", "date", "buyer", "seller", "price", "tax"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// The types whose values are textually identical within a document.
pub fn ambiguous_types() -> Vec<String> {
    vec!["price".to_string(), "tax".to_string()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Amount,
    Date,
    InvoiceId,
    Name,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotSpec {
    /// None for static decoration slots
    pub entity_type: Option<String>,
    /// key segment placed left of the value; None = keyless slot
    pub key_text: Option<String>,
    /// page-fraction anchor of the slot's left edge
    pub anchor: (f64, f64),
    pub value: SlotValue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SlotValue {
    Gen(ValueKind),
    Fixed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub id: usize,
    pub slots: Vec<SlotSpec>,
}

impl TemplateSpec {
    /// Worst-case box of a slot (key + widest value) for the overlap check.
    fn slot_box(&self, slot: &SlotSpec) -> BoundingBox {
        let value_w = CHAR_W
            * match &slot.value {
                SlotValue::Fixed(s) => s.len() as f64,
                SlotValue::Gen(ValueKind::Amount) => 7.0,
                SlotValue::Gen(ValueKind::Date) => 10.0,
                SlotValue::Gen(ValueKind::InvoiceId) => 9.0,
                SlotValue::Gen(ValueKind::Name) => 18.0,
            };
        let key_w = slot.key_text.as_ref().map_or(0.0, |k| CHAR_W * k.len() as f64 + KEY_GAP);
        BoundingBox::new(slot.anchor.0 * PAGE_W, slot.anchor.1 * PAGE_H, key_w + value_w, LINE_H)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let boxes: Vec<BoundingBox> = self.slots.iter().map(|s| self.slot_box(s)).collect();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes[i].overlap_area(&boxes[j]) > 0.0 {
                    return Err(ModelError::Config(format!(
                        "template {}: slots {i} and {j} overlap at zero noise",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn default_split() -> (f64, f64, f64) {
    (0.7, 0.15, 0.15)
}
fn default_n_documents() -> usize {
    300
}
fn default_n_templates() -> usize {
    1
}
fn default_sigma() -> f64 {
    // annotation boxes keep the zero-noise geometry, so generation jitter
    // must stay well inside the 0.7 overlap threshold (±3.6px on 12px rows)
    0.001
}
fn default_distractors() -> (usize, usize) {
    (4, 8)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default = "default_n_documents")]
    pub n_documents: usize,
    /// 1 = fixed-template corpus, >1 = multi-template corpus
    #[serde(default = "default_n_templates")]
    pub n_templates: usize,
    /// segment position jitter as a fraction of page size
    #[serde(default = "default_sigma")]
    pub jitter_sigma: f64,
    /// inclusive range of distractor segments per document
    #[serde(default = "default_distractors")]
    pub distractor_range: (usize, usize),
    #[serde(default)]
    pub seed: u64,
    /// train/val/test fractions, must sum to 1
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
}

impl GeneratorConfig {
    pub fn fixed_template(seed: u64) -> Self {
        GeneratorConfig {
            n_documents: default_n_documents(),
            n_templates: 1,
            jitter_sigma: default_sigma(),
            distractor_range: default_distractors(),
            seed,
            split: default_split(),
        }
    }

    pub fn multi_template(seed: u64) -> Self {
        GeneratorConfig { n_templates: 10, ..Self::fixed_template(seed) }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (a, b, c) = self.split;
        if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(ModelError::Config("split fractions must be non-negative and sum to 1".into()));
        }
        if self.jitter_sigma < 0.0 {
            return Err(ModelError::Config("jitter sigma must be >= 0".into()));
        }
        if self.n_documents == 0 || self.n_templates == 0 {
            return Err(ModelError::Config("need at least one document and one template".into()));
        }
        if self.distractor_range.0 > self.distractor_range.1 {
            return Err(ModelError::Config("distractor range lo > hi".into()));
        }
        Ok(())
    }
}

pub struct Corpus {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
}

impl Corpus {
    pub fn all(&self) -> impl Iterator<Item = &Document> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

const NAME_POOL: &[&str] = &[
    "Acme Corp", "Zenith Ltd", "Borealis GmbH", "Cobalt Partners", "Delta Freight",
    "Ember Goods", "Fairview Co", "Granite Works", "Harbor Trade", "Ivory Labs",
    "Juniper Inc", "Krill Marine", "Lumen Power", "Meridian LLC", "Northgate Oy",
    "Opal Stores", "Pinetree AB", "Quartz Media", "Rivergate SA", "Summit Tools",
];

const PHRASE_POOL: &[&str] = &[
    "Thank you for your business",
    "Page 1 of 1",
    "Customer copy",
    "All sales final",
    "Payment due on receipt",
    "Keep this for your records",
    "Authorized signature",
    "Terms and conditions apply",
    "Original document",
    "Questions? Call our office",
];

fn gen_value(kind: ValueKind, rng: &mut ChaCha8Rng) -> String {
    match kind {
        ValueKind::Amount => format!("${}.{:02}", rng.gen_range(10..100), rng.gen_range(0..100)),
        ValueKind::Date => format!(
            "{}-{:02}-{:02}",
            rng.gen_range(2023..2026),
            rng.gen_range(1..13),
            rng.gen_range(1..29)
        ),
        ValueKind::InvoiceId => format!("INV-{:05}", rng.gen_range(0..100_000)),
        ValueKind::Name => NAME_POOL.choose(rng).unwrap().to_string(),
    }
}

/// The fixed-template layout: keyless value slots at pinned positions.
/// Only geometry separates price from tax and buyer from seller.
fn fixed_template() -> TemplateSpec {
    let slot = |ty: Option<&str>, anchor: (f64, f64), value: SlotValue| SlotSpec {
        entity_type: ty.map(|s| s.to_string()),
        key_text: None,
        anchor,
        value,
    };
    TemplateSpec {
        id: 0,
        slots: vec![
            slot(None, (0.08, 0.04), SlotValue::Fixed("INVOICE".into())),
            slot(Some("invoice_no"), (0.62, 0.04), SlotValue::Gen(ValueKind::InvoiceId)),
            slot(Some("date"), (0.62, 0.09), SlotValue::Gen(ValueKind::Date)),
            slot(Some("buyer"), (0.08, 0.20), SlotValue::Gen(ValueKind::Name)),
            slot(Some("seller"), (0.08, 0.28), SlotValue::Gen(ValueKind::Name)),
            slot(Some("price"), (0.62, 0.55), SlotValue::Gen(ValueKind::Amount)),
            slot(Some("tax"), (0.62, 0.63), SlotValue::Gen(ValueKind::Amount)),
        ],
    }
}

/// Multi-template layouts: each field gets a key segment spatially
/// adjacent (left) to its value, with per-template randomized positions.
fn random_template(id: usize, seed: u64) -> TemplateSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e3a_91b2_0000_0000 ^ id as u64);
    let fields: [(&str, &str, ValueKind); 6] = [
        ("invoice_no", "Invoice No:", ValueKind::InvoiceId),
        ("date", "Date:", ValueKind::Date),
        ("buyer", "Buyer:", ValueKind::Name),
        ("seller", "Seller:", ValueKind::Name),
        ("price", "Total:", ValueKind::Amount),
        ("tax", "Tax:", ValueKind::Amount),
    ];
    // 2 columns × 7 rows of candidate cells; pick 6 distinct ones
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for r in 0..7 {
        for c in 0..2 {
            cells.push((0.06 + 0.46 * c as f64, 0.06 + 0.13 * r as f64));
        }
    }
    cells.shuffle(&mut rng);
    let mut slots = vec![SlotSpec {
        entity_type: None,
        key_text: None,
        anchor: (0.35, 0.005),
        value: SlotValue::Fixed("STATEMENT".into()),
    }];
    for (k, (ty, key, kind)) in fields.iter().enumerate() {
        slots.push(SlotSpec {
            entity_type: Some(ty.to_string()),
            key_text: Some(key.to_string()),
            anchor: cells[k],
            value: SlotValue::Gen(*kind),
        });
    }
    TemplateSpec { id, slots }
}

pub fn build_templates(cfg: &GeneratorConfig) -> Result<Vec<TemplateSpec>, ModelError> {
    let templates: Vec<TemplateSpec> = if cfg.n_templates == 1 {
        vec![fixed_template()]
    } else {
        (0..cfg.n_templates).map(|t| random_template(t, cfg.seed)).collect()
    };
    for t in &templates {
        t.validate()?;
    }
    Ok(templates)
}

fn text_box(x: f64, y: f64, text: &str) -> BoundingBox {
    BoundingBox::new(x, y, CHAR_W * text.len() as f64, LINE_H)
}

fn clamp_box(mut b: BoundingBox) -> BoundingBox {
    b.x = b.x.clamp(0.0, (PAGE_W - b.w).max(0.0));
    b.y = b.y.clamp(0.0, (PAGE_H - b.h).max(0.0));
    b
}

fn generate_document(
    cfg: &GeneratorConfig,
    template: &TemplateSpec,
    doc_index: usize,
) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ doc_index as u64);
    let mut segments: Vec<TextSegment> = Vec::new();
    let mut annotations = Vec::new();
    let mut next_id = 0u32;
    let mut push = |segments: &mut Vec<TextSegment>, text: String, bbox: BoundingBox| {
        let id = next_id;
        next_id += 1;
        segments.push(TextSegment {
            id,
            tokens: crate::document::tokenize(&text, TokenizerMode::Word),
            text,
            bbox,
        });
        id
    };

    // the ambiguity source: price and tax share one amount string
    let shared_amount = gen_value(ValueKind::Amount, &mut rng);
    // buyer and seller draw distinct names from the shared pool
    let buyer = gen_value(ValueKind::Name, &mut rng);
    let seller = loop {
        let s = gen_value(ValueKind::Name, &mut rng);
        if s != buyer {
            break s;
        }
    };

    for slot in &template.slots {
        let value = match (&slot.value, slot.entity_type.as_deref()) {
            (_, Some("price")) | (_, Some("tax")) => shared_amount.clone(),
            (_, Some("buyer")) => buyer.clone(),
            (_, Some("seller")) => seller.clone(),
            (SlotValue::Fixed(s), _) => s.clone(),
            (SlotValue::Gen(kind), _) => gen_value(*kind, &mut rng),
        };
        let mut x = slot.anchor.0 * PAGE_W;
        let y = slot.anchor.1 * PAGE_H;
        if let Some(key) = &slot.key_text {
            let kb = text_box(x, y, key);
            x += kb.w + KEY_GAP;
            push(&mut segments, key.clone(), kb);
        }
        let vb = text_box(x, y, &value);
        push(&mut segments, value.clone(), vb);
        if let Some(ty) = &slot.entity_type {
            annotations.push(EntityAnnotation { entity_type: ty.clone(), value, bbox: vb });
        }
    }

    // distractors: free-position noise, including amount- and
    // name-lookalikes so sequence position alone cannot identify entities
    let (lo, hi) = cfg.distractor_range;
    let n_distract = rng.gen_range(lo..=hi);
    let mut placed: Vec<BoundingBox> = segments.iter().map(|s| s.bbox).collect();
    for _ in 0..n_distract {
        let text = match rng.gen_range(0..10) {
            0..=3 => PHRASE_POOL.choose(&mut rng).unwrap().to_string(),
            4..=6 => gen_value(ValueKind::Amount, &mut rng),
            _ => gen_value(ValueKind::Name, &mut rng),
        };
        for _attempt in 0..40 {
            let x = rng.gen_range(0.03..0.72) * PAGE_W;
            let y = rng.gen_range(0.03..0.95) * PAGE_H;
            let b = clamp_box(text_box(x, y, &text));
            // generous margin: a distractor sitting next to a key would be
            // geometrically indistinguishable from a labeled value
            let padded = BoundingBox::new(b.x - 24.0, b.y - 10.0, b.w + 48.0, b.h + 20.0);
            if placed.iter().all(|p| padded.overlap_area(p) == 0.0) {
                placed.push(b);
                push(&mut segments, text, b);
                break;
            }
        }
    }

    // jitter segment positions; annotation boxes keep the zero-noise
    // geometry, so sigma must stay small enough for alignment
    if cfg.jitter_sigma > 0.0 {
        let nx = Normal::new(0.0, cfg.jitter_sigma * PAGE_W).unwrap();
        let ny = Normal::new(0.0, cfg.jitter_sigma * PAGE_H).unwrap();
        for seg in &mut segments {
            let mut b = seg.bbox;
            b.x += nx.sample(&mut rng);
            b.y += ny.sample(&mut rng);
            seg.bbox = clamp_box(b);
        }
    }

    Document {
        doc_id: format!("doc-{doc_index:05}"),
        page_w: PAGE_W,
        page_h: PAGE_H,
        segments,
        annotations,
    }
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus, ModelError> {
    cfg.validate()?;
    let templates = build_templates(cfg)?;
    let docs: Vec<Document> = (0..cfg.n_documents)
        .map(|i| generate_document(cfg, &templates[i % templates.len()], i))
        .collect();
    let n = docs.len();
    let n_train = (n as f64 * cfg.split.0).round() as usize;
    let n_val = (n as f64 * cfg.split.1).round() as usize;
    let n_val_end = (n_train + n_val).min(n);
    let mut it = docs.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val_end - n_train).collect();
    let test: Vec<_> = it.collect();
    Ok(Corpus { train, val, test })
}

/// Shift every segment (and its annotations) by independent Gaussian
/// noise of σ × page size, clamped to the page. Text is unchanged.
pub fn perturb<R: Rng>(doc: &Document, sigma: f64, rng: &mut R) -> Document {
    assert!(sigma >= 0.0);
    let mut out = doc.clone();
    if sigma == 0.0 {
        return out;
    }
    let nx = Normal::new(0.0, sigma * doc.page_w).unwrap();
    let ny = Normal::new(0.0, sigma * doc.page_h).unwrap();
    for si in 0..out.segments.len() {
        let dx: f64 = nx.sample(rng);
        let dy: f64 = ny.sample(rng);
        let old = out.segments[si].bbox;
        let mut b = old;
        b.x = (b.x + dx).clamp(0.0, (doc.page_w - b.w).max(0.0));
        b.y = (b.y + dy).clamp(0.0, (doc.page_h - b.h).max(0.0));
        out.segments[si].bbox = b;
        // annotations ride along with their best-overlapping segment
        for ann in &mut out.annotations {
            if ann.bbox.overlap_area(&old) >= 0.5 * ann.bbox.area() {
                ann.bbox.x = (ann.bbox.x + b.x - old.x).clamp(0.0, doc.page_w - ann.bbox.w);
                ann.bbox.y = (ann.bbox.y + b.y - old.y).clamp(0.0, doc.page_h - ann.bbox.h);
            }
        }
    }
    out
}

/// Fraction of documents containing a same-text different-type entity pair.
pub fn ambiguity_audit(docs: &[Document]) -> f64 {
    if docs.is_empty() {
        return 0.0;
    }
    let hits = docs
        .iter()
        .filter(|d| {
            d.annotations.iter().enumerate().any(|(i, a)| {
                d.annotations.iter().skip(i + 1).any(|b| {
                    a.entity_type != b.entity_type
                        && normalize_value(&a.value, TokenizerMode::Word)
                            == normalize_value(&b.value, TokenizerMode::Word)
                })
            })
        })
        .count();
    hits as f64 / docs.len() as f64
}
