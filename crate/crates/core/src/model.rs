//! The full extraction model: optional graph convolution stage feeding a
//! BiLSTM-CRF tagger, the two sequence-only baselines, and the auxiliary
//! segment classification head with uncertainty-weighted loss combination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{crf_log_likelihood, viterbi_decode, CrfVars};
use crate::document::{Document, TokenizerMode};
use crate::error::{ModelError, NumericError};
use crate::gcn::{GcnLayerSpec, GcnStackSpec, SegmentEncoderSpec};
use crate::graph::{DocumentGraph, EDGE_FEATURE_DIM};
use crate::labels::{decode_entities, AlignedDocument, EntitySpan, TagSet, TAG_O};
use crate::lstm::{bilstm_forward, BiLstmSpec};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{Vocab, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// BiLSTM-CRF on each text segment in isolation
    Baseline1,
    /// BiLSTM-CRF on the reading-order concatenation of all segments
    Baseline2,
    /// graph convolution embeddings fused into the tagger
    Gcn,
    /// gcn plus the auxiliary segment classification task
    GcnMultitask,
}

impl Mode {
    pub fn uses_graph(self) -> bool {
        matches!(self, Mode::Gcn | Mode::GcnMultitask)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline1 => "baseline1",
            Mode::Baseline2 => "baseline2",
            Mode::Gcn => "gcn",
            Mode::GcnMultitask => "gcn_multitask",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub no_edge_features: bool,
    #[serde(default)]
    pub no_text_features: bool,
    #[serde(default)]
    pub no_attention: bool,
}

impl AblationFlags {
    pub fn any(&self) -> bool {
        self.no_edge_features || self.no_text_features || self.no_attention
    }
}

fn default_layers() -> usize {
    2
}
fn default_d_tok() -> usize {
    64
}
fn default_enc_hidden() -> usize {
    32
}
fn default_d_hidden() -> usize {
    64
}
fn default_d_edge_out() -> usize {
    16
}
fn default_tagger_hidden() -> usize {
    64
}
fn default_slope() -> f64 {
    0.01
}
fn default_edge_scale() -> f64 {
    // maps geometric edge distances (up to ~50 source-heights across a
    // page) into
    // roughly [-2, 2], where the triplet MLP can trade them off against
    // the node-text signal
    0.04
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    #[serde(default)]
    pub ablation: AblationFlags,
    /// number of graph convolution layers
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_d_tok")]
    pub d_tok: usize,
    /// encoder BiLSTM hidden per direction; d_node = 2× this
    #[serde(default = "default_enc_hidden")]
    pub enc_hidden: usize,
    #[serde(default = "default_d_hidden")]
    pub d_hidden: usize,
    #[serde(default = "default_d_edge_out")]
    pub d_edge_out: usize,
    /// tagger BiLSTM hidden per direction
    #[serde(default = "default_tagger_hidden")]
    pub tagger_hidden: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// fixed multiplier applied to geometric edge features at the stack
    /// input (see gcn::StackOptions)
    #[serde(default = "default_edge_scale")]
    pub edge_scale: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
}

impl ModelConfig {
    pub fn with_mode(mode: Mode) -> Self {
        ModelConfig {
            mode,
            ablation: AblationFlags::default(),
            layers: default_layers(),
            d_tok: default_d_tok(),
            enc_hidden: default_enc_hidden(),
            d_hidden: default_d_hidden(),
            d_edge_out: default_d_edge_out(),
            tagger_hidden: default_tagger_hidden(),
            leaky_slope: default_slope(),
            edge_scale: default_edge_scale(),
            dropout: 0.0,
            tokenizer: TokenizerMode::Word,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.ablation.any() && !self.mode.uses_graph() {
            return Err(ModelError::Config(
                "ablation flags are only valid with gcn modes".into(),
            ));
        }
        if self.mode.uses_graph() && self.layers == 0 {
            return Err(ModelError::Config("gcn modes need at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn d_node(&self) -> usize {
        2 * self.enc_hidden
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tagset: TagSet,
    pub store: ParamStore,
    stack: Option<GcnStackSpec>,
    tagger_lstm: BiLstmSpec,
}

const TAGGER_EMBED: &str = "tagger/embed";
const TAGGER_EMIT_W: &str = "tagger/emit_w";
const TAGGER_EMIT_B: &str = "tagger/emit_b";
const CRF_TRANS: &str = "crf/transitions";
const CRF_START: &str = "crf/start";
const CRF_END: &str = "crf/end";
const CLS_W: &str = "segcls/w";
const CLS_B: &str = "segcls/b";
const MT_S_EXTRACT: &str = "multitask/s_extract";
const MT_S_CLASSIFY: &str = "multitask/s_classify";

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, tagset: TagSet, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stack, tagger_lstm) = Self::build_specs(&config);

        if let Some(stack) = &stack {
            stack.encoder.init(&mut store, vocab.len(), &mut rng);
            for layer in &stack.layers {
                layer.init(&mut store, &mut rng);
            }
        }
        store.insert(TAGGER_EMBED, Tensor::rand_uniform(&mut rng, vocab.len(), config.d_tok, -0.1, 0.1));
        let fused_dim = config.d_tok + if config.mode.uses_graph() { config.d_hidden } else { 0 };
        tagger_lstm.init(&mut store, fused_dim, &mut rng);
        let k = tagset.num_tags();
        let s = (1.0 / (2 * config.tagger_hidden) as f64).sqrt();
        store.insert(TAGGER_EMIT_W, Tensor::rand_uniform(&mut rng, 2 * config.tagger_hidden, k, -s, s));
        store.insert(TAGGER_EMIT_B, Tensor::zeros(1, k));
        store.insert(CRF_TRANS, Tensor::zeros(k, k));
        store.insert(CRF_START, Tensor::zeros(1, k));
        store.insert(CRF_END, Tensor::zeros(1, k));
        if config.mode == Mode::GcnMultitask {
            let c = tagset.num_types() + 1; // entity types + "other"
            let sc = (1.0 / config.d_hidden as f64).sqrt();
            store.insert(CLS_W, Tensor::rand_uniform(&mut rng, config.d_hidden, c, -sc, sc));
            store.insert(CLS_B, Tensor::zeros(1, c));
            store.insert(MT_S_EXTRACT, Tensor::scalar(0.0));
            store.insert(MT_S_CLASSIFY, Tensor::scalar(0.0));
        }
        Ok(Model { config, vocab, tagset, store, stack, tagger_lstm })
    }

    fn build_specs(config: &ModelConfig) -> (Option<GcnStackSpec>, BiLstmSpec) {
        let stack = if config.mode.uses_graph() {
            let encoder = SegmentEncoderSpec::new("encoder", config.d_tok, config.enc_hidden);
            let mut layers = Vec::with_capacity(config.layers);
            let mut d_edge = EDGE_FEATURE_DIM;
            let mut d_node = config.d_node();
            for l in 0..config.layers {
                layers.push(GcnLayerSpec {
                    prefix: format!("gcn/layer{l}"),
                    d_node_in: d_node,
                    d_edge_in: d_edge,
                    d_hidden: config.d_hidden,
                    d_edge_out: config.d_edge_out,
                    slope: config.leaky_slope,
                });
                d_edge = config.d_edge_out;
                d_node = config.d_hidden;
            }
            Some(GcnStackSpec { encoder, layers })
        } else {
            None
        };
        (stack, BiLstmSpec::new("tagger/bilstm", config.tagger_hidden))
    }

    /// Serialize everything needed to rebuild this model around a
    /// parameter store.
    pub fn checkpoint_config(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.config,
            "vocab": self.vocab,
            "tagset": self.tagset,
        })
    }

    pub fn from_checkpoint(config: &serde_json::Value, store: ParamStore) -> Result<Self, ModelError> {
        let model_cfg: ModelConfig = serde_json::from_value(
            config.get("model").cloned().ok_or_else(|| ModelError::Checkpoint("missing `model`".into()))?,
        )?;
        let mut vocab: Vocab = serde_json::from_value(
            config.get("vocab").cloned().ok_or_else(|| ModelError::Checkpoint("missing `vocab`".into()))?,
        )?;
        vocab.rebuild_index();
        let tagset: TagSet = serde_json::from_value(
            config.get("tagset").cloned().ok_or_else(|| ModelError::Checkpoint("missing `tagset`".into()))?,
        )?;
        model_cfg.validate()?;
        let (stack, tagger_lstm) = Self::build_specs(&model_cfg);
        Ok(Model { config: model_cfg, vocab, tagset, store, stack, tagger_lstm })
    }

    fn crf_vars(&self, tape: &mut Tape) -> Result<CrfVars, NumericError> {
        Ok(CrfVars {
            transitions: tape.param(&self.store, CRF_TRANS)?,
            start: tape.param(&self.store, CRF_START)?,
            end: tape.param(&self.store, CRF_END)?,
        })
    }

    /// Graph embeddings for every segment (gcn modes only).
    fn graph_nodes(&self, tape: &mut Tape, doc: &Document) -> Result<Option<GraphNodes>, NumericError> {
        let Some(stack) = &self.stack else { return Ok(None) };
        let graph = DocumentGraph::build(doc).expect("non-empty document");
        let token_ids: Vec<Vec<usize>> =
            doc.segments.iter().map(|s| self.vocab.ids(&s.tokens)).collect();
        let opts = crate::gcn::StackOptions {
            no_edge_features: self.config.ablation.no_edge_features,
            no_text_features: self.config.ablation.no_text_features,
            no_attention: self.config.ablation.no_attention,
            edge_scale: self.config.edge_scale,
        };
        let out = crate::gcn::stack_forward(tape, &self.store, stack, &graph, &token_ids, &opts)?;
        Ok(Some(GraphNodes { nodes: out.nodes, attention: out.attention }))
    }

    /// Tagging units: per segment for baseline1/gcn, one concatenated
    /// reading-order sequence with [SEP] separators for baseline2.
    fn tag_units(&self, doc: &Document) -> Vec<TagUnit> {
        match self.config.mode {
            Mode::Baseline2 => {
                let order = doc.reading_order();
                let mut token_ids = Vec::new();
                let mut pieces = Vec::new();
                for (k, id) in order.iter().enumerate() {
                    let si = doc.segments.iter().position(|s| s.id == *id).unwrap();
                    let seg = &doc.segments[si];
                    if seg.tokens.is_empty() {
                        continue;
                    }
                    if k > 0 && !token_ids.is_empty() {
                        token_ids.push(SEP);
                        pieces.push(Piece::Sep);
                    }
                    pieces.push(Piece::Segment { seg_index: si, start: token_ids.len(), len: seg.tokens.len() });
                    token_ids.extend(self.vocab.ids(&seg.tokens));
                }
                if token_ids.is_empty() {
                    vec![]
                } else {
                    vec![TagUnit { token_ids, pieces }]
                }
            }
            _ => doc
                .segments
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.tokens.is_empty())
                .map(|(si, s)| TagUnit {
                    token_ids: self.vocab.ids(&s.tokens),
                    pieces: vec![Piece::Segment { seg_index: si, start: 0, len: s.tokens.len() }],
                })
                .collect(),
        }
    }

    /// Fused per-token inputs (token embedding, with the
    /// owning segment's graph embedding appended in gcn modes) run through
    /// the tagger BiLSTM and emission projection.
    fn unit_emissions(
        &self,
        tape: &mut Tape,
        unit: &TagUnit,
        graph: Option<&GraphNodes>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, NumericError> {
        let table = tape.param(&self.store, TAGGER_EMBED)?;
        let tok = tape.gather_rows(table, &unit.token_ids)?;
        let fused = match graph {
            Some(g) => {
                // per-token segment index; [SEP] rows borrow a zero vector
                let mut seg_rows = vec![usize::MAX; unit.token_ids.len()];
                for piece in &unit.pieces {
                    if let Piece::Segment { seg_index, start, len } = piece {
                        for r in *start..*start + *len {
                            seg_rows[r] = *seg_index;
                        }
                    }
                }
                debug_assert!(seg_rows.iter().all(|&r| r != usize::MAX));
                let tiled = tape.gather_rows(g.nodes, &seg_rows)?;
                tape.concat_cols(&[tok, tiled])?
            }
            None => tok,
        };
        let fused = match dropout_rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let p = self.config.dropout;
                let t = tape.value(fused);
                let mask = Tensor::new(
                    t.rows(),
                    t.cols(),
                    (0..t.len())
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                        .collect(),
                );
                let m = tape.leaf(mask)?;
                tape.mul(fused, m)?
            }
            _ => fused,
        };
        let seq = bilstm_forward(tape, &self.store, &self.tagger_lstm, fused)?.sequence;
        let w = tape.param(&self.store, TAGGER_EMIT_W)?;
        let b = tape.param(&self.store, TAGGER_EMIT_B)?;
        let e = tape.matmul(seq, w)?;
        tape.add_row_broadcast(e, b)
    }

    fn unit_gold(&self, unit: &TagUnit, aligned: &AlignedDocument) -> Vec<usize> {
        let mut gold = vec![TAG_O; unit.token_ids.len()];
        for piece in &unit.pieces {
            if let Piece::Segment { seg_index, start, len } = piece {
                gold[*start..*start + *len].copy_from_slice(&aligned.tags[*seg_index]);
            }
        }
        gold
    }

    /// Negative log-likelihood of the gold tags, summed over tagging
    /// units, plus the uncertainty-weighted auxiliary loss in multitask
    /// mode.
    pub fn loss(
        &self,
        tape: &mut Tape,
        doc: &Document,
        aligned: &AlignedDocument,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, NumericError> {
        let graph = self.graph_nodes(tape, doc)?;
        let crf = self.crf_vars(tape)?;
        let mut total: Option<Var> = None;
        for unit in self.tag_units(doc) {
            let emissions = self.unit_emissions(tape, &unit, graph.as_ref(), dropout_rng.as_deref_mut())?;
            let gold = self.unit_gold(&unit, aligned);
            let ll = crf_log_likelihood(tape, emissions, &crf, &gold)?;
            let nll = tape.neg(ll)?;
            total = Some(match total {
                Some(t) => tape.add(t, nll)?,
                None => nll,
            });
        }
        let extraction = total.expect("document with at least one non-empty segment");

        if self.config.mode != Mode::GcnMultitask {
            return Ok(extraction);
        }
        let g = graph.as_ref().expect("multitask implies graph");
        let cls_loss = self.segment_classification_loss(tape, g.nodes, aligned)?;
        let s_e = tape.param(&self.store, MT_S_EXTRACT)?;
        let s_c = tape.param(&self.store, MT_S_CLASSIFY)?;
        multitask_combine(tape, &[(extraction, s_e), (cls_loss, s_c)])
    }

    /// Sigmoid-per-class segment tag prediction against one-hot targets.
    fn segment_classification_loss(
        &self,
        tape: &mut Tape,
        nodes: Var,
        aligned: &AlignedDocument,
    ) -> Result<Var, NumericError> {
        let logits = self.segment_class_logits(tape, nodes)?;
        let c = self.tagset.num_types() + 1;
        let n = aligned.segment_classes.len();
        let mut targets = Tensor::zeros(n, c);
        for (i, class) in aligned.segment_classes.iter().enumerate() {
            targets.set(i, class.unwrap_or(c - 1), 1.0);
        }
        tape.bce_with_logits(logits, targets)
    }

    fn segment_class_logits(&self, tape: &mut Tape, nodes: Var) -> Result<Var, NumericError> {
        let w = tape.param(&self.store, CLS_W)?;
        let b = tape.param(&self.store, CLS_B)?;
        let l = tape.matmul(nodes, w)?;
        tape.add_row_broadcast(l, b)
    }

    /// Decode entities for one document. Also returns the per-layer
    /// attention matrices and, in multitask mode, the predicted segment
    /// class per segment.
    pub fn predict(&self, doc: &Document) -> Result<Prediction, NumericError> {
        let mut tape = Tape::new();
        let graph = self.graph_nodes(&mut tape, doc)?;
        let trans = self.store.value(CRF_TRANS).clone();
        let start = self.store.value(CRF_START).clone();
        let end = self.store.value(CRF_END).clone();

        let mut entities = Vec::new();
        for unit in self.tag_units(doc) {
            let emissions = self.unit_emissions(&mut tape, &unit, graph.as_ref(), None)?;
            let tags = viterbi_decode(tape.value(emissions), &trans, &start, &end);
            for piece in &unit.pieces {
                if let Piece::Segment { seg_index, start, len } = piece {
                    let seg = &doc.segments[*seg_index];
                    entities.extend(decode_entities(
                        &tags[*start..*start + *len],
                        &seg.tokens,
                        seg.id,
                        &self.tagset,
                        self.config.tokenizer,
                    ));
                }
            }
        }

        let mut segment_classes = None;
        if self.config.mode == Mode::GcnMultitask {
            let g = graph.as_ref().expect("multitask implies graph");
            let logits = self.segment_class_logits(&mut tape, g.nodes)?;
            let lv = tape.value(logits);
            let classes = (0..lv.rows())
                .map(|i| {
                    let row = lv.row(i);
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                        .map(|(c, _)| c)
                        .unwrap()
                })
                .collect();
            segment_classes = Some(classes);
        }

        Ok(Prediction {
            entities,
            attention: graph.map(|g| g.attention).unwrap_or_default(),
            segment_classes,
        })
    }
}

struct GraphNodes {
    nodes: Var,
    attention: Vec<Vec<Vec<f64>>>,
}

enum Piece {
    Segment { seg_index: usize, start: usize, len: usize },
    Sep,
}

struct TagUnit {
    token_ids: Vec<usize>,
    pieces: Vec<Piece>,
}

pub struct Prediction {
    pub entities: Vec<EntitySpan>,
    /// per layer, n×n attention rows (empty for baselines)
    pub attention: Vec<Vec<Vec<f64>>>,
    /// multitask mode: argmax class per segment ("other" = num_types)
    pub segment_classes: Option<Vec<usize>>,
}

/// Uncertainty-weighted sum of task losses: Σ_k exp(−s_k)·L_k + s_k with
/// learnable log-variance scalars s_k.
pub fn multitask_combine(tape: &mut Tape, tasks: &[(Var, Var)]) -> Result<Var, NumericError> {
    let mut total: Option<Var> = None;
    for &(loss, s) in tasks {
        let neg_s = tape.neg(s)?;
        let w = tape.exp(neg_s)?;
        let weighted = tape.mul_scalar(loss, w)?;
        let term = tape.add(weighted, s)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one task"))
}
