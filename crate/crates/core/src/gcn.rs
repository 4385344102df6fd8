//! Graph convolution over the document graph: BiLSTM segment encoder for
//! initial node embeddings, triplet MLP features, attention-weighted
//! aggregation and edge updates, stacked.

use rand::Rng;

use crate::error::NumericError;
use crate::graph::DocumentGraph;
use crate::lstm::{bilstm_forward, BiLstmSpec};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::PAD;

/// One graph convolution layer. The triplet MLP maps
/// concat(t_i, r_ij, t_j) through one leaky_relu hidden layer to the
/// feature h_ij; attention scores are w_aᵀh_ij; node output is
/// tanh(Σ_j α_ij h_ij) and the edge output is a linear map of h_ij.
#[derive(Debug, Clone)]
pub struct GcnLayerSpec {
    pub prefix: String,
    pub d_node_in: usize,
    pub d_edge_in: usize,
    pub d_hidden: usize,
    pub d_edge_out: usize,
    pub slope: f64,
}

impl GcnLayerSpec {
    pub fn param_names(&self) -> [String; 7] {
        let p = &self.prefix;
        [
            format!("{p}/mlp_w1"),
            format!("{p}/mlp_b1"),
            format!("{p}/mlp_w2"),
            format!("{p}/mlp_b2"),
            format!("{p}/w_a"),
            format!("{p}/edge_w"),
            format!("{p}/edge_b"),
        ]
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let d_in = 2 * self.d_node_in + self.d_edge_in;
        let [w1, b1, w2, b2, wa, ew, eb] = self.param_names();
        let s1 = (1.0 / d_in as f64).sqrt();
        let s2 = (1.0 / self.d_hidden as f64).sqrt();
        store.insert(w1, Tensor::rand_uniform(rng, d_in, self.d_hidden, -s1, s1));
        store.insert(b1, Tensor::zeros(1, self.d_hidden));
        store.insert(w2, Tensor::rand_uniform(rng, self.d_hidden, self.d_hidden, -s2, s2));
        store.insert(b2, Tensor::zeros(1, self.d_hidden));
        store.insert(wa, Tensor::rand_uniform(rng, self.d_hidden, 1, -s2, s2));
        store.insert(ew, Tensor::rand_uniform(rng, self.d_hidden, self.d_edge_out, -s2, s2));
        store.insert(eb, Tensor::zeros(1, self.d_edge_out));
    }
}

pub struct GcnLayerOut {
    /// n × d_hidden
    pub nodes: Var,
    /// n² × d_edge_out
    pub edges: Var,
    /// row-stochastic attention matrix, exported for inspection
    pub attention: Vec<Vec<f64>>,
}

/// Triplet features for all n² directed pairs: rows ordered (i, j)
/// row-major to match [`DocumentGraph::edge_matrix`].
pub fn triplet_features(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &GcnLayerSpec,
    nodes: Var,
    edges: Var,
    n: usize,
) -> Result<Var, NumericError> {
    let [w1n, b1n, w2n, b2n, ..] = spec.param_names();
    let idx_src: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(n)).collect();
    let idx_dst: Vec<usize> = (0..n).flat_map(|_| 0..n).collect();
    let t_src = tape.gather_rows(nodes, &idx_src)?;
    let t_dst = tape.gather_rows(nodes, &idx_dst)?;
    let trip = tape.concat_cols(&[t_src, edges, t_dst])?;
    let w1 = tape.param(store, &w1n)?;
    let b1 = tape.param(store, &b1n)?;
    let w2 = tape.param(store, &w2n)?;
    let b2 = tape.param(store, &b2n)?;
    let h = tape.matmul(trip, w1)?;
    let h = tape.add_row_broadcast(h, b1)?;
    let h = tape.leaky_relu(h, spec.slope)?;
    let h = tape.matmul(h, w2)?;
    tape.add_row_broadcast(h, b2)
}

/// Attention coefficients for one source node given its n triplet rows:
/// softmax over leaky_relu(w_aᵀ h_ij).
pub fn attention_coefficients(
    tape: &mut Tape,
    scores_block: Var,
) -> Result<Var, NumericError> {
    tape.softmax(scores_block)
}

pub fn layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &GcnLayerSpec,
    nodes: Var,
    edges: Var,
    n: usize,
    uniform_attention: bool,
) -> Result<GcnLayerOut, NumericError> {
    let [_, _, _, _, wan, ewn, ebn] = spec.param_names();
    let h_all = triplet_features(tape, store, spec, nodes, edges, n)?;

    // attention scores for every pair at once
    let w_a = tape.param(store, &wan)?;
    let raw = tape.matmul(h_all, w_a)?; // n² × 1
    let scores = tape.leaky_relu(raw, spec.slope)?;

    let mut out_rows = Vec::with_capacity(n);
    let mut attention = Vec::with_capacity(n);
    for i in 0..n {
        let alpha = if uniform_attention {
            tape.leaf(Tensor::new(1, n, vec![1.0 / n as f64; n]))?
        } else {
            let block = tape.slice_rows(scores, i * n, n)?;
            let a = attention_coefficients(tape, block)?;
            tape.transpose(a)? // n×1 -> 1×n
        };
        attention.push(tape.value(alpha).data().to_vec());
        let h_block = tape.slice_rows(h_all, i * n, n)?;
        out_rows.push(tape.matmul(alpha, h_block)?);
    }
    let agg = tape.concat_rows(&out_rows)?;
    let new_nodes = tape.tanh(agg)?;

    let ew = tape.param(store, &ewn)?;
    let eb = tape.param(store, &ebn)?;
    let e = tape.matmul(h_all, ew)?;
    let new_edges = tape.add_row_broadcast(e, eb)?;

    Ok(GcnLayerOut { nodes: new_nodes, edges: new_edges, attention })
}

/// Segment text encoder: token embedding lookup plus a single-layer
/// BiLSTM; the segment embedding concatenates the two final hiddens.
#[derive(Debug, Clone)]
pub struct SegmentEncoderSpec {
    pub embed: String,
    pub bilstm: BiLstmSpec,
    pub d_tok: usize,
}

impl SegmentEncoderSpec {
    pub fn new(prefix: &str, d_tok: usize, hidden_per_dir: usize) -> Self {
        SegmentEncoderSpec {
            embed: format!("{prefix}/embed"),
            bilstm: BiLstmSpec::new(&format!("{prefix}/bilstm"), hidden_per_dir),
            d_tok,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, vocab_size: usize, rng: &mut R) {
        store.insert(&self.embed, Tensor::rand_uniform(rng, vocab_size, self.d_tok, -0.1, 0.1));
        self.bilstm.init(store, self.d_tok, rng);
    }

    pub fn output_dim(&self) -> usize {
        self.bilstm.output_dim()
    }
}

/// Encode one segment's token ids; an empty segment encodes as [PAD].
pub fn encode_segment(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &SegmentEncoderSpec,
    token_ids: &[usize],
) -> Result<Var, NumericError> {
    let ids: Vec<usize> = if token_ids.is_empty() { vec![PAD] } else { token_ids.to_vec() };
    let table = tape.param(store, &spec.embed)?;
    let embedded = tape.gather_rows(table, &ids)?;
    let out = bilstm_forward(tape, store, &spec.bilstm, embedded)?;
    Ok(out.summary)
}

pub struct GcnStackSpec {
    pub encoder: SegmentEncoderSpec,
    pub layers: Vec<GcnLayerSpec>,
}

pub struct StackOut {
    /// n × d_node′ final node embeddings
    pub nodes: Var,
    /// per-layer n×n attention matrices
    pub attention: Vec<Vec<Vec<f64>>>,
}

/// Forward-pass switches: the three ablations plus a fixed scale applied
/// to the geometric edge features. Raw edge distances are in units of the
/// source segment height, so cross-page values reach ~50 and would drown
/// the node-text signal inside the triplet MLP without rescaling; scaling
/// by a constant keeps the translation/scale invariance intact.
#[derive(Debug, Clone, Copy)]
pub struct StackOptions {
    pub no_edge_features: bool,
    pub no_text_features: bool,
    pub no_attention: bool,
    pub edge_scale: f64,
}

impl Default for StackOptions {
    fn default() -> Self {
        StackOptions {
            no_edge_features: false,
            no_text_features: false,
            no_attention: false,
            edge_scale: 0.04,
        }
    }
}

/// Initial t_i from the segment encoder, initial r_ij from the geometric
/// edge features, then L graph convolution layers.
pub fn stack_forward(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &GcnStackSpec,
    graph: &DocumentGraph,
    token_ids: &[Vec<usize>],
    opts: &StackOptions,
) -> Result<StackOut, NumericError> {
    let StackOptions { no_edge_features, no_text_features, no_attention, edge_scale } = *opts;
    let n = graph.n;
    assert_eq!(token_ids.len(), n);

    let mut nodes = if no_text_features {
        tape.leaf(Tensor::zeros(n, spec.encoder.output_dim()))?
    } else {
        let rows: Vec<Var> = token_ids
            .iter()
            .map(|ids| encode_segment(tape, store, &spec.encoder, ids))
            .collect::<Result<_, _>>()?;
        tape.concat_rows(&rows)?
    };

    let edge_data = if no_edge_features {
        Tensor::zeros(n * n, crate::graph::EDGE_FEATURE_DIM)
    } else {
        let mut t = Tensor::new(n * n, crate::graph::EDGE_FEATURE_DIM, graph.edge_matrix());
        for v in t.data_mut() {
            *v *= edge_scale;
        }
        t
    };
    let mut edges = tape.leaf(edge_data)?;

    let mut attention = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let out = layer_forward(tape, store, layer, nodes, edges, n, no_attention)?;
        nodes = out.nodes;
        edges = out.edges;
        attention.push(out.attention);
    }
    Ok(StackOut { nodes, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{BoundingBox, Document, TextSegment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_spec(d_node: usize, d_edge: usize, d_hidden: usize) -> GcnLayerSpec {
        GcnLayerSpec {
            prefix: "l0".into(),
            d_node_in: d_node,
            d_edge_in: d_edge,
            d_hidden,
            d_edge_out: 3,
            slope: 0.01,
        }
    }

    #[test]
    fn zero_weights_give_zero_triplets_and_tanh_zero_nodes() {
        let spec = layer_spec(2, 2, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        spec.init(&mut store, &mut rng);
        for name in spec.param_names() {
            store.get_mut(&name).unwrap().value.fill(0.0);
        }
        let mut tape = Tape::new();
        let nodes = tape.leaf(Tensor::new(2, 2, vec![1.0, -1.0, 0.5, 2.0])).unwrap();
        let edges = tape.leaf(Tensor::rand_uniform(&mut rng, 4, 2, -1.0, 1.0)).unwrap();
        let out = layer_forward(&mut tape, &store, &spec, nodes, edges, 2, false).unwrap();
        assert!(tape.value(out.nodes).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn triplet_is_direction_sensitive() {
        let spec = layer_spec(2, 1, 3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        spec.init(&mut store, &mut rng);
        let mut tape = Tape::new();
        let nodes = tape.leaf(Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let edges = tape.leaf(Tensor::zeros(4, 1)).unwrap();
        let h = triplet_features(&mut tape, &store, &spec, nodes, edges, 2).unwrap();
        let hv = tape.value(h);
        // rows: (0,0) (0,1) (1,0) (1,1); (0,1) vs (1,0) must differ
        assert_ne!(hv.row(1), hv.row(2));
    }

    #[test]
    fn triplet_matches_hand_affine_evaluation() {
        // d_node=1, d_edge=1, hidden=1: h = w2·leaky(w1·[ti,r,tj]+b1)+b2
        let spec = GcnLayerSpec {
            prefix: "l0".into(),
            d_node_in: 1,
            d_edge_in: 1,
            d_hidden: 1,
            d_edge_out: 1,
            slope: 0.01,
        };
        let mut store = ParamStore::new();
        let [w1, b1, w2, b2, wa, ew, eb] = spec.param_names();
        store.insert(w1, Tensor::new(3, 1, vec![0.5, -1.0, 2.0]));
        store.insert(b1, Tensor::scalar(0.25));
        store.insert(w2, Tensor::scalar(3.0));
        store.insert(b2, Tensor::scalar(-0.5));
        store.insert(wa, Tensor::scalar(1.0));
        store.insert(ew, Tensor::scalar(1.0));
        store.insert(eb, Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let nodes = tape.leaf(Tensor::new(1, 1, vec![2.0])).unwrap();
        let edges = tape.leaf(Tensor::new(1, 1, vec![-0.3])).unwrap();
        let h = triplet_features(&mut tape, &store, &spec, nodes, edges, 1).unwrap();
        // pre = 0.5·2 + (−1)·(−0.3) + 2·2 + 0.25 = 5.55 (positive branch)
        let expect = 3.0 * 5.55 - 0.5;
        assert!((tape.value(h).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_and_uniform_when_identical() {
        let spec = layer_spec(2, 2, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        spec.init(&mut store, &mut rng);
        let n = 5;
        let mut tape = Tape::new();
        // identical node embeddings and identical edges -> identical h_ij
        let nodes = tape.leaf(Tensor::new(n, 2, vec![0.3; n * 2])).unwrap();
        let edges = tape.leaf(Tensor::new(n * n, 2, vec![0.7; n * n * 2])).unwrap();
        let out = layer_forward(&mut tape, &store, &spec, nodes, edges, n, false).unwrap();
        for row in &out.attention {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for &a in row {
                assert!((a - 1.0 / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_node_attends_to_itself() {
        let spec = layer_spec(2, 2, 3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        spec.init(&mut store, &mut rng);
        let mut tape = Tape::new();
        let nodes = tape.leaf(Tensor::rand_uniform(&mut rng, 1, 2, -1.0, 1.0)).unwrap();
        let edges = tape.leaf(Tensor::rand_uniform(&mut rng, 1, 2, -1.0, 1.0)).unwrap();
        let out = layer_forward(&mut tape, &store, &spec, nodes, edges, 1, false).unwrap();
        assert_eq!(out.attention, vec![vec![1.0]]);
        // t' = tanh(h_11)
        let h = triplet_features(&mut tape, &store, &spec, nodes, edges, 1).unwrap();
        let expect = tape.value(h).map(f64::tanh);
        assert_eq!(tape.value(out.nodes), &expect);
    }

    fn toy_doc(n: usize, seed: u64) -> Document {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segments = (0..n)
            .map(|i| {
                let x: f64 = rng.gen_range(0.0..900.0);
                let y: f64 = rng.gen_range(0.0..900.0);
                TextSegment {
                    id: i as u32,
                    text: format!("tok{i}"),
                    bbox: BoundingBox::new(x, y, rng.gen_range(20.0..100.0), rng.gen_range(8.0..20.0)),
                    tokens: vec![format!("tok{i}")],
                }
            })
            .collect();
        Document { doc_id: "t".into(), page_w: 1000.0, page_h: 1000.0, segments, annotations: vec![] }
    }


    fn small_stack(store: &mut ParamStore, rng: &mut ChaCha8Rng, layers: usize) -> GcnStackSpec {
        let encoder = SegmentEncoderSpec::new("enc", 3, 2);
        encoder.init(store, 10, rng);
        let d_node = encoder.output_dim();
        let mut specs = Vec::new();
        let mut d_edge = crate::graph::EDGE_FEATURE_DIM;
        for l in 0..layers {
            let s = GcnLayerSpec {
                prefix: format!("gcn{l}"),
                d_node_in: if l == 0 { d_node } else { 4 },
                d_edge_in: d_edge,
                d_hidden: 4,
                d_edge_out: 3,
                slope: 0.01,
            };
            s.init(store, rng);
            d_edge = 3;
            specs.push(s);
        }
        GcnStackSpec { encoder, layers: specs }
    }

    #[test]
    fn stack_two_layers_shapes_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let spec = small_stack(&mut store, &mut rng, 2);
        let doc = toy_doc(20, 11);
        let graph = DocumentGraph::build(&doc).unwrap();
        let ids: Vec<Vec<usize>> = doc.segments.iter().map(|s| vec![s.id as usize % 10]).collect();
        let mut tape = Tape::new();
        let out = stack_forward(&mut tape, &store, &spec, &graph, &ids, &StackOptions::default()).unwrap();
        let nodes = tape.value(out.nodes);
        assert_eq!(nodes.shape(), (20, 4));
        assert!(nodes.is_finite());
        assert_eq!(out.attention.len(), 2);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let spec = small_stack(&mut store, &mut rng, 2);
        let doc = toy_doc(7, 13);
        let ids: Vec<Vec<usize>> = (0..7).map(|i| vec![i % 10]).collect();

        let run = |doc: &Document, ids: &[Vec<usize>]| {
            let graph = DocumentGraph::build(doc).unwrap();
            let mut tape = Tape::new();
            let out = stack_forward(&mut tape, &store, &spec, &graph, ids, &StackOptions::default()).unwrap();
            tape.value(out.nodes).clone()
        };
        let base = run(&doc, &ids);

        // permute segments
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let mut pdoc = doc.clone();
        pdoc.segments = perm.iter().map(|&i| doc.segments[i].clone()).collect();
        let pids: Vec<Vec<usize>> = perm.iter().map(|&i| ids[i].clone()).collect();
        let permuted = run(&pdoc, &pids);

        for (new_row, &orig) in perm.iter().enumerate() {
            for c in 0..base.cols() {
                assert!((permuted.at(new_row, c) - base.at(orig, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn geometry_invariance_of_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let spec = small_stack(&mut store, &mut rng, 2);
        let doc = toy_doc(6, 17);
        let ids: Vec<Vec<usize>> = (0..6).map(|i| vec![i % 10]).collect();
        let run = |doc: &Document| {
            let graph = DocumentGraph::build(doc).unwrap();
            let mut tape = Tape::new();
            let out = stack_forward(&mut tape, &store, &spec, &graph, &ids, &StackOptions::default()).unwrap();
            tape.value(out.nodes).clone()
        };
        let base = run(&doc);
        let mut moved = doc.clone();
        moved.page_w *= 10.0;
        moved.page_h *= 10.0;
        for s in &mut moved.segments {
            s.bbox.x = (s.bbox.x + 137.0) * 3.0;
            s.bbox.y = (s.bbox.y - 42.0) * 3.0;
            s.bbox.w *= 3.0;
            s.bbox.h *= 3.0;
        }
        let shifted = run(&moved);
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stack_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let spec = small_stack(&mut store, &mut rng, 2);
        let doc = toy_doc(3, 19);
        let graph = DocumentGraph::build(&doc).unwrap();
        let ids: Vec<Vec<usize>> = (0..3).map(|i| vec![i % 10, (i + 1) % 10]).collect();
        let mut f = move |s: &ParamStore, t: &mut Tape| {
            let out = stack_forward(t, s, &spec, &graph, &ids, &StackOptions::default())?;
            let sq = t.mul(out.nodes, out.nodes)?;
            t.mean(sq)
        };
        let rep = crate::gradcheck::gradient_check(&mut f, &store, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-4, "rel err {}", rep.max_rel_error);
    }
}
