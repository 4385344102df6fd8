//! Document graphs: fully connected segment graphs with geometric edge
//! features.

use serde::{Deserialize, Serialize};

use crate::document::{Document, TextSegment};
use crate::error::DocumentError;

/// Geometric feature of an ordered segment pair:
/// [x_ij, y_ij, w_i/h_i, h_j/h_i, w_j/h_i], distances center-to-center and
/// normalized by the source height so features are resolution-independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeFeature(pub [f64; 5]);

pub const EDGE_FEATURE_DIM: usize = 5;

pub fn edge_features(src: &TextSegment, dst: &TextSegment) -> EdgeFeature {
    let (sx, sy) = src.bbox.center();
    let (dx, dy) = dst.bbox.center();
    let h = src.bbox.h;
    EdgeFeature([
        (dx - sx) / h,
        (dy - sy) / h,
        src.bbox.w / h,
        dst.bbox.h / h,
        dst.bbox.w / h,
    ])
}

/// Complete directed graph over the document's segments, self-edges
/// included. Edge (i, j) lives at row i·n + j.
#[derive(Debug, Clone)]
pub struct DocumentGraph {
    pub n: usize,
    /// segment ids in node order (document order)
    pub segment_ids: Vec<u32>,
    /// n² rows of 5 features, row-major by (i, j)
    pub edges: Vec<EdgeFeature>,
}

impl DocumentGraph {
    pub fn build(doc: &Document) -> Result<Self, DocumentError> {
        if doc.segments.is_empty() {
            return Err(DocumentError::Empty);
        }
        let n = doc.segments.len();
        let mut edges = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                edges.push(edge_features(&doc.segments[i], &doc.segments[j]));
            }
        }
        Ok(DocumentGraph {
            n,
            segment_ids: doc.segments.iter().map(|s| s.id).collect(),
            edges,
        })
    }

    pub fn edge(&self, i: usize, j: usize) -> &EdgeFeature {
        &self.edges[i * self.n + j]
    }

    /// Flattened edge features as an n²×5 row-major buffer.
    pub fn edge_matrix(&self) -> Vec<f64> {
        self.edges.iter().flat_map(|e| e.0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::BoundingBox;

    fn seg(id: u32, x: f64, y: f64, w: f64, h: f64) -> TextSegment {
        TextSegment { id, text: String::new(), bbox: BoundingBox::new(x, y, w, h), tokens: vec![] }
    }

    #[test]
    fn self_edge_has_zero_distances() {
        let s = seg(0, 0.0, 0.0, 2.0, 1.0);
        let e = edge_features(&s, &s);
        assert_eq!(e.0, [0.0, 0.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn horizontal_neighbor() {
        let a = seg(0, 0.0, 0.0, 2.0, 1.0);
        let b = seg(1, 3.0, 0.0, 2.0, 1.0);
        assert_eq!(edge_features(&a, &b).0, [3.0, 0.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn mixed_sizes() {
        let a = seg(0, 10.0, 20.0, 40.0, 10.0);
        let b = seg(1, 10.0, 35.0, 80.0, 12.0);
        assert_eq!(edge_features(&a, &b).0, [2.0, 1.6, 4.0, 1.2, 8.0]);
    }

    #[test]
    fn translation_and_scale_invariance() {
        let a = seg(0, 13.0, 7.5, 40.0, 10.0);
        let b = seg(1, 100.0, 35.0, 81.0, 12.5);
        let base = edge_features(&a, &b);
        let shift = |s: &TextSegment, dx: f64, dy: f64| seg(s.id, s.bbox.x + dx, s.bbox.y + dy, s.bbox.w, s.bbox.h);
        let scaled = |s: &TextSegment, k: f64| seg(s.id, s.bbox.x * k, s.bbox.y * k, s.bbox.w * k, s.bbox.h * k);
        let shifted = edge_features(&shift(&a, 137.0, -42.0), &shift(&b, 137.0, -42.0));
        for (x, y) in base.0.iter().zip(shifted.0) {
            assert!((x - y).abs() < 1e-12);
        }
        let sc = edge_features(&scaled(&a, 3.0), &scaled(&b, 3.0));
        for (x, y) in base.0.iter().zip(sc.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn complete_graph_counts() {
        let mk = |n: usize| {
            let segments = (0..n).map(|i| seg(i as u32, i as f64 * 10.0, 0.0, 5.0, 5.0)).collect();
            Document {
                doc_id: "t".into(),
                page_w: 1000.0,
                page_h: 1000.0,
                segments,
                annotations: vec![],
            }
        };
        assert_eq!(DocumentGraph::build(&mk(1)).unwrap().edges.len(), 1);
        assert_eq!(DocumentGraph::build(&mk(3)).unwrap().edges.len(), 9);
    }

    #[test]
    fn reverse_edge_consistent_with_direct_recomputation() {
        let a = seg(0, 5.0, 9.0, 30.0, 8.0);
        let b = seg(1, 60.0, 40.0, 12.0, 16.0);
        let fwd = edge_features(&a, &b);
        let rev = edge_features(&b, &a);
        // recompute both directions straight from the boxes
        let (ca, cb) = (a.bbox.center(), b.bbox.center());
        assert!((fwd.0[0] - (cb.0 - ca.0) / a.bbox.h).abs() < 1e-12);
        assert!((rev.0[0] - (ca.0 - cb.0) / b.bbox.h).abs() < 1e-12);
        // the two directions relate through the height ratio
        assert!((rev.0[0] + fwd.0[0] * (a.bbox.h / b.bbox.h)).abs() < 1e-12);
    }

    use crate::document::Document;
}
