//! Relation graphs over the detected regions of one image.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{classify_spatial, BBox};
use crate::tensor::Tensor;

/// The `K` regions of an image: one feature row and one box per region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    features: Tensor,
    boxes: Vec<BBox>,
}

impl RegionSet {
    pub fn new(features: Tensor, boxes: Vec<BBox>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Validation(alloc::format!(
                "region features must be a K × d_v matrix, got shape {:?}",
                features.shape()
            )));
        }
        if features.rows() != boxes.len() {
            return Err(Error::Validation(alloc::format!(
                "{} feature rows but {} boxes",
                features.rows(),
                boxes.len()
            )));
        }
        if !features.all_finite() {
            return Err(Error::Validation("region features contain non-finite values".into()));
        }
        for b in &boxes {
            b.validate()?;
        }
        Ok(RegionSet { features, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    /// Reorders regions so that new region `r` is old region `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| self.features.row(p).to_vec()).collect();
        let boxes = perm.iter().map(|&p| self.boxes[p]).collect();
        RegionSet::new(Tensor::from_rows(&rows)?, boxes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    Implicit,
    Spatial,
    Semantic,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [RelationKind::Implicit, RelationKind::Spatial, RelationKind::Semantic];

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Implicit => "implicit",
            RelationKind::Spatial => "spatial",
            RelationKind::Semantic => "semantic",
        }
    }

    /// Size of the edge-label vocabulary, including the `identical` self-loop label.
    pub fn label_count(self) -> usize {
        match self {
            RelationKind::Implicit => 1,
            RelationKind::Spatial => SPATIAL_LABELS + 1,
            RelationKind::Semantic => SEMANTIC_LABELS + 1,
        }
    }

    pub fn is_explicit(self) -> bool {
        self != RelationKind::Implicit
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "implicit" | "imp" => Ok(RelationKind::Implicit),
            "spatial" | "spa" => Ok(RelationKind::Spatial),
            "semantic" | "sem" => Ok(RelationKind::Semantic),
            other => Err(Error::Validation(alloc::format!(
                "unknown relation kind `{other}` (expected implicit, spatial or semantic)"
            ))),
        }
    }
}

const SPATIAL_LABELS: usize = 11;
pub const SEMANTIC_LABELS: usize = 14;

/// Label of the mandatory self-loop in explicit graphs (and the single implicit label).
/// Code 0 never names a real relation: no-relation pairs produce no edge.
pub const IDENTICAL: u8 = 0;

/// Edge direction as seen from the vertex whose neighborhood contains the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Out,
    In,
    SelfLoop,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Out, Direction::In, Direction::SelfLoop];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Out => "out",
            Direction::In => "in",
            Direction::SelfLoop => "self",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub label: u8,
    pub dir: Direction,
}

/// One member of `N_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Neighbor {
    pub node: usize,
    pub label: u8,
    pub dir: Direction,
}

/// `subject-predicate-object` with predicate in `1..=14`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemanticTriple {
    pub subject: usize,
    pub predicate: u8,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    kind: RelationKind,
    k: usize,
    edges: Vec<Edge>,
    neighbors: Vec<Vec<Neighbor>>,
}

impl RelationGraph {
    pub fn kind(&self) -> RelationKind {
        self.kind
    }

    pub fn vertex_count(&self) -> usize {
        self.k
    }

    /// Stored edges, sorted by `(src, dst)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn non_self_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.src != e.dst).count()
    }

    /// `N_i`: out-edges of `i`, its self-loop, and (explicit graphs) in-edges whose reverse is absent.
    pub fn neighbors(&self, i: usize) -> &[Neighbor] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.edges.binary_search_by(|e| (e.src, e.dst).cmp(&(src, dst))).is_ok()
    }

    /// `K × K` row-major membership mask of the neighborhoods.
    pub fn neighborhood_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.k * self.k];
        for (i, ns) in self.neighbors.iter().enumerate() {
            for n in ns {
                mask[i * self.k + n.node] = true;
            }
        }
        mask
    }

    fn from_edges(kind: RelationKind, k: usize, mut edges: Vec<Edge>) -> Self {
        edges.sort();
        let mut neighbors = vec![Vec::new(); k];
        for e in &edges {
            neighbors[e.src].push(Neighbor {
                node: e.dst,
                label: e.label,
                dir: e.dir,
            });
        }
        if kind.is_explicit() {
            let present: Vec<(usize, usize)> = edges.iter().map(|e| (e.src, e.dst)).collect();
            for e in &edges {
                if e.src != e.dst && present.binary_search(&(e.dst, e.src)).is_err() {
                    neighbors[e.dst].push(Neighbor {
                        node: e.src,
                        label: e.label,
                        dir: Direction::In,
                    });
                }
            }
        }
        for ns in &mut neighbors {
            ns.sort_by_key(|n| n.node);
        }
        RelationGraph {
            kind,
            k,
            edges,
            neighbors,
        }
    }
}

fn self_loop(i: usize) -> Edge {
    Edge {
        src: i,
        dst: i,
        label: IDENTICAL,
        dir: Direction::SelfLoop,
    }
}

/// Complete graph including self-edges: `K²` edges, single label.
pub fn build_implicit(regions: &RegionSet) -> RelationGraph {
    let k = regions.len();
    let mut edges = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            edges.push(if i == j {
                self_loop(i)
            } else {
                Edge {
                    src: i,
                    dst: j,
                    label: IDENTICAL,
                    dir: Direction::Out,
                }
            });
        }
    }
    RelationGraph::from_edges(RelationKind::Implicit, k, edges)
}

/// One edge `i → j` per ordered pair with a spatial relation, labeled with its class code,
/// plus `identical` self-loops.
pub fn build_spatial(regions: &RegionSet, far_threshold: f64) -> Result<RelationGraph> {
    let k = regions.len();
    let boxes = regions.boxes();
    let mut edges = Vec::new();
    for i in 0..k {
        edges.push(self_loop(i));
        for j in 0..k {
            if i == j {
                continue;
            }
            let class = classify_spatial(&boxes[i], &boxes[j], far_threshold)?;
            if class.is_relation() {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    label: class.code(),
                    dir: Direction::Out,
                });
            }
        }
    }
    Ok(RelationGraph::from_edges(RelationKind::Spatial, k, edges))
}

/// One directed edge per triple plus `identical` self-loops. A repeated `(subject, object)`
/// pair keeps its first predicate.
pub fn build_semantic(regions: &RegionSet, triples: &[SemanticTriple]) -> Result<RelationGraph> {
    let k = regions.len();
    let mut edges: Vec<Edge> = (0..k).map(self_loop).collect();
    let mut seen: Vec<(usize, usize)> = Vec::new();
    for t in triples {
        if t.subject >= k || t.object >= k {
            return Err(Error::Validation(alloc::format!(
                "semantic triple ({}, {}, {}) references a region outside 0..{k}",
                t.subject,
                t.predicate,
                t.object
            )));
        }
        if t.subject == t.object {
            return Err(Error::Validation(alloc::format!(
                "semantic triple ({}, {}, {}) relates a region to itself",
                t.subject,
                t.predicate,
                t.object
            )));
        }
        if t.predicate == 0 || t.predicate as usize > SEMANTIC_LABELS {
            return Err(Error::Validation(alloc::format!(
                "semantic predicate {} outside 1..={SEMANTIC_LABELS}",
                t.predicate
            )));
        }
        if seen.contains(&(t.subject, t.object)) {
            log::warn!(
                "duplicate semantic triple for pair ({}, {}); keeping the first predicate",
                t.subject,
                t.object
            );
            continue;
        }
        seen.push((t.subject, t.object));
        edges.push(Edge {
            src: t.subject,
            dst: t.object,
            label: t.predicate,
            dir: Direction::Out,
        });
    }
    Ok(RelationGraph::from_edges(RelationKind::Semantic, k, edges))
}
