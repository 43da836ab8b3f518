//! Construction of the four expert graph topologies under periodic
//! boundary conditions: atomistic radius graph (multi-edge over images),
//! feature-similarity graph with minimum-image geometry, superatom cell
//! graph over lattice replicas, and the geometry-free multiscale star.

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::lattice::{min_image_displacement, CrystalStructure, LatticeMatrix, ShiftVector};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GraphError {
    #[error("expected {expected} embeddings, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operation undefined for graph kind {kind:?}")]
    KindMismatch { kind: GraphKind },
    #[error("cutoff must be positive, got {0}")]
    NonPositiveCutoff(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum GraphKind {
    Atomistic,
    Similarity,
    Cell,
    Multiscale,
}

impl GraphKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GraphKind::Atomistic => "atomistic",
            GraphKind::Similarity => "similarity",
            GraphKind::Cell => "cell",
            GraphKind::Multiscale => "multiscale",
        }
    }
}

/// Cartesian displacement and length of one periodic edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGeometry {
    pub disp: Vector3<f64>,
    pub dist: f64,
}

/// Directed edge `src -> dst` through image `shift`; geometric edges carry
/// `disp = r_dst - r_src + L * shift`. Multiscale edges carry no geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicEdge {
    pub src: usize,
    pub dst: usize,
    pub shift: ShiftVector,
    pub geometry: Option<EdgeGeometry>,
}

impl PeriodicEdge {
    fn geometric(src: usize, dst: usize, shift: ShiftVector, disp: Vector3<f64>) -> Self {
        PeriodicEdge {
            src,
            dst,
            shift,
            geometry: Some(EdgeGeometry {
                disp,
                dist: disp.norm(),
            }),
        }
    }

    fn feature_only(src: usize, dst: usize) -> Self {
        PeriodicEdge {
            src,
            dst,
            shift: ShiftVector::ZERO,
            geometry: None,
        }
    }

    fn sort_key(&self) -> (usize, usize, ShiftVector) {
        (self.src, self.dst, self.shift)
    }
}

/// Typed edge list in canonical `(src, dst, shift)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicGraph {
    pub kind: GraphKind,
    pub num_nodes: usize,
    pub edges: Vec<PeriodicEdge>,
}

impl PeriodicGraph {
    fn from_edges(kind: GraphKind, num_nodes: usize, mut edges: Vec<PeriodicEdge>) -> Self {
        edges.sort_by_key(|e| e.sort_key());
        edges.dedup_by_key(|e| e.sort_key());
        PeriodicGraph {
            kind,
            num_nodes,
            edges,
        }
    }

    /// Zero edges built; callers may want to surface this as a warning.
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge lengths sorted ascending; the transform-invariant fingerprint.
    pub fn sorted_distances(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self
            .edges
            .iter()
            .filter_map(|e| e.geometry.as_ref().map(|g| g.dist))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d
    }

    /// Number of connected components over all `num_nodes` nodes, treating
    /// edges as undirected.
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.num_nodes).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.src), find(&mut parent, e.dst));
            if a != b {
                parent[a] = b;
            }
        }
        (0..self.num_nodes)
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }
}

/// Per-axis bound on image indices: enumerating `[-max_n, max_n]^3` is
/// guaranteed to contain every image within the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftBounds {
    pub max_n: [i32; 3],
}

impl ShiftBounds {
    pub fn iter(&self) -> impl Iterator<Item = ShiftVector> + '_ {
        let [na, nb, nc] = self.max_n;
        (-na..=na).flat_map(move |a| {
            (-nb..=nb).flat_map(move |b| (-nc..=nc).map(move |c| ShiftVector::new(a, b, c)))
        })
    }
}

/// Smallest per-axis image bound covering `cutoff`. The spacing of the
/// k-th lattice plane family is `1 / ||row_k(L^-1)||`, so
/// `max_n[k] = ceil(cutoff * ||row_k(L^-1)||)`.
pub fn shift_bounds(lattice: &LatticeMatrix, cutoff: f64) -> Result<ShiftBounds, GraphError> {
    if !(cutoff > 0.0) {
        return Err(GraphError::NonPositiveCutoff(cutoff));
    }
    let inv = lattice.inverse();
    let mut max_n = [0i32; 3];
    for k in 0..3 {
        let row_norm = inv.row(k).norm();
        max_n[k] = (cutoff * row_norm).ceil() as i32;
    }
    Ok(ShiftBounds { max_n })
}

/// Multi-edge radius graph: one edge per ordered pair `(i, j)` and image
/// shift `n` with `0 < ||r_j - r_i + L*n|| < r_c`. Self-pairs `i = j` are
/// included for nonzero shifts so single-atom cells stay connected to
/// their own periodic images.
pub fn build_atomistic_graph(
    s: &CrystalStructure,
    r_c: f64,
) -> Result<PeriodicGraph, GraphError> {
    let bounds = shift_bounds(&s.lattice, r_c)?;
    let positions = s.positions();
    let n = positions.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for shift in bounds.iter() {
                if i == j && shift.is_zero() {
                    continue;
                }
                let disp = positions[j] - positions[i] + s.lattice.shift_translation(shift);
                let dist = disp.norm();
                if dist > 0.0 && dist < r_c {
                    edges.push(PeriodicEdge::geometric(i, j, shift, disp));
                }
            }
        }
    }
    Ok(PeriodicGraph::from_edges(GraphKind::Atomistic, n, edges))
}

/// Superatom replica graph: a single node with one edge per nonzero shift
/// `n` with `||L*n|| < big_cutoff`. Depends only on the lattice, never on
/// atom positions.
pub fn build_cell_graph(
    s: &CrystalStructure,
    big_cutoff: f64,
) -> Result<PeriodicGraph, GraphError> {
    let bounds = shift_bounds(&s.lattice, big_cutoff)?;
    let mut edges = Vec::new();
    for shift in bounds.iter() {
        if shift.is_zero() {
            continue;
        }
        let disp = s.lattice.shift_translation(shift);
        let dist = disp.norm();
        if dist > 0.0 && dist < big_cutoff {
            edges.push(PeriodicEdge::geometric(0, 0, shift, disp));
        }
    }
    Ok(PeriodicGraph::from_edges(GraphKind::Cell, 1, edges))
}

/// Index of the superatom node in the multiscale graph: atoms keep their
/// structure indices `0..N` and the superatom is appended as node `N`.
pub fn multiscale_super_index(num_atoms: usize) -> usize {
    num_atoms
}

/// Bipartite star: superatom bidirectionally connected to every atom.
/// Edges carry no geometry.
pub fn build_multiscale_graph(s: &CrystalStructure) -> PeriodicGraph {
    let n = s.num_atoms();
    let sup = multiscale_super_index(n);
    let mut edges = Vec::with_capacity(2 * n);
    for i in 0..n {
        edges.push(PeriodicEdge::feature_only(i, sup));
        edges.push(PeriodicEdge::feature_only(sup, i));
    }
    PeriodicGraph::from_edges(GraphKind::Multiscale, n + 1, edges)
}

/// Feature-space graph: a directed edge `i -> j` for each of the at most
/// `max_degree` feature-nearest neighbours `j != i` of `i` with
/// `||h_i - h_j|| < r_f` (ties broken by smaller node index). Each edge
/// carries the minimum-image Cartesian displacement between the two sites.
pub fn build_similarity_graph(
    s: &CrystalStructure,
    embeddings: &[Vec<f64>],
    r_f: f64,
    max_degree: usize,
) -> Result<PeriodicGraph, GraphError> {
    let n = s.num_atoms();
    if embeddings.len() != n {
        return Err(GraphError::DimensionMismatch {
            expected: n,
            got: embeddings.len(),
        });
    }
    if let Some(first) = embeddings.first() {
        for h in embeddings {
            if h.len() != first.len() {
                return Err(GraphError::DimensionMismatch {
                    expected: first.len(),
                    got: h.len(),
                });
            }
        }
    }
    if !(r_f > 0.0) {
        return Err(GraphError::NonPositiveCutoff(r_f));
    }
    let positions = s.positions();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let dist2: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let dist = dist2.sqrt();
            if dist < r_f {
                candidates.push((dist, j));
            }
        }
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, j) in candidates.iter().take(max_degree) {
            // Edge convention disp = r_dst - r_src + L*n, so evaluate the
            // minimum image of (r_j, r_i).
            let (disp, shift) = min_image_displacement(&s.lattice, &positions[j], &positions[i]);
            edges.push(PeriodicEdge::geometric(i, j, shift, disp));
        }
    }
    Ok(PeriodicGraph::from_edges(GraphKind::Similarity, n, edges))
}

/// Serializes one graph as a JSON line:
/// `{"id", "kind", "num_nodes", "edges": [[src, dst, n1, n2, n3, dx, dy, dz], ...]}`.
/// Multiscale edges carry no geometry; their shift and displacement slots
/// are written as zeros.
pub fn graph_to_json_line(id: &str, graph: &PeriodicGraph) -> String {
    use serde_json::{json, Value};
    let edges: Vec<Value> = graph
        .edges
        .iter()
        .map(|e| {
            let (disp, n) = match &e.geometry {
                Some(g) => (g.disp, e.shift),
                None => (Vector3::zeros(), ShiftVector::ZERO),
            };
            json!([e.src, e.dst, n.0[0], n.0[1], n.0[2], disp[0], disp[1], disp[2]])
        })
        .collect();
    serde_json::to_string(&json!({
        "id": id,
        "kind": graph.kind.as_str(),
        "num_nodes": graph.num_nodes,
        "edges": edges,
    }))
    .expect("graph serialization cannot fail")
}
