//! Directed graphs over d nodes, possibly cyclic.
//!
//! Adjacency convention: entry (j, i) refers to the edge j → i, so column i
//! collects the parents of node i. Weighted graphs keep the same layout and a
//! zero diagonal (no self-loops).

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::csv;
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

/// Binary directed graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphStructure {
    edges: DMatrix<u8>,
}

impl GraphStructure {
    pub fn empty(d: usize) -> Self {
        GraphStructure {
            edges: DMatrix::zeros(d, d),
        }
    }

    /// Build from explicit (src, dst) pairs.
    pub fn from_edges(d: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = GraphStructure::empty(d);
        for &(src, dst) in edges {
            if src >= d || dst >= d {
                return Err(Error::invalid(
                    "edges",
                    format!("edge ({src}, {dst}) out of range for d = {d}"),
                ));
            }
            if src == dst {
                return Err(Error::invalid("edges", format!("self-loop at node {src}")));
            }
            g.edges[(src, dst)] = 1;
        }
        Ok(g)
    }

    /// Support of a weighted matrix: an edge wherever the entry is non-zero.
    pub fn from_support(m: &DMatrix<f64>) -> Self {
        let mut edges = DMatrix::zeros(m.nrows(), m.ncols());
        for j in 0..m.nrows() {
            for i in 0..m.ncols() {
                if j != i && m[(j, i)] != 0.0 {
                    edges[(j, i)] = 1;
                }
            }
        }
        GraphStructure { edges }
    }

    pub fn d(&self) -> usize {
        self.edges.nrows()
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.edges[(src, dst)] != 0
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(|&e| e as usize).sum()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let d = self.d();
        let mut out = Vec::new();
        for src in 0..d {
            for dst in 0..d {
                if self.has_edge(src, dst) {
                    out.push((src, dst));
                }
            }
        }
        out
    }
}

/// Real-valued adjacency matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAdjacency {
    b: DMatrix<f64>,
}

impl WeightedAdjacency {
    /// Wrap a square matrix, rejecting self-loop weights.
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if b.nrows() != b.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "adjacency matrix must be square, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        for i in 0..b.nrows() {
            if b[(i, i)] != 0.0 {
                return Err(Error::invalid("b", format!("non-zero diagonal at node {i}")));
            }
        }
        Ok(WeightedAdjacency { b })
    }

    pub fn zeros(d: usize) -> Self {
        WeightedAdjacency {
            b: DMatrix::zeros(d, d),
        }
    }

    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn structure(&self) -> GraphStructure {
        GraphStructure::from_support(&self.b)
    }
}

/// Sample an Erdős–Rényi directed graph where each ordered off-diagonal pair
/// carries an edge independently with probability `expected_density / (d-1)`,
/// so the expected out-degree of every node equals `expected_density`.
pub fn sample_erdos_renyi(
    d: usize,
    expected_density: f64,
    rng: &mut impl Rng,
) -> Result<GraphStructure> {
    if d < 2 {
        return Err(Error::invalid("d", format!("need at least 2 nodes, got {d}")));
    }
    if !(expected_density > 0.0) || expected_density > (d - 1) as f64 {
        return Err(Error::invalid(
            "expected_density",
            format!("must lie in (0, {}] for d = {d}, got {expected_density}", d - 1),
        ));
    }
    let p = expected_density / (d - 1) as f64;
    let mut g = GraphStructure::empty(d);
    for src in 0..d {
        for dst in 0..d {
            if src != dst && rng.random::<f64>() < p {
                g.edges[(src, dst)] = 1;
            }
        }
    }
    Ok(g)
}

/// Scale a matrix down so its spectral norm does not exceed `target`.
/// Matrices already within the target are returned untouched, which makes the
/// projection idempotent.
pub fn project_to_lipschitz(m: &mut DMatrix<f64>, target: f64) {
    let norm = spectral_norm(m);
    if norm > target && norm > 0.0 {
        *m *= target / norm;
    }
}

/// Draw edge weights uniformly from (-band_high, -band_low) ∪ (band_low,
/// band_high) and rescale the whole matrix onto the `target_lipschitz` ball
/// when its spectral norm exceeds the target.
pub fn assign_weights_and_project(
    structure: &GraphStructure,
    band_low: f64,
    band_high: f64,
    target_lipschitz: f64,
    rng: &mut impl Rng,
) -> Result<WeightedAdjacency> {
    if !(band_low > 0.0 && band_high > band_low) {
        return Err(Error::invalid(
            "band",
            format!("need 0 < band_low < band_high, got ({band_low}, {band_high})"),
        ));
    }
    if !(target_lipschitz > 0.0) {
        return Err(Error::invalid(
            "target_lipschitz",
            format!("must be positive, got {target_lipschitz}"),
        ));
    }
    let d = structure.d();
    let mut b = DMatrix::zeros(d, d);
    for src in 0..d {
        for dst in 0..d {
            if structure.has_edge(src, dst) {
                let magnitude = rng.random_range(band_low..band_high);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                b[(src, dst)] = sign * magnitude;
            }
        }
    }
    project_to_lipschitz(&mut b, target_lipschitz);
    WeightedAdjacency::new(b)
}

/// Structural Hamming distance between directed graphs.
///
/// Counted per unordered node pair: matching pair states cost 0, a single
/// flipped edge (i → j against j → i) costs 1 as one reversal, and any other
/// disagreement costs one per differing edge slot (additions/deletions).
pub fn shd(estimated: &GraphStructure, truth: &GraphStructure) -> Result<usize> {
    if estimated.d() != truth.d() {
        return Err(Error::DimensionMismatch(format!(
            "graphs have {} and {} nodes",
            estimated.d(),
            truth.d()
        )));
    }
    let d = estimated.d();
    let mut total = 0usize;
    for i in 0..d {
        for j in (i + 1)..d {
            let e = (estimated.has_edge(i, j), estimated.has_edge(j, i));
            let t = (truth.has_edge(i, j), truth.has_edge(j, i));
            if e == t {
                continue;
            }
            let reversal = matches!(
                (e, t),
                ((true, false), (false, true)) | ((false, true), (true, false))
            );
            if reversal {
                total += 1;
            } else {
                total += (e.0 != t.0) as usize + (e.1 != t.1) as usize;
            }
        }
    }
    Ok(total)
}

/// Threshold edge probabilities into a hard structure. Strictly greater than
/// `threshold` counts as an edge; the diagonal is always empty.
pub fn extract_structure(
    mask_probabilities: &DMatrix<f64>,
    threshold: f64,
) -> Result<GraphStructure> {
    if mask_probabilities.nrows() != mask_probabilities.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "probability matrix must be square, got {}x{}",
            mask_probabilities.nrows(),
            mask_probabilities.ncols()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(
            "threshold",
            format!("must lie in (0, 1), got {threshold}"),
        ));
    }
    let d = mask_probabilities.nrows();
    let mut g = GraphStructure::empty(d);
    for src in 0..d {
        for dst in 0..d {
            let p = mask_probabilities[(src, dst)];
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(
                    "mask_probabilities",
                    format!("entry ({src}, {dst}) = {p} is not a probability"),
                ));
            }
            if src != dst && p > threshold {
                g.edges[(src, dst)] = 1;
            }
        }
    }
    Ok(g)
}

/// Default probability threshold for reading off a hard graph.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.5;

/// Write a dense adjacency matrix: d rows of d comma-separated reals, no header.
pub fn write_adjacency(path: &Path, b: &DMatrix<f64>) -> Result<()> {
    csv::write_matrix(path, b, None)
}

/// Read a dense adjacency matrix written by [`write_adjacency`].
pub fn read_adjacency(path: &Path) -> Result<DMatrix<f64>> {
    let (m, _) = csv::read_matrix(path, false)?;
    if m.nrows() != m.ncols() {
        return Err(Error::parse(
            path,
            1,
            format!("adjacency matrix must be square, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m)
}

/// Write `src,dst,weight` rows (zero-based node indices) for every edge.
pub fn write_edge_list(path: &Path, b: &DMatrix<f64>) -> Result<()> {
    let mut out = String::from("src,dst,weight\n");
    for src in 0..b.nrows() {
        for dst in 0..b.ncols() {
            if src != dst && b[(src, dst)] != 0.0 {
                out.push_str(&format!("{src},{dst},{}\n", csv::format_float(b[(src, dst)])));
            }
        }
    }
    csv::write_file(path, &out)
}
