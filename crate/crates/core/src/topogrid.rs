//! Filter grids, neighborhood weights and the topographic similarity penalty.
//!
//! Each filter of a layer owns one cell of a `rows x cols` grid (row-major
//! filter order). For a center cell, every other in-bounds cell within the
//! `n x n` window gets weight `1 / euclidean_distance`, and the weights of a
//! neighborhood are normalized to sum to one. Windows are truncated at the
//! grid border, never wrapped.

use serde::{Deserialize, Serialize};

use crate::diffkit::{cosine_similarity, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Side length of the (odd) square neighborhood window.
    pub neighborhood: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, neighborhood: usize) -> Result<Self> {
        let grid = Self {
            rows,
            cols,
            neighborhood,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// `rows x cols` grid with the default 3x3 neighborhood.
    pub fn square3(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, 3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!(
                "grid {}x{} must have at least one cell",
                self.rows, self.cols
            )));
        }
        if self.neighborhood.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "neighborhood size {} must be odd",
                self.neighborhood
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.rows && col < self.cols
    }

    fn radius(&self) -> usize {
        (self.neighborhood - 1) / 2
    }

    /// Every (center, neighbor, weight) triple, centers in row-major order
    /// and neighbors in row-major window order.
    pub fn pairs(&self) -> Vec<NeighborPair> {
        let mut out = Vec::new();
        for center in 0..self.cells() {
            let (r, c) = self.coords(center);
            let hood = neighborhood_weights(self, (r, c)).expect("center in bounds");
            out.extend(hood.neighbors.iter().map(|&((nr, nc), weight)| NeighborPair {
                center,
                neighbor: self.index(nr, nc),
                weight,
            }));
        }
        out
    }

    /// Number of centers that have at least one neighbor.
    pub fn active_centers(&self) -> usize {
        if self.cells() > 1 && self.neighborhood > 1 {
            self.cells()
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborPair {
    pub center: usize,
    pub neighbor: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodWeights {
    pub center: (usize, usize),
    pub neighbors: Vec<((usize, usize), f64)>,
}

impl NeighborhoodWeights {
    pub fn total(&self) -> f64 {
        self.neighbors.iter().map(|&(_, w)| w).sum()
    }
}

/// Normalized reciprocal-distance weights of the cells around `center`.
pub fn neighborhood_weights(grid: &GridSpec, center: (usize, usize)) -> Result<NeighborhoodWeights> {
    let (r0, c0) = center;
    if !grid.contains(r0, c0) {
        return Err(Error::OutOfBounds(format!(
            "center ({r0}, {c0}) outside {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let rad = grid.radius();
    let mut neighbors = Vec::new();
    for r in r0.saturating_sub(rad)..=(r0 + rad).min(grid.rows - 1) {
        for c in c0.saturating_sub(rad)..=(c0 + rad).min(grid.cols - 1) {
            if (r, c) == center {
                continue;
            }
            let dr = r as f64 - r0 as f64;
            let dc = c as f64 - c0 as f64;
            neighbors.push(((r, c), 1.0 / dr.hypot(dc)));
        }
    }
    let total: f64 = neighbors.iter().map(|&(_, w)| w).sum();
    for (_, w) in &mut neighbors {
        *w /= total;
    }
    Ok(NeighborhoodWeights { center, neighbors })
}

/// Which way the penalty pushes neighboring filters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySign {
    /// Penalize `1 - cos`, pulling neighbors toward similar weights.
    #[default]
    Similarity,
    /// Penalize `+cos`, pushing neighbors apart.
    LiteralCosine,
}

/// One layer's filters viewed as one flat vector per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    grid: GridSpec,
    vectors: Vec<Vec<f64>>,
}

impl FilterBank {
    pub fn new(grid: GridSpec, vectors: Vec<Vec<f64>>) -> Result<Self> {
        grid.validate()?;
        if vectors.len() != grid.cells() {
            return Err(Error::Shape(format!(
                "{} filters for a {}x{} grid",
                vectors.len(),
                grid.rows,
                grid.cols
            )));
        }
        let width = vectors[0].len();
        if width == 0 || vectors.iter().any(|v| v.len() != width) {
            return Err(Error::Shape("filter vectors must share a nonzero length".into()));
        }
        Ok(Self { grid, vectors })
    }

    /// Splits a `[K x ...]` weight tensor into one vector per filter.
    pub fn from_tensor(grid: GridSpec, weights: &Tensor) -> Result<Self> {
        let k = weights.shape().first().copied().unwrap_or(0);
        Self::new(grid, (0..k).map(|i| weights.row(i).to_vec()).collect())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.vectors).expect("rows validated at construction")
    }
}

/// Records the penalty on `graph` for a filter node whose leading axis
/// enumerates the grid cells.
///
/// Value: mean over centers (with at least one neighbor) of
/// `sum_j w_cj * (1 - cos(W_j, W_c))` for [`PenaltySign::Similarity`], or of
/// `sum_j w_cj * cos(W_j, W_c)` for [`PenaltySign::LiteralCosine`].
/// Returns a constant zero when the grid has no neighbor pairs.
pub fn penalty_node(graph: &mut Graph, filters: NodeId, grid: &GridSpec, sign: PenaltySign) -> Result<NodeId> {
    let k = graph.value(filters).shape().first().copied().unwrap_or(0);
    if k != grid.cells() {
        return Err(Error::Shape(format!(
            "{k} filters for a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let pairs = grid.pairs();
    if pairs.is_empty() {
        return Ok(graph.constant(Tensor::scalar(0.0)?));
    }
    let rows: Vec<NodeId> = (0..k).map(|i| graph.row(filters, i)).collect::<Result<_>>()?;
    let mut cosines = Vec::with_capacity(pairs.len());
    for p in &pairs {
        cosines.push(graph.cosine_similarity(rows[p.neighbor], rows[p.center])?);
    }
    let cosines = graph.stack(cosines)?;
    let weights = graph.constant(Tensor::vector(pairs.iter().map(|p| p.weight).collect())?);
    let weighted = graph.dot(cosines, weights)?;
    let centers = grid.active_centers() as f64;
    match sign {
        PenaltySign::Similarity => {
            let total: f64 = pairs.iter().map(|p| p.weight).sum();
            let neg = graph.scale(weighted, -1.0 / centers)?;
            graph.offset(neg, total / centers)
        }
        PenaltySign::LiteralCosine => graph.scale(weighted, 1.0 / centers),
    }
}

/// Topographic penalty of a filter bank (similarity-encouraging sign).
pub fn topo_penalty(bank: &FilterBank) -> Result<f64> {
    topo_penalty_signed(bank, PenaltySign::Similarity)
}

pub fn topo_penalty_signed(bank: &FilterBank, sign: PenaltySign) -> Result<f64> {
    let mut g = Graph::new();
    let filters = g.constant(bank.as_tensor());
    let p = penalty_node(&mut g, filters, &bank.grid, sign)?;
    Ok(g.scalar(p))
}

/// Penalty value and its gradient with respect to every filter vector.
pub fn topo_penalty_grad(bank: &FilterBank) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let filters = g.param("filters", bank.as_tensor());
    let p = penalty_node(&mut g, filters, &bank.grid, PenaltySign::Similarity)?;
    let grads = g.backward(p)?;
    let grad = grads.of(filters).expect("parameter gradient");
    let per_filter = (0..bank.vectors.len()).map(|i| grad.row(i).to_vec()).collect();
    Ok((g.scalar(p), per_filter))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Unweighted cosine statistics over the ordered center/neighbor pairs that
/// the penalty sums over.
pub fn neighbor_similarity_stats(bank: &FilterBank) -> Result<SimilarityStats> {
    let pairs = bank.grid.pairs();
    if pairs.is_empty() {
        return Err(Error::NoPairs(bank.grid.rows, bank.grid.cols));
    }
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for p in &pairs {
        let d = cosine_similarity(&bank.vectors[p.neighbor], &bank.vectors[p.center])?;
        sum += d;
        min = min.min(d);
        max = max.max(d);
    }
    Ok(SimilarityStats {
        mean: sum / pairs.len() as f64,
        min,
        max,
    })
}
