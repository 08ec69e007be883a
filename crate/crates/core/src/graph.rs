//! Instance and label graphs and their symmetric normalized Laplacians.
//!
//! The instance graph links every example to its `k` nearest neighbours by
//! inner product (exact search) and weights the link with the monomial kernel
//! `max(x_i·x_j, 0)^rho`; the directed relation is symmetrized as `S + Sᵀ`.
//! The label graph weights a pair of labels by how often they co-occur in the
//! candidate sets, discounted by how often each appears at all.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

/// A symmetric matrix with non-negative entries, stored row-wise.
///
/// Zero weights are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    dim: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseSym {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            rows: vec![Vec::new(); dim],
        }
    }

    /// Builds a graph from `(row, col, weight)` triplets. Duplicate positions
    /// are summed. The result must be symmetric.
    pub fn from_triplets(
        dim: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut acc = BTreeMap::<(usize, usize), f64>::new();
        for (i, j, w) in triplets {
            if i >= dim || j >= dim {
                return Err(Error::data(format!("entry ({i}, {j}) outside a {dim}-node graph")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::data(format!("weight {w} at ({i}, {j}) is not a finite non-negative value")));
            }
            *acc.entry((i, j)).or_insert(0.0) += w;
        }
        for (&(i, j), &w) in &acc {
            if acc.get(&(j, i)).copied().unwrap_or(0.0) != w {
                return Err(Error::data(format!("graph is not symmetric at ({i}, {j})")));
            }
        }
        let mut rows = vec![Vec::new(); dim];
        for ((i, j), w) in acc {
            if w > 0.0 {
                rows[i].push((j, w));
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored (non-zero) entries, counting both triangles.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Stored entries of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |p| self.rows[i][p].1)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, w)| (i, j, w)))
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(_, w)| w).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.dim, self.dim));
        for (i, j, w) in self.entries() {
            m[(i, j)] = w;
        }
        m
    }

    /// Debug dump: one `row col weight` line per stored entry.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, j, v) in self.entries() {
            writeln!(w, "{i} {j} {v:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Neighbours per instance.
    pub k: usize,
    /// Kernel exponent.
    pub rho: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 10, rho: 3.0 }
    }
}

impl GraphConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k >= n {
            return Err(Error::config(format!(
                "k must satisfy 1 <= k < n (k = {}, n = {n})",
                self.k
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Exact top-`k` neighbours of every row by inner product, excluding the row
/// itself. Ties go to the smaller index.
pub fn knn_inner_product(features: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    Ok(knn_scored(features, k)?
        .into_iter()
        .map(|r| r.into_iter().map(|(j, _)| j).collect())
        .collect())
}

fn knn_scored(features: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = features.nrows();
    if k == 0 || k >= n {
        return Err(Error::config(format!("k must satisfy 1 <= k < n (k = {k}, n = {n})")));
    }
    let by_score = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let dots = features.dot(&features.row(i));
            // `+ 0.0` folds -0.0 into +0.0 so total_cmp sees them as equal
            let mut scored: Vec<(usize, f64)> = dots
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &s)| (j, s + 0.0))
                .collect();
            scored.select_nth_unstable_by(k - 1, by_score);
            scored.truncate(k);
            scored.sort_by(by_score);
            scored
        })
        .collect())
}

/// Sparse instance affinity graph `A = S + Sᵀ` over the rows of `features`.
pub fn build_instance_graph(features: ArrayView2<f64>, cfg: &GraphConfig) -> Result<SparseSym> {
    cfg.validate(features.nrows())?;
    let neighbours = knn_scored(features, cfg.k)?;
    let mut triplets = Vec::with_capacity(2 * cfg.k * features.nrows());
    for (i, row) in neighbours.iter().enumerate() {
        for &(j, dot) in row {
            let s = dot.max(0.0).powf(cfg.rho);
            triplets.push((i, j, s));
            triplets.push((j, i, s));
        }
    }
    SparseSym::from_triplets(features.nrows(), triplets)
}

/// Label co-occurrence graph:
/// `a_ij = #(i and j both candidates) / (#(i candidate) + #(j candidate))`.
///
/// The diagonal is zero unless `self_loops` is set, in which case labels that
/// appear at least once get the formula's value of 0.5.
pub fn build_label_graph(candidates: ArrayView2<u8>, self_loops: bool) -> SparseSym {
    let labels = candidates.ncols();
    let mut co = Array2::<u64>::zeros((labels, labels));
    let mut active = Vec::with_capacity(labels);
    for row in candidates.axis_iter(Axis(0)) {
        active.clear();
        active.extend((0..labels).filter(|&j| row[j] != 0));
        for &a in &active {
            for &b in &active {
                co[(a, b)] += 1;
            }
        }
    }
    let mut rows = vec![Vec::new(); labels];
    for i in 0..labels {
        for j in 0..labels {
            if i == j && !self_loops {
                continue;
            }
            let denom = co[(i, i)] + co[(j, j)];
            if co[(i, j)] > 0 && denom > 0 {
                rows[i].push((j, co[(i, j)] as f64 / denom as f64));
            }
        }
    }
    SparseSym { dim: labels, rows }
}

/// `L = I − D^{-1/2} A D^{-1/2}` kept in factored sparse form.
///
/// Nodes of degree zero get an identity row.
#[derive(Debug, Clone)]
pub struct NormalizedLaplacian {
    adjacency: SparseSym,
    degrees: Vec<f64>,
    /// `a_ij / sqrt(d_i d_j)` for every stored edge.
    scaled: Vec<Vec<(usize, f64)>>,
}

pub fn normalized_laplacian(graph: &SparseSym) -> NormalizedLaplacian {
    NormalizedLaplacian::new(graph.clone())
}

impl NormalizedLaplacian {
    pub fn new(adjacency: SparseSym) -> Self {
        let degrees = adjacency.degrees();
        let inv_sqrt: Vec<f64> = degrees
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let scaled = adjacency
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                // w * (s_i * s_j) keeps the scaled matrix exactly symmetric
                r.iter()
                    .map(|&(j, w)| (j, w * (inv_sqrt[i] * inv_sqrt[j])))
                    .collect()
            })
            .collect();
        Self {
            adjacency,
            degrees,
            scaled,
        }
    }

    /// Laplacian of the graph with no edges, i.e. the identity.
    pub fn identity(dim: usize) -> Self {
        Self::new(SparseSym::empty(dim))
    }

    pub fn dim(&self) -> usize {
        self.adjacency.dim
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn adjacency(&self) -> &SparseSym {
        &self.adjacency
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::eye(self.dim());
        for (i, row) in self.scaled.iter().enumerate() {
            for &(j, w) in row {
                m[(i, j)] -= w;
            }
        }
        m
    }

    /// `L · Z` for `Z` with `dim` rows.
    pub fn left_multiply(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_shape("laplacian left product", (self.dim(), z.ncols()), z.dim())?;
        let mut out = z.to_owned();
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .with_min_len(64)
            .enumerate()
            .for_each(|(i, mut out_row)| {
                for &(j, w) in &self.scaled[i] {
                    out_row.scaled_add(-w, &z.row(j));
                }
            });
        Ok(out)
    }

    /// `Z · L` for `Z` with `dim` columns.
    pub fn right_multiply(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_shape("laplacian right product", (z.nrows(), self.dim()), z.dim())?;
        let mut out = z.to_owned();
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(z.axis_iter(Axis(0)))
            .into_par_iter()
            .with_min_len(64)
            .for_each(|(mut out_row, z_row)| {
                for (c, edges) in self.scaled.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(j, w) in edges {
                        acc += w * z_row[j];
                    }
                    out_row[c] -= acc;
                }
            });
        Ok(out)
    }
}
