//! Neighborhood graphs, averaging operators `Ω` and graph Laplacians `I − Ω`.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Undirected graph with self-inclusive neighborhoods `N_i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodGraph {
    adjacency: Vec<Vec<usize>>,
}

impl NeighborhoodGraph {
    /// Builds a graph from neighbor lists. Lists are sorted and deduplicated;
    /// each node must list itself and neighborhoods must be symmetric.
    pub fn new(mut adjacency: Vec<Vec<usize>>) -> Result<Self> {
        let n = adjacency.len();
        if n == 0 {
            return Err(Error::InvalidDimension("graph has no nodes".into()));
        }
        for (i, list) in adjacency.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.binary_search(&i).is_err() {
                return Err(Error::Domain(format!("node {i} is not in its own neighborhood")));
            }
            if let Some(&k) = list.iter().find(|&&k| k >= n) {
                return Err(Error::Domain(format!("node {i} lists out-of-range neighbor {k}")));
            }
        }
        for (i, list) in adjacency.iter().enumerate() {
            for &k in list {
                if adjacency[k].binary_search(&i).is_err() {
                    return Err(Error::Domain(format!(
                        "neighborhoods not symmetric: {k} in N_{i} but {i} not in N_{k}"
                    )));
                }
            }
        }
        Ok(NeighborhoodGraph { adjacency })
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    /// Sorted neighbors of `i`, including `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }
}

/// 4-connected `height×width` grid plus self-loops. Node `(r, c)` has index `r·width + c`.
pub fn grid_graph(height: usize, width: usize) -> Result<NeighborhoodGraph> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension(format!(
            "grid must be at least 1x1, got {height}x{width}"
        )));
    }
    let mut adjacency = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let mut list = vec![i];
            if r > 0 {
                list.push(i - width);
            }
            if c > 0 {
                list.push(i - 1);
            }
            if c + 1 < width {
                list.push(i + 1);
            }
            if r + 1 < height {
                list.push(i + width);
            }
            list.sort_unstable();
            adjacency.push(list);
        }
    }
    Ok(NeighborhoodGraph { adjacency })
}

/// Sparse row-stochastic averaging matrix `Ω`, stored by compressed rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragingOperator {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    symmetric: bool,
}

impl AveragingOperator {
    /// Builds `Ω` on the pattern of `graph` with weights `weight(i, k)` for `k ∈ N_i`.
    pub fn from_graph<F>(graph: &NeighborhoodGraph, mut weight: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> f64,
    {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..graph.n() {
            for &k in graph.neighbors(i) {
                cols.push(k);
                vals.push(weight(i, k));
            }
            row_ptr.push(cols.len());
        }
        let mut op = AveragingOperator {
            row_ptr,
            cols,
            vals,
            symmetric: false,
        };
        op.validate()?;
        op.symmetric = op.compute_symmetry();
        Ok(op)
    }

    /// Builds `Ω` from a dense matrix; the sparsity pattern is the set of positive entries.
    pub fn from_dense(dense: &Array2<f64>) -> Result<Self> {
        let n = dense.nrows();
        if dense.ncols() != n || n == 0 {
            return Err(Error::InvalidDimension(format!(
                "averaging matrix must be square and nonempty, got {}x{}",
                dense.nrows(),
                dense.ncols()
            )));
        }
        let adjacency = (0..n)
            .map(|i| (0..n).filter(|&k| dense[[i, k]] != 0.0).collect())
            .collect();
        let graph = NeighborhoodGraph::new(adjacency)?;
        Self::from_graph(&graph, |i, k| dense[[i, k]])
    }

    /// Random symmetric row-stochastic weights on the pattern of `graph`.
    pub fn random_symmetric<R: Rng + ?Sized>(graph: &NeighborhoodGraph, rng: &mut R) -> Result<Self> {
        let n = graph.n();
        let max_degree = (0..n).map(|i| graph.neighbors(i).len()).max().unwrap_or(1);
        // off-diagonal weights below 1/max_degree leave a positive diagonal
        let mut off = std::collections::HashMap::new();
        for i in 0..n {
            for &k in graph.neighbors(i) {
                if k > i {
                    let w: f64 = rng.random_range(0.1..1.0) / max_degree as f64;
                    off.insert((i, k), w);
                }
            }
        }
        let offdiag = |i: usize, k: usize| off[&(i.min(k), i.max(k))];
        let diag: Vec<f64> = (0..n)
            .map(|i| {
                1.0 - graph
                    .neighbors(i)
                    .iter()
                    .filter(|&&k| k != i)
                    .map(|&k| offdiag(i, k))
                    .sum::<f64>()
            })
            .collect();
        let mut op = Self::from_graph(graph, |i, k| if i == k { diag[i] } else { offdiag(i, k) })?;
        op.symmetric = op.compute_symmetry();
        Ok(op)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n() {
            let (cols, vals) = self.row(i);
            if vals.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::Domain(format!("row {i} has a nonpositive weight")));
            }
            if cols.binary_search(&i).is_err() {
                return Err(Error::Domain(format!("row {i} lacks a diagonal weight")));
            }
            let sum: f64 = vals.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("row {i} of the averaging matrix sums to {sum}")));
            }
        }
        Ok(())
    }

    fn compute_symmetry(&self) -> bool {
        (0..self.n()).all(|i| {
            let (cols, vals) = self.row(i);
            cols.iter()
                .zip(vals)
                .all(|(&k, &w)| self.get(k, i).is_some_and(|wt| wt == w))
        })
    }

    pub fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Column indices and weights of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[range.clone()], &self.vals[range])
    }

    /// `ω_ik`, or `None` if `k ∉ N_i`.
    pub fn get(&self, i: usize, k: usize) -> Option<f64> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&k).ok().map(|pos| vals[pos])
    }

    /// True if `Ω = Ωᵀ` entrywise.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn graph(&self) -> NeighborhoodGraph {
        NeighborhoodGraph {
            adjacency: (0..self.n()).map(|i| self.row(i).0.to_vec()).collect(),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n(), self.n()));
        for i in 0..self.n() {
            let (cols, vals) = self.row(i);
            for (&k, &w) in cols.iter().zip(vals) {
                out[[i, k]] = w;
            }
        }
        out
    }

    /// `Ω M` for an `n×c` matrix given as row-major slice.
    pub(crate) fn apply_slice(&self, m: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; m.len()];
        out.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
            let (cols, vals) = self.row(i);
            for (&k, &w) in cols.iter().zip(vals) {
                for (oj, mj) in o.iter_mut().zip(&m[k * c..(k + 1) * c]) {
                    *oj += w * mj;
                }
            }
        });
        out
    }
}

/// Uniform weights `ω_ik = 1/|N_i|`.
pub fn uniform_weights(graph: &NeighborhoodGraph) -> AveragingOperator {
    AveragingOperator::from_graph(graph, |i, _| 1.0 / graph.neighbors(i).len() as f64)
        .expect("uniform weights are row-stochastic")
}

/// Maximum sweeps of the symmetric Sinkhorn rescaling in [`symmetrize`].
pub const SINKHORN_MAX_SWEEPS: usize = 50;
/// Row-sum tolerance at which the Sinkhorn sweeps stop early.
pub const SINKHORN_TOL: f64 = 1e-12;
/// Largest row-sum defect left after the sweeps that may be moved onto the diagonal.
pub const SINKHORN_MAX_DEFECT: f64 = 1e-6;

/// Symmetric row-stochastic operator on the same pattern: `(Ω + Ωᵀ)/2` followed by
/// a symmetric diagonal rescaling `d_i a_ik d_k` that restores unit row sums.
///
/// The rescaling converges slowly on large grids, so after at most
/// [`SINKHORN_MAX_SWEEPS`] sweeps the remaining defect (at most
/// [`SINKHORN_MAX_DEFECT`]) is absorbed into the diagonal weights.
pub fn symmetrize(omega: &AveragingOperator) -> Result<AveragingOperator> {
    if omega.is_symmetric() {
        return Ok(omega.clone());
    }
    let n = omega.n();
    let graph = omega.graph();
    let avg: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (cols, vals) = omega.row(i);
            cols.iter()
                .zip(vals)
                .map(|(&k, &w)| {
                    let wt = omega.get(k, i).expect("symmetric pattern");
                    0.5 * (w + wt)
                })
                .collect()
        })
        .collect();

    let row_sums = |d: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let cols = graph.neighbors(i);
                d[i] * cols.iter().zip(&avg[i]).map(|(&k, &a)| a * d[k]).sum::<f64>()
            })
            .collect()
    };

    let mut d = vec![1.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..SINKHORN_MAX_SWEEPS {
        let sums = row_sums(&d);
        residual = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        if residual <= SINKHORN_TOL {
            break;
        }
        // d_i ← sqrt(d_i / (A d)_i)
        for (di, s) in d.iter_mut().zip(&sums) {
            *di /= s.sqrt();
        }
    }
    if residual > SINKHORN_MAX_DEFECT {
        return Err(Error::NotConverged {
            what: "symmetric Sinkhorn rescaling",
            iterations: SINKHORN_MAX_SWEEPS,
            residual,
        });
    }
    let scaled = AveragingOperator {
        row_ptr: omega.row_ptr.clone(),
        cols: omega.cols.clone(),
        vals: (0..n)
            .flat_map(|i| {
                let d = &d;
                graph
                    .neighbors(i)
                    .iter()
                    .zip(&avg[i])
                    .map(move |(&k, &a)| d[i] * a * d[k])
            })
            .collect(),
        symmetric: false,
    };
    let out = absorb_defect_into_diagonal(exact_symmetric(&scaled));
    out.validate()?;
    Ok(out)
}

/// Sets `ω_ii = 1 − Σ_{k≠i} ω_ik`, which fixes row sums without touching symmetry.
fn absorb_defect_into_diagonal(mut op: AveragingOperator) -> AveragingOperator {
    for i in 0..op.n() {
        let start = op.row_ptr[i];
        let (cols, vals) = op.row(i);
        let pos = cols.binary_search(&i).expect("diagonal in pattern");
        let off: f64 = cols.iter().zip(vals).filter(|(&k, _)| k != i).map(|(_, &w)| w).sum();
        op.vals[start + pos] = 1.0 - off;
    }
    op.symmetric = op.compute_symmetry();
    op
}

fn exact_symmetric(op: &AveragingOperator) -> AveragingOperator {
    let mut out = op.clone();
    for i in 0..op.n() {
        let start = op.row_ptr[i];
        let (cols, vals) = op.row(i);
        for (pos, (&k, &w)) in cols.iter().zip(vals).enumerate() {
            if k > i {
                let v = 0.5 * (w + op.get(k, i).unwrap());
                out.vals[start + pos] = v;
                let kpos = out.row(k).0.binary_search(&i).unwrap();
                let kstart = out.row_ptr[k];
                out.vals[kstart + kpos] = v;
            }
        }
    }
    out.symmetric = out.compute_symmetry();
    out
}

/// `L = I − Ω`, sharing the sparsity pattern of `Ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLaplacian {
    omega: AveragingOperator,
}

impl GraphLaplacian {
    pub fn n(&self) -> usize {
        self.omega.n()
    }

    pub fn is_symmetric(&self) -> bool {
        self.omega.is_symmetric()
    }

    /// `L_ik`.
    pub fn get(&self, i: usize, k: usize) -> f64 {
        let w = self.omega.get(i, k).unwrap_or(0.0);
        if i == k {
            1.0 - w
        } else {
            -w
        }
    }

    /// `L M`.
    pub fn apply(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        let averaged = average_rows(&self.omega, m)?;
        Ok(m - &averaged)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        Array2::eye(self.n()) - self.omega.to_dense()
    }

    /// `⟨X, L X⟩`.
    pub fn quadratic_form(&self, x: &Array2<f64>) -> Result<f64> {
        let lx = self.apply(x)?;
        Ok((x * &lx).sum())
    }
}

pub fn laplacian(omega: &AveragingOperator) -> GraphLaplacian {
    GraphLaplacian { omega: omega.clone() }
}

/// `Ω M`: row `i` is the `ω`-weighted average of the rows `M_k`, `k ∈ N_i`.
pub fn average_rows(omega: &AveragingOperator, m: &Array2<f64>) -> Result<Array2<f64>> {
    if m.nrows() != omega.n() {
        return Err(Error::mismatch(
            format!("{} rows", omega.n()),
            format!("{} rows", m.nrows()),
        ));
    }
    let c = m.ncols();
    if c == 0 {
        return Ok(m.clone());
    }
    let standard = m.as_standard_layout();
    let out = omega.apply_slice(standard.as_slice().unwrap(), c);
    Ok(Array2::from_shape_vec((omega.n(), c), out).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_examples() {
        let g = grid_graph(1, 1).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
        let g = grid_graph(2, 2).unwrap();
        assert!((0..4).all(|i| g.neighbors(i).len() == 3));
        let g = grid_graph(3, 3).unwrap();
        assert_eq!(g.neighbors(4), &[1, 3, 4, 5, 7]);
        assert!(matches!(grid_graph(0, 3), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn graph_validation() {
        assert!(NeighborhoodGraph::new(vec![vec![0, 1], vec![1]]).is_err());
        assert!(NeighborhoodGraph::new(vec![vec![1], vec![0, 1]]).is_err());
        assert!(NeighborhoodGraph::new(vec![vec![0, 1], vec![1, 0]]).is_ok());
    }

    #[test]
    fn uniform_weight_examples() {
        let w = uniform_weights(&grid_graph(1, 1).unwrap());
        assert_eq!(w.to_dense(), array![[1.0]]);

        let g = grid_graph(5, 5).unwrap();
        let w = uniform_weights(&g);
        let (_, vals) = w.row(12);
        assert!(vals.iter().all(|&v| v == 0.2));
        assert!(!w.is_symmetric());

        let w = uniform_weights(&grid_graph(2, 1).unwrap());
        assert_eq!(w.to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
        assert!(w.is_symmetric());
    }

    #[test]
    fn symmetrize_fixed_points() {
        let w = uniform_weights(&grid_graph(2, 1).unwrap());
        assert_eq!(symmetrize(&w).unwrap(), w);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = AveragingOperator::random_symmetric(&grid_graph(3, 4).unwrap(), &mut rng).unwrap();
        assert!(s.is_symmetric());
        let again = symmetrize(&s).unwrap();
        let diff = (&again.to_dense() - &s.to_dense())
            .mapv(f64::abs)
            .fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff <= 1e-12);
    }

    fn check_symmetric_stochastic(w: &AveragingOperator) {
        assert!(w.is_symmetric());
        let dense = w.to_dense();
        for row in dense.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        assert_eq!(dense, dense.t());
    }

    #[test]
    fn symmetrize_grids() {
        for (h, wd) in [(2, 2), (3, 3), (4, 4), (2, 5), (8, 8), (16, 16), (64, 64)] {
            let g = grid_graph(h, wd).unwrap();
            let s = symmetrize(&uniform_weights(&g)).unwrap();
            check_symmetric_stochastic(&s);
            assert_eq!(s.graph(), g);
        }
    }

    #[test]
    fn laplacian_examples() {
        let l = laplacian(&uniform_weights(&grid_graph(1, 1).unwrap()));
        assert_eq!(l.to_dense(), array![[0.0]]);
        let l = laplacian(&uniform_weights(&grid_graph(2, 1).unwrap()));
        assert_eq!(l.to_dense(), array![[0.5, -0.5], [-0.5, 0.5]]);
    }

    #[test]
    fn laplacian_kills_constants() {
        let g = grid_graph(4, 5).unwrap();
        let l = laplacian(&uniform_weights(&g));
        let ones = Array2::from_elem((20, 1), 1.0);
        let r = l.apply(&ones).unwrap();
        assert!(r.iter().all(|x| x.abs() <= 1e-12));
    }

    #[test]
    fn dirichlet_identity_for_symmetric_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = grid_graph(4, 3).unwrap();
        let w = AveragingOperator::random_symmetric(&g, &mut rng).unwrap();
        let l = laplacian(&w);
        let s = Array2::from_shape_fn((12, 3), |_| rng.random::<f64>());
        let lhs = l.quadratic_form(&s).unwrap();
        let mut rhs = 0.0;
        for i in 0..12 {
            let (cols, vals) = w.row(i);
            for (&k, &wk) in cols.iter().zip(vals) {
                let d2: f64 = (0..3).map(|j| (s[[i, j]] - s[[k, j]]).powi(2)).sum();
                rhs += wk * d2;
            }
        }
        assert_abs_diff_eq!(lhs, 0.5 * rhs, epsilon = 1e-12);
        assert!(lhs >= -1e-10);
    }

    #[test]
    fn average_rows_examples() {
        let w = uniform_weights(&grid_graph(2, 1).unwrap());
        let m = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(average_rows(&w, &m).unwrap(), array![[0.5, 0.5], [0.5, 0.5]]);

        let g = grid_graph(3, 3).unwrap();
        let w = uniform_weights(&g);
        let constant = Array2::from_shape_fn((9, 3), |(_, j)| [0.2, 0.3, 0.5][j]);
        let avg = average_rows(&w, &constant).unwrap();
        assert!((&avg - &constant).iter().all(|x| x.abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((9, 4), |_| rng.random::<f64>() - 0.5);
        let dense = w.to_dense().dot(&m);
        let sparse = average_rows(&w, &m).unwrap();
        assert!((&dense - &sparse).iter().all(|x| x.abs() <= 1e-14));

        assert!(average_rows(&w, &Array2::zeros((4, 2))).is_err());
    }
}
