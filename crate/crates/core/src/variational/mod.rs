//! Discretized energy `E_α(S) = ‖D S‖² − α‖S‖²` on a pixel grid, the PALM
//! solver over the product simplex, and stationarity diagnostics.

mod palm;
#[cfg(test)]
mod tests;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flows::DistanceMatrix;
use crate::geometry::{exp_map_into, replicator_into};

pub use palm::{palm_step, run_palm, PalmOutcome, PalmRecord, PalmState};

/// Rows per rayon task for per-node loops.
const ROW_CHUNK: usize = 256;

/// Forward-difference gradient on an `height × width` 4-neighbor grid, stored as
/// its edge list. `L_n = D_nᵀ D_n` is the graph Laplacian of the grid.
#[derive(Clone, Debug)]
pub struct DiscreteOperators {
    height: usize,
    width: usize,
    /// Edges `(i, j)` with `j` the right or lower neighbor of `i`.
    edges: Vec<(usize, usize)>,
    /// Neighbor lists in index order.
    neighbors: Vec<Vec<usize>>,
}

pub fn build_operators(height: usize, width: usize) -> Result<DiscreteOperators> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidDimension(format!(
            "grid must be at least 2×2, got {height}×{width}"
        )));
    }
    let n = height * width;
    let mut edges = Vec::with_capacity(2 * n);
    let mut neighbors = vec![Vec::with_capacity(4); n];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width {
                edges.push((i, i + 1));
            }
            if r + 1 < height {
                edges.push((i, i + width));
            }
        }
    }
    for &(i, j) in &edges {
        neighbors[i].push(j);
        neighbors[j].push(i);
    }
    neighbors.iter_mut().for_each(|v| v.sort_unstable());
    Ok(DiscreteOperators {
        height,
        width,
        edges,
        neighbors,
    })
}

impl DiscreteOperators {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n(&self) -> usize {
        self.height * self.width
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    fn check(&self, f: &Array2<f64>) -> Result<()> {
        if f.nrows() != self.n() {
            return Err(Error::mismatch(self.n(), f.nrows()));
        }
        Ok(())
    }

    /// `D_n f`: one row per edge, `f_j − f_i`.
    pub fn gradient_apply(&self, f: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(f)?;
        let mut out = Array2::zeros((self.edges.len(), f.ncols()));
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let d = &f.row(j) - &f.row(i);
            out.row_mut(e).assign(&d);
        }
        Ok(out)
    }

    /// `D_nᵀ y` for an edge field `y`.
    pub fn gradient_adjoint_apply(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        if y.nrows() != self.edges.len() {
            return Err(Error::mismatch(self.edges.len(), y.nrows()));
        }
        let mut out = Array2::zeros((self.n(), y.ncols()));
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            for k in 0..y.ncols() {
                out[[j, k]] += y[[e, k]];
                out[[i, k]] -= y[[e, k]];
            }
        }
        Ok(out)
    }

    /// `L_n f`, row `i` equal to `deg(i)·f_i − Σ_{j~i} f_j`.
    pub fn laplacian_apply(&self, f: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(f)?;
        let mut out = Array2::zeros(f.raw_dim());
        self.laplacian_into(standard_slice(f), f.ncols(), out.as_slice_mut().unwrap());
        Ok(out)
    }

    pub(crate) fn laplacian_into(&self, f: &[f64], c: usize, out: &mut [f64]) {
        out.par_chunks_mut(c * ROW_CHUNK)
            .enumerate()
            .for_each(|(chunk, block)| {
                for (r, row) in block.chunks_mut(c).enumerate() {
                    let i = chunk * ROW_CHUNK + r;
                    let nb = &self.neighbors[i];
                    let deg = nb.len() as f64;
                    for k in 0..c {
                        let mut acc = deg * f[i * c + k];
                        for &j in nb {
                            acc -= f[j * c + k];
                        }
                        row[k] = acc;
                    }
                }
            });
    }

    /// `‖D_n f‖²` summed edge by edge.
    pub fn dirichlet_energy(&self, f: &Array2<f64>) -> Result<f64> {
        self.check(f)?;
        Ok(self.dirichlet_slice(standard_slice(f), f.ncols()))
    }

    pub(crate) fn dirichlet_slice(&self, f: &[f64], c: usize) -> f64 {
        let mut acc = 0.0;
        for &(i, j) in &self.edges {
            for k in 0..c {
                let d = f[j * c + k] - f[i * c + k];
                acc += d * d;
            }
        }
        acc
    }

    /// Dense `L_n`, for tests and small problems.
    pub fn laplacian_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut l = Array2::zeros((n, n));
        for &(i, j) in &self.edges {
            l[[i, i]] += 1.0;
            l[[j, j]] += 1.0;
            l[[i, j]] -= 1.0;
            l[[j, i]] -= 1.0;
        }
        l
    }
}

pub(crate) fn standard_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("matrices are kept in standard layout")
}

/// Outer ring of a `height × width` grid.
pub fn boundary_mask(height: usize, width: usize) -> Vec<bool> {
    (0..height * width)
        .map(|i| {
            let (r, c) = (i / width, i % width);
            r == 0 || c == 0 || r + 1 == height || c + 1 == width
        })
        .collect()
}

/// Boundary data, weights and proximal schedule of a PALM run.
#[derive(Clone, Debug)]
pub struct GridProblem {
    height: usize,
    width: usize,
    alpha: f64,
    g: Array2<f64>,
    mask: Vec<bool>,
    tau: Vec<f64>,
    pub tol_inner: f64,
    pub max_inner: usize,
}

pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_TOL_INNER: f64 = 1e-8;
pub const DEFAULT_MAX_INNER: usize = 10_000;

impl GridProblem {
    pub fn new(
        height: usize,
        width: usize,
        alpha: f64,
        g: Array2<f64>,
        boundary_mask: Vec<bool>,
        tau_schedule: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width;
        if n == 0 {
            return Err(Error::InvalidDimension("empty grid".into()));
        }
        if g.nrows() != n || boundary_mask.len() != n {
            return Err(Error::mismatch(
                n,
                if g.nrows() != n { g.nrows() } else { boundary_mask.len() },
            ));
        }
        if g.ncols() < 2 {
            return Err(Error::InvalidDimension(format!("need c ≥ 2 labels, got {}", g.ncols())));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        if tau_schedule.is_empty() || tau_schedule.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Domain("tau schedule must be non-empty and positive".into()));
        }
        for (i, row) in g.rows().into_iter().enumerate() {
            if boundary_mask[i] {
                let sum: f64 = row.sum();
                if row.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("boundary row {i} of g is not on the simplex")));
                }
            } else if row.iter().any(|x| *x != 0.0) {
                return Err(Error::Domain(format!("interior row {i} of g must be zero")));
            }
        }
        Ok(GridProblem {
            height,
            width,
            alpha,
            g: g.as_standard_layout().into_owned(),
            mask: boundary_mask,
            tau: tau_schedule,
            tol_inner: DEFAULT_TOL_INNER,
            max_inner: DEFAULT_MAX_INNER,
        })
    }

    /// Outer-ring boundary with a constant proximal weight.
    pub fn with_ring_boundary(height: usize, width: usize, alpha: f64, g: Array2<f64>, tau: f64) -> Result<Self> {
        GridProblem::new(height, width, alpha, g, boundary_mask(height, width), vec![tau])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n(&self) -> usize {
        self.height * self.width
    }

    pub fn c(&self) -> usize {
        self.g.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn boundary_field(&self) -> &Array2<f64> {
        &self.g
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.mask[i]
    }

    /// `τ_k`; the last entry of the schedule repeats.
    pub fn tau(&self, k: usize) -> f64 {
        self.tau[k.min(self.tau.len() - 1)]
    }

    pub(crate) fn check_ops(&self, ops: &DiscreteOperators) -> Result<()> {
        if ops.height != self.height || ops.width != self.width {
            return Err(Error::mismatch(
                format!("{}×{} operators", self.height, self.width),
                format!("{}×{}", ops.height, ops.width),
            ));
        }
        Ok(())
    }
}

/// `‖D_n S‖² − α‖S‖²`.
pub fn discrete_energy(ops: &DiscreteOperators, alpha: f64, s: &Array2<f64>) -> Result<f64> {
    let dirichlet = ops.dirichlet_energy(s)?;
    let norm2: f64 = s.iter().map(|x| x * x).sum();
    Ok(dirichlet - alpha * norm2)
}

/// `L_i(1_S) = softmax(−D_i/ρ)` for every node.
pub fn likelihood_field(distances: &DistanceMatrix, rho: f64) -> Result<Array2<f64>> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!("rho must be positive, got {rho}")));
    }
    let (n, c) = (distances.n(), distances.c());
    let bary = vec![1.0 / c as f64; c];
    let mut out = Array2::zeros((n, c));
    let mut v = vec![0.0; c];
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        for (vk, d) in v.iter_mut().zip(distances.row(i)) {
            *vk = -d / rho;
        }
        exp_map_into(&bary, &v, row.as_slice_mut().unwrap());
    }
    Ok(out)
}

/// `g_i = L_i(1_S)` on the outer ring, zero inside.
pub fn boundary_field_from_data(
    distances: &DistanceMatrix,
    rho: f64,
    height: usize,
    width: usize,
) -> Result<Array2<f64>> {
    if distances.n() != height * width {
        return Err(Error::mismatch(height * width, distances.n()));
    }
    let mut g = likelihood_field(distances, rho)?;
    for (i, b) in boundary_mask(height, width).into_iter().enumerate() {
        if !b {
            g.row_mut(i).fill(0.0);
        }
    }
    Ok(g)
}

/// `f_i^{(0)} = L_i(1_S)` inside, zero on the boundary.
pub fn initial_interior_field(distances: &DistanceMatrix, rho: f64, problem: &GridProblem) -> Result<Array2<f64>> {
    if distances.n() != problem.n() {
        return Err(Error::mismatch(problem.n(), distances.n()));
    }
    let mut f = likelihood_field(distances, rho)?;
    for i in 0..problem.n() {
        if problem.is_boundary(i) {
            f.row_mut(i).fill(0.0);
        }
    }
    Ok(f)
}

/// Euclidean projection onto the closed simplex.
pub fn simplex_project(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    let mut scratch = Vec::with_capacity(x.len());
    simplex_project_in_place(&mut out, &mut scratch);
    out
}

pub(crate) fn simplex_project_in_place(x: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(x);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, u) in scratch.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    x.iter_mut().for_each(|v| *v = (*v - theta).max(0.0));
}

/// `max_i |Σ_k S_ik − 1| + max(0, −min_k S_ik)`.
pub fn feasibility_violation(s: &Array2<f64>) -> f64 {
    s.rows()
        .into_iter()
        .map(|row| (row.sum() - 1.0).abs() + row.iter().fold(0.0f64, |m, x| m.max(-x)))
        .fold(0.0, f64::max)
}

/// `‖S − Proj(S − (L_n S − αS))‖_∞` over interior rows.
pub fn vi_residual(ops: &DiscreteOperators, problem: &GridProblem, s: &Array2<f64>) -> Result<f64> {
    problem.check_ops(ops)?;
    if s.dim() != (problem.n(), problem.c()) {
        return Err(Error::mismatch(problem.n(), s.nrows()));
    }
    let ls = ops.laplacian_apply(s)?;
    let alpha = problem.alpha();
    let mut worst: f64 = 0.0;
    let mut step = Vec::with_capacity(problem.c());
    let mut scratch = Vec::new();
    for i in (0..problem.n()).filter(|&i| !problem.is_boundary(i)) {
        step.clear();
        step.extend(s.row(i).iter().zip(ls.row(i)).map(|(x, l)| x - (l - alpha * x)));
        simplex_project_in_place(&mut step, &mut scratch);
        for (x, p) in s.row(i).iter().zip(&step) {
            worst = worst.max((x - p).abs());
        }
    }
    Ok(worst)
}

/// Per-node `‖R_{S_i}((L_n S)_i − αS_i)‖₂`.
pub fn pde_residual(ops: &DiscreteOperators, alpha: f64, s: &Array2<f64>) -> Result<Vec<f64>> {
    let ls = ops.laplacian_apply(s)?;
    let c = s.ncols();
    let mut v = vec![0.0; c];
    let mut r = vec![0.0; c];
    Ok((0..s.nrows())
        .map(|i| {
            let si = s.row(i);
            let si = si.as_slice().unwrap();
            for ((vk, l), x) in v.iter_mut().zip(ls.row(i)).zip(si) {
                *vk = l - alpha * x;
            }
            replicator_into(si, &v, &mut r);
            r.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect())
}
