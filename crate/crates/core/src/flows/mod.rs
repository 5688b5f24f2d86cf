//! Likelihood and similarity maps, the assignment flow and the S-flow.
//!
//! The assignment flow is `Ẇ = R_W S(W)` started at the barycenter `1_W`. Its
//! dominating part, the S-flow `Ṡ = R_S[Ω S]`, is a Riemannian gradient flow of
//! `J(S) = −½⟨S, Ω S⟩` whenever `Ω` is symmetric. The assignment flow itself
//! is not: [`non_potential_witness`] builds a point and a direction at which
//! `dS` fails to be self-adjoint.

mod integrate;

pub use integrate::{
    check_flow_equivalence, integrate, integrate_geometric_euler, FlowState, IntegrationConfig, RhsKind, Scheme,
    Trajectory,
};

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    big_exp_inverse_into, big_exp_map_into, exp_map_into, exp_map_inverse_into, project_t0_in_place, replicator_into,
    AssignmentMatrix, SimplexPoint, TangentMatrix, EPS_INTERIOR,
};
use crate::graph::{average_rows, AveragingOperator};

/// Data-to-prototype distances `D_F`, one row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(Array2<f64>);

impl DistanceMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(Error::InvalidDimension(format!(
                "distance matrix needs at least 2 labels, got {}",
                values.ncols()
            )));
        }
        if values.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Domain("distances must be finite and nonnegative".into()));
        }
        Ok(DistanceMatrix(values.as_standard_layout().into_owned()))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn c(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.c();
        &self.0.as_slice().unwrap()[i * c..(i + 1) * c]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    /// Mean of the positive entries, or 1 if there are none.
    pub fn default_rho(&self) -> f64 {
        let (sum, count) = self
            .0
            .iter()
            .filter(|&&d| d > 0.0)
            .fold((0.0, 0usize), |(s, k), &d| (s + d, k + 1));
        if count == 0 {
            1.0
        } else {
            sum / count as f64
        }
    }
}

/// Distance scaling `ρ`, averaging operator `Ω` and distances `D_F`.
#[derive(Clone, Debug)]
pub struct FlowParams {
    rho: f64,
    omega: AveragingOperator,
    distances: DistanceMatrix,
}

impl FlowParams {
    pub fn new(distances: DistanceMatrix, omega: AveragingOperator, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Domain(format!("rho must be positive, got {rho}")));
        }
        if distances.n() != omega.n() {
            return Err(Error::mismatch(
                format!("{} nodes", omega.n()),
                format!("{} distance rows", distances.n()),
            ));
        }
        Ok(FlowParams { rho, omega, distances })
    }

    /// Uses [`DistanceMatrix::default_rho`].
    pub fn with_default_rho(distances: DistanceMatrix, omega: AveragingOperator) -> Result<Self> {
        let rho = distances.default_rho();
        Self::new(distances, omega, rho)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn omega(&self) -> &AveragingOperator {
        &self.omega
    }

    pub fn distances(&self) -> &DistanceMatrix {
        &self.distances
    }

    pub fn n(&self) -> usize {
        self.distances.n()
    }

    pub fn c(&self) -> usize {
        self.distances.c()
    }

    fn check_state(&self, w: &AssignmentMatrix) -> Result<()> {
        if w.n() != self.n() || w.c() != self.c() {
            return Err(Error::mismatch(
                format!("{}x{}", self.n(), self.c()),
                format!("{}x{}", w.n(), w.c()),
            ));
        }
        Ok(())
    }

    /// `−D_i/ρ`.
    fn scaled_neg_distance(&self, i: usize) -> Vec<f64> {
        self.distances.row(i).iter().map(|d| -d / self.rho).collect()
    }
}

fn par_rows<F>(n: usize, c: usize, kernel: F) -> Result<Array2<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let mut out = vec![0.0; n * c];
    out.par_chunks_mut(c)
        .enumerate()
        .try_for_each(|(i, row)| kernel(i, row))?;
    Ok(Array2::from_shape_vec((n, c), out).unwrap())
}

/// Likelihood vectors `L_i(W_i) = exp_{W_i}(−D_i/ρ)`.
pub fn likelihood(params: &FlowParams, w: &AssignmentMatrix) -> Result<AssignmentMatrix> {
    params.check_state(w)?;
    let out = par_rows(w.n(), w.c(), |i, row| {
        exp_map_into(w.row(i), &params.scaled_neg_distance(i), row);
        Ok(())
    })?;
    Ok(AssignmentMatrix::from_array_unchecked(out))
}

/// Similarity vectors `S_i(W) = Exp_{W_i}(Σ_k ω_ik Exp_{W_i}⁻¹(L_k(W_k)))`.
pub fn similarity(params: &FlowParams, w: &AssignmentMatrix) -> Result<AssignmentMatrix> {
    let lik = likelihood(params, w)?;
    let c = w.c();
    let out = par_rows(w.n(), c, |i, row| {
        let wi = w.row(i);
        let mut mean = vec![0.0; c];
        let mut tangent = vec![0.0; c];
        let (cols, weights) = params.omega.row(i);
        for (&k, &wk) in cols.iter().zip(weights) {
            big_exp_inverse_into(wi, lik.row(k), &mut tangent)?;
            mean.iter_mut().zip(&tangent).for_each(|(m, t)| *m += wk * t);
        }
        big_exp_map_into(wi, &mean, row);
        Ok(())
    })?;
    Ok(AssignmentMatrix::from_array_unchecked(out))
}

/// Similarity via `S_i(W) = exp_{1_S}(Σ_j ω_ij (exp_{1_S}⁻¹(W_j) − D_j/ρ))`.
pub fn similarity_closed_form(params: &FlowParams, w: &AssignmentMatrix) -> Result<AssignmentMatrix> {
    params.check_state(w)?;
    let n = w.n();
    let c = w.c();
    let bary = SimplexPoint::barycenter(c)?;
    let shifted = par_rows(n, c, |j, row| {
        exp_map_inverse_into(bary.as_slice(), w.row(j), row)?;
        let d = params.distances.row(j);
        row.iter_mut().zip(d).for_each(|(v, dj)| *v -= dj / params.rho);
        Ok(())
    })?;
    let averaged = average_rows(&params.omega, &shifted)?;
    let out = par_rows(n, c, |i, row| {
        let y: Vec<f64> = averaged.row(i).to_vec();
        exp_map_into(bary.as_slice(), &y, row);
        Ok(())
    })?;
    Ok(AssignmentMatrix::from_array_unchecked(out))
}

/// `Ẇ = R_W S(W)`.
pub fn assignment_flow_rhs(params: &FlowParams, w: &AssignmentMatrix) -> Result<TangentMatrix> {
    let s = similarity(params, w)?;
    let out = par_rows(w.n(), w.c(), |i, row| {
        replicator_into(w.row(i), s.row(i), row);
        Ok(())
    })?;
    Ok(TangentMatrix::from_array_unchecked(out))
}

/// `Ṡ = R_S[Ω S]`.
pub fn s_flow_rhs(omega: &AveragingOperator, s: &AssignmentMatrix) -> Result<TangentMatrix> {
    let averaged = average_rows(omega, s.as_array())?;
    let out = par_rows(s.n(), s.c(), |i, row| {
        let avg: Vec<f64> = averaged.row(i).to_vec();
        replicator_into(s.row(i), &avg, row);
        Ok(())
    })?;
    Ok(TangentMatrix::from_array_unchecked(out))
}

fn warn_if_asymmetric(omega: &AveragingOperator) {
    if !omega.is_symmetric() {
        log::warn!("potential evaluated with a non-symmetric averaging operator");
    }
}

/// `J(S) = −½⟨S, Ω S⟩`. Defined for any `n×c` matrix; a gradient-flow potential
/// of the S-flow only when `Ω` is symmetric.
pub fn potential_value(omega: &AveragingOperator, s: &Array2<f64>) -> Result<f64> {
    warn_if_asymmetric(omega);
    let averaged = average_rows(omega, s)?;
    Ok(-0.5 * (s * &averaged).sum())
}

/// `¼ Σ_i Σ_{j∈N_i} ω_ij ‖S_i − S_j‖² − ½‖S‖²`.
pub fn potential_dirichlet_form(omega: &AveragingOperator, s: &Array2<f64>) -> Result<f64> {
    warn_if_asymmetric(omega);
    if s.nrows() != omega.n() {
        return Err(Error::mismatch(
            format!("{} rows", omega.n()),
            format!("{} rows", s.nrows()),
        ));
    }
    let mut dirichlet = 0.0;
    for i in 0..omega.n() {
        let (cols, weights) = omega.row(i);
        for (&j, &w) in cols.iter().zip(weights) {
            let d2: f64 = s.row(i).iter().zip(s.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dirichlet += w * d2;
        }
    }
    let norm2: f64 = s.iter().map(|x| x * x).sum();
    Ok(0.25 * dirichlet - 0.5 * norm2)
}

/// `∇J(S) = −Ω S` (Euclidean; exact for symmetric `Ω`).
pub fn euclidean_grad_potential(omega: &AveragingOperator, s: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(-average_rows(omega, s)?)
}

/// `R_S ∇J(S)`.
pub fn riemannian_grad_potential(omega: &AveragingOperator, s: &AssignmentMatrix) -> Result<TangentMatrix> {
    let grad = euclidean_grad_potential(omega, s.as_array())?;
    let out = par_rows(s.n(), s.c(), |i, row| {
        let g: Vec<f64> = grad.row(i).to_vec();
        replicator_into(s.row(i), &g, row);
        Ok(())
    })?;
    Ok(TangentMatrix::from_array_unchecked(out))
}

fn check_tangent(params: &FlowParams, x: &TangentMatrix) -> Result<()> {
    if x.n() != params.n() || x.c() != params.c() {
        return Err(Error::mismatch(
            format!("{}x{}", params.n(), params.c()),
            format!("{}x{}", x.n(), x.c()),
        ));
    }
    Ok(())
}

fn check_interior(w: &AssignmentMatrix) -> Result<()> {
    let min = w.min_entry();
    if min < EPS_INTERIOR {
        return Err(Error::Singular(format!(
            "assignment entry {min:e} below {EPS_INTERIOR:e}"
        )));
    }
    Ok(())
}

/// `dS_i(W)[X] = R_{S_i(W)}[Σ_{j∈N_i} ω_ij X_j / W_j]`.
pub fn similarity_jacobian_apply(
    params: &FlowParams,
    w: &AssignmentMatrix,
    x: &TangentMatrix,
) -> Result<TangentMatrix> {
    check_tangent(params, x)?;
    check_interior(w)?;
    let s = similarity(params, w)?;
    let c = w.c();
    let out = par_rows(w.n(), c, |i, row| {
        let mut acc = vec![0.0; c];
        let (cols, weights) = params.omega.row(i);
        for (&j, &wij) in cols.iter().zip(weights) {
            for ((a, xj), wj) in acc.iter_mut().zip(x.row(j)).zip(w.row(j)) {
                *a += wij * xj / wj;
            }
        }
        replicator_into(s.row(i), &acc, row);
        Ok(())
    })?;
    Ok(TangentMatrix::from_array_unchecked(out))
}

/// `dS_i(W)ᵀ[X] = Σ_{j∈N_i} ω_ji Π₀[R_{S_j(W)} X_j / W_i]`.
pub fn similarity_jacobian_adjoint_apply(
    params: &FlowParams,
    w: &AssignmentMatrix,
    x: &TangentMatrix,
) -> Result<TangentMatrix> {
    check_tangent(params, x)?;
    check_interior(w)?;
    let s = similarity(params, w)?;
    let c = w.c();
    let rx = par_rows(w.n(), c, |j, row| {
        replicator_into(s.row(j), x.row(j), row);
        Ok(())
    })?;
    let out = par_rows(w.n(), c, |i, row| {
        let (cols, _) = params.omega.row(i);
        for &j in cols {
            let wji = params.omega.get(j, i).expect("symmetric neighborhoods");
            for ((o, r), wi) in row.iter_mut().zip(rx.row(j)).zip(w.row(i)) {
                *o += wji * r / wi;
            }
        }
        project_t0_in_place(row);
        Ok(())
    })?;
    Ok(TangentMatrix::from_array_unchecked(out))
}

/// Point and direction at which `dS` is not self-adjoint.
#[derive(Clone, Debug)]
pub struct NonPotentialWitness {
    /// Node `i₀` with a non-constant distance row.
    pub node: usize,
    /// Label of the smallest distance at `i₀`.
    pub label_min: usize,
    /// Label of the largest distance at `i₀`.
    pub label_max: usize,
    /// The point `p` with `p_k = p_l = 1/(2c)`.
    pub p: SimplexPoint,
    /// `W^p_j = exp_p(D_j/ρ)`.
    pub point: AssignmentMatrix,
    /// `X^u`, equal to `e_k − e_l` on row `i₀` and zero elsewhere.
    pub direction: TangentMatrix,
    /// `‖dS_{i₀}[X^u] − dS_{i₀}ᵀ[X^u]‖_∞`.
    pub asymmetry: f64,
    /// `ω_{i₀i₀}⟨p, e^{D_{i₀}/ρ}⟩(e^{−D_{i₀k}/ρ} − e^{−D_{i₀l}/ρ})‖1_S − p‖_∞`.
    pub closed_form: f64,
}

/// Builds the witness that the assignment flow admits no potential.
pub fn non_potential_witness(params: &FlowParams) -> Result<NonPotentialWitness> {
    let (n, c) = (params.n(), params.c());
    if c < 3 {
        return Err(Error::NotApplicable(format!(
            "witness needs at least 3 labels, got {c}"
        )));
    }
    let node = (0..n)
        .find(|&i| {
            let d = params.distances.row(i);
            d.iter().any(|&x| x != d[0])
        })
        .ok_or_else(|| Error::NotApplicable("every distance row is constant".into()))?;
    let d = params.distances.row(node);
    let label_min = argmin(d);
    let label_max = argmax(d);

    let alpha = 1.0 / (2.0 * c as f64);
    let rest = (1.0 - 2.0 * alpha) / (c as f64 - 2.0);
    let p_vals: Vec<f64> = (0..c)
        .map(|r| if r == label_min || r == label_max { alpha } else { rest })
        .collect();
    let p = SimplexPoint::from_vec_unchecked(p_vals);

    let point = AssignmentMatrix::from_array_unchecked(par_rows(n, c, |j, row| {
        let v: Vec<f64> = params.distances.row(j).iter().map(|x| x / params.rho).collect();
        exp_map_into(p.as_slice(), &v, row);
        Ok(())
    })?);
    let mut dir = Array2::zeros((n, c));
    dir[[node, label_min]] = 1.0;
    dir[[node, label_max]] = -1.0;
    let direction = TangentMatrix::from_array_unchecked(dir);

    let forward = similarity_jacobian_apply(params, &point, &direction)?;
    let adjoint = similarity_jacobian_adjoint_apply(params, &point, &direction)?;
    let asymmetry = forward
        .row(node)
        .iter()
        .zip(adjoint.row(node))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let rho = params.rho;
    let omega_ii = params.omega.get(node, node).expect("self-inclusive neighborhood");
    let inner: f64 = p.as_slice().iter().zip(d).map(|(pj, dj)| pj * (dj / rho).exp()).sum();
    let gap = (-d[label_min] / rho).exp() - (-d[label_max] / rho).exp();
    let offset = p
        .as_slice()
        .iter()
        .map(|pj| (1.0 / c as f64 - pj).abs())
        .fold(0.0, f64::max);
    let closed_form = omega_ii * inner * gap * offset;

    Ok(NonPotentialWitness {
        node,
        label_min,
        label_max,
        p,
        point,
        direction,
        asymmetry,
        closed_form,
    })
}

/// Index of the smallest entry; ties go to the lowest index.
pub(crate) fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, &x)| if x < best.1 { (i, x) } else { best },
        )
        .0
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}
