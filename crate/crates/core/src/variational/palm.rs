//! Proximal linearized outer loop and the monotone FISTA inner solver.

use ndarray::Array2;

use super::{
    discrete_energy, feasibility_violation, simplex_project_in_place, standard_slice, DiscreteOperators, GridProblem,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PalmRecord {
    pub k: usize,
    /// Majorizer `‖D(g+f)‖² − α‖g+f^k‖² − 2α⟨g+f^k, f−f^k⟩ + ‖f−f^k‖²/(2τ)` at `f^{(k+1)}`.
    pub surrogate_objective: f64,
    pub e_alpha: f64,
    pub max_row_change: f64,
    pub feasibility_violation: f64,
    pub inner_iterations: usize,
    pub inner_residual: f64,
}

#[derive(Clone, Debug)]
pub struct PalmState {
    pub k: usize,
    pub f: Array2<f64>,
    pub trace: Vec<PalmRecord>,
}

impl PalmState {
    pub fn new(f: Array2<f64>) -> Self {
        PalmState {
            k: 0,
            f: f.as_standard_layout().into_owned(),
            trace: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PalmOutcome {
    /// `S* = g + f*`.
    pub s: Array2<f64>,
    pub f: Array2<f64>,
    pub trace: Vec<PalmRecord>,
    pub iterations: usize,
    pub converged: bool,
}

struct Inner<'a> {
    ops: &'a DiscreteOperators,
    mask: &'a [bool],
    c: usize,
    /// `L g − α(g + f^k)`
    b: Vec<f64>,
    fk: &'a [f64],
    inv_tau: f64,
    lap: Vec<f64>,
    scratch: Vec<f64>,
}

impl Inner<'_> {
    /// Masked gradient at `x`; returns the objective.
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.ops.laplacian_into(x, self.c, &mut self.lap);
        let mut q = 0.0;
        for (i, ((g, xr), (lr, (br, fr)))) in grad
            .chunks_mut(self.c)
            .zip(x.chunks(self.c))
            .zip(
                self.lap
                    .chunks(self.c)
                    .zip(self.b.chunks(self.c).zip(self.fk.chunks(self.c))),
            )
            .enumerate()
        {
            if self.mask[i] {
                g.fill(0.0);
                continue;
            }
            for k in 0..self.c {
                let d = xr[k] - fr[k];
                q += xr[k] * lr[k] + 2.0 * br[k] * xr[k] + 0.5 * self.inv_tau * d * d;
                g[k] = 2.0 * lr[k] + 2.0 * br[k] + self.inv_tau * d;
            }
        }
        q
    }

    /// `out = P(x − grad/lip)`.
    fn prox_step(&mut self, x: &[f64], grad: &[f64], lip: f64, out: &mut [f64]) {
        for (i, ((o, xr), gr)) in out
            .chunks_mut(self.c)
            .zip(x.chunks(self.c))
            .zip(grad.chunks(self.c))
            .enumerate()
        {
            if self.mask[i] {
                o.fill(0.0);
                continue;
            }
            for k in 0..self.c {
                o[k] = xr[k] - gr[k] / lip;
            }
            simplex_project_in_place(o, &mut self.scratch);
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Solves the convex per-step problem by monotone FISTA with backtracking,
/// warm-started at `f^k`. The residual is the gradient mapping `lip·‖x − P(x − ∇Q/lip)‖_∞`.
fn solve_inner(inner: &mut Inner<'_>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize, f64)> {
    let len = inner.fk.len();
    let mut x = inner.fk.to_vec();
    let mut gx = vec![0.0; len];
    inner.eval(&x, &mut gx);
    let mut y = x.clone();
    let mut gy = gx.clone();
    let mut z = vec![0.0; len];
    let mut gz = vec![0.0; len];
    let mut probe = vec![0.0; len];
    let mut diff = vec![0.0; len];
    let mut t = 1.0f64;
    let mut from_x = true;
    let mut lip = 1.0 + inner.inv_tau;

    inner.prox_step(&x, &gx, lip, &mut probe);
    let mut residual = lip * max_abs_diff(&x, &probe);
    if residual <= tol {
        return Ok((x, 0, residual));
    }

    for it in 1..=max_iter {
        // backtracking on the exact quadratic remainder ⟨d, L d⟩ + ‖d‖²/(2τ)
        loop {
            inner.prox_step(&y, &gy, lip, &mut z);
            for ((d, a), b) in diff.iter_mut().zip(&z).zip(&y) {
                *d = a - b;
            }
            let d2: f64 = diff.iter().map(|v| v * v).sum();
            let curvature = 2.0 * inner.ops.dirichlet_slice(&diff, inner.c) + inner.inv_tau * d2;
            if curvature <= lip * d2 {
                break;
            }
            lip *= 2.0;
        }
        inner.eval(&z, &mut gz);
        // Q(z) − Q(x) from the quadratic expansion at x, free of cancellation
        for ((d, a), b) in diff.iter_mut().zip(&z).zip(&x) {
            *d = a - b;
        }
        let d2: f64 = diff.iter().map(|v| v * v).sum();
        // rows of d sum to zero, so the row mean of the gradient drops out
        let linear: f64 = gx
            .chunks(inner.c)
            .zip(diff.chunks(inner.c))
            .map(|(g, d)| {
                let mean = g.iter().sum::<f64>() / inner.c as f64;
                g.iter().zip(d).map(|(gk, dk)| (gk - mean) * dk).sum::<f64>()
            })
            .sum();
        let change = linear + inner.ops.dirichlet_slice(&diff, inner.c) + 0.5 * inner.inv_tau * d2;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // a plain projected-gradient step from x always descends
        let accepted = from_x || change <= 0.0;
        let x_prev = x.clone();
        if accepted {
            x.copy_from_slice(&z);
            gx.copy_from_slice(&gz);
        }

        inner.prox_step(&x, &gx, lip, &mut probe);
        residual = lip * max_abs_diff(&x, &probe);
        if residual <= tol {
            return Ok((x, it, residual));
        }

        if accepted {
            for k in 0..len {
                y[k] = x[k] + (t / t_next) * (z[k] - x[k]) + ((t - 1.0) / t_next) * (x[k] - x_prev[k]);
            }
            t = t_next;
            from_x = false;
        } else {
            // restart from the monotone iterate
            y.copy_from_slice(&x);
            t = 1.0;
            from_x = true;
        }
        inner.eval(&y, &mut gy);
    }
    Err(Error::NotConverged {
        what: "PALM inner solver",
        iterations: max_iter,
        residual,
    })
}

fn check_feasible(problem: &GridProblem, f: &Array2<f64>) -> Result<()> {
    if f.dim() != (problem.n(), problem.c()) {
        return Err(Error::mismatch(problem.n() * problem.c(), f.len()));
    }
    for i in 0..problem.n() {
        let row = f.row(i);
        if problem.is_boundary(i) {
            if row.iter().any(|x| *x != 0.0) {
                return Err(Error::Domain(format!("f must vanish on boundary node {i}")));
            }
        } else if row.iter().any(|x| !(*x >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("interior row {i} of f is not on the simplex")));
        }
    }
    Ok(())
}

/// One proximal linearized step `f^{(k)} → f^{(k+1)}`.
pub fn palm_step(ops: &DiscreteOperators, problem: &GridProblem, state: &PalmState) -> Result<PalmState> {
    problem.check_ops(ops)?;
    check_feasible(problem, &state.f)?;
    let (n, c) = (problem.n(), problem.c());
    let alpha = problem.alpha();
    let tau = problem.tau(state.k);
    let g = problem.boundary_field();
    let gs = standard_slice(g);
    let fk = standard_slice(&state.f);

    let mut lg = vec![0.0; n * c];
    ops.laplacian_into(gs, c, &mut lg);
    let b: Vec<f64> = lg
        .iter()
        .zip(gs.iter().zip(fk))
        .map(|(l, (gv, fv))| l - alpha * (gv + fv))
        .collect();
    let mut inner = Inner {
        ops,
        mask: problem.boundary_mask(),
        c,
        b,
        fk,
        inv_tau: 1.0 / tau,
        lap: vec![0.0; n * c],
        scratch: Vec::with_capacity(c),
    };
    let (f_next, iters, residual) = solve_inner(&mut inner, problem.tol_inner, problem.max_inner)?;
    let f_next = Array2::from_shape_vec((n, c), f_next).expect("shape preserved");

    let s_prev = g + &state.f;
    let s_next = g + &f_next;
    let delta = &f_next - &state.f;
    let prev_norm2: f64 = s_prev.iter().map(|x| x * x).sum();
    let cross: f64 = s_prev.iter().zip(delta.iter()).map(|(a, d)| a * d).sum();
    let d2: f64 = delta.iter().map(|x| x * x).sum();
    let surrogate = ops.dirichlet_energy(&s_next)? - alpha * prev_norm2 - 2.0 * alpha * cross + d2 / (2.0 * tau);
    let record = PalmRecord {
        k: state.k + 1,
        surrogate_objective: surrogate,
        e_alpha: discrete_energy(ops, alpha, &s_next)?,
        max_row_change: delta.iter().fold(0.0, |m: f64, x| m.max(x.abs())),
        feasibility_violation: feasibility_violation(&s_next),
        inner_iterations: iters,
        inner_residual: residual,
    };
    log::debug!(
        "palm k={} surrogate={:.12e} change={:.3e} inner={}",
        record.k,
        record.surrogate_objective,
        record.max_row_change,
        iters
    );
    let mut trace = state.trace.clone();
    trace.push(record);
    Ok(PalmState {
        k: state.k + 1,
        f: f_next,
        trace,
    })
}

/// Iterates [`palm_step`] until `‖f^{(k+1)} − f^{(k)}‖_∞ ≤ stop_tol` or `max_outer` steps.
pub fn run_palm(
    ops: &DiscreteOperators,
    problem: &GridProblem,
    f0: Array2<f64>,
    max_outer: usize,
    stop_tol: f64,
) -> Result<PalmOutcome> {
    let mut state = PalmState::new(f0);
    check_feasible(problem, &state.f)?;
    let mut converged = false;
    while state.k < max_outer {
        state = palm_step(ops, problem, &state)?;
        if state.trace.last().unwrap().max_row_change <= stop_tol {
            converged = true;
            break;
        }
    }
    Ok(PalmOutcome {
        s: problem.boundary_field() + &state.f,
        iterations: state.k,
        f: state.f,
        trace: state.trace,
        converged,
    })
}

#[cfg(test)]
/// Per-step objective `‖D f‖² + 2⟨L g − α(g + f^k), f⟩ + ‖f − f^k‖²/(2τ)`.
pub(crate) fn inner_objective(
    ops: &DiscreteOperators,
    problem: &GridProblem,
    fk: &Array2<f64>,
    f: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    let g = problem.boundary_field();
    let lg = ops.laplacian_apply(g)?;
    let lin: f64 = lg
        .iter()
        .zip(g.iter().zip(fk.iter()))
        .zip(f.iter())
        .map(|((l, (gv, fv)), x)| (l - problem.alpha() * (gv + fv)) * x)
        .sum();
    let d2: f64 = f.iter().zip(fk.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ops.dirichlet_energy(f)? + 2.0 * lin + d2 / (2.0 * tau))
}
