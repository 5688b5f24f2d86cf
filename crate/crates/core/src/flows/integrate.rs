//! Time integration of the assignment flow and the S-flow.

use ndarray::Array2;

use super::{assignment_flow_rhs, s_flow_rhs, similarity, FlowParams};
use crate::error::{Error, Result};
use crate::geometry::{big_exp_map_rows, clamp_to_interior, AssignmentMatrix, TangentMatrix};

/// Which vector field to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhsKind {
    /// `Ẇ = R_W S(W)`.
    Assignment,
    /// `Ṡ = R_S[Ω S]`.
    SFlow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// `W ← Exp_W(h V)`.
    GeometricEuler,
    /// Classical RK4 on the embedded rhs, rows renormalized after each step.
    Rk4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub w: AssignmentMatrix,
    pub t: f64,
}

#[derive(Clone, Debug)]
pub struct IntegrationConfig {
    pub step: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    /// Record a sample every this many steps; the initial and final states are always kept.
    pub sample_every: usize,
    /// Stop once the mean row entropy (nats) falls below this value.
    pub entropy_stop: Option<f64>,
}

impl IntegrationConfig {
    pub fn new(step: f64, t_end: f64) -> Self {
        IntegrationConfig {
            step,
            t_end,
            scheme: Scheme::GeometricEuler,
            sample_every: 1,
            entropy_stop: None,
        }
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn sample_every(mut self, every: usize) -> Self {
        self.sample_every = every.max(1);
        self
    }

    pub fn entropy_stop(mut self, tol: f64) -> Self {
        self.entropy_stop = Some(tol);
        self
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub samples: Vec<FlowState>,
    pub steps: usize,
    /// True if the entropy criterion ended the run before `t_end`.
    pub converged: bool,
}

impl Trajectory {
    pub fn last(&self) -> &FlowState {
        self.samples.last().expect("trajectory holds the initial state")
    }
}

fn eval(kind: RhsKind, params: &FlowParams, w: &AssignmentMatrix) -> Result<TangentMatrix> {
    match kind {
        RhsKind::Assignment => assignment_flow_rhs(params, w),
        RhsKind::SFlow => s_flow_rhs(params.omega(), w),
    }
}

/// Renormalizes rows of an embedded iterate back onto the manifold.
fn to_manifold(mut a: Array2<f64>) -> AssignmentMatrix {
    let c = a.ncols();
    for row in a.as_slice_mut().unwrap().chunks_mut(c) {
        row.iter_mut().for_each(|x| *x = x.max(0.0));
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
        clamp_to_interior(row);
    }
    AssignmentMatrix::from_array_unchecked(a)
}

fn step_once(
    kind: RhsKind,
    params: &FlowParams,
    w: &AssignmentMatrix,
    h: f64,
    scheme: Scheme,
) -> Result<AssignmentMatrix> {
    match scheme {
        Scheme::GeometricEuler => {
            let v = eval(kind, params, w)?;
            let scaled = TangentMatrix::from_array_unchecked(v.into_array() * h);
            big_exp_map_rows(w, &scaled)
        }
        Scheme::Rk4 => {
            let base = w.as_array();
            let k1 = eval(kind, params, w)?.into_array();
            let k2 = eval(kind, params, &to_manifold(base + &(&k1 * (0.5 * h))))?.into_array();
            let k3 = eval(kind, params, &to_manifold(base + &(&k2 * (0.5 * h))))?.into_array();
            let k4 = eval(kind, params, &to_manifold(base + &(&k3 * h)))?.into_array();
            let incr = (k1 + &(k2 * 2.0) + &(k3 * 2.0) + &k4) * (h / 6.0);
            Ok(to_manifold(base + &incr))
        }
    }
}

/// Integrates `kind` from `initial` to `config.t_end`.
pub fn integrate(
    kind: RhsKind,
    params: &FlowParams,
    initial: FlowState,
    config: &IntegrationConfig,
) -> Result<Trajectory> {
    if !(config.step > 0.0 && config.step.is_finite()) {
        return Err(Error::Domain(format!("step must be positive, got {}", config.step)));
    }
    if config.t_end < initial.t {
        return Err(Error::Domain("t_end precedes the initial time".into()));
    }
    let mut samples = vec![initial.clone()];
    let mut w = initial.w;
    let mut t = initial.t;
    let mut steps = 0;
    let mut converged = false;
    while t < config.t_end - 1e-12 * config.step {
        if let Some(tol) = config.entropy_stop {
            if w.mean_entropy() < tol {
                converged = true;
                break;
            }
        }
        let h = config.step.min(config.t_end - t);
        w = step_once(kind, params, &w, h, config.scheme)?;
        steps += 1;
        t = initial.t + steps as f64 * config.step;
        if t > config.t_end {
            t = config.t_end;
        }
        if w.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("iterate at t={t} after {steps} steps")));
        }
        if steps % config.sample_every == 0 {
            samples.push(FlowState { w: w.clone(), t });
        }
    }
    if samples.last().map(|s| s.t) != Some(t) {
        samples.push(FlowState { w, t });
    }
    Ok(Trajectory {
        samples,
        steps,
        converged,
    })
}

/// Geometric explicit Euler, every step recorded.
pub fn integrate_geometric_euler(
    kind: RhsKind,
    params: &FlowParams,
    state: FlowState,
    step: f64,
    t_end: f64,
) -> Result<Trajectory> {
    integrate(kind, params, state, &IntegrationConfig::new(step, t_end))
}

/// Integrates the assignment flow from `1_W` and the S-flow from `S(1_W)` side by
/// side with RK4 and returns `max_t ‖S(W(t)) − S̄(t)‖_∞` over all steps.
pub fn check_flow_equivalence(params: &FlowParams, step: f64, t_end: f64) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("step must be positive, got {step}")));
    }
    let mut w = AssignmentMatrix::barycenter(params.n(), params.c())?;
    let mut s_bar = similarity(params, &w)?;
    let mut worst: f64 = 0.0;
    let mut t = 0.0;
    loop {
        let s_of_w = similarity(params, &w)?;
        let dev = s_of_w
            .as_slice()
            .iter()
            .zip(s_bar.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev);
        if t >= t_end - 1e-12 * step {
            break;
        }
        let h = step.min(t_end - t);
        w = step_once(RhsKind::Assignment, params, &w, h, Scheme::Rk4)?;
        s_bar = step_once(RhsKind::SFlow, params, &s_bar, h, Scheme::Rk4)?;
        t += h;
    }
    Ok(worst)
}
