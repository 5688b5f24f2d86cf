//! Numerical self-checks of the geometry, flows and potential structure.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flows::{
    check_flow_equivalence, integrate_geometric_euler, non_potential_witness, potential_dirichlet_form,
    potential_value, s_flow_rhs, similarity, similarity_jacobian_adjoint_apply, similarity_jacobian_apply,
    DistanceMatrix, FlowParams, FlowState, RhsKind,
};
use crate::geometry::{
    big_exp_inverse, big_exp_map, exp_map, exp_map_inverse, project_t0_rows, replicator_map, replicator_map_rows,
    AssignmentMatrix, SimplexPoint, TangentMatrix,
};
use crate::graph::{grid_graph, symmetrize, uniform_weights, AveragingOperator};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Measured quantity compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &'static str, value: f64, tolerance: f64, detail: String) -> Self {
        CheckResult {
            name,
            passed: value <= tolerance,
            value,
            tolerance,
            detail,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} value={:.3e} tol={:.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random draws per geometry identity.
    pub draws: usize,
    /// Random probes for derivative checks.
    pub probes: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            draws: 1000,
            probes: 20,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

pub type AdjointFn = dyn Fn(&FlowParams, &AssignmentMatrix, &TangentMatrix) -> Result<TangentMatrix>;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_point(rng: &mut ChaCha8Rng, c: usize) -> SimplexPoint {
    SimplexPoint::from_weights((0..c).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap()
}

pub fn random_assignment(rng: &mut ChaCha8Rng, n: usize, c: usize) -> AssignmentMatrix {
    AssignmentMatrix::from_weights(Array2::from_shape_fn((n, c), |_| rng.random_range(0.05..1.0))).unwrap()
}

pub fn random_tangent(rng: &mut ChaCha8Rng, n: usize, c: usize) -> TangentMatrix {
    project_t0_rows(&Array2::from_shape_fn((n, c), |_| rng.random_range(-0.5..0.5))).unwrap()
}

pub fn random_distances(rng: &mut ChaCha8Rng, n: usize, c: usize) -> DistanceMatrix {
    DistanceMatrix::new(Array2::from_shape_fn((n, c), |_| rng.random::<f64>())).unwrap()
}

/// 3×3 grid, uniform weights, random distances.
fn small_instance(rng: &mut ChaCha8Rng, c: usize) -> Result<FlowParams> {
    let omega = uniform_weights(&grid_graph(3, 3)?);
    FlowParams::with_default_rho(random_distances(rng, 9, c), omega)
}

/// Group action, sign flip, chain rule and the two round trips.
pub fn check_geometry(draws: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..draws {
        let c = rng.random_range(2..9);
        let p = random_point(&mut rng, c);
        let q = random_point(&mut rng, c);
        let a = random_point(&mut rng, c);
        let u: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();

        let uv: Vec<f64> = u.iter().zip(&v).map(|(x, y)| x + y).collect();
        let lhs = exp_map(&p, &uv)?;
        let rhs = exp_map(&exp_map(&p, &u)?, &v)?;
        worst[0] = worst[0].max(max_abs(lhs.as_slice(), rhs.as_slice()));

        let pq = exp_map_inverse(&p, &q)?;
        let qp = exp_map_inverse(&q, &p)?;
        let flipped: Vec<f64> = qp.as_slice().iter().map(|x| -x).collect();
        worst[1] = worst[1].max(max_abs(pq.as_slice(), &flipped));

        let qa = exp_map_inverse(&q, &a)?;
        let pa = exp_map_inverse(&p, &a)?;
        let chain: Vec<f64> = pa.as_slice().iter().zip(pq.as_slice()).map(|(x, y)| x - y).collect();
        worst[2] = worst[2].max(max_abs(qa.as_slice(), &chain));

        worst[3] = worst[3].max(max_abs(exp_map(&p, pq.as_slice())?.as_slice(), q.as_slice()));

        let big = big_exp_inverse(&p, &q)?;
        worst[4] = worst[4].max(max_abs(big_exp_map(&p, &big)?.as_slice(), q.as_slice()));
        // exp_p = Exp_p ∘ R_p
        let rv = replicator_map(&p, &v)?;
        worst[4] = worst[4].max(max_abs(big_exp_map(&p, &rv)?.as_slice(), exp_map(&p, &v)?.as_slice()));
    }
    let value = worst.iter().copied().fold(0.0, f64::max);
    Ok(CheckResult::at_most(
        "geometry_identities",
        value,
        1e-10,
        format!(
            "group={:.1e} flip={:.1e} chain={:.1e} exp_rt={:.1e} Exp_rt={:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    ))
}

/// Jacobian of the similarity map against central differences (max relative error).
pub fn check_jacobian(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = small_instance(&mut rng, 3)?;
    let w = random_assignment(&mut rng, 9, 3);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = random_tangent(&mut rng, 9, 3);
        let plus = AssignmentMatrix::new(w.as_array() + &(x.as_array() * h))?;
        let minus = AssignmentMatrix::new(w.as_array() - &(x.as_array() * h))?;
        let sp = similarity(&params, &plus)?;
        let sm = similarity(&params, &minus)?;
        let fd: Vec<f64> = sp
            .as_slice()
            .iter()
            .zip(sm.as_slice())
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let exact = similarity_jacobian_apply(&params, &w, &x)?;
        let scale = exact.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_abs(&fd, exact.as_slice()) / scale);
    }
    Ok(CheckResult::at_most(
        "jacobian_fd",
        worst,
        1e-6,
        format!("{probes} probes, 3×3 grid, c=3"),
    ))
}

/// `⟨dS[X], Y⟩ = ⟨X, dSᵀ[Y]⟩` with a caller-supplied adjoint.
pub fn check_adjoint_with(probes: usize, seed: u64, adjoint: &AdjointFn) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = small_instance(&mut rng, 3)?;
    let w = random_assignment(&mut rng, 9, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = random_tangent(&mut rng, 9, 3);
        let y = random_tangent(&mut rng, 9, 3);
        let lhs = dot(similarity_jacobian_apply(&params, &w, &x)?.as_slice(), y.as_slice());
        let rhs = dot(x.as_slice(), adjoint(&params, &w, &y)?.as_slice());
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(CheckResult::at_most(
        "adjoint_pairing",
        worst,
        1e-12,
        format!("{probes} probes"),
    ))
}

pub fn check_adjoint(probes: usize, seed: u64) -> Result<CheckResult> {
    check_adjoint_with(probes, seed, &similarity_jacobian_adjoint_apply)
}

/// Non-potential witness on a random 3×3, c=3 instance.
pub fn check_witness(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = small_instance(&mut rng, 3)?;
    let wit = non_potential_witness(&params)?;
    let rel = (wit.asymmetry - wit.closed_form).abs() / wit.closed_form.abs();
    let mut r = CheckResult::at_most(
        "non_potential_witness",
        rel,
        1e-8,
        format!(
            "asymmetry={:.6e} closed_form={:.6e} node={}",
            wit.asymmetry, wit.closed_form, wit.node
        ),
    );
    r.passed &= wit.asymmetry > 1e-8;
    Ok(r)
}

/// Symmetrized uniform weights on an `h × w` grid.
pub fn symmetric_grid_weights(h: usize, w: usize) -> Result<AveragingOperator> {
    symmetrize(&uniform_weights(&grid_graph(h, w)?))
}

/// RK4 assignment flow vs S-flow on a 4×4 grid, c=3.
pub fn check_equivalence(step: f64, t_end: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = symmetric_grid_weights(4, 4)?;
    let params = FlowParams::with_default_rho(random_distances(&mut rng, 16, 3), omega)?;
    let dev = check_flow_equivalence(&params, step, t_end)?;
    Ok(CheckResult::at_most(
        "flow_equivalence",
        dev,
        1e-4,
        format!("h={step} t_end={t_end}"),
    ))
}

/// `s_flow_rhs = −R_S[∇J]` with a finite-difference gradient (max relative error).
pub fn check_s_flow_gradient(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = symmetric_grid_weights(3, 3)?;
    let s = random_assignment(&mut rng, 9, 3);
    let h = 1e-6;
    let mut grad = Array2::zeros((9, 3));
    for i in 0..9 {
        for k in 0..3 {
            let mut plus = s.as_array().clone();
            let mut minus = s.as_array().clone();
            plus[[i, k]] += h;
            minus[[i, k]] -= h;
            grad[[i, k]] = (potential_value(&omega, &plus)? - potential_value(&omega, &minus)?) / (2.0 * h);
        }
    }
    let rgrad = replicator_map_rows(&s, &grad)?;
    let rhs = s_flow_rhs(&omega, &s)?;
    let neg: Vec<f64> = rgrad.as_slice().iter().map(|x| -x).collect();
    let scale = rhs.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rel = max_abs(rhs.as_slice(), &neg) / scale;
    Ok(CheckResult::at_most(
        "s_flow_gradient",
        rel,
        1e-6,
        "3×3 grid, symmetric Ω".into(),
    ))
}

/// `J = −½⟨S, ΩS⟩` against the Dirichlet form on random points.
pub fn check_potential_identity(draws: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = symmetric_grid_weights(4, 4)?;
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let s = random_assignment(&mut rng, 16, 3);
        let a = potential_value(&omega, s.as_array())?;
        let b = potential_dirichlet_form(&omega, s.as_array())?;
        worst = worst.max((a - b).abs());
    }
    Ok(CheckResult::at_most(
        "potential_identity",
        worst,
        1e-12,
        format!("{draws} draws"),
    ))
}

/// Largest per-step increase of `J` along geometric-Euler S-flow.
pub fn check_potential_decrease(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = symmetric_grid_weights(4, 4)?;
    let params = FlowParams::with_default_rho(random_distances(&mut rng, 16, 3), omega.clone())?;
    let s0 = similarity(&params, &AssignmentMatrix::barycenter(16, 3)?)?;
    let traj = integrate_geometric_euler(RhsKind::SFlow, &params, FlowState { w: s0, t: 0.0 }, 0.1, 10.0)?;
    let js = traj
        .samples
        .iter()
        .map(|s| potential_value(&omega, s.w.as_array()))
        .collect::<Result<Vec<f64>>>()?;
    let worst = js.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
    Ok(CheckResult::at_most(
        "potential_decrease",
        worst,
        1e-9,
        format!("{} steps, J {:.6} → {:.6}", traj.steps, js[0], js[js.len() - 1]),
    ))
}

pub fn run_suite(config: &VerifyConfig) -> Result<Report> {
    let s = config.seed;
    let checks = vec![
        check_geometry(config.draws, s)?,
        check_jacobian(config.probes, s.wrapping_add(1))?,
        check_adjoint(config.probes, s.wrapping_add(2))?,
        check_witness(s.wrapping_add(3))?,
        check_equivalence(1e-3, 5.0, s.wrapping_add(4))?,
        check_s_flow_gradient(s.wrapping_add(5))?,
        check_potential_identity(config.probes, s.wrapping_add(6))?,
        check_potential_decrease(s.wrapping_add(7))?,
    ];
    Ok(Report { checks })
}
