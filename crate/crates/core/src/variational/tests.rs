use super::palm::inner_objective;
use super::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_feasible(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
    let mut s = Array2::from_shape_fn((n, c), |_| rng.random::<f64>());
    for mut row in s.rows_mut() {
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    s
}

fn vertex_field(n: usize, c: usize, j: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, c), |(_, k)| if k == j { 1.0 } else { 0.0 })
}

fn inner_product(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Noisy labeling problem: ring boundary from the likelihoods, interior init from them.
fn random_problem(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    c: usize,
    tau: f64,
) -> (DiscreteOperators, GridProblem, Array2<f64>) {
    let d = DistanceMatrix::new(Array2::from_shape_fn((h * w, c), |_| rng.random::<f64>())).unwrap();
    let g = boundary_field_from_data(&d, 0.3, h, w).unwrap();
    let problem = GridProblem::with_ring_boundary(h, w, 1.0, g, tau).unwrap();
    let f0 = initial_interior_field(&d, 0.3, &problem).unwrap();
    (build_operators(h, w).unwrap(), problem, f0)
}

#[test]
fn operators_reject_small_grids() {
    assert!(build_operators(1, 5).is_err());
    assert!(build_operators(4, 1).is_err());
    let ops = build_operators(2, 3).unwrap();
    assert_eq!(ops.edges().len(), 7);
    assert_eq!(ops.n(), 6);
}

#[test]
fn laplacian_stencil() {
    let ops = build_operators(3, 3).unwrap();
    let mut f = Array2::zeros((9, 1));
    f[[4, 0]] = 1.0;
    let lf = ops.laplacian_apply(&f).unwrap();
    assert_eq!(lf[[4, 0]], 4.0);
    for j in [1, 3, 5, 7] {
        assert_eq!(lf[[j, 0]], -1.0);
    }

    let ops = build_operators(5, 4).unwrap();
    let constant = Array2::from_elem((20, 3), 0.37);
    assert!(ops.gradient_apply(&constant).unwrap().iter().all(|x| *x == 0.0));
    assert!(ops.laplacian_apply(&constant).unwrap().iter().all(|x| x.abs() < 1e-15));

    let dense = ops.laplacian_dense();
    let dn = {
        let mut m = Array2::zeros((ops.edges().len(), 20));
        for (e, &(i, j)) in ops.edges().iter().enumerate() {
            m[[e, i]] = -1.0;
            m[[e, j]] = 1.0;
        }
        m
    };
    assert_eq!(dn.t().dot(&dn), dense);
    for i in 0..20 {
        let (r, c) = (i / 4, i % 4);
        if r > 0 && r < 4 && c > 0 && c < 3 {
            assert_eq!(dense[[i, i]], 4.0);
        }
        assert_eq!(dense[[i, i]], ops.degree(i) as f64);
    }
}

#[test]
fn laplacian_identities_on_random_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ops = build_operators(6, 7).unwrap();
    for _ in 0..20 {
        let x = Array2::from_shape_fn((42, 3), |_| rng.random::<f64>() - 0.5);
        let y = Array2::from_shape_fn((42, 3), |_| rng.random::<f64>() - 0.5);
        let lx = ops.laplacian_apply(&x).unwrap();
        let ly = ops.laplacian_apply(&y).unwrap();
        assert!((inner_product(&x, &ly) - inner_product(&lx, &y)).abs() < 1e-12);
        assert!((ops.dirichlet_energy(&x).unwrap() - inner_product(&x, &lx)).abs() < 1e-12);
        assert!(inner_product(&x, &lx) >= 0.0);
        let e = Array2::from_shape_fn((ops.edges().len(), 3), |_| rng.random::<f64>() - 0.5);
        let lhs = inner_product(&ops.gradient_apply(&x).unwrap(), &e);
        let rhs = inner_product(&x, &ops.gradient_adjoint_apply(&e).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn energy_examples_and_bound() {
    let ops = build_operators(4, 5).unwrap();
    for j in 0..3 {
        assert_eq!(
            discrete_energy(&ops, 1.5, &vertex_field(20, 3, j)).unwrap(),
            -1.5 * 20.0
        );
    }
    let bary = Array2::from_elem((20, 4), 0.25);
    assert!((discrete_energy(&ops, 2.0, &bary).unwrap() + 2.0 * 20.0 / 4.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let s = random_feasible(&mut rng, 20, 3);
        assert!(discrete_energy(&ops, 1.0, &s).unwrap() >= -20.0);
    }
}

#[test]
fn boundary_field_examples() {
    let d = DistanceMatrix::new(Array2::from_elem((12, 3), 0.4)).unwrap();
    let g = boundary_field_from_data(&d, 0.5, 3, 4).unwrap();
    let mask = boundary_mask(3, 4);
    assert_eq!(mask.iter().filter(|b| !**b).count(), 2);
    for i in 0..12 {
        if mask[i] {
            assert!(g.row(i).iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        } else {
            assert!(g.row(i).iter().all(|x| *x == 0.0));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = DistanceMatrix::new(Array2::from_shape_fn((20, 4), |_| rng.random::<f64>() * 3.0)).unwrap();
    let g = boundary_field_from_data(&d, 0.2, 4, 5).unwrap();
    assert!(GridProblem::with_ring_boundary(4, 5, 1.0, g, 10.0).is_ok());
    assert!(boundary_field_from_data(&d, 0.2, 5, 5).is_err());
}

#[test]
fn problem_validation() {
    let g = vertex_field(4, 2, 0);
    assert!(GridProblem::with_ring_boundary(2, 2, 0.0, g.clone(), 10.0).is_err());
    assert!(GridProblem::with_ring_boundary(2, 2, 1.0, g.clone(), -1.0).is_err());
    assert!(GridProblem::with_ring_boundary(2, 2, 1.0, g.clone() * 2.0, 1.0).is_err());
    // interior rows must be zero
    assert!(GridProblem::with_ring_boundary(3, 3, 1.0, vertex_field(9, 2, 1), 1.0).is_err());
    let p = GridProblem::new(2, 2, 1.0, g, vec![true; 4], vec![1.0, 2.0]).unwrap();
    assert_eq!((p.tau(0), p.tau(1), p.tau(7)), (1.0, 2.0, 2.0));
}

#[test]
fn simplex_projection_examples() {
    let third = 1.0 / 3.0;
    let p = simplex_project(&[third, third, third]);
    assert!(p.iter().all(|x| (x - third).abs() < 1e-16));
    let p = simplex_project(&[0.5, 0.5, 0.5]);
    assert!(p.iter().all(|x| (x - third).abs() < 1e-15));
    let p = simplex_project(&[1.2, -0.1, 0.3]);
    for (a, b) in p.iter().zip([0.95, 0.0, 0.05]) {
        assert!((a - b).abs() < 1e-15);
    }
}

/// KKT: x − p = θ·1 on the support and x_k − θ ≤ 0 off it.
fn kkt_gap(x: &[f64], p: &[f64]) -> f64 {
    let support: Vec<usize> = (0..x.len()).filter(|&k| p[k] > 0.0).collect();
    let theta = support.iter().map(|&k| x[k] - p[k]).sum::<f64>() / support.len() as f64;
    let mut gap: f64 = 0.0;
    for k in 0..x.len() {
        if p[k] > 0.0 {
            gap = gap.max((x[k] - p[k] - theta).abs());
        } else {
            gap = gap.max(x[k] - theta);
        }
    }
    gap
}

#[test]
fn simplex_projection_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..1000 {
        let c = rng.random_range(2..17);
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = simplex_project(&x);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!(kkt_gap(&x, &p) < 1e-12);
    }
}

#[test]
fn feasibility_violation_measures_defects() {
    assert_eq!(feasibility_violation(&vertex_field(3, 2, 1)), 0.0);
    let bad = ndarray::array![[1.1, -0.1], [0.5, 0.6]];
    assert!((feasibility_violation(&bad) - 0.1).abs() < 1e-15);
}

#[test]
fn all_boundary_problem_returns_vertex_field() {
    let ops = build_operators(2, 2).unwrap();
    for j in 0..3 {
        let g = vertex_field(4, 3, j);
        let problem = GridProblem::with_ring_boundary(2, 2, 1.0, g.clone(), 10.0).unwrap();
        let out = run_palm(&ops, &problem, Array2::zeros((4, 3)), 100, 1e-6).unwrap();
        assert!(out.converged);
        assert_eq!(out.s, g);
    }
}

#[test]
fn integral_consistent_start_is_a_fixed_point() {
    let ops = build_operators(5, 5).unwrap();
    let mask = boundary_mask(5, 5);
    let g = Array2::from_shape_fn((25, 3), |(i, k)| if mask[i] && k == 2 { 1.0 } else { 0.0 });
    let problem = GridProblem::with_ring_boundary(5, 5, 1.0, g, 10.0).unwrap();
    let f0 = Array2::from_shape_fn((25, 3), |(i, k)| if !mask[i] && k == 2 { 1.0 } else { 0.0 });
    let out = run_palm(&ops, &problem, f0, 100, 1e-6).unwrap();
    assert!(out.converged);
    assert!(out.iterations <= 2);
    assert!(out
        .s
        .iter()
        .zip(vertex_field(25, 3, 2).iter())
        .all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(vi_residual(&ops, &problem, &out.s).unwrap() <= 1e-10);
}

#[test]
fn small_tau_keeps_iterate_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (ops, problem, f0) = random_problem(&mut rng, 6, 6, 3, 10.0);
    let mut last = f64::INFINITY;
    for tau in [1e-1, 1e-2, 1e-3, 1e-4] {
        let p = GridProblem::with_ring_boundary(6, 6, 1.0, problem.boundary_field().clone(), tau).unwrap();
        let next = palm_step(&ops, &p, &PalmState::new(f0.clone())).unwrap();
        let change = next.trace[0].max_row_change;
        assert!(change <= last);
        last = change;
    }
    assert!(last < 1e-2);
}

/// Minimizes a c=2 inner problem over the box by enumerating active sets.
fn box_qp_oracle(q: impl Fn(&[f64]) -> f64, m: usize) -> Vec<f64> {
    let q0 = q(&vec![0.0; m]);
    let unit = |i: usize, v: f64| {
        let mut x = vec![0.0; m];
        x[i] = v;
        x
    };
    let mut hess = Array2::<f64>::zeros((m, m));
    let mut lin = vec![0.0; m];
    for i in 0..m {
        let qi = q(&unit(i, 1.0));
        let qm = q(&unit(i, -1.0));
        hess[[i, i]] = qi + qm - 2.0 * q0;
        lin[i] = 0.5 * (qi - qm);
    }
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let mut x = vec![0.0; m];
                x[i] = 1.0;
                x[j] = 1.0;
                hess[[i, j]] = q(&x) - q(&unit(i, 1.0)) - q(&unit(j, 1.0)) + q0;
            }
        }
    }
    let model = |x: &[f64]| {
        let mut v = q0;
        for i in 0..m {
            v += lin[i] * x[i];
            for j in 0..m {
                v += 0.5 * hess[[i, j]] * x[i] * x[j];
            }
        }
        v
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(m as u32) {
        // 0 free, 1 at lower bound, 2 at upper bound
        let state: Vec<usize> = (0..m).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let free: Vec<usize> = (0..m).filter(|&i| state[i] == 0).collect();
        let mut x: Vec<f64> = state.iter().map(|s| if *s == 2 { 1.0 } else { 0.0 }).collect();
        if !free.is_empty() {
            let k = free.len();
            let mut a = Array2::<f64>::zeros((k, k + 1));
            for (r, &i) in free.iter().enumerate() {
                for (cc, &j) in free.iter().enumerate() {
                    a[[r, cc]] = hess[[i, j]];
                }
                let fixed: f64 = (0..m).filter(|j| state[*j] != 0).map(|j| hess[[i, j]] * x[j]).sum();
                a[[r, k]] = -(lin[i] + fixed);
            }
            // Gauss-Jordan
            for p in 0..k {
                let piv = a[[p, p]];
                for cc in 0..=k {
                    a[[p, cc]] /= piv;
                }
                for r in 0..k {
                    if r != p {
                        let f = a[[r, p]];
                        for cc in 0..=k {
                            a[[r, cc]] -= f * a[[p, cc]];
                        }
                    }
                }
            }
            for (r, &i) in free.iter().enumerate() {
                x[i] = a[[r, k]];
            }
        }
        if x.iter().all(|v| (-1e-14..=1.0 + 1e-14).contains(v)) {
            let v = model(&x);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, x));
            }
        }
    }
    best.unwrap().1
}

#[test]
fn inner_solution_matches_qp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for (h, w) in [(3, 3), (4, 3), (4, 4)] {
        for tau in [0.5, 10.0] {
            let (ops, problem, f0) = random_problem(&mut rng, h, w, 2, tau);
            let interior: Vec<usize> = (0..h * w).filter(|&i| !problem.is_boundary(i)).collect();
            let m = interior.len();
            let embed = |x: &[f64]| {
                let mut f = Array2::zeros((h * w, 2));
                for (k, &i) in interior.iter().enumerate() {
                    f[[i, 0]] = x[k];
                    f[[i, 1]] = 1.0 - x[k];
                }
                f
            };
            let q = |x: &[f64]| inner_objective(&ops, &problem, &f0, &embed(x), tau).unwrap();
            let oracle = embed(&box_qp_oracle(q, m));
            let next = palm_step(&ops, &problem, &PalmState::new(f0.clone())).unwrap();
            let err = next
                .f
                .iter()
                .zip(oracle.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-8, "{h}x{w} tau={tau}: {err}");
        }
    }
}

#[test]
fn one_step_decreases_inner_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let (ops, problem, f0) = random_problem(&mut rng, 8, 8, 4, 10.0);
    let next = palm_step(&ops, &problem, &PalmState::new(f0.clone())).unwrap();
    let before = inner_objective(&ops, &problem, &f0, &f0, 10.0).unwrap();
    let after = inner_objective(&ops, &problem, &f0, &next.f, 10.0).unwrap();
    assert!(after <= before);
    assert!(next.trace[0].inner_residual <= 1e-8);
}

#[test]
fn palm_traces_are_monotone_and_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let (ops, problem, f0) = random_problem(&mut rng, 12, 12, 3, 10.0);
    let out = run_palm(&ops, &problem, f0, 300, 1e-9).unwrap();
    for pair in out.trace.windows(2) {
        assert!(pair[1].surrogate_objective <= pair[0].surrogate_objective + 1e-9);
        assert!(pair[1].e_alpha <= pair[0].e_alpha + 1e-9);
    }
    for r in &out.trace {
        assert!(r.e_alpha <= r.surrogate_objective + 1e-9);
        assert!(r.feasibility_violation <= 1e-12);
    }
    assert!(out.converged);
    assert!(vi_residual(&ops, &problem, &out.s).unwrap() <= 1e-4);
}

#[test]
fn vi_residual_examples() {
    let ops = build_operators(5, 6).unwrap();
    let s = vertex_field(30, 3, 1);
    let mask = boundary_mask(5, 6);
    let g = Array2::from_shape_fn((30, 3), |(i, k)| if mask[i] { s[[i, k]] } else { 0.0 });
    let problem = GridProblem::with_ring_boundary(5, 6, 1.0, g, 10.0).unwrap();
    assert!(vi_residual(&ops, &problem, &s).unwrap() <= 1e-10);

    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let random = random_feasible(&mut rng, 30, 3);
    assert!(vi_residual(&ops, &problem, &random).unwrap() > 0.01);
}

#[test]
fn pde_residual_examples() {
    let ops = build_operators(4, 4).unwrap();
    let s = vertex_field(16, 3, 0);
    assert!(pde_residual(&ops, 1.0, &s).unwrap().iter().all(|r| *r <= 1e-12));
    let bary = Array2::from_elem((16, 3), 1.0 / 3.0);
    assert!(pde_residual(&ops, 1.0, &bary).unwrap().iter().all(|r| *r <= 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let r = pde_residual(&ops, 1.0, &random_feasible(&mut rng, 16, 3)).unwrap();
    assert!(r.iter().any(|x| *x > 1e-3));
}
