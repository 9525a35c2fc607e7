//! Central finite-difference oracles for every analytic gradient path.

mod common;

use common::{gradient_error, synthetic_chart};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twoscale::grid::{build_grid, periodic_dof_map, NodalField};
use twoscale::homogenize::{Homogenizer, MicroMaterial};
use twoscale::macroopt::{
    macro_cost, macro_gradient, BodyForceSpec, CellSet, DirichletSpec, Face, Functional,
    MacroDesign, MacroFem, MacroProblem, TrackingTarget,
};
use twoscale::phasefield::{j_micro, j_micro_grad, CostWeights};
use twoscale::spline::{eval_psi_jacobian, fit_jref, fit_psi, Anchor, CubicBasis};
use twoscale::tensor::iso_from_nu_e;

// The constraint gradient uses only the explicit phase-field partial; the
// corrector sensitivities cancel. Central differences with full corrector
// re-solves per perturbation are the oracle, so this also verifies that
// cancellation numerically.
#[test]
fn constraint_gradients_match_finite_differences() {
    let grid = build_grid(2, 16).unwrap();
    let map = periodic_dof_map(&grid);
    let base = iso_from_nu_e(0.25, 10.0, 2).unwrap();
    let mat = MicroMaterial::new(base, 0.1).unwrap();
    let step = 1e-6;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let masters: Vec<f64> = (0..map.free_count())
            .map(|_| rng.gen_range(-0.8..0.8))
            .collect();
        let v = map.expand(&masters, 1);
        let mut homog = Homogenizer::new(grid, mat, 1e-12);
        let correctors = homog.solve_correctors(&v).unwrap();
        let grads = homog.constraint_gradients(&v, &correctors);
        // Fold lattice gradients onto periodic masters.
        let folded: Vec<Vec<f64>> = grads.iter().map(|g| map.fold_sum(g, 1)).collect();

        // Sampled master nodes.
        let sample: Vec<usize> = (0..map.free_count()).step_by(11).collect();
        let mut fd = vec![vec![0.0; sample.len()]; 6];
        for (col, &master) in sample.iter().enumerate() {
            let mut perturbed = masters.clone();
            perturbed[master] += step;
            let vp = map.expand(&perturbed, 1);
            let mut h_plus = Homogenizer::new(grid, mat, 1e-12);
            let cp = h_plus.solve_correctors(&vp).unwrap();
            let plus = h_plus.effective_tensor(&vp, &cp).upper_triangle();
            perturbed[master] = masters[master] - step;
            let vm = map.expand(&perturbed, 1);
            let mut h_minus = Homogenizer::new(grid, mat, 1e-12);
            let cm = h_minus.solve_correctors(&vm).unwrap();
            let minus = h_minus.effective_tensor(&vm, &cm).upper_triangle();
            for k in 0..6 {
                fd[k][col] = (plus[k] - minus[k]) / (2.0 * step);
            }
        }
        for k in 0..6 {
            let analytic: Vec<f64> = sample.iter().map(|&m| folded[k][m]).collect();
            let err = gradient_error(&fd[k], &analytic);
            assert!(
                err <= 1e-5,
                "seed {seed}, constraint {k}: relative error {err:.3e}"
            );
        }
    }
}

// Stiffening any node of a soft cell cannot decrease C*_1111.
#[test]
fn constraint_gradient_sign_for_soft_cell() {
    let grid = build_grid(2, 8).unwrap();
    let base = iso_from_nu_e(0.25, 10.0, 2).unwrap();
    let mat = MicroMaterial::new(base, 1e-3).unwrap();
    let v = NodalField::constant(grid, 1, -0.9);
    let mut homog = Homogenizer::new(grid, mat, 1e-12);
    let correctors = homog.solve_correctors(&v).unwrap();
    let grads = homog.constraint_gradients(&v, &correctors);
    assert!(grads[0].iter().all(|&g| g >= 0.0));

    // Spot finite-difference sign check.
    let map = periodic_dof_map(&grid);
    let masters = map.restrict(&v);
    let step = 1e-6;
    let mut perturbed = masters.clone();
    perturbed[3] += step;
    let plus = {
        let vp = map.expand(&perturbed, 1);
        let cp = homog.solve_correctors(&vp).unwrap();
        homog.effective_tensor(&vp, &cp).get(0, 0)
    };
    perturbed[3] = masters[3] - step;
    let minus = {
        let vm = map.expand(&perturbed, 1);
        let cm = homog.solve_correctors(&vm).unwrap();
        homog.effective_tensor(&vm, &cm).get(0, 0)
    };
    assert!((plus - minus) / (2.0 * step) >= 0.0);
}

#[test]
fn j_micro_gradient_matches_finite_differences_seeded() {
    let grid = build_grid(2, 16).unwrap();
    let weights = CostWeights::new(1.0, 0.05, 0.0).unwrap();
    let sigma = 2.0 * grid.h();
    let step = 1e-6;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut v = NodalField::zeros(grid, 1);
        for value in v.values.iter_mut() {
            *value = rng.gen_range(-0.9..0.9);
        }
        let analytic = j_micro_grad(&grid, &v, &weights, sigma);
        let sample: Vec<usize> = (0..grid.node_count()).step_by(13).collect();
        let mut fd = vec![0.0; sample.len()];
        for (col, &node) in sample.iter().enumerate() {
            let keep = v.values[node];
            v.values[node] = keep + step;
            let plus = j_micro(&grid, &v, &weights, sigma);
            v.values[node] = keep - step;
            let minus = j_micro(&grid, &v, &weights, sigma);
            v.values[node] = keep;
            fd[col] = (plus - minus) / (2.0 * step);
        }
        let sampled: Vec<f64> = sample.iter().map(|&n| analytic[n]).collect();
        let err = gradient_error(&fd, &sampled);
        assert!(err <= 1e-6, "seed {seed}: relative error {err:.3e}");
    }
}

#[test]
fn psi_jacobian_matches_finite_differences_seeded() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut anchors: Vec<Anchor> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
            .into_iter()
            .map(|q| Anchor {
                q,
                p: [
                    0.1 + 0.4 * q[0] + rng.gen_range(-0.02..0.02),
                    1.0 + 6.0 * q[1] + rng.gen_range(-0.2..0.2),
                ],
            })
            .collect();
        anchors.push(Anchor {
            q: [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)],
            p: [0.3, 4.0],
        });
        let psi = fit_psi(&anchors, 0.125).unwrap();
        let step = 1e-6;
        let mut fd = Vec::new();
        let mut analytic = Vec::new();
        for _ in 0..20 {
            let q = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let jac = eval_psi_jacobian(&psi, q).unwrap();
            for comp in 0..2 {
                for axis in 0..2 {
                    let mut qp = q;
                    qp[axis] += step;
                    let (vp, _) = psi.eval(qp).unwrap();
                    let mut qm = q;
                    qm[axis] -= step;
                    let (vm, _) = psi.eval(qm).unwrap();
                    fd.push((vp[comp] - vm[comp]) / (2.0 * step));
                    analytic.push(jac[comp][axis]);
                }
            }
        }
        let err = gradient_error(&fd, &analytic);
        assert!(err <= 1e-5, "seed {seed}: relative error {err:.3e}");
    }
}

#[test]
fn jref_gradient_matches_finite_differences_seeded() {
    let tau = 0.125;
    let basis = CubicBasis::new(tau).unwrap();
    let m = basis.len();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let a = rng.gen_range(0.5..3.0);
        let b = rng.gen_range(-1.0..1.0);
        let f = |x: f64, y: f64| (a * x).sin() + b * y * y + 0.3 * x * y;
        let mut values = vec![0.0; m * m];
        for k in 0..m {
            for l in 0..m {
                values[k * m + l] = f(basis.greville(k), basis.greville(l));
            }
        }
        let jref = fit_jref(&values, tau).unwrap();
        let step = 1e-6;
        let mut fd = Vec::new();
        let mut analytic = Vec::new();
        for _ in 0..20 {
            let q = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let jac = jref.jacobian(q).unwrap();
            for axis in 0..2 {
                let mut qp = q;
                qp[axis] += step;
                let (vp, _) = jref.eval(qp).unwrap();
                let mut qm = q;
                qm[axis] -= step;
                let (vm, _) = jref.eval(qm).unwrap();
                fd.push((vp[0] - vm[0]) / (2.0 * step));
                analytic.push(jac[0][axis]);
            }
        }
        let err = gradient_error(&fd, &analytic);
        assert!(err <= 1e-5, "seed {seed}: relative error {err:.3e}");
    }
}

fn small_cantilever(functional: Functional) -> MacroProblem {
    MacroProblem {
        dim: 2,
        h: 0.5,
        cells: CellSet::Box {
            counts: vec![4, 2],
            holes: vec![],
        },
        dirichlet: vec![DirichletSpec {
            face: Face::Xmin,
            components: vec![0, 1],
            values: vec![0.0, 0.0],
        }],
        neumann: vec![],
        body_force: vec![BodyForceSpec {
            region: vec![[1.9, 2.0], [0.4, 0.6]],
            force: vec![0.0, -10.0],
        }],
        functional,
        gauges: vec![],
        vol_h: Some(0.4),
        c_p_hat: 0.0,
    }
}

#[test]
fn macro_gradients_match_finite_differences_seeded() {
    let chart = synthetic_chart(0.05, 0.35, 2.0, 8.0, 0.0);
    for seed in 0..5u64 {
        for track in [false, true] {
            let functional = if track {
                Functional::Tracking {
                    targets: vec![TrackingTarget {
                        cell: vec![3, 1],
                        u0: vec![0.02, -0.1],
                    }],
                }
            } else {
                Functional::Compliance
            };
            let mut fem = MacroFem::new(small_cantilever(functional)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let design = MacroDesign {
                q: (0..fem.num_cells())
                    .map(|_| [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)])
                    .collect(),
            };
            let tensors = fem.cell_tensors(&design, &chart).unwrap();
            let state = fem.solve(&tensors).unwrap();
            let (mech, cost) = macro_gradient(&mut fem, &design, &chart, &state).unwrap();

            let step = 1e-6;
            let mut fd = Vec::new();
            let mut analytic = Vec::new();
            for cell in 0..fem.num_cells() {
                for axis in 0..2 {
                    let mut plus = design.clone();
                    plus.q[cell][axis] += step;
                    let tp = fem.cell_tensors(&plus, &chart).unwrap();
                    let sp = fem.solve(&tp).unwrap();
                    let cp = macro_cost(&fem, &plus, &chart, &sp).unwrap();
                    let mut minus = design.clone();
                    minus.q[cell][axis] -= step;
                    let tm = fem.cell_tensors(&minus, &chart).unwrap();
                    let sm = fem.solve(&tm).unwrap();
                    let cm = macro_cost(&fem, &minus, &chart, &sm).unwrap();
                    fd.push((cp.mechanical - cm.mechanical) / (2.0 * step));
                    analytic.push(mech[cell][axis]);
                    fd.push((cp.cost_integral - cm.cost_integral) / (2.0 * step));
                    analytic.push(cost[cell][axis]);
                }
            }
            let err = gradient_error(&fd, &analytic);
            assert!(
                err <= 1e-5,
                "seed {seed}, tracking {track}: relative error {err:.3e}"
            );
        }
    }
}

// Compliance decreases when the whole design stiffens.
#[test]
fn compliance_gradient_negative_for_uniform_stiffening() {
    let chart = synthetic_chart(0.05, 0.35, 2.0, 8.0, 0.0);
    let mut fem = MacroFem::new(small_cantilever(Functional::Compliance)).unwrap();
    let design = MacroDesign::uniform(fem.num_cells(), [0.5, 0.5]);
    let tensors = fem.cell_tensors(&design, &chart).unwrap();
    let state = fem.solve(&tensors).unwrap();
    let (mech, _) = macro_gradient(&mut fem, &design, &chart, &state).unwrap();
    // Axis 1 is the stiffness direction of the synthetic chart.
    let total: f64 = mech.iter().map(|pair| pair[1]).sum();
    assert!(total < 0.0, "stiffening must reduce compliance, got {total}");

    let step = 1e-5;
    let evaluate = |fem: &mut MacroFem, s: f64| -> f64 {
        let d = MacroDesign::uniform(fem.num_cells(), [0.5, 0.5 + s]);
        let t = fem.cell_tensors(&d, &chart).unwrap();
        fem.solve(&t).unwrap().compliance
    };
    let fd = (evaluate(&mut fem, step) - evaluate(&mut fem, -step)) / (2.0 * step);
    assert!(fd < 0.0);
    assert!((fd - total).abs() <= 1e-4 * fd.abs());
}
