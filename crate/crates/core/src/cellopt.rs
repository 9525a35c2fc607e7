//! The discrete microcell problem: minimize J_micro over phase fields
//! subject to the homogenization equality constraints and the bridge box
//! constraints, plus connectivity checks and neighbor reinitialization.

use crate::error::{Error, Result};
use crate::grid::{periodic_dof_map, CellGrid, NodalField, PeriodicMap};
use crate::homogenize::{Homogenizer, MicroMaterial};
use crate::nlp::{
    solve_constrained, ConstrainedProblem, Evaluation, NlpSettings, OuterRecord,
};
use crate::phasefield::{
    bridge_masks, j_micro, j_micro_grad, modica_mortola, volume_grad, volume_term, BridgeMasks,
    BridgeSpec, CostWeights,
};
use crate::tensor::{voigt_upper_len, ElasticityTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One microcell optimization problem.
#[derive(Debug, Clone)]
pub struct CellProblem {
    pub grid: CellGrid,
    pub mat: MicroMaterial,
    pub target: ElasticityTensor,
    pub weights: CostWeights,
    pub bridge: BridgeSpec,
    /// Interface width of the Modica–Mortola energy.
    pub sigma: f64,
    pub nlp: NlpSettings,
    /// Relative residual tolerance of the corrector solves.
    pub corrector_tol: f64,
    pub seed: u64,
    /// Optional equality constraint on the stiff-phase volume fraction.
    pub fixed_theta: Option<f64>,
}

impl CellProblem {
    pub fn validate(&self) -> Result<()> {
        if self.target.dim != self.grid.dim {
            return Err(Error::structure(format!(
                "target dim {} does not match grid dim {}",
                self.target.dim, self.grid.dim
            )));
        }
        Ok(())
    }
}

/// Outcome classification of a cell solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    /// Constraints met, box satisfied, stationary, hard phase connected.
    Converged,
    /// No admissible point found within the iteration caps.
    Infeasible,
    /// Constraints met but the hard phase does not join all bridges.
    Disconnected,
}

/// Result of one microcell optimization.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub v_star: NodalField,
    pub c_star: ElasticityTensor,
    pub volume: f64,
    /// Modica–Mortola interface energy L^σ of the final field.
    pub perimeter_mm: f64,
    /// Cost density c_V · volume + ĉ_P · L^σ.
    pub cost_j: f64,
    pub status: CellStatus,
    pub kkt_residual: f64,
    pub constraint_norm: f64,
    pub iterations: usize,
    pub history: Vec<OuterRecord>,
}

struct CellNlp<'a> {
    problem: &'a CellProblem,
    homog: Homogenizer,
    masks: &'a BridgeMasks,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Correctors of the most recent evaluation point, reused when the
    /// optimizer re-evaluates the same point for gradients.
    cache: Option<(Vec<f64>, crate::homogenize::CorrectorSet)>,
}

impl<'a> CellNlp<'a> {
    fn new(problem: &'a CellProblem, masks: &'a BridgeMasks) -> Self {
        let homog = Homogenizer::new(problem.grid, problem.mat, problem.corrector_tol);
        let map = &homog.map;
        let free = map.free_count();
        let mut lower = vec![-1.0; free];
        let mut upper = vec![1.0; free];
        // A master is pinned when any of its lattice copies is masked; the
        // masks are mirror symmetric so this is consistent.
        for node in 0..problem.grid.node_count() {
            let m = map.free_of_node[node];
            if masks.hard_flags[node] {
                lower[m] = 1.0;
            }
            if masks.soft_flags[node] {
                upper[m] = -1.0;
            }
        }
        CellNlp {
            problem,
            homog,
            masks,
            lower,
            upper,
            cache: None,
        }
    }

    fn map(&self) -> &PeriodicMap {
        &self.homog.map
    }
}

impl ConstrainedProblem for CellNlp<'_> {
    fn num_vars(&self) -> usize {
        self.homog.map.free_count()
    }

    fn num_constraints(&self) -> usize {
        voigt_upper_len(self.problem.grid.dim) + usize::from(self.problem.fixed_theta.is_some())
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }

    fn evaluate(&mut self, x: &[f64], want_grad: bool) -> Result<Evaluation> {
        let grid = &self.problem.grid;
        let v = self.homog.map.expand(x, 1);
        let objective = j_micro(grid, &v, &self.problem.weights, self.problem.sigma);
        let correctors = match self.cache.take() {
            Some((cached_x, correctors)) if cached_x == x => correctors,
            _ => self.homog.solve_correctors(&v)?,
        };
        let mut constraints =
            self.homog
                .constraint_residuals(&v, &correctors, &self.problem.target);
        if let Some(theta) = self.problem.fixed_theta {
            constraints.push(volume_term(grid, &v) - theta);
        }
        let (gradient, jacobian) = if want_grad {
            let obj_lattice = j_micro_grad(grid, &v, &self.problem.weights, self.problem.sigma);
            let gradient = self.homog.map.fold_sum(&obj_lattice, 1);
            let cons_lattice = self.homog.constraint_gradients(&v, &correctors);
            let n = x.len();
            let mut jacobian = Vec::with_capacity(constraints.len() * n);
            for row in &cons_lattice {
                jacobian.extend(self.homog.map.fold_sum(row, 1));
            }
            if self.problem.fixed_theta.is_some() {
                let vol_lattice = volume_grad(grid, &v);
                jacobian.extend(self.homog.map.fold_sum(&vol_lattice, 1));
            }
            (Some(gradient), Some(jacobian))
        } else {
            (None, None)
        };
        let _ = self.masks;
        self.cache = Some((x.to_vec(), correctors));
        Ok(Evaluation {
            objective,
            gradient,
            constraints,
            jacobian,
        })
    }
}

/// Deterministic random initial field: uniform master values in
/// [−0.3, 0.3] with the bridge masks applied.
pub fn random_init(problem: &CellProblem, masks: &BridgeMasks) -> NodalField {
    let map = periodic_dof_map(&problem.grid);
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    let masters: Vec<f64> = (0..map.free_count())
        .map(|_| rng.gen_range(-0.3..0.3))
        .collect();
    let mut v = map.expand(&masters, 1);
    masks.apply(&mut v);
    v
}

/// Solves the microcell problem from the given initial field.
pub fn solve_cell(problem: &CellProblem, init: &NodalField) -> Result<CellResult> {
    problem.validate()?;
    let masks = bridge_masks(&problem.grid, &problem.bridge)?;
    let mut nlp = CellNlp::new(problem, &masks);

    // Project the initial field onto the box constraints.
    let mut x0 = nlp.map().restrict(init);
    for i in 0..x0.len() {
        x0[i] = x0[i].max(nlp.lower[i]).min(nlp.upper[i]);
    }

    let result = solve_constrained(&mut nlp, &x0, &problem.nlp)?;

    let v_star = nlp.map().expand(&result.x, 1);
    let correctors = nlp.homog.solve_correctors(&v_star)?;
    let c_star = nlp.homog.effective_tensor(&v_star, &correctors);
    let volume = volume_term(&problem.grid, &v_star);
    let perimeter_mm = modica_mortola(&problem.grid, &v_star, problem.sigma);
    let cost_j = problem.weights.c_v * volume + problem.weights.c_p_hat * perimeter_mm;

    let status = if !result.converged || result.constraint_norm > problem.nlp.constraint_tol {
        CellStatus::Infeasible
    } else if connectivity_check(&v_star, &masks) {
        CellStatus::Converged
    } else {
        CellStatus::Disconnected
    };

    Ok(CellResult {
        v_star,
        c_star,
        volume,
        perimeter_mm,
        cost_j,
        status,
        kkt_residual: result.kkt_residual,
        constraint_norm: result.constraint_norm,
        iterations: result.total_inner_iterations,
        history: result.history,
    })
}

/// Convenience wrapper building masks from the spec.
pub fn connectivity_check_spec(v: &NodalField, spec: &BridgeSpec) -> Result<bool> {
    let masks = bridge_masks(&v.grid, spec)?;
    Ok(connectivity_check(v, &masks))
}

/// Checks that the thresholded hard phase joins all bridge components.
///
/// The scan runs on the closed node lattice with face adjacency and no
/// periodic wrap: a structure that only closes up across the periodic
/// boundary tiles into disconnected pieces, so wrap edges must not count.
pub fn connectivity_check(v: &NodalField, masks: &BridgeMasks) -> bool {
    let grid = &v.grid;
    let hard: Vec<bool> = v.values.iter().map(|&x| x > 0.0).collect();
    let mut component = vec![usize::MAX; grid.node_count()];
    let mut next_component = 0;
    let mut stack = Vec::new();
    for start in 0..grid.node_count() {
        if !hard[start] || component[start] != usize::MAX {
            continue;
        }
        stack.push(start);
        component[start] = next_component;
        while let Some(node) = stack.pop() {
            let coords = grid.node_coords(node);
            for axis in 0..grid.dim {
                for dir in [-1isize, 1] {
                    let c = coords[axis] as isize + dir;
                    if c < 0 || c > grid.n as isize {
                        continue;
                    }
                    let mut neighbor = coords;
                    neighbor[axis] = c as usize;
                    let idx = grid.node_index(&neighbor[..grid.dim]);
                    if hard[idx] && component[idx] == usize::MAX {
                        component[idx] = next_component;
                        stack.push(idx);
                    }
                }
            }
        }
        next_component += 1;
    }
    let mut bridge_component = None;
    for &node in &masks.hard {
        if !hard[node] {
            return false;
        }
        match bridge_component {
            None => bridge_component = Some(component[node]),
            Some(c) if c != component[node] => return false,
            _ => {}
        }
    }
    true
}

/// Weighted nodal average of neighbor fields, clipped to [−1, 1] and
/// projected onto the bridge masks.
pub fn reinit_from_neighbors(
    neighbors: &[(&NodalField, f64)],
    masks: &BridgeMasks,
) -> Result<NodalField> {
    let (first, _) = neighbors
        .first()
        .ok_or_else(|| Error::domain("neighbor list must not be empty"))?;
    let grid = first.grid;
    let total: f64 = neighbors.iter().map(|(_, w)| w).sum();
    if neighbors.iter().any(|(_, w)| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(
            "neighbor weights must be nonnegative and sum to one",
        ));
    }
    let mut v = NodalField::zeros(grid, 1);
    for (field, weight) in neighbors {
        if field.grid != grid || field.components != 1 {
            return Err(Error::structure("neighbor fields must share the grid"));
        }
        for (out, value) in v.values.iter_mut().zip(&field.values) {
            *out += weight / total * value;
        }
    }
    for value in v.values.iter_mut() {
        *value = value.clamp(-1.0, 1.0);
    }
    masks.apply(&mut v);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::phasefield::BridgeVariant;
    use crate::tensor::iso_from_nu_e;

    fn small_problem(target: ElasticityTensor) -> CellProblem {
        let grid = build_grid(2, 8).unwrap();
        CellProblem {
            grid,
            mat: MicroMaterial::new(iso_from_nu_e(0.25, 10.0, 2).unwrap(), 1e-2).unwrap(),
            target,
            weights: CostWeights::new(1.0, 0.05, 0.0).unwrap(),
            bridge: BridgeSpec {
                variant: BridgeVariant::Midfaces,
                width: 0.25,
                sigma: 2.0 * grid.h(),
            },
            sigma: 2.0 * grid.h(),
            nlp: NlpSettings::default(),
            corrector_tol: 1e-10,
            seed: 1,
            fixed_theta: None,
        }
    }

    #[test]
    fn fully_hard_field_is_connected() {
        let grid = build_grid(2, 8).unwrap();
        let spec = BridgeSpec {
            variant: BridgeVariant::Corners,
            width: 0.25,
            sigma: 2.0 * grid.h(),
        };
        let v = NodalField::constant(grid, 1, 1.0);
        assert!(connectivity_check_spec(&v, &spec).unwrap());
    }

    #[test]
    fn isolated_corner_patches_are_disconnected() {
        let grid = build_grid(2, 8).unwrap();
        let spec = BridgeSpec {
            variant: BridgeVariant::Corners,
            width: 0.25,
            sigma: 2.0 * grid.h(),
        };
        let masks = bridge_masks(&grid, &spec).unwrap();
        let mut v = NodalField::constant(grid, 1, -1.0);
        masks.apply(&mut v);
        assert!(!connectivity_check(&v, &masks));
    }

    // A plus-sign cross joining all four midface bridges is connected.
    #[test]
    fn cross_joins_midface_bridges() {
        let grid = build_grid(2, 16).unwrap();
        let spec = BridgeSpec {
            variant: BridgeVariant::Midfaces,
            width: 0.25,
            sigma: 2.0 * grid.h(),
        };
        let masks = bridge_masks(&grid, &spec).unwrap();
        let mut v = NodalField::constant(grid, 1, -1.0);
        for node in 0..grid.node_count() {
            let c = grid.node_coords(node);
            let mid = grid.n / 2;
            let band = 2;
            if (c[0] as isize - mid as isize).unsigned_abs() <= band
                || (c[1] as isize - mid as isize).unsigned_abs() <= band
            {
                v.values[node] = 1.0;
            }
        }
        masks.apply(&mut v);
        assert!(connectivity_check(&v, &masks));
        // Independent oracle: breadth-first search from one bridge node must
        // reach every other mask node.
        let hard: Vec<bool> = v.values.iter().map(|&x| x > 0.0).collect();
        let mut seen = vec![false; grid.node_count()];
        let mut queue = vec![masks.hard[0]];
        seen[masks.hard[0]] = true;
        while let Some(node) = queue.pop() {
            let coords = grid.node_coords(node);
            for axis in 0..2 {
                for dir in [-1isize, 1] {
                    let c = coords[axis] as isize + dir;
                    if c < 0 || c > grid.n as isize {
                        continue;
                    }
                    let mut nb = coords;
                    nb[axis] = c as usize;
                    let idx = grid.node_index(&nb[..2]);
                    if hard[idx] && !seen[idx] {
                        seen[idx] = true;
                        queue.push(idx);
                    }
                }
            }
        }
        assert!(masks.hard.iter().all(|&n| seen[n]));
    }

    #[test]
    fn reinit_trivial_cases() {
        let grid = build_grid(2, 8).unwrap();
        let spec = BridgeSpec {
            variant: BridgeVariant::Midfaces,
            width: 0.25,
            sigma: 2.0 * grid.h(),
        };
        let masks = bridge_masks(&grid, &spec).unwrap();
        let mut a = NodalField::constant(grid, 1, 1.0);
        masks.apply(&mut a);
        let single = reinit_from_neighbors(&[(&a, 1.0)], &masks).unwrap();
        assert_eq!(single, a);
        let pair = reinit_from_neighbors(&[(&a, 0.5), (&a, 0.5)], &masks).unwrap();
        assert_eq!(pair, a);

        let mut b = NodalField::constant(grid, 1, -1.0);
        masks.apply(&mut b);
        let avg = reinit_from_neighbors(&[(&a, 0.5), (&b, 0.5)], &masks).unwrap();
        for node in 0..grid.node_count() {
            if masks.hard_flags[node] {
                assert_eq!(avg.values[node], 1.0);
            } else if masks.soft_flags[node] {
                assert_eq!(avg.values[node], -1.0);
            } else {
                assert_eq!(avg.values[node], 0.0);
            }
        }
        assert!(reinit_from_neighbors(&[], &masks).is_err());
        assert!(reinit_from_neighbors(&[(&a, 0.7)], &masks).is_err());
    }

    // Feasibility by construction: the target is the effective tensor of
    // an admissible field, so optimization from that field must stay
    // feasible and not increase the cost.
    #[test]
    fn inverse_crime_recovery() {
        let grid = build_grid(2, 8).unwrap();
        let mat = MicroMaterial::new(iso_from_nu_e(0.25, 10.0, 2).unwrap(), 1e-2).unwrap();
        let spec = BridgeSpec {
            variant: BridgeVariant::Midfaces,
            width: 0.25,
            sigma: 2.0 * grid.h(),
        };
        let masks = bridge_masks(&grid, &spec).unwrap();
        let mut v0 = NodalField::constant(grid, 1, 0.6);
        masks.apply(&mut v0);
        let target = crate::homogenize::effective_tensor_of(grid, &v0, &mat, 1e-10).unwrap();
        let problem = CellProblem {
            target,
            ..small_problem(ElasticityTensor::zeros(2))
        };
        let initial_cost = j_micro(&grid, &v0, &problem.weights, problem.sigma);
        let result = solve_cell(&problem, &v0).unwrap();
        assert_eq!(result.status, CellStatus::Converged);
        assert!(result.constraint_norm <= 1e-6);
        let final_cost = j_micro(&grid, &result.v_star, &problem.weights, problem.sigma);
        assert!(final_cost <= initial_cost + 1e-8);
        for pair in result.history.last().unwrap().merit_values.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    // A full-density target contradicts the soft mask.
    #[test]
    fn impossible_target_is_infeasible() {
        let _grid = build_grid(2, 8).unwrap();
        let mat = MicroMaterial::new(iso_from_nu_e(0.25, 10.0, 2).unwrap(), 1e-2).unwrap();
        let mut problem = small_problem(mat.base_tensor());
        problem.nlp.outer_cap = 6;
        problem.nlp.inner_cap = 120;
        let masks = bridge_masks(&problem.grid, &problem.bridge).unwrap();
        let init = random_init(&problem, &masks);
        let result = solve_cell(&problem, &init).unwrap();
        assert_eq!(result.status, CellStatus::Infeasible);
    }

    #[test]
    fn determinism_bitwise() {
        let grid = build_grid(2, 8).unwrap();
        let mat = MicroMaterial::new(iso_from_nu_e(0.25, 10.0, 2).unwrap(), 1e-2).unwrap();
        let masks_spec = BridgeSpec {
            variant: BridgeVariant::Midfaces,
            width: 0.25,
            sigma: 2.0 * grid.h(),
        };
        let masks = bridge_masks(&grid, &masks_spec).unwrap();
        let mut v0 = NodalField::constant(grid, 1, 0.4);
        masks.apply(&mut v0);
        let target = crate::homogenize::effective_tensor_of(grid, &v0, &mat, 1e-10).unwrap();
        let mut problem = small_problem(target);
        problem.nlp.inner_cap = 60;
        problem.nlp.outer_cap = 4;
        let a = solve_cell(&problem, &v0).unwrap();
        let b = solve_cell(&problem, &v0).unwrap();
        assert_eq!(a.v_star.values, b.v_star.values);
        assert_eq!(a.c_star.voigt, b.c_star.voigt);
        assert_eq!(a.cost_j, b.cost_j);
        assert_eq!(a.iterations, b.iterations);
    }
}
