//! Cubic tensor-product B-spline charts over the unit square: the map Ψ
//! from [0,1]² into the (ν, E) plane fitted by constrained bending-energy
//! minimization, and the scalar cost spline j_ref interpolating resampled
//! cost densities at the control lattice.

use crate::dbase::Database;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Clamped cubic B-spline basis on [0,1] with uniform interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicBasis {
    /// Number of knot intervals (1/τ).
    pub intervals: usize,
    knots: Vec<f64>,
}

impl CubicBasis {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::domain(format!(
                "knot spacing must lie in (0, 1), got {tau}"
            )));
        }
        let intervals = (1.0 / tau).round() as usize;
        if intervals < 1 || ((intervals as f64) * tau - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "knot spacing {tau} does not divide the unit interval"
            )));
        }
        let mut knots = vec![0.0; 4];
        for i in 1..intervals {
            knots.push(i as f64 / intervals as f64);
        }
        knots.extend_from_slice(&[1.0; 4]);
        Ok(CubicBasis { intervals, knots })
    }

    /// Number of basis functions, 1/τ + 3.
    pub fn len(&self) -> usize {
        self.intervals + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Greville abscissa of basis function i.
    pub fn greville(&self, i: usize) -> f64 {
        (self.knots[i + 1] + self.knots[i + 2] + self.knots[i + 3]) / 3.0
    }

    fn span(&self, x: f64) -> usize {
        // Index k with t_k <= x < t_{k+1}, clamped to the last interval.
        let last = self.intervals + 2;
        if x >= 1.0 {
            return last;
        }
        let guess = (x * self.intervals as f64).floor() as usize;
        3 + guess.min(self.intervals - 1)
    }

    /// Values and first two derivatives of the four basis functions that
    /// are nonzero at x; returns the index of the first one.
    pub fn eval(&self, x: f64) -> (usize, [f64; 4], [f64; 4], [f64; 4]) {
        let k = self.span(x);
        let t = &self.knots;
        // Triangular de Boor table for degrees 0..3.
        let mut ndu = [[0.0f64; 4]; 4];
        ndu[0][0] = 1.0;
        let mut left = [0.0f64; 4];
        let mut right = [0.0f64; 4];
        for j in 1..=3 {
            left[j] = x - t[k + 1 - j];
            right[j] = t[k + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let den = right[r + 1] + left[j - r];
                let temp = if den != 0.0 { ndu[r][j - 1] / den } else { 0.0 };
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let values = [ndu[0][3], ndu[1][3], ndu[2][3], ndu[3][3]];

        // Derivatives from the lower-degree tables.
        let mut d1 = [0.0f64; 4];
        let mut d2 = [0.0f64; 4];
        for r in 0..4usize {
            let i = k - 3 + r;
            // First derivative: 3 (N_{i,2}/(t_{i+3}-t_i) - N_{i+1,2}/(t_{i+4}-t_{i+1})).
            let n2 = |idx: usize| -> f64 {
                // N_{idx,2} at x from the table: nonzero for idx in k-2..=k.
                if idx + 2 < k || idx > k {
                    0.0
                } else {
                    ndu[idx + 2 - k][2]
                }
            };
            let n1 = |idx: usize| -> f64 {
                if idx + 1 < k || idx > k {
                    0.0
                } else {
                    ndu[idx + 1 - k][1]
                }
            };
            let da = t[i + 3] - t[i];
            let db = t[i + 4] - t[i + 1];
            let term_a = if da != 0.0 { n2(i) / da } else { 0.0 };
            let term_b = if db != 0.0 { n2(i + 1) / db } else { 0.0 };
            d1[r] = 3.0 * (term_a - term_b);

            // Second derivative via degree-1 values.
            let dd = |idx: usize| -> f64 {
                let ea = t[idx + 2] - t[idx];
                let eb = t[idx + 3] - t[idx + 1];
                let ta = if ea != 0.0 { n1(idx) / ea } else { 0.0 };
                let tb = if eb != 0.0 { n1(idx + 1) / eb } else { 0.0 };
                2.0 * (ta - tb)
            };
            let term_a = if da != 0.0 { dd(i) / da } else { 0.0 };
            let term_b = if db != 0.0 { dd(i + 1) / db } else { 0.0 };
            d2[r] = 3.0 * (term_a - term_b);
        }
        (k - 3, values, d1, d2)
    }

    /// 1D Gram matrices (∫ b b, ∫ b′ b′, ∫ b″ b″) by Gauss quadrature with
    /// `points` nodes per knot interval.
    pub fn gram_matrices(&self, points: usize) -> [DMatrix<f64>; 3] {
        let m = self.len();
        let (nodes, weights) = gauss_legendre_unit(points);
        let mut grams = [
            DMatrix::zeros(m, m),
            DMatrix::zeros(m, m),
            DMatrix::zeros(m, m),
        ];
        for cell in 0..self.intervals {
            let a = cell as f64 / self.intervals as f64;
            let width = 1.0 / self.intervals as f64;
            for (node, weight) in nodes.iter().zip(&weights) {
                let x = a + node * width;
                let w = weight * width;
                let (first, values, d1, d2) = self.eval(x);
                for r in 0..4 {
                    for c in 0..4 {
                        grams[0][(first + r, first + c)] += w * values[r] * values[c];
                        grams[1][(first + r, first + c)] += w * d1[r] * d1[c];
                        grams[2][(first + r, first + c)] += w * d2[r] * d2[c];
                    }
                }
            }
        }
        grams
    }
}

/// Gauss–Legendre nodes and weights on [0, 1], computed by Newton
/// iteration on the Legendre recurrence.
fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes.push(0.5 * (1.0 - x));
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Tensor-product cubic spline surface over [0,1]² with one or more output
/// components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSurface {
    pub tau: f64,
    pub components: usize,
    /// Control coefficients per component, row-major over (i, j) with the
    /// second axis fastest; length (1/τ + 3)² each.
    pub coeffs: Vec<Vec<f64>>,
}

impl SplineSurface {
    pub fn basis(&self) -> Result<CubicBasis> {
        CubicBasis::new(self.tau)
    }

    /// Control points per axis.
    pub fn lattice_size(&self) -> usize {
        ((1.0 / self.tau).round() as usize) + 3
    }

    /// Evaluates all components; coordinates outside [0,1]² are clamped and
    /// reported.
    pub fn eval(&self, q: [f64; 2]) -> Result<(Vec<f64>, bool)> {
        let basis = self.basis()?;
        let clamped = !(0.0..=1.0).contains(&q[0]) || !(0.0..=1.0).contains(&q[1]);
        let x = q[0].clamp(0.0, 1.0);
        let y = q[1].clamp(0.0, 1.0);
        let (i0, bx, _, _) = basis.eval(x);
        let (j0, by, _, _) = basis.eval(y);
        let m = basis.len();
        let mut out = vec![0.0; self.components];
        for (c, coeffs) in self.coeffs.iter().enumerate() {
            let mut acc = 0.0;
            for r in 0..4 {
                for s in 0..4 {
                    acc += bx[r] * by[s] * coeffs[(i0 + r) * m + (j0 + s)];
                }
            }
            out[c] = acc;
        }
        Ok((out, clamped))
    }

    /// Analytic Jacobian: per component the pair (∂/∂q₁, ∂/∂q₂).
    pub fn jacobian(&self, q: [f64; 2]) -> Result<Vec<[f64; 2]>> {
        let basis = self.basis()?;
        let x = q[0].clamp(0.0, 1.0);
        let y = q[1].clamp(0.0, 1.0);
        let (i0, bx, dx, _) = basis.eval(x);
        let (j0, by, dy, _) = basis.eval(y);
        let m = basis.len();
        let mut out = vec![[0.0; 2]; self.components];
        for (c, coeffs) in self.coeffs.iter().enumerate() {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for r in 0..4 {
                for s in 0..4 {
                    let coeff = coeffs[(i0 + r) * m + (j0 + s)];
                    gx += dx[r] * by[s] * coeff;
                    gy += bx[r] * dy[s] * coeff;
                }
            }
            out[c] = [gx, gy];
        }
        Ok(out)
    }

    /// Bending energy ∫ |D²f|² over the unit square, integrated pointwise
    /// as a sum of squares so the value stays exact near zero.
    pub fn bending_energy(&self) -> Result<f64> {
        let basis = self.basis()?;
        let m = basis.len();
        let (nodes, weights) = gauss_legendre_unit(15);
        let width = 1.0 / basis.intervals as f64;
        let mut total = 0.0;
        for cx in 0..basis.intervals {
            for (nx, wx) in nodes.iter().zip(&weights) {
                let x = (cx as f64 + nx) * width;
                let (i0, bx, dx, ddx) = basis.eval(x);
                for cy in 0..basis.intervals {
                    for (ny, wy) in nodes.iter().zip(&weights) {
                        let y = (cy as f64 + ny) * width;
                        let (j0, by, dy, ddy) = basis.eval(y);
                        let w = wx * wy * width * width;
                        for coeffs in &self.coeffs {
                            let mut fxx = 0.0;
                            let mut fxy = 0.0;
                            let mut fyy = 0.0;
                            for r in 0..4 {
                                for s in 0..4 {
                                    let c = coeffs[(i0 + r) * m + (j0 + s)];
                                    fxx += ddx[r] * by[s] * c;
                                    fxy += dx[r] * dy[s] * c;
                                    fyy += bx[r] * ddy[s] * c;
                                }
                            }
                            total += w * (fxx * fxx + 2.0 * fxy * fxy + fyy * fyy);
                        }
                    }
                }
            }
        }
        Ok(total)
    }
}

/// Interpolation anchors of the chart map: parameters q in the unit square
/// paired with (ν, E) targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub q: [f64; 2],
    pub p: [f64; 2],
}

fn check_anchor_set(anchors: &[Anchor]) -> Result<()> {
    for (i, a) in anchors.iter().enumerate() {
        for b in anchors.iter().skip(i + 1) {
            if (a.q[0] - b.q[0]).abs() < 1e-12 && (a.q[1] - b.q[1]).abs() < 1e-12 {
                return Err(Error::fit(format!(
                    "anchors share the parameter point ({}, {})",
                    a.q[0], a.q[1]
                )));
            }
        }
    }
    // At least three affinely independent parameter points.
    let rows = anchors.len();
    let m = DMatrix::from_fn(rows, 3, |r, c| match c {
        0 => 1.0,
        1 => anchors[r].q[0],
        _ => anchors[r].q[1],
    });
    if rows < 3 || m.svd(false, false).rank(1e-10) < 3 {
        return Err(Error::fit(
            "anchor parameters are affinely dependent; at least three independent points are required",
        ));
    }
    Ok(())
}

/// Fits the chart map Ψ: minimal bending energy among splines
/// interpolating every anchor.
pub fn fit_psi(anchors: &[Anchor], tau: f64) -> Result<SplineSurface> {
    check_anchor_set(anchors)?;
    let basis = CubicBasis::new(tau)?;
    let m = basis.len();
    let unknowns = m * m;
    let rows = anchors.len();

    // Constraint matrix: basis tensor values at the anchor parameters.
    let mut a = DMatrix::zeros(rows, unknowns);
    for (r, anchor) in anchors.iter().enumerate() {
        let (i0, bx, _, _) = basis.eval(anchor.q[0].clamp(0.0, 1.0));
        let (j0, by, _, _) = basis.eval(anchor.q[1].clamp(0.0, 1.0));
        for i in 0..4 {
            for j in 0..4 {
                a[(r, (i0 + i) * m + (j0 + j))] = bx[i] * by[j];
            }
        }
    }
    let rank = a.clone().svd(false, false).rank(1e-10);
    if rank < rows {
        // Identify a maximal independent prefix to name the dependents.
        let mut independent: Vec<usize> = Vec::new();
        let mut dependent = Vec::new();
        for r in 0..rows {
            let mut trial = independent.clone();
            trial.push(r);
            let sub = DMatrix::from_fn(trial.len(), unknowns, |i, j| a[(trial[i], j)]);
            if sub.svd(false, false).rank(1e-10) == trial.len() {
                independent = trial;
            } else {
                dependent.push(r);
            }
        }
        return Err(Error::fit(format!(
            "anchor constraints are rank deficient; dependent anchors: {dependent:?}"
        )));
    }

    // Bending-energy Gram matrix with Kronecker structure.
    let grams = basis.gram_matrices(15);
    let mut g = DMatrix::zeros(unknowns, unknowns);
    for i in 0..m {
        for k in 0..m {
            for j in 0..m {
                for l in 0..m {
                    let value = grams[2][(i, k)] * grams[0][(j, l)]
                        + 2.0 * grams[1][(i, k)] * grams[1][(j, l)]
                        + grams[0][(i, k)] * grams[2][(j, l)];
                    g[(i * m + j, k * m + l)] = value;
                }
            }
        }
    }

    // KKT system, shared for both output components.
    let size = unknowns + rows;
    let mut kkt = DMatrix::zeros(size, size);
    for i in 0..unknowns {
        for j in 0..unknowns {
            kkt[(i, j)] = 2.0 * g[(i, j)];
        }
    }
    for r in 0..rows {
        for j in 0..unknowns {
            kkt[(unknowns + r, j)] = a[(r, j)];
            kkt[(j, unknowns + r)] = a[(r, j)];
        }
    }
    let lu = kkt.lu();
    let mut coeffs = Vec::with_capacity(2);
    for component in 0..2 {
        let mut rhs = DVector::zeros(size);
        for (r, anchor) in anchors.iter().enumerate() {
            rhs[unknowns + r] = anchor.p[component];
        }
        let solution = lu
            .solve(&rhs)
            .ok_or_else(|| Error::fit("singular interpolation system"))?;
        coeffs.push(solution.rows(0, unknowns).iter().copied().collect());
    }
    let surface = SplineSurface {
        tau,
        components: 2,
        coeffs,
    };
    // Interpolation sanity.
    let mut worst = 0.0f64;
    for anchor in anchors {
        let (value, _) = surface.eval(anchor.q)?;
        worst = worst.max((value[0] - anchor.p[0]).abs());
        worst = worst.max((value[1] - anchor.p[1]).abs());
    }
    if worst > 1e-8 {
        return Err(Error::fit(format!(
            "interpolation residual {worst:.3e} exceeds 1e-8"
        )));
    }
    Ok(surface)
}

/// Evaluates Ψ with clamping.
pub fn eval_psi(psi: &SplineSurface, q: [f64; 2]) -> Result<([f64; 2], bool)> {
    let (value, clamped) = psi.eval(q)?;
    Ok(([value[0], value[1]], clamped))
}

/// Analytic 2×2 Jacobian of Ψ, row per output component.
pub fn eval_psi_jacobian(psi: &SplineSurface, q: [f64; 2]) -> Result<[[f64; 2]; 2]> {
    let jac = psi.jacobian(q)?;
    Ok([jac[0], jac[1]])
}

/// Cost values resampled at the control lattice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResampledCosts {
    /// Row-major over (k, l) with the second axis fastest.
    pub values: Vec<f64>,
    pub feasible: Vec<bool>,
}

/// Sentinel cost recorded at infeasible lattice points.
pub const INFEASIBLE_COST: f64 = 1e6;

/// Evaluates a cost oracle at every lattice point q_kl of the chart.
///
/// The oracle maps (ν, E) to a cost value plus a feasibility flag;
/// infeasible points receive the sentinel cost.
pub fn resample_costs(
    psi: &SplineSurface,
    tau: f64,
    oracle: &(dyn Fn(f64, f64) -> (f64, bool) + Sync),
) -> Result<ResampledCosts> {
    let basis = CubicBasis::new(tau)?;
    let m = basis.len();
    let mut values = Vec::with_capacity(m * m);
    let mut feasible = Vec::with_capacity(m * m);
    for k in 0..m {
        for l in 0..m {
            let q = [basis.greville(k), basis.greville(l)];
            let (p, _) = psi.eval(q)?;
            let (cost, ok) = oracle(p[0], p[1]);
            values.push(if ok { cost } else { INFEASIBLE_COST });
            feasible.push(ok);
        }
    }
    Ok(ResampledCosts { values, feasible })
}

/// Interpolates lattice values at the Greville points with a scalar spline.
pub fn fit_jref(values: &[f64], tau: f64) -> Result<SplineSurface> {
    let basis = CubicBasis::new(tau)?;
    let m = basis.len();
    if values.len() != m * m {
        return Err(Error::fit(format!(
            "expected {} lattice values, got {}",
            m * m,
            values.len()
        )));
    }
    // 1D collocation matrix at the Greville abscissae.
    let mut b = DMatrix::zeros(m, m);
    for r in 0..m {
        let (first, vals, _, _) = basis.eval(basis.greville(r));
        for i in 0..4 {
            b[(r, first + i)] = vals[i];
        }
    }
    let lu = b.lu();
    // Solve along the second axis, then the first.
    let mut half = DMatrix::zeros(m, m);
    for row in 0..m {
        let rhs = DVector::from_fn(m, |l, _| values[row * m + l]);
        let solution = lu
            .solve(&rhs)
            .ok_or_else(|| Error::fit("singular collocation matrix"))?;
        half.set_row(row, &solution.transpose());
    }
    let mut coeffs = vec![0.0; m * m];
    for col in 0..m {
        let rhs = DVector::from_fn(m, |k, _| half[(k, col)]);
        let solution = lu
            .solve(&rhs)
            .ok_or_else(|| Error::fit("singular collocation matrix"))?;
        for k in 0..m {
            coeffs[k * m + col] = solution[k];
        }
    }
    let surface = SplineSurface {
        tau,
        components: 1,
        coeffs: vec![coeffs],
    };
    // Interpolation sanity at the lattice.
    let mut worst = 0.0f64;
    for k in 0..m {
        for l in 0..m {
            let (value, _) = surface.eval([basis.greville(k), basis.greville(l)])?;
            worst = worst.max((value[0] - values[k * m + l]).abs());
        }
    }
    let scale = values.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    if worst > 1e-10 * scale {
        return Err(Error::fit(format!(
            "lattice interpolation residual {worst:.3e} too large"
        )));
    }
    Ok(surface)
}

/// The persisted chart: Ψ, the anchors it interpolates, the resampled
/// volume and interface lattices, and the combined cost spline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chart {
    pub format_version: u32,
    pub tau: f64,
    pub anchors: Vec<Anchor>,
    /// Row-major control coefficients of Ψ per output component.
    pub psi_coeffs: Vec<Vec<f64>>,
    /// Combined cost values at the lattice (c_V·vol + ĉ_P·mm).
    pub jref_values: Vec<f64>,
    /// Control coefficients of the fitted cost spline.
    pub jref_coeffs: Vec<f64>,
    /// Volume lattice, kept so ĉ_P can change without refitting Ψ.
    pub vol_values: Vec<f64>,
    /// Interface-energy lattice.
    pub mm_values: Vec<f64>,
    pub feasible: Vec<bool>,
    #[serde(rename = "c_V")]
    pub c_v: f64,
    #[serde(rename = "c_P_hat")]
    pub c_p_hat: f64,
}

impl Chart {
    pub fn psi(&self) -> SplineSurface {
        SplineSurface {
            tau: self.tau,
            components: 2,
            coeffs: self.psi_coeffs.clone(),
        }
    }

    pub fn jref(&self) -> SplineSurface {
        SplineSurface {
            tau: self.tau,
            components: 1,
            coeffs: vec![self.jref_coeffs.clone()],
        }
    }

    /// Builds a chart from separately resampled volume and interface
    /// lattices.
    pub fn assemble(
        tau: f64,
        anchors: Vec<Anchor>,
        psi: &SplineSurface,
        vol: &ResampledCosts,
        mm: &ResampledCosts,
        c_v: f64,
        c_p_hat: f64,
    ) -> Result<Chart> {
        let feasible: Vec<bool> = vol
            .feasible
            .iter()
            .zip(&mm.feasible)
            .map(|(a, b)| *a && *b)
            .collect();
        let jref_values: Vec<f64> = vol
            .values
            .iter()
            .zip(&mm.values)
            .zip(&feasible)
            .map(|((v, m), ok)| {
                if *ok {
                    c_v * v + c_p_hat * m
                } else {
                    INFEASIBLE_COST
                }
            })
            .collect();
        let jref = fit_jref(&jref_values, tau)?;
        Ok(Chart {
            format_version: crate::FORMAT_VERSION,
            tau,
            anchors,
            psi_coeffs: psi.coeffs.clone(),
            jref_values,
            jref_coeffs: jref.coeffs[0].clone(),
            vol_values: vol.values.clone(),
            mm_values: mm.values.clone(),
            feasible,
            c_v,
            c_p_hat,
        })
    }

    /// Refits the cost spline for a different interface weight without
    /// touching Ψ.
    pub fn with_weights(&self, c_v: f64, c_p_hat: f64) -> Result<Chart> {
        let vol = ResampledCosts {
            values: self.vol_values.clone(),
            feasible: self.feasible.clone(),
        };
        let mm = ResampledCosts {
            values: self.mm_values.clone(),
            feasible: self.feasible.clone(),
        };
        Chart::assemble(
            self.tau,
            self.anchors.clone(),
            &self.psi(),
            &vol,
            &mm,
            c_v,
            c_p_hat,
        )
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Chart> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("malformed chart: {e}")))
    }
}

/// Default anchors snapped to converged database samples: largest Poisson's
/// ratio at q=(1,0), smallest at q=(0,1), largest Young's modulus at
/// q=(1,1), and an intermediate-ν low-E sample at q=(0,0).
pub fn default_anchors_from_db(db: &Database) -> Result<Vec<Anchor>> {
    let ids = db.converged_ids();
    if ids.len() < 4 {
        return Err(Error::fit(format!(
            "need at least 4 converged samples for default anchors, found {}",
            ids.len()
        )));
    }
    let points: Vec<(usize, f64, f64)> = ids
        .iter()
        .map(|&id| {
            let (nu, e) = db.achieved_nu_e(id)?;
            Ok((id, nu, e))
        })
        .collect::<Result<_>>()?;
    let max_nu = points
        .iter()
        .cloned()
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
        .expect("nonempty");
    let min_nu = points
        .iter()
        .cloned()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
        .expect("nonempty");
    let max_e = points
        .iter()
        .cloned()
        .max_by(|a, b| a.2.partial_cmp(&b.2).expect("finite"))
        .expect("nonempty");
    // Intermediate ν, small E: middle third of the ν range, lowest E there.
    let lo = min_nu.1 + (max_nu.1 - min_nu.1) / 3.0;
    let hi = min_nu.1 + 2.0 * (max_nu.1 - min_nu.1) / 3.0;
    let mid_band: Vec<&(usize, f64, f64)> = points
        .iter()
        .filter(|(id, nu, _)| *nu >= lo && *nu <= hi && *id != max_e.0)
        .collect();
    let low_e = mid_band
        .iter()
        .cloned()
        .min_by(|a, b| a.2.partial_cmp(&b.2).expect("finite"))
        .cloned()
        .unwrap_or_else(|| {
            points
                .iter()
                .filter(|(id, _, _)| *id != max_e.0 && *id != max_nu.0 && *id != min_nu.0)
                .min_by(|a, b| a.2.partial_cmp(&b.2).expect("finite"))
                .cloned()
                .expect("at least four samples")
        });
    Ok(vec![
        Anchor {
            q: [0.0, 0.0],
            p: [low_e.1, low_e.2],
        },
        Anchor {
            q: [1.0, 0.0],
            p: [max_nu.1, max_nu.2],
        },
        Anchor {
            q: [0.0, 1.0],
            p: [min_nu.1, min_nu.2],
        },
        Anchor {
            q: [1.0, 1.0],
            p: [max_e.1, max_e.2],
        },
    ])
}

/// Signs of det DΨ on a 33² grid; false when the sign changes (Ψ folds).
pub fn psi_orientation_consistent(psi: &SplineSurface) -> Result<bool> {
    let mut sign = 0.0f64;
    for i in 0..33 {
        for j in 0..33 {
            let q = [i as f64 / 32.0, j as f64 / 32.0];
            let jac = psi.jacobian(q)?;
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            if det.abs() < 1e-14 {
                continue;
            }
            if sign == 0.0 {
                sign = det.signum();
            } else if det.signum() != sign {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
