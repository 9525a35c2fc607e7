//! Shared oracles and builders for the integration suites.

use twoscale::grid::{CellGrid, NodalField};
use twoscale::spline::{fit_psi, Anchor, Chart, CubicBasis, ResampledCosts};
use twoscale::tensor::{voigt_size, ElasticityTensor};

/// Closed-form effective tensor of a material that varies along the first
/// axis only, with pointwise tensor s(y₁)·C. Everything reduces to the
/// arithmetic and harmonic means of s: with A = ⟨s⟩, H = ⟨1/s⟩⁻¹ and
/// D = A − H, the correctors are a(y) = b_J (H/s(y) − 1) with
/// b_J = (QCP)⁻¹ QC w_J, giving
///     C*_IJ = A (C w_J)·w_I − D [(C P b_J)·w_I + (C w_J)·(P b_I)]
///           + D (C P b_J)·(P b_I).
/// This is the rank-1 lamination formula; for two phases it reproduces the
/// classical harmonic/arithmetic mixing rules.
pub fn laminate_effective(base: &ElasticityTensor, arith: f64, harm: f64) -> ElasticityTensor {
    let dim = base.dim;
    let nv = voigt_size(dim);
    // P maps layer-gradient vectors a ∈ R^d to Voigt strains of sym(e₁⊗a);
    // Q picks the traction slots (σ·e₁) out of a Voigt stress.
    // 2D: a₁ -> slot 0, a₂ -> slot 2. 3D: a₁ -> 0, a₂ -> 5, a₃ -> 4.
    let slots: Vec<usize> = if dim == 2 { vec![0, 2] } else { vec![0, 5, 4] };
    let mut p = vec![0.0; nv * dim];
    for (k, &slot) in slots.iter().enumerate() {
        p[slot * dim + k] = 1.0;
    }
    // M = Q C P (d×d).
    let mut m = nalgebra::DMatrix::zeros(dim, dim);
    for (r, &row_slot) in slots.iter().enumerate() {
        for c in 0..dim {
            let mut acc = 0.0;
            for j in 0..nv {
                acc += base.get(row_slot, j) * p[j * dim + c];
            }
            m[(r, c)] = acc;
        }
    }
    let m_inv = m.try_inverse().expect("laminate acoustic matrix invertible");

    let d_coef = arith - harm;
    let mut c_star = ElasticityTensor::zeros(dim);
    let mut w = vec![vec![0.0; nv]; nv];
    for (slot, row) in w.iter_mut().enumerate() {
        row[slot] = 1.0;
    }
    let mut cw = vec![vec![0.0; nv]; nv];
    let mut pb = vec![vec![0.0; nv]; nv];
    let mut cpb = vec![vec![0.0; nv]; nv];
    for slot in 0..nv {
        base.apply(&w[slot], &mut cw[slot]);
        // b = M⁻¹ Q C w.
        let qcw = nalgebra::DVector::from_fn(dim, |r, _| cw[slot][slots[r]]);
        let b = &m_inv * qcw;
        for j in 0..nv {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += p[j * dim + k] * b[k];
            }
            pb[slot][j] = acc;
        }
        let pb_slot = pb[slot].clone();
        base.apply(&pb_slot, &mut cpb[slot]);
    }
    for i in 0..nv {
        for j in 0..nv {
            let term = arith * cw[j][i]
                - d_coef
                    * (twoscale::sparse::dot(&cpb[j], &w[i])
                        + twoscale::sparse::dot(&cw[j], &pb[i]))
                + d_coef * twoscale::sparse::dot(&cpb[j], &pb[i]);
            c_star.set(i, j, term);
        }
    }
    c_star
}

/// Nodal laminate field: +1 outside [a, b] on the first axis, −1 strictly
/// inside, and the value `w` exactly at the interface nodes a and b.
pub fn laminate_field(grid: CellGrid, a: f64, b: f64, w: f64) -> NodalField {
    let mut v = NodalField::zeros(grid, 1);
    let h = grid.h();
    for node in 0..grid.node_count() {
        let coords = grid.node_coords(node);
        let y = coords[0] as f64 * h;
        let tol = 1e-12;
        v.values[node] = if (y - a).abs() < tol || (y - b).abs() < tol {
            w
        } else if y > a && y < b {
            -1.0
        } else {
            1.0
        };
    }
    v
}

/// Interface node value that makes the diffuse two-cell transition band
/// carry exactly the hard-phase mass of the sharp interface it replaces:
/// the root of ∫χ(1→w) + ∫χ(w→−1) = 1 with χ's antiderivative
/// (1+v)⁵/80 over linear segments. Independent of δ and h.
pub fn mass_balanced_interface_value() -> f64 {
    let chi_int = |v: f64| (1.0 + v).powi(5) / 80.0;
    let avg = |a: f64, b: f64| (chi_int(b) - chi_int(a)) / (b - a);
    let f = |w: f64| avg(1.0, w) + avg(w, -1.0) - 1.0;
    let (mut lo, mut hi) = (-0.99f64, 0.999f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Arithmetic and harmonic means of the stiffness profile of a laminate
/// field, integrated with high-resolution 1D Gauss quadrature per micro
/// interval so the value is exact up to machine precision.
pub fn laminate_means(
    grid: CellGrid,
    v: &NodalField,
    mat: &twoscale::homogenize::MicroMaterial,
) -> (f64, f64) {
    let n = grid.n;
    let h = grid.h();
    // 1D nodal profile along the first axis (the field is y₁-only).
    let profile: Vec<f64> = (0..=n)
        .map(|i| v.values[grid.node_index(&[i, 0][..grid.dim.min(2)])])
        .collect();
    // 16-point Gauss rule per interval, nodes on (0,1).
    let gauss: [(f64, f64); 16] = {
        let mut out = [(0.0, 0.0); 16];
        for (i, slot) in out.iter_mut().enumerate() {
            // Chebyshev initialization + Newton for Legendre roots.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / 16.5).cos();
            for _ in 0..60 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=16 {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = 16.0 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=16 {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = 16.0 * (x * p1 - p0) / (x * x - 1.0);
            *slot = (0.5 * (1.0 - x), 1.0 / ((1.0 - x * x) * dp * dp));
        }
        out
    };
    let mut arith = 0.0;
    let mut harm_inv = 0.0;
    for cell in 0..n {
        let (va, vb) = (profile[cell], profile[cell + 1]);
        for (node, weight) in gauss {
            let value = va + (vb - va) * node;
            let s = mat.stiffness_scale(value);
            arith += weight * h * s;
            harm_inv += weight * h / s;
        }
    }
    (arith, 1.0 / harm_inv)
}

/// Chart mapping the unit square affinely onto a (ν, E) box, with smooth
/// monotone volume and interface lattices.
pub fn synthetic_chart(nu_lo: f64, nu_hi: f64, e_lo: f64, e_hi: f64, c_p_hat: f64) -> Chart {
    let tau = 0.25;
    let map = |q: [f64; 2]| [nu_lo + (nu_hi - nu_lo) * q[0], e_lo + (e_hi - e_lo) * q[1]];
    let anchors: Vec<Anchor> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
        .into_iter()
        .map(|q| Anchor { q, p: map(q) })
        .collect();
    let psi = fit_psi(&anchors, tau).unwrap();
    let basis = CubicBasis::new(tau).unwrap();
    let m = basis.len();
    let mut vol = vec![0.0; m * m];
    let mut mm = vec![0.0; m * m];
    for k in 0..m {
        for l in 0..m {
            let stiff = basis.greville(l);
            let lateral = basis.greville(k);
            vol[k * m + l] = 0.2 + 0.6 * stiff;
            mm[k * m + l] = 2.0 + 1.5 * stiff + 0.2 * lateral;
        }
    }
    let vol = ResampledCosts {
        values: vol,
        feasible: vec![true; m * m],
    };
    let mm = ResampledCosts {
        values: mm,
        feasible: vec![true; m * m],
    };
    Chart::assemble(tau, anchors, &psi, &vol, &mm, 1.0, c_p_hat).unwrap()
}

/// Norm-wise relative error between a finite-difference reference and an
/// analytic gradient.
pub fn gradient_error(fd: &[f64], analytic: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut scale: f64 = 0.0;
    for (a, b) in fd.iter().zip(analytic) {
        diff += (a - b) * (a - b);
        scale += a * a;
    }
    (diff.sqrt()) / scale.sqrt().max(1e-14)
}
