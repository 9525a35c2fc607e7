//! Compressed sparse row matrices and a preconditioned conjugate gradient
//! solver with kernel projection.

use crate::error::{Error, Result};

/// Square CSR matrix over free degrees of freedom.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub symmetric: bool,
}

impl SparseOperator {
    /// Builds a CSR matrix from (row, col, value) triplets, summing
    /// duplicates. Triplet order does not affect the result.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_counts = vec![0usize; n + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut last = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_counts[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_counts[i + 1] += row_counts[i];
        }
        SparseOperator {
            n,
            row_ptr: row_counts,
            col_idx,
            values,
            symmetric: false,
        }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            out[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] == r {
                    diag[r] = self.values[k];
                }
            }
        }
        diag
    }

    /// Largest absolute asymmetry max |A_ij - A_ji|; expensive, test use.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let mut mirror = 0.0;
                for m in self.row_ptr[c]..self.row_ptr[c + 1] {
                    if self.col_idx[m] == r {
                        mirror = self.values[m];
                    }
                }
                worst = worst.max((self.values[k] - mirror).abs());
            }
        }
        worst
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.n];
        self.matvec(x, &mut ax);
        dot(x, &ax)
    }
}

/// Sparsity pattern shared by repeated assemblies, with per-element slot
/// tables so values can be scattered without searching.
#[derive(Debug, Clone)]
pub struct AssemblyPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    /// Value slot for each registered (row, col) query, in registration order.
    pub slots: Vec<u32>,
}

impl AssemblyPattern {
    /// Builds the pattern from the full list of (row, col) pairs that will be
    /// written on every assembly, in the exact order they will be written.
    pub fn build(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut per_row: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(r, c) in pairs {
            per_row[r].push(c);
        }
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::new();
        for (r, cols) in per_row.iter_mut().enumerate() {
            cols.sort_unstable();
            cols.dedup();
            col_idx.extend_from_slice(cols);
            row_ptr[r + 1] = col_idx.len();
        }
        let slots = pairs
            .iter()
            .map(|&(r, c)| {
                let lo = row_ptr[r];
                let hi = row_ptr[r + 1];
                let offset = col_idx[lo..hi].binary_search(&c).expect("registered pair");
                (lo + offset) as u32
            })
            .collect();
        AssemblyPattern {
            n,
            row_ptr,
            col_idx,
            slots,
        }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Creates an all-zero operator over this pattern.
    pub fn zero_operator(&self, symmetric: bool) -> SparseOperator {
        SparseOperator {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: vec![0.0; self.nnz()],
            symmetric,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the components of `x` along each (not necessarily orthonormal,
/// but mutually orthogonal) kernel vector.
fn project_out(x: &mut [f64], kernel: &[Vec<f64>]) {
    for k in kernel {
        let c = dot(x, k) / dot(k, k);
        for (xi, ki) in x.iter_mut().zip(k) {
            *xi -= c * ki;
        }
    }
}

/// Outcome of a conjugate gradient solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Preconditioned conjugate gradients with diagonal preconditioner and
/// kernel projection.
///
/// `A` must be symmetric positive semidefinite with kernel spanned by
/// `nullspace`; the right-hand side is projected onto the orthogonal
/// complement internally and the returned solution is orthogonal to every
/// kernel vector. `x0` provides a warm start.
pub fn solve_spd(
    a: &SparseOperator,
    b: &[f64],
    nullspace: &[Vec<f64>],
    tol: f64,
    x0: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveStats)> {
    let n = a.n;
    if b.len() != n {
        return Err(Error::structure(format!(
            "rhs length {} does not match operator size {n}",
            b.len()
        )));
    }
    let mut rhs = b.to_vec();
    project_out(&mut rhs, nullspace);
    let b_norm = norm(&rhs);
    if b_norm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveStats {
                iterations: 0,
                residual: 0.0,
            },
        ));
    }

    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = match x0 {
        Some(start) if start.len() == n => start.to_vec(),
        _ => vec![0.0; n],
    };
    project_out(&mut x, nullspace);

    let cap = 50 * (n as f64).sqrt() as usize + 1000;
    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    a.matvec(&x, &mut r);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    project_out(&mut r, nullspace);
    let mut residual = norm(&r) / b_norm;
    let mut iterations = 0;

    // Run conjugate gradient cycles on the residual recurrence; every cycle
    // end re-verifies the true residual, so recurrence drift cannot cause a
    // false convergence claim.
    while residual > tol && iterations < cap {
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
        project_out(&mut z, nullspace);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut progressed = false;
        loop {
            a.matvec(&p, &mut ap);
            project_out(&mut ap, nullspace);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            progressed = true;
            iterations += 1;
            let recurrence = norm(&r) / b_norm;
            if recurrence <= tol || iterations >= cap {
                break;
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            project_out(&mut z, nullspace);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        a.matvec(&x, &mut r);
        for i in 0..n {
            r[i] = rhs[i] - r[i];
        }
        project_out(&mut r, nullspace);
        residual = norm(&r) / b_norm;
        if !progressed {
            break;
        }
    }

    project_out(&mut x, nullspace);
    if residual > tol {
        return Err(Error::Solver {
            msg: "conjugate gradients did not converge".into(),
            residual,
            iterations,
        });
    }
    Ok((
        x,
        SolveStats {
            iterations,
            residual,
        },
    ))
}
