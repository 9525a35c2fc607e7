//! Command-line frontend of the two-scale shape optimization toolkit.

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::process::ExitCode;
use twoscale::assemble::{
    bridge_compatibility_scan, cost_identity_check, export_pgm, export_stl, export_vtk, realize,
};
use twoscale::cellopt::{random_init, solve_cell, CellProblem, CellStatus};
use twoscale::dbase::{
    build_database, read_database, repair_disconnected, verify_database, write_database, PlanFile,
};
use twoscale::error::Error;
use twoscale::grid::{build_grid, NodalField};
use twoscale::homogenize::{effective_tensor_of, MicroMaterial};
use twoscale::macroopt::{
    feasible_uniform_init, macro_optimize, DesignFile, MacroFem, MacroProblem,
};
use twoscale::phasefield::bridge_masks;
use twoscale::spline::{
    default_anchors_from_db, fit_psi, Anchor, Chart, CubicBasis, ResampledCosts,
};
use twoscale::tensor::{hs_upper, iso_from_nu_e, tensor_from_iso};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (format version 1)");

#[derive(Parser)]
#[command(name = "twoscale", version = VERSION)]
#[command(about = "Two-scale elastic shape optimization: microcell databases, spline charts, macro optimization, voxel assembly")]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Seed override for randomized subcommands; echoed in JSON outputs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upper Hashin-Shtrikman bounds and the admissible (nu, E) triangle.
    HsTriangle {
        #[arg(long)]
        nu: f64,
        #[arg(long = "E")]
        e: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        theta: f64,
        #[arg(long, default_value_t = 2)]
        dim: usize,
    },
    /// Effective elasticity tensor of a phase-field file.
    Homogenize {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        nu: f64,
        #[arg(long = "E")]
        e: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// One microcell optimization against a target (nu, E).
    CellOpt {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        target_nu: f64,
        #[arg(long = "target-E")]
        target_e: f64,
        /// Initial field file (defaults to a seeded random field).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output field file.
        #[arg(long)]
        field_out: Option<PathBuf>,
    },
    /// Build the microcell database from a plan.
    DbBuild {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Add a fixed stiff-phase volume fraction equality constraint.
        #[arg(long)]
        fixed_theta: Option<f64>,
    },
    /// Re-solve disconnected samples from connected neighbors.
    DbRepair {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a database: stored tensors and bound membership.
    DbVerify { dir: PathBuf },
    /// Fit the B-spline chart over a database.
    ChartFit {
        #[arg(long)]
        db: PathBuf,
        /// Anchor file ({"anchors": [{"q": [..], "p": [..]}, ..]}).
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0625)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        c_v: f64,
        #[arg(long, default_value_t = 0.0)]
        c_p_hat: f64,
        /// Cost resampling: "nearest" interpolates database records,
        /// "full" re-runs the cell optimization per lattice point.
        #[arg(long, default_value = "nearest")]
        resample: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Macroscopic restricted free material optimization.
    MacroOpt {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        chart: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the interface weight of the cost spline.
        #[arg(long)]
        c_p_hat: Option<f64>,
    },
    /// Tile the optimized design with database microcells and export.
    Assemble {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        chart: PathBuf,
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
        /// Fine-scale cell size; defaults to the design's H.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Cost identity and bridge compatibility of a realized design.
    Verify {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        chart: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

fn read_field_file(path: &PathBuf, dim: usize, n: usize) -> Result<NodalField, Error> {
    let grid = build_grid(dim, n)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != grid.node_count() * 8 {
        return Err(Error::format(format!(
            "field file {} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            grid.node_count() * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    NodalField::from_values(grid, 1, values)
}

fn write_field_file(path: &PathBuf, field: &NodalField) -> Result<(), Error> {
    let mut bytes = Vec::with_capacity(field.values.len() * 8);
    for v in &field.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn run(cli: Cli) -> Result<i32, Error> {
    let json = cli.json;
    let seed_echo = cli.seed;
    match cli.command {
        Command::HsTriangle {
            nu,
            e,
            delta,
            theta,
            dim,
        } => {
            let base = iso_from_nu_e(nu, e, dim)?;
            let bounds = hs_upper(theta, &base, delta)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed_echo,
                        "kappa_u": bounds.kappa_u,
                        "mu_u": bounds.mu_u,
                        "triangle": bounds.triangle,
                    })
                );
            } else {
                println!("kappa_u = {:.6}, mu_u = {:.6}", bounds.kappa_u, bounds.mu_u);
                println!(
                    "triangle: ({:.4}, {:.4}) ({:.4}, {:.4}) ({:.4}, {:.4})",
                    bounds.triangle[0].0,
                    bounds.triangle[0].1,
                    bounds.triangle[1].0,
                    bounds.triangle[1].1,
                    bounds.triangle[2].0,
                    bounds.triangle[2].1
                );
            }
            Ok(0)
        }
        Command::Homogenize {
            field,
            dim,
            n,
            nu,
            e,
            delta,
            tol,
        } => {
            let v = read_field_file(&field, dim, n)?;
            let grid = v.grid;
            let mat = MicroMaterial::new(iso_from_nu_e(nu, e, dim)?, delta)?;
            let c_star = effective_tensor_of(grid, &v, &mat, tol)?;
            let (a_nu, a_e) = c_star.isotropic_nu_e()?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed_echo,
                        "voigt": c_star.upper_triangle(),
                        "nu": a_nu,
                        "E": a_e,
                    })
                );
            } else {
                println!(
                    "effective Voigt upper triangle: {:?}",
                    c_star.upper_triangle()
                );
                println!("isotropic projection: nu = {a_nu:.6}, E = {a_e:.6}");
            }
            Ok(0)
        }
        Command::CellOpt {
            plan,
            target_nu,
            target_e,
            init,
            field_out,
        } => {
            let mut plan = PlanFile::read(&plan)?.into_plan()?;
            if let Some(seed) = seed_echo {
                plan.seed = seed;
            }
            let target = tensor_from_iso(&iso_from_nu_e(target_nu, target_e, plan.grid.dim)?);
            let problem = CellProblem {
                grid: plan.grid,
                mat: MicroMaterial::new(plan.base, plan.delta)?,
                target,
                weights: plan.weights,
                bridge: plan.bridge,
                sigma: plan.sigma,
                nlp: plan.nlp,
                corrector_tol: plan.corrector_tol,
                seed: plan.seed,
                fixed_theta: plan.fixed_theta,
            };
            let masks = bridge_masks(&plan.grid, &plan.bridge)?;
            let init_field = match init {
                Some(path) => read_field_file(&path, plan.grid.dim, plan.grid.n)?,
                None => random_init(&problem, &masks),
            };
            let result = solve_cell(&problem, &init_field)?;
            if let Some(path) = field_out {
                write_field_file(&path, &result.v_star)?;
            }
            let (a_nu, a_e) = result
                .c_star
                .isotropic_nu_e()
                .unwrap_or((f64::NAN, f64::NAN));
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": problem.seed,
                        "status": result.status,
                        "constraint_norm": result.constraint_norm,
                        "kkt_residual": result.kkt_residual,
                        "iterations": result.iterations,
                        "volume": result.volume,
                        "mm_energy": result.perimeter_mm,
                        "cost_j": result.cost_j,
                        "voigt": result.c_star.upper_triangle(),
                        "nu": a_nu,
                        "E": a_e,
                    })
                );
            } else {
                println!(
                    "status {:?}: |g| = {:.3e}, kkt = {:.3e}, {} iterations",
                    result.status, result.constraint_norm, result.kkt_residual, result.iterations
                );
                println!(
                    "volume = {:.4}, L^sigma = {:.4}, cost = {:.4}, achieved (nu, E) = ({:.4}, {:.4})",
                    result.volume, result.perimeter_mm, result.cost_j, a_nu, a_e
                );
            }
            Ok(if result.status == CellStatus::Infeasible {
                2
            } else {
                0
            })
        }
        Command::DbBuild {
            plan,
            out,
            jobs,
            fixed_theta,
        } => {
            let mut plan = PlanFile::read(&plan)?.into_plan()?;
            if let Some(seed) = seed_echo {
                plan.seed = seed;
            }
            if fixed_theta.is_some() {
                plan.fixed_theta = fixed_theta;
            }
            let db = build_database(&plan, jobs)?;
            write_database(&db, &out)?;
            let converged = db.converged_ids().len();
            let total = db.manifest.samples.len();
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": plan.seed,
                        "samples": total,
                        "converged": converged,
                        "out": out,
                    })
                );
            } else {
                println!(
                    "built {total} samples ({converged} converged) into {}",
                    out.display()
                );
            }
            Ok(0)
        }
        Command::DbRepair { db, plan, out } => {
            let database = read_database(&db)?;
            let plan = PlanFile::read(&plan)?.into_plan()?;
            let repaired = repair_disconnected(&database, &plan)?;
            write_database(&repaired, &out)?;
            let replaced = repaired
                .manifest
                .repairs
                .as_ref()
                .map(|r| r.iter().filter(|x| x.replaced).count())
                .unwrap_or(0);
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed_echo,
                        "repaired": replaced,
                        "out": out,
                    })
                );
            } else {
                println!(
                    "replaced {replaced} disconnected samples into {}",
                    out.display()
                );
            }
            Ok(0)
        }
        Command::DbVerify { dir } => {
            let db = read_database(&dir)?;
            let report = verify_database(&db)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed_echo,
                        "samples_checked": report.samples_checked,
                        "worst_deviation": report.worst_deviation,
                        "failures": report.failures,
                        "hs_violations": report.hs_violations,
                        "passed": report.passed(),
                    })
                );
            } else {
                println!(
                    "checked {} samples, worst deviation {:.3e}, {} failures, {} bound violations",
                    report.samples_checked,
                    report.worst_deviation,
                    report.failures.len(),
                    report.hs_violations.len()
                );
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::ChartFit {
            db,
            anchors,
            tau,
            out,
            c_v,
            c_p_hat,
            resample,
            jobs,
        } => {
            let database = read_database(&db)?;
            let anchor_set: Vec<Anchor> = match anchors {
                Some(path) => {
                    #[derive(serde::Deserialize)]
                    struct AnchorFile {
                        anchors: Vec<Anchor>,
                    }
                    let text = std::fs::read_to_string(&path)?;
                    let file: AnchorFile = serde_json::from_str(&text)
                        .map_err(|e| Error::format(format!("malformed anchors: {e}")))?;
                    file.anchors
                }
                None => default_anchors_from_db(&database)?,
            };
            let psi = fit_psi(&anchor_set, tau)?;
            let basis = CubicBasis::new(tau)?;
            let m = basis.len();
            let mut points = Vec::with_capacity(m * m);
            for k in 0..m {
                for l in 0..m {
                    let q = [basis.greville(k), basis.greville(l)];
                    let (p, _) = psi.eval(q)?;
                    points.push(p);
                }
            }
            let samples: Vec<(f64, f64, bool)> = match resample.as_str() {
                "nearest" => points
                    .iter()
                    .map(|p| nearest_cost(&database, p[0], p[1]))
                    .collect::<Result<_, Error>>()?,
                "full" => {
                    let mat = database.material()?;
                    let bridge = database.bridge_spec();
                    let grid = database.grid()?;
                    let weights = database.weights()?;
                    let sigma = database.manifest.sigma;
                    let pool = rayon::ThreadPoolBuilder::new()
                        .num_threads(jobs.max(1))
                        .build()
                        .map_err(|e| Error::structure(format!("thread pool: {e}")))?;
                    use rayon::prelude::*;
                    pool.install(|| {
                        points
                            .par_iter()
                            .map(|p| {
                                full_cost(&database, mat, bridge, grid, weights, sigma, p[0], p[1])
                            })
                            .collect::<Result<_, Error>>()
                    })?
                }
                other => {
                    return Err(Error::domain(format!(
                        "unknown resample mode {other:?} (expected nearest or full)"
                    )))
                }
            };
            let vol = ResampledCosts {
                values: samples.iter().map(|s| s.0).collect(),
                feasible: samples.iter().map(|s| s.2).collect(),
            };
            let mm = ResampledCosts {
                values: samples.iter().map(|s| s.1).collect(),
                feasible: samples.iter().map(|s| s.2).collect(),
            };
            let chart = Chart::assemble(tau, anchor_set, &psi, &vol, &mm, c_v, c_p_hat)?;
            chart.write(&out)?;
            let folded = !twoscale::spline::psi_orientation_consistent(&psi)?;
            if folded {
                log::warn!("chart map folds: det(D psi) changes sign on the unit square");
            }
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed_echo,
                        "tau": tau,
                        "lattice": m * m,
                        "infeasible_points": samples.iter().filter(|s| !s.2).count(),
                        "folded": folded,
                        "out": out,
                    })
                );
            } else {
                println!(
                    "chart with {}x{} control lattice written to {}",
                    m,
                    m,
                    out.display()
                );
            }
            Ok(0)
        }
        Command::MacroOpt {
            problem,
            chart,
            out,
            c_p_hat,
        } => {
            let problem_bytes = std::fs::read(&problem)?;
            let hash: String = Sha256::digest(&problem_bytes)
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            let macro_problem = MacroProblem::read(&problem)?;
            let chart_data = Chart::read(&chart)?;
            let effective_c_p_hat = c_p_hat.unwrap_or(macro_problem.c_p_hat);
            let chart_data = chart_data.with_weights(chart_data.c_v, effective_c_p_hat)?;
            let vol_h = macro_problem.vol_h;
            let mut fem = MacroFem::new(macro_problem)?;
            let init = feasible_uniform_init(&fem, &chart_data, vol_h)?;
            let mut settings = twoscale::nlp::NlpSettings::default();
            if let Some(target) = vol_h {
                settings.constraint_tol = 1e-6 * target.abs().max(1e-12);
            }
            let result = macro_optimize(&mut fem, &chart_data, &init, &settings)?;
            let file = DesignFile::build(&fem, &chart_data, &result, hash)?;
            file.write(&out)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed_echo,
                        "converged": result.converged,
                        "compliance": result.state.compliance,
                        "tracking": result.state.tracking,
                        "cost_integral": result.cost.cost_integral,
                        "interface_integral": result.cost.interface_integral,
                        "constraint_norm": result.constraint_norm,
                        "out": out,
                    })
                );
            } else {
                println!(
                    "converged = {}, compliance = {:.6}, tracking = {:.6}, cost integral = {:.6}",
                    result.converged,
                    result.state.compliance,
                    result.state.tracking,
                    result.cost.cost_integral
                );
            }
            Ok(if result.converged { 0 } else { 2 })
        }
        Command::Assemble {
            design,
            db,
            chart,
            format,
            out,
            epsilon,
        } => {
            let design = DesignFile::read(&design)?;
            let database = read_database(&db)?;
            let chart = Chart::read(&chart)?;
            let eps = epsilon.unwrap_or(design.h);
            let structure = realize(&design, &database, &chart, eps)?;
            match format.as_str() {
                "pgm" => export_pgm(&structure, &out)?,
                "vtk" => export_vtk(&structure, &out)?,
                "stl" => export_stl(&structure, &out)?,
                other => {
                    return Err(Error::format(format!(
                        "unknown format {other:?} (expected pgm, vtk or stl)"
                    )))
                }
            }
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed_echo,
                        "cells": structure.cells.len(),
                        "voxels": structure.voxel_counts(),
                        "out": out,
                    })
                );
            } else {
                println!(
                    "assembled {} cells into {} ({format})",
                    structure.cells.len(),
                    out.display()
                );
            }
            Ok(0)
        }
        Command::Verify {
            design,
            db,
            chart,
            epsilon,
        } => {
            let design = DesignFile::read(&design)?;
            let database = read_database(&db)?;
            let chart = Chart::read(&chart)?;
            let eps = epsilon.unwrap_or(design.h);
            let structure = realize(&design, &database, &chart, eps)?;
            let weights = database.weights()?;
            let identity = cost_identity_check(&structure, &database, &weights)?;
            let bridge = bridge_compatibility_scan(&structure, &database.bridge_spec())?;
            let passed = identity.relative_mismatch <= 1e-10 && bridge.mismatches == 0;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed_echo,
                        "cost_identity": identity,
                        "bridge_scan": bridge,
                        "passed": passed,
                    })
                );
            } else {
                println!(
                    "cost identity mismatch: {:.3e} relative ({:.3e} absolute)",
                    identity.relative_mismatch, identity.absolute_mismatch
                );
                println!(
                    "bridge scan: {} faces, {} nodes, {} mismatches",
                    bridge.faces_checked, bridge.nodes_checked, bridge.mismatches
                );
            }
            Ok(if passed { 0 } else { 1 })
        }
    }
}

/// Nearest-record cost oracle: volume and interface energy of the closest
/// converged sample in the scale-normalized (ν, E) plane.
fn nearest_cost(
    db: &twoscale::dbase::Database,
    nu: f64,
    e: f64,
) -> Result<(f64, f64, bool), Error> {
    let ids = db.converged_ids();
    if ids.is_empty() {
        return Ok((0.0, 0.0, false));
    }
    let coords: Vec<(usize, f64, f64)> = ids
        .iter()
        .map(|&id| {
            let (a, b) = db.achieved_nu_e(id)?;
            Ok((id, a, b))
        })
        .collect::<Result<_, Error>>()?;
    let nu_span = coords
        .iter()
        .map(|c| c.1)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let e_span = coords
        .iter()
        .map(|c| c.2)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let nu_scale = (nu_span.1 - nu_span.0).max(1e-12);
    let e_scale = (e_span.1 - e_span.0).max(1e-12);
    let best = coords
        .iter()
        .min_by(|a, b| {
            let da = ((a.1 - nu) / nu_scale).powi(2) + ((a.2 - e) / e_scale).powi(2);
            let db_ = ((b.1 - nu) / nu_scale).powi(2) + ((b.2 - e) / e_scale).powi(2);
            da.partial_cmp(&db_).expect("finite")
        })
        .expect("nonempty");
    let record = &db.manifest.samples[best.0];
    Ok((record.volume, record.mm_energy, true))
}

/// Full cost oracle: one microcell optimization warm-started from the
/// nearest database field.
#[allow(clippy::too_many_arguments)]
fn full_cost(
    db: &twoscale::dbase::Database,
    mat: MicroMaterial,
    bridge: twoscale::phasefield::BridgeSpec,
    grid: twoscale::grid::CellGrid,
    weights: twoscale::phasefield::CostWeights,
    sigma: f64,
    nu: f64,
    e: f64,
) -> Result<(f64, f64, bool), Error> {
    let target = match iso_from_nu_e(nu, e, grid.dim) {
        Ok(p) => tensor_from_iso(&p),
        Err(_) => return Ok((0.0, 0.0, false)),
    };
    let problem = CellProblem {
        grid,
        mat,
        target,
        weights,
        bridge,
        sigma,
        nlp: Default::default(),
        corrector_tol: 1e-10,
        seed: 0,
        fixed_theta: None,
    };
    let masks = bridge_masks(&grid, &bridge)?;
    // Warm start from the nearest converged record's stored field.
    let ids = db.converged_ids();
    let init = if ids.is_empty() {
        random_init(&problem, &masks)
    } else {
        let best = ids
            .iter()
            .min_by(|&&a, &&b| {
                let pa = db.achieved_nu_e(a).unwrap_or((f64::MAX, f64::MAX));
                let pb = db.achieved_nu_e(b).unwrap_or((f64::MAX, f64::MAX));
                let da = (pa.0 - nu).powi(2) + (pa.1 - e).powi(2);
                let db_ = (pb.0 - nu).powi(2) + (pb.1 - e).powi(2);
                da.partial_cmp(&db_).expect("finite")
            })
            .copied()
            .expect("nonempty");
        let mut field = db.fields[best].clone();
        masks.apply(&mut field);
        field
    };
    match solve_cell(&problem, &init) {
        Ok(result) if result.status != CellStatus::Infeasible => {
            Ok((result.volume, result.perimeter_mm, true))
        }
        _ => Ok((0.0, 0.0, false)),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Solver { .. } => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
