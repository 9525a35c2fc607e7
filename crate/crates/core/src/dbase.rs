//! Offline microcell database: plan (ν, E) targets inside the
//! Hashin–Shtrikman triangle, run cell optimizations in parallel, repair
//! disconnected samples from their neighbors, and persist everything
//! bit-exactly as `manifest.json` plus raw `fields/<id>.f64` files.

use crate::cellopt::{random_init, reinit_from_neighbors, solve_cell, CellProblem, CellStatus};
use crate::error::{Error, Result};
use crate::grid::{build_grid, CellGrid, NodalField};
use crate::homogenize::{effective_tensor_of, MicroMaterial};
use crate::nlp::NlpSettings;
use crate::phasefield::{bridge_masks, BridgeSpec, BridgeVariant, CostWeights};
use crate::tensor::{hs_contains, hs_upper, iso_from_nu_e, ElasticityTensor, IsoParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

/// Everything needed to build one database.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub grid: CellGrid,
    pub base: IsoParams,
    pub delta: f64,
    pub weights: CostWeights,
    pub bridge: BridgeSpec,
    pub sigma: f64,
    pub targets: Vec<(f64, f64)>,
    pub seed: u64,
    pub nlp: NlpSettings,
    pub corrector_tol: f64,
    pub fixed_theta: Option<f64>,
}

/// Barycentric lattice of (ν, E) targets over the θ_s = 1 bound triangle.
///
/// The lattice has resolution(resolution+1)/2 points; points below th
/// Young's modulus floor 0.01 E_base are pulled toward the apex along their
/// barycentric ray so every planned target stays inside the triangle.
pub fn plan_targets(base: &IsoParams, delta: f64, resolution: usize) -> Result<Vec<(f64, f64)>> {
    if resolution < 2 {
        return Err(Error::domain(format!(
            "plan resolution must be at least 2, got {resolution}"
        )));
    }
    let bounds = hs_upper(1.0, base, delta)?;
    let [v0, v1, apex] = bounds.triangle;
    let e_floor = 0.01 * base.e;
    let b_min = e_floor / apex.1;
    let steps = (resolution - 1) as f64;
    let mut targets = Vec::new();
    for i in 0..resolution {
        for j in 0..resolution - i {
            let k = resolution - 1 - i - j;
            let mut b = [i as f64 / steps, j as f64 / steps, k as f64 / steps];
            if b[2] < b_min {
                let scale = (1.0 - b_min) / (1.0 - b[2]);
                b[0] *= scale;
                b[1] *= scale;
                b[2] = b_min;
            }
            targets.push((
                b[0] * v0.0 + b[1] * v1.0 + b[2] * apex.0,
                b[0] * v0.1 + b[1] * v1.1 + b[2] * apex.1,
            ));
        }
    }
    Ok(targets)
}

/// Builds a plan over the barycentric target lattice with the toolkit
/// defaults for solver settings.
pub fn plan_samples(
    base: &IsoParams,
    delta: f64,
    bridge: BridgeSpec,
    resolution: usize,
    grid: CellGrid,
    weights: CostWeights,
    seed: u64,
) -> Result<SamplePlan> {
    let targets = plan_targets(base, delta, resolution)?;
    Ok(SamplePlan {
        grid,
        base: *base,
        delta,
        weights,
        bridge,
        sigma: bridge.sigma,
        targets,
        seed,
        nlp: NlpSettings::default(),
        corrector_tol: 1e-10,
        fixed_theta: None,
    })
}

/// Plan description as read from a `plan.json` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub dim: usize,
    pub n: usize,
    /// Interface width; defaults to 2h.
    #[serde(default)]
    pub sigma: Option<f64>,
    pub base: BaseJson,
    pub delta: f64,
    pub weights: WeightsJson,
    pub bridge: BridgeJson,
    #[serde(default)]
    pub resolution: Option<usize>,
    /// Explicit targets override the barycentric lattice.
    #[serde(default)]
    pub targets: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub nlp: Option<NlpSettings>,
    #[serde(default)]
    pub corrector_tol: Option<f64>,
    #[serde(default)]
    pub fixed_theta: Option<f64>,
}

impl PlanFile {
    pub fn read(path: &std::path::Path) -> Result<PlanFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("malformed plan: {e}")))
    }

    pub fn into_plan(self) -> Result<SamplePlan> {
        let grid = build_grid(self.dim, self.n)?;
        let base = iso_from_nu_e(self.base.nu, self.base.e, self.dim)?;
        let sigma = self.sigma.unwrap_or(2.0 * grid.h());
        let bridge = BridgeSpec {
            variant: self.bridge.variant,
            width: self.bridge.width,
            sigma,
        };
        let weights = CostWeights::new(self.weights.c_v, self.weights.c_p, self.weights.c_p_hat)?;
        let targets = match self.targets {
            Some(explicit) => explicit,
            None => {
                let resolution = self.resolution.ok_or_else(|| {
                    Error::format("plan needs either explicit targets or a resolution")
                })?;
                plan_targets(&base, self.delta, resolution)?
            }
        };
        Ok(SamplePlan {
            grid,
            base,
            delta: self.delta,
            weights,
            bridge,
            sigma,
            targets,
            seed: self.seed,
            nlp: self.nlp.unwrap_or_default(),
            corrector_tol: self.corrector_tol.unwrap_or(1e-10),
            fixed_theta: self.fixed_theta,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseJson {
    pub nu: f64,
    #[serde(rename = "E")]
    pub e: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsJson {
    #[serde(rename = "c_V")]
    pub c_v: f64,
    #[serde(rename = "c_P")]
    pub c_p: f64,
    #[serde(rename = "c_P_hat")]
    pub c_p_hat: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeJson {
    pub variant: BridgeVariant,
    pub width: f64,
}

/// One sample entry of the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub target_nu: f64,
    #[serde(rename = "target_E")]
    pub target_e: f64,
    /// Row-major upper triangle of the achieved Voigt tensor.
    pub voigt: Vec<f64>,
    pub volume: f64,
    /// Interface energy L^σ of the stored field.
    pub mm_energy: f64,
    pub cost_j: f64,
    pub status: CellStatus,
    pub seed: u64,
    /// Field file path relative to the database directory.
    pub field: String,
}

/// Outcome of one repair attempt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairRecord {
    pub id: usize,
    pub replaced: bool,
}

/// The persisted database manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dim: usize,
    pub n: usize,
    pub sigma: f64,
    pub delta: f64,
    pub base: BaseJson,
    pub weights: WeightsJson,
    pub bridge: BridgeJson,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repairs: Option<Vec<RepairRecord>>,
}

/// In-memory database: manifest plus one field per sample.
#[derive(Debug, Clone)]
pub struct Database {
    pub manifest: Manifest,
    pub fields: Vec<NodalField>,
}

impl Database {
    pub fn grid(&self) -> Result<CellGrid> {
        build_grid(self.manifest.dim, self.manifest.n)
    }

    pub fn material(&self) -> Result<MicroMaterial> {
        let base = iso_from_nu_e(self.manifest.base.nu, self.manifest.base.e, self.manifest.dim)?;
        MicroMaterial::new(base, self.manifest.delta)
    }

    pub fn bridge_spec(&self) -> BridgeSpec {
        BridgeSpec {
            variant: self.manifest.bridge.variant,
            width: self.manifest.bridge.width,
            sigma: self.manifest.sigma,
        }
    }

    pub fn weights(&self) -> Result<CostWeights> {
        CostWeights::new(
            self.manifest.weights.c_v,
            self.manifest.weights.c_p,
            self.manifest.weights.c_p_hat,
        )
    }

    /// Achieved (ν, E) of a sample via the isotropic projection.
    pub fn achieved_nu_e(&self, id: usize) -> Result<(f64, f64)> {
        let record = &self.manifest.samples[id];
        let tensor = ElasticityTensor::from_upper_triangle(self.manifest.dim, &record.voigt)?;
        tensor.isotropic_nu_e()
    }

    /// Ids of converged (connected) samples.
    pub fn converged_ids(&self) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.status == CellStatus::Converged)
            .map(|s| s.id)
            .collect()
    }
}

fn cell_problem(plan: &SamplePlan, id: usize) -> Result<CellProblem> {
    let (nu, e) = plan.targets[id];
    let target_iso = iso_from_nu_e(nu, e, plan.grid.dim)?;
    Ok(CellProblem {
        grid: plan.grid,
        mat: MicroMaterial::new(plan.base, plan.delta)?,
        target: crate::tensor::tensor_from_iso(&target_iso),
        weights: plan.weights,
        bridge: plan.bridge,
        sigma: plan.sigma,
        nlp: plan.nlp,
        corrector_tol: plan.corrector_tol,
        seed: plan.seed.wrapping_add(id as u64),
        fixed_theta: plan.fixed_theta,
    })
}

/// Runs every planned sample, `jobs` at a time. Individual failures are
/// recorded as infeasible and never abort the batch.
pub fn build_database(plan: &SamplePlan, jobs: usize) -> Result<Database> {
    let masks = bridge_masks(&plan.grid, &plan.bridge)?;
    let ids: Vec<usize> = (0..plan.targets.len()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::structure(format!("thread pool: {e}")))?;
    let results: Vec<(SampleRecord, NodalField)> = pool.install(|| {
        ids.par_iter()
            .map(|&id| sample_with_field(plan, id, &masks, None))
            .collect()
    });

    Ok(Database {
        manifest: Manifest {
            format_version: crate::FORMAT_VERSION,
            dim: plan.grid.dim,
            n: plan.grid.n,
            sigma: plan.sigma,
            delta: plan.delta,
            base: BaseJson {
                nu: plan.base.nu,
                e: plan.base.e,
            },
            weights: WeightsJson {
                c_v: plan.weights.c_v,
                c_p: plan.weights.c_p,
                c_p_hat: plan.weights.c_p_hat,
            },
            bridge: BridgeJson {
                variant: plan.bridge.variant,
                width: plan.bridge.width,
            },
            samples: results.iter().map(|(r, _)| r.clone()).collect(),
            repairs: None,
        },
        fields: results.into_iter().map(|(_, f)| f).collect(),
    })
}

fn sample_with_field(
    plan: &SamplePlan,
    id: usize,
    masks: &crate::phasefield::BridgeMasks,
    init: Option<&NodalField>,
) -> (SampleRecord, NodalField) {
    let problem = match cell_problem(plan, id) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("sample {id}: invalid target ({e}); recorded infeasible");
            let field = NodalField::constant(plan.grid, 1, -1.0);
            return (infeasible_record(plan, id, &field), field);
        }
    };
    let default_init;
    let init = match init {
        Some(f) => f,
        None => {
            default_init = random_init(&problem, masks);
            &default_init
        }
    };
    let start = Instant::now();
    match solve_cell(&problem, init) {
        Ok(result) => {
            log::info!(
                "sample {id}: {:?}, |g| = {:.3e}, {} inner iterations, {:.2} s",
                result.status,
                result.constraint_norm,
                result.iterations,
                start.elapsed().as_secs_f64()
            );
            let record = SampleRecord {
                id,
                target_nu: plan.targets[id].0,
                target_e: plan.targets[id].1,
                voigt: result.c_star.upper_triangle(),
                volume: result.volume,
                mm_energy: result.perimeter_mm,
                cost_j: result.cost_j,
                status: result.status,
                seed: plan.seed.wrapping_add(id as u64),
                field: format!("fields/{id}.f64"),
            };
            (record, result.v_star)
        }
        Err(e) => {
            log::warn!("sample {id}: solver failure ({e}); recorded infeasible");
            let field = init.clone();
            (infeasible_record(plan, id, &field), field)
        }
    }
}

fn infeasible_record(plan: &SamplePlan, id: usize, field: &NodalField) -> SampleRecord {
    let volume = crate::phasefield::volume_term(&plan.grid, field);
    let mm = crate::phasefield::modica_mortola(&plan.grid, field, plan.sigma);
    SampleRecord {
        id,
        target_nu: plan.targets[id].0,
        target_e: plan.targets[id].1,
        voigt: vec![0.0; crate::tensor::voigt_upper_len(plan.grid.dim)],
        volume,
        mm_energy: mm,
        cost_j: plan.weights.c_v * volume + plan.weights.c_p_hat * mm,
        status: CellStatus::Infeasible,
        seed: plan.seed.wrapping_add(id as u64),
        field: format!("fields/{id}.f64"),
    }
}

/// Scale-normalized distance in the (ν, E) plane.
fn normalized_distance(a: (f64, f64), b: (f64, f64), nu_range: f64, e_range: f64) -> f64 {
    let dn = (a.0 - b.0) / nu_range;
    let de = (a.1 - b.1) / e_range;
    (dn * dn + de * de).sqrt()
}

/// Re-solves disconnected records from convex combinations of nearby
/// connected fields; a record is replaced only when the re-solve converges
/// connected without worsening the cost by more than 5%.
pub fn repair_disconnected(db: &Database, plan: &SamplePlan) -> Result<Database> {
    let mut out = db.clone();
    let disconnected: Vec<usize> = db
        .manifest
        .samples
        .iter()
        .filter(|s| s.status == CellStatus::Disconnected)
        .map(|s| s.id)
        .collect();
    if disconnected.is_empty() {
        return Ok(out);
    }
    let masks = bridge_masks(&plan.grid, &plan.bridge)?;
    let connected = db.converged_ids();
    let nu_range = db
        .manifest
        .samples
        .iter()
        .map(|s| s.target_nu)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let e_range = db
        .manifest
        .samples
        .iter()
        .map(|s| s.target_e)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let nu_span = (nu_range.1 - nu_range.0).max(1e-12);
    let e_span = (e_range.1 - e_range.0).max(1e-12);

    let mut repairs = Vec::new();
    for id in disconnected {
        if connected.is_empty() {
            repairs.push(RepairRecord {
                id,
                replaced: false,
            });
            continue;
        }
        let here = (
            db.manifest.samples[id].target_nu,
            db.manifest.samples[id].target_e,
        );
        let mut ranked: Vec<(f64, usize)> = connected
            .iter()
            .map(|&cid| {
                let there = (
                    db.manifest.samples[cid].target_nu,
                    db.manifest.samples[cid].target_e,
                );
                (normalized_distance(here, there, nu_span, e_span), cid)
            })
            .collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let take = ranked.len().min(3);
        let inv: Vec<f64> = ranked[..take].iter().map(|(d, _)| 1.0 / (d + 1e-9)).collect();
        let total: f64 = inv.iter().sum();
        let neighbors: Vec<(&NodalField, f64)> = ranked[..take]
            .iter()
            .zip(&inv)
            .map(|((_, cid), w)| (&db.fields[*cid], w / total))
            .collect();
        let init = reinit_from_neighbors(&neighbors, &masks)?;
        let (record, field) = sample_with_field(plan, id, &masks, Some(&init));
        let old_cost = db.manifest.samples[id].cost_j;
        let replace = record.status == CellStatus::Converged
            && record.cost_j <= old_cost * 1.05 + 1e-12;
        if replace {
            out.manifest.samples[id] = record;
            out.fields[id] = field;
        }
        repairs.push(RepairRecord { id, replaced: replace });
        log::info!("repair of sample {id}: replaced = {replace}");
    }
    out.manifest.repairs = Some(repairs);
    Ok(out)
}

/// Writes `manifest.json` and the raw field files under `dir`.
pub fn write_database(db: &Database, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("fields"))?;
    let manifest = serde_json::to_string_pretty(&db.manifest)?;
    std::fs::write(dir.join("manifest.json"), manifest.as_bytes())?;
    for (record, field) in db.manifest.samples.iter().zip(&db.fields) {
        let mut bytes = Vec::with_capacity(field.values.len() * 8);
        for value in &field.values {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        let mut file = std::fs::File::create(dir.join(&record.field))?;
        file.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads a database directory, checking the field file sizes.
pub fn read_database(dir: &Path) -> Result<Database> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("malformed manifest: {e}")))?;
    let grid = build_grid(manifest.dim, manifest.n)?;
    let expected = grid.node_count();
    let mut fields = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let path = dir.join(&record.field);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .map_err(|e| {
                Error::format(format!(
                    "sample {}: missing field file {} ({e})",
                    record.id,
                    path.display()
                ))
            })?
            .read_to_end(&mut bytes)?;
        if bytes.len() != expected * 8 {
            return Err(Error::format(format!(
                "sample {}: field file {} holds {} bytes, expected {}",
                record.id,
                path.display(),
                bytes.len(),
                expected * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        fields.push(NodalField::from_values(grid, 1, values)?);
    }
    Ok(Database { manifest, fields })
}

/// Verification report of a database.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub samples_checked: usize,
    pub worst_deviation: f64,
    pub failures: Vec<usize>,
    pub hs_violations: Vec<usize>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.hs_violations.is_empty()
    }
}

/// Re-homogenizes every converged stored field and checks the achieved
/// tensors against the manifest (tolerance 1e−6 componentwise) plus the
/// Hashin–Shtrikman triangle membership with barycentric tolerance 0.02.
pub fn verify_database(db: &Database) -> Result<VerifyReport> {
    let grid = db.grid()?;
    let mat = db.material()?;
    let base = iso_from_nu_e(db.manifest.base.nu, db.manifest.base.e, db.manifest.dim)?;
    let bounds = hs_upper(1.0, &base, db.manifest.delta)?;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut hs_violations = Vec::new();
    let mut checked = 0;
    for (record, field) in db.manifest.samples.iter().zip(&db.fields) {
        if record.status == CellStatus::Infeasible {
            continue;
        }
        checked += 1;
        let c_star = effective_tensor_of(grid, field, &mat, 1e-10)?;
        let recomputed = c_star.upper_triangle();
        let deviation = recomputed
            .iter()
            .zip(&record.voigt)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(deviation);
        if deviation > 1e-6 {
            failures.push(record.id);
        }
        if record.status == CellStatus::Converged {
            let (nu, e) = c_star.isotropic_nu_e()?;
            if !hs_contains((nu, e), &bounds, 0.02) {
                hs_violations.push(record.id);
            }
        }
    }
    Ok(VerifyReport {
        samples_checked: checked,
        worst_deviation: worst,
        failures,
        hs_violations,
    })
}
