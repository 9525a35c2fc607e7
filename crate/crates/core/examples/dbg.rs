use twoscale::dbase::*;
use twoscale::grid::*;
use twoscale::homogenize::*;
use twoscale::phasefield::*;
use twoscale::tensor::*;

fn main() {
    let grid = build_grid(2, 8).unwrap();
    let base = iso_from_nu_e(0.25, 10.0, 2).unwrap();
    let mat = MicroMaterial::new(base, 1e-2).unwrap();
    let spec = BridgeSpec { variant: BridgeVariant::Midfaces, width: 0.25, sigma: 2.0 * grid.h() };
    let masks = bridge_masks(&grid, &spec).unwrap();
    for plateaus in [[0.8, 0.4, 0.0, -0.4], [0.8, 0.5, 0.2, -0.1], [0.9, 0.6, 0.3, 0.0]] {
        let targets: Vec<(f64,f64)> = plateaus.iter().map(|&p| {
            let mut v = NodalField::constant(grid, 1, p);
            masks.apply(&mut v);
            effective_tensor_of(grid, &v, &mat, 1e-10).unwrap().isotropic_nu_e().unwrap()
        }).collect();
        let mut plan = plan_samples(&base, 1e-2, spec, 2, grid,
            CostWeights::new(1.0, 0.05, 1e-3).unwrap(), 11).unwrap();
        plan.targets = targets.clone();
        let db = build_database(&plan, 4).unwrap();
        let statuses: Vec<_> = db.manifest.samples.iter().map(|s| format!("{:?}", s.status)).collect();
        println!("{plateaus:?} -> {statuses:?}");
        for t in &targets { print!("({:.3},{:.3}) ", t.0, t.1); }
        println!();
    }
}
