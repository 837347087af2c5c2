//! Independent checks of the linearized model against forward solves.

use std::f64::consts::PI;

use mfeit::experiment::{run_experiment, ExperimentConfig};
use mfeit::forward::{
    reference_solutions, reference_solutions_continuum, trig_current_patterns, BoundaryFlux, CemSolver,
    ConductivityField, ContinuumSolver,
};
use mfeit::linearize::{assemble_data_cem, assemble_data_continuum, assemble_sensitivity, pair_index, CentroidTransfer};
use mfeit::mesh::{build_disk_mesh, place_electrodes, Boundary, Mesh};
use mfeit::phantom::{deformed_truth, simulate_sweep, Inclusion, PhantomSpec, Rect};
use mfeit::spectral::{Profile, SpectralModel};
use nalgebra::DMatrix;

const S1: [f64; 3] = [0.5, 0.75, 1.0];

fn one_inclusion(contrast: f64) -> PhantomSpec {
    PhantomSpec {
        inclusions: vec![Inclusion {
            shape: Rect::square([0.3, 0.2], 0.2),
            k: 1,
            contrast,
        }],
        spectral: SpectralModel {
            profiles: vec![Profile::Poly(vec![1.0, 0.5]), Profile::Table(S1.to_vec())],
            frequencies: vec![0.0, 0.5, 1.0],
        },
        domain: Boundary::Disk { radius: 1.0 },
        electrode_offsets: Vec::new(),
    }
}

/// `M A S` with `A` the indicator of the inclusion on `mesh` elements.
fn linear_prediction(m: &DMatrix<f64>, mesh: &Mesh, spec: &PhantomSpec) -> DMatrix<f64> {
    let inc = &spec.inclusions[0];
    let a = nalgebra::DVector::from_fn(mesh.num_elements(), |l, _| {
        if inc.shape.contains(mesh.centroid(l)) {
            inc.contrast
        } else {
            0.0
        }
    });
    let ma = m * a;
    DMatrix::from_fn(ma.len(), 3, |j, q| ma[j] * spec.spectral.value(1, q))
}

struct CemSetup {
    mesh: Mesh,
    m: DMatrix<f64>,
    refs: Vec<Vec<f64>>,
    patterns: Vec<Vec<f64>>,
    layout: mfeit::mesh::ElectrodeLayout,
}

fn cem_setup(h: f64) -> CemSetup {
    let mut mesh = build_disk_mesh(1.0, h).unwrap();
    let layout = place_electrodes(&mut mesh, 16, PI / 16.0, &[]).unwrap().with_contact(vec![1.0; 16]).unwrap();
    let patterns = trig_current_patterns(16).unwrap();
    let sols = reference_solutions(&mesh, &layout, &layout.contact, &patterns).unwrap();
    let potentials: Vec<Vec<f64>> = sols.iter().map(|s| s.u.clone()).collect();
    let transfer = CentroidTransfer::new(&mesh, &mesh).unwrap();
    let m = assemble_sensitivity(&mesh, &potentials, &transfer).unwrap();
    let refs = sols.into_iter().map(|s| s.voltages).collect();
    CemSetup { mesh, m, refs, patterns, layout }
}

fn cem_data(setup: &CemSetup, spec: &PhantomSpec) -> DMatrix<f64> {
    let sweep = simulate_sweep(spec, &setup.mesh, &setup.layout, &setup.patterns, 0.0, 0).unwrap();
    assert_eq!(sweep.noisy, sweep.clean);
    assemble_data_cem(&sweep.noisy, &setup.refs, &setup.patterns, &spec.spectral.background()).unwrap()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn cem_data_matches_linear_model_at_small_contrast() {
    let setup = cem_setup(0.06);
    let spec = one_inclusion(0.1);
    let x = cem_data(&setup, &spec);
    let pred = linear_prediction(&setup.m, &setup.mesh, &spec);
    let r = rel(&x, &pred);
    assert!(r < 0.15, "relative residual {r}");
}

#[test]
fn doubling_a_small_contrast_doubles_the_data() {
    let setup = cem_setup(0.08);
    let x1 = cem_data(&setup, &one_inclusion(0.025));
    let x2 = cem_data(&setup, &one_inclusion(0.05));
    let r = rel(&x2, &(&x1 * 2.0));
    assert!(r < 0.05, "deviation from linearity {r}");
}

#[test]
fn whole_conductivity_scaling_scales_the_data() {
    // sigma -> c sigma and z -> z / c for every profile scales U by 1/c and X by c
    let setup = cem_setup(0.1);
    let base = one_inclusion(0.3);
    let x1 = cem_data(&setup, &base);
    for c in [0.5, 2.0, 4.0] {
        let mut scaled = base.clone();
        scaled.spectral.profiles = vec![Profile::Poly(vec![c, 0.5 * c]), Profile::Table(S1.iter().map(|s| s * c).collect())];
        let xc = cem_data(&setup, &scaled);
        assert!(rel(&xc, &(&x1 * c)) < 1e-12);
    }
}

fn continuum_data(mesh: &Mesh, spec: &PhantomSpec, fluxes: &[BoundaryFlux], refs: &[Vec<f64>]) -> DMatrix<f64> {
    let inc = &spec.inclusions[0];
    let s0 = spec.spectral.background();
    let measured: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|q| {
            let sigma = ConductivityField::new(
                (0..mesh.num_elements())
                    .map(|l| {
                        let d = if inc.shape.contains(mesh.centroid(l)) { inc.contrast } else { 0.0 };
                        s0[q] + d * spec.spectral.value(1, q)
                    })
                    .collect(),
            )
            .unwrap();
            let solver = ContinuumSolver::new(mesh, &sigma).unwrap();
            fluxes.iter().map(|f| solver.solve(mesh, f).unwrap()).collect()
        })
        .collect();
    assemble_data_continuum(mesh, &measured, refs, fluxes, &s0).unwrap()
}

#[test]
fn continuum_data_is_reciprocal_and_linear() {
    let mesh = build_disk_mesh(1.0, 0.05).unwrap();
    let fluxes: Vec<BoundaryFlux> = (1..=4)
        .flat_map(|n| {
            let n = n as f64;
            [
                BoundaryFlux::from_fn(&mesh, move |t| (n * t).cos()),
                BoundaryFlux::from_fn(&mesh, move |t| (n * t).sin()),
            ]
        })
        .collect();
    let refs = reference_solutions_continuum(&mesh, &fluxes).unwrap();
    let spec = one_inclusion(0.1);
    let x = continuum_data(&mesh, &spec, &fluxes, &refs);
    let np = fluxes.len();
    for q in 0..3 {
        let scale = x.column(q).amax();
        for a in 0..np {
            for b in 0..np {
                let d = x[(pair_index(np, a, b), q)] - x[(pair_index(np, b, a), q)];
                assert!(d.abs() <= 1e-6 * scale, "({a},{b}) at q={q}: {d:e}");
            }
        }
    }
    let transfer = CentroidTransfer::new(&mesh, &mesh).unwrap();
    let m = assemble_sensitivity(&mesh, &refs, &transfer).unwrap();
    let r = rel(&x, &linear_prediction(&m, &mesh, &spec));
    assert!(r < 0.15, "relative residual {r}");
}

#[test]
fn deformed_boundary_shows_up_in_the_data() {
    let spec = PhantomSpec {
        inclusions: Vec::new(),
        domain: Boundary::Ellipse { a: 1.2, b: 0.8 },
        ..one_inclusion(0.0)
    };
    let patterns = trig_current_patterns(16).unwrap();
    let (truth, truth_layout) = deformed_truth(&spec, 0.05, 16, PI / 16.0, &[1.0; 16]).unwrap();
    let sweep = simulate_sweep(&spec, &truth, &truth_layout, &patterns, 0.0, 0).unwrap();
    let setup = cem_setup(0.1);
    let x = assemble_data_cem(&sweep.noisy, &setup.refs, &patterns, &spec.spectral.background()).unwrap();

    // the same pipeline on the nominal disk is at solver precision
    let nominal = PhantomSpec { domain: Boundary::Disk { radius: 1.0 }, ..spec.clone() };
    let flat = cem_data(&setup, &nominal);
    assert!(flat.amax() < 1e-9);
    assert!(x.amax() > 1e-2, "{}", x.amax());

    // and dwarfs the data of a contrast-1 inclusion on the true disk
    let inclusion = cem_data(&setup, &one_inclusion(1.0));
    assert!(x.norm() > inclusion.norm(), "{} vs {}", x.norm(), inclusion.norm());
}

#[test]
fn cem_homogeneous_scaling_matches_unit_background() {
    let setup = cem_setup(0.1);
    let nn = setup.mesh.num_elements();
    for s0 in [0.5, 3.0] {
        let z = vec![1.0 / s0; 16];
        let solver = CemSolver::new(&setup.mesh, &setup.layout, &ConductivityField::uniform(nn, s0), &z).unwrap();
        for (p, v) in setup.patterns.iter().zip(&setup.refs) {
            let u = solver.solve(p).unwrap().voltages;
            let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (a, b) in u.iter().zip(v) {
                assert!((a * s0 - b).abs() <= 1e-11 * scale);
            }
        }
    }
}

#[test]
fn null_experiment_recovers_nothing() {
    let cfg = ExperimentConfig::from_json(
        r#"{
            "phantom": {
                "inclusions": [],
                "spectral": {"profiles": [{"poly": [1.0]}, {"poly": [0.1, 0.1]}, {"poly": [0.0, 0.2]}],
                             "frequencies": [0.0, 0.5, 1.0]}
            },
            "h_inv": 0.127,
            "noise": 0.0
        }"#,
    )
    .unwrap();
    let (report, _) = run_experiment(&cfg).unwrap();
    for r in &report.recoveries {
        let max = r.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-6, "{}: {max:e}", r.label);
    }
}
