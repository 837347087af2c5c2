//! The linearized multifrequency system `M A S = X`.
//!
//! Rows are indexed by ordered pattern pairs, `j = N m + n` (0-based) for the
//! pair `(m, n)`, and both `(m, n)` and `(n, m)` are kept. Columns of `M` are
//! elements of the inversion mesh; columns of `X` are frequencies.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::{BoundaryFlux, ElectrodeCurrents};
use crate::mesh::{Mesh, PointLocator};
use crate::spectral::{decouple, difference_system, SpectralMatrix};

/// Row index of the pattern pair `(m, n)` among `n_patterns^2` rows.
pub fn pair_index(n_patterns: usize, m: usize, n: usize) -> usize {
    n_patterns * m + n
}

/// Inverse of [`pair_index`].
pub fn pair_of(n_patterns: usize, j: usize) -> (usize, usize) {
    (j / n_patterns, j % n_patterns)
}

/// Gradient of a nodal P1 function on element `l`.
pub fn element_gradient(mesh: &Mesh, l: usize, u: &[f64]) -> [f64; 2] {
    let g = mesh.basis_gradients(l);
    let el = mesh.elements()[l];
    let mut out = [0.0; 2];
    for a in 0..3 {
        out[0] += u[el[a]] * g[a][0];
        out[1] += u[el[a]] * g[a][1];
    }
    out
}

/// Maps each element of a source mesh to the target element containing its
/// centroid. Centroids that fall outside the target polygon (near a curved
/// boundary) go to the target element with the nearest centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTransfer {
    pub map: Vec<usize>,
    pub source_areas: Vec<f64>,
    pub target_len: usize,
}

impl CentroidTransfer {
    pub fn new(source: &Mesh, target: &Mesh) -> Result<Self> {
        let locator = PointLocator::new(target);
        let reach = 2.0 * target.max_diameter();
        let mut map = Vec::with_capacity(source.num_elements());
        for l in 0..source.num_elements() {
            let c = source.centroid(l);
            let t = match locator.locate(target, c) {
                Some(t) => t,
                None => {
                    let t = locator.nearest(target, c);
                    let tc = target.centroid(t);
                    if (tc[0] - c[0]).hypot(tc[1] - c[1]) > reach {
                        return Err(Error::Mesh(format!(
                            "source element {l} at ({:.3}, {:.3}) lies outside the target mesh",
                            c[0], c[1]
                        )));
                    }
                    t
                }
            };
            map.push(t);
        }
        Ok(Self {
            map,
            source_areas: source.areas().to_vec(),
            target_len: target.num_elements(),
        })
    }

    /// Area-weighted average of a source element field on each target element.
    /// Target elements that receive no source centroid get zero.
    pub fn average(&self, values: &[f64]) -> Vec<f64> {
        let mut sum = vec![0.0; self.target_len];
        let mut area = vec![0.0; self.target_len];
        for ((&t, &a), &v) in self.map.iter().zip(&self.source_areas).zip(values) {
            sum[t] += a * v;
            area[t] += a;
        }
        sum.iter()
            .zip(&area)
            .map(|(s, a)| if *a > 0.0 { s / a } else { 0.0 })
            .collect()
    }

    /// Target element value sampled at each source element.
    pub fn pull_back(&self, target_values: &[f64]) -> Vec<f64> {
        self.map.iter().map(|&t| target_values[t]).collect()
    }
}

/// `M_jl = int_{Omega_l} grad v*_n . grad v*_m`, integrated on the forward mesh
/// and accumulated onto inversion elements through `transfer`.
pub fn assemble_sensitivity(
    forward_mesh: &Mesh,
    refs: &[Vec<f64>],
    transfer: &CentroidTransfer,
) -> Result<DMatrix<f64>> {
    let n = refs.len();
    if n == 0 {
        return Err(Error::InvalidInput("no reference solutions".into()));
    }
    if transfer.map.len() != forward_mesh.num_elements() {
        return Err(Error::Dimension("transfer does not match the forward mesh".into()));
    }
    if let Some(r) = refs.iter().position(|u| u.len() != forward_mesh.num_nodes()) {
        return Err(Error::Dimension(format!("reference {r} is not a nodal field on the forward mesh")));
    }
    let mut m = DMatrix::zeros(n * n, transfer.target_len);
    let mut grads = vec![[0.0; 2]; n];
    for l in 0..forward_mesh.num_elements() {
        for (g, u) in grads.iter_mut().zip(refs) {
            *g = element_gradient(forward_mesh, l, u);
        }
        let area = forward_mesh.areas()[l];
        let col = transfer.map[l];
        for a in 0..n {
            for b in a..n {
                let v = area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                m[(pair_index(n, a, b), col)] += v;
                if a != b {
                    m[(pair_index(n, b, a), col)] += v;
                }
            }
        }
    }
    Ok(m)
}

/// `X_j(w_q) = s0^2 sum_i (I_{n,i} V_{m,i} - I_{m,i} U_{n,i})` with the
/// frequency-dependent reference `V_m = V*_m / s0`.
///
/// `measured[q][n]` are the electrode voltages for pattern `n` at frequency
/// `q`, `reference[m]` the unit-background voltages `V*_m`.
pub fn assemble_data_cem(
    measured: &[Vec<Vec<f64>>],
    reference: &[Vec<f64>],
    patterns: &[ElectrodeCurrents],
    s0: &[f64],
) -> Result<DMatrix<f64>> {
    let n = patterns.len();
    if measured.len() != s0.len() {
        return Err(Error::Dimension(format!(
            "{} measured frequencies for {} background values",
            measured.len(),
            s0.len()
        )));
    }
    if reference.len() != n || measured.iter().any(|m| m.len() != n) {
        return Err(Error::Dimension("pattern counts disagree".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = DMatrix::zeros(n * n, s0.len());
    for (q, (u, &s)) in measured.iter().zip(s0).enumerate() {
        for m in 0..n {
            for k in 0..n {
                let v = s * dot(&patterns[k], &reference[m]) - s * s * dot(&patterns[m], &u[k]);
                x[(pair_index(n, m, k), q)] = v;
            }
        }
    }
    Ok(x)
}

/// Continuum analogue: `X_j = s0^2 int (f_n v_m - f_m u_n) ds` with `v_m = v*_m / s0`.
/// `measured[q][n]` and `reference[m]` are nodal potentials on `mesh`.
pub fn assemble_data_continuum(
    mesh: &Mesh,
    measured: &[Vec<Vec<f64>>],
    reference: &[Vec<f64>],
    fluxes: &[BoundaryFlux],
    s0: &[f64],
) -> Result<DMatrix<f64>> {
    let n = fluxes.len();
    if measured.len() != s0.len() || reference.len() != n || measured.iter().any(|m| m.len() != n) {
        return Err(Error::Dimension("frequency or pattern counts disagree".into()));
    }
    let loads: Vec<Vec<f64>> = fluxes.iter().map(|f| f.load(mesh)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = DMatrix::zeros(n * n, s0.len());
    for (q, (u, &s)) in measured.iter().zip(s0).enumerate() {
        for m in 0..n {
            for k in 0..n {
                x[(pair_index(n, m, k), q)] =
                    s * dot(&loads[k], &reference[m]) - s * s * dot(&loads[m], &u[k]);
            }
        }
    }
    Ok(x)
}

/// How the frequency dimension is eliminated.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Right-inverse decoupling over the listed profile rows of `S`.
    Direct { profiles: Vec<usize> },
    /// Forward-difference imaging over the active set `P`.
    Difference { active: Vec<usize> },
}

/// One decoupled system `M A_k = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledSystem {
    pub k: usize,
    pub rhs: DVector<f64>,
}

/// Splits `M A S = X` into independent systems sharing the design matrix `M`.
pub fn build_system(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    s: &SpectralMatrix,
    frequencies: &[f64],
    mode: &Mode,
) -> Result<Vec<DecoupledSystem>> {
    if m.nrows() != x.nrows() {
        return Err(Error::Dimension(format!(
            "sensitivity has {} rows, data has {}",
            m.nrows(),
            x.nrows()
        )));
    }
    match mode {
        Mode::Direct { profiles } => {
            if profiles.is_empty() || profiles.iter().any(|&k| k >= s.num_profiles()) {
                return Err(Error::InvalidInput("invalid profile selection".into()));
            }
            let rows = s.values.select_rows(profiles.iter());
            let sub = SpectralMatrix::from_matrix(rows)?;
            let y = decouple(x, &sub)?;
            Ok(profiles
                .iter()
                .zip(y)
                .map(|(&k, rhs)| DecoupledSystem { k, rhs })
                .collect())
        }
        Mode::Difference { active } => {
            let d = difference_system(x, s, frequencies, active)?;
            let y = decouple(&d.x_diff, &d.s_tilde)?;
            Ok(active
                .iter()
                .zip(y)
                .map(|(&k, rhs)| DecoupledSystem { k, rhs })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{reference_solutions, trig_current_patterns};
    use crate::mesh::{build_disk_mesh, place_electrodes};
    use crate::spectral::{weighted_fd, Profile, SpectralModel, sample_spectral_matrix};
    use nalgebra::Matrix2;
    use std::f64::consts::PI;

    #[test]
    fn pair_indexing_round_trips() {
        for j in 0..225 {
            let (m, n) = pair_of(15, j);
            assert_eq!(pair_index(15, m, n), j);
        }
    }

    #[test]
    fn sensitivity_symmetry_and_global_integral() {
        let mut fine = build_disk_mesh(1.0, 0.1).unwrap();
        let layout = place_electrodes(&mut fine, 16, PI / 16.0, &[]).unwrap();
        let patterns = trig_current_patterns(16).unwrap();
        let refs = reference_solutions(&fine, &layout, &[1.0; 16], &patterns).unwrap();
        let potentials: Vec<Vec<f64>> = refs.iter().map(|r| r.u.clone()).collect();
        let coarse = build_disk_mesh(1.0, 0.2).unwrap();
        let transfer = CentroidTransfer::new(&fine, &coarse).unwrap();
        let m = assemble_sensitivity(&fine, &potentials, &transfer).unwrap();
        let n = patterns.len();
        for a in 0..n {
            for b in 0..n {
                assert_eq!(m.row(pair_index(n, a, b)), m.row(pair_index(n, b, a)));
                if a == b {
                    assert!(m.row(pair_index(n, a, a)).iter().all(|&v| v >= 0.0));
                }
            }
        }
        // one inversion cell: the column is the full-domain integral
        let one = CentroidTransfer {
            map: vec![0; fine.num_elements()],
            source_areas: fine.areas().to_vec(),
            target_len: 1,
        };
        let total = assemble_sensitivity(&fine, &potentials, &one).unwrap();
        for j in 0..n * n {
            let s: f64 = m.row(j).iter().sum();
            assert!((s - total[(j, 0)]).abs() < 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn unperturbed_body_gives_zero_data() {
        let mut mesh = build_disk_mesh(1.0, 0.15).unwrap();
        let layout = place_electrodes(&mut mesh, 16, PI / 16.0, &[]).unwrap();
        let patterns = trig_current_patterns(16).unwrap();
        let refs = reference_solutions(&mesh, &layout, &[1.0; 16], &patterns).unwrap();
        let vstar: Vec<Vec<f64>> = refs.iter().map(|r| r.voltages.clone()).collect();
        let s0 = [0.5, 1.0, 2.0];
        let measured: Vec<Vec<Vec<f64>>> = s0
            .iter()
            .map(|&s| vstar.iter().map(|v| v.iter().map(|x| x / s).collect()).collect())
            .collect();
        let x = assemble_data_cem(&measured, &vstar, &patterns, &s0).unwrap();
        assert!(x.amax() < 1e-12, "{}", x.amax());
    }

    #[test]
    fn direct_mode_second_rhs_is_weighted_fd() {
        let model = SpectralModel::new(
            vec![Profile::Poly(vec![1.0, 0.5]), Profile::Poly(vec![0.2, 1.0])],
            vec![0.1, 0.9],
        )
        .unwrap();
        let s = sample_spectral_matrix(&model).unwrap();
        let x = DMatrix::from_fn(9, 2, |j, q| ((j * 7 + q * 3) as f64).sin());
        let m = DMatrix::zeros(9, 4);
        let sys = build_system(&m, &x, &s, &model.frequencies, &Mode::Direct { profiles: vec![0, 1] }).unwrap();
        assert_eq!(sys.len(), 2);
        let s2 = Matrix2::from_iterator(s.values.iter().copied());
        let col: Vec<f64> = x.column(0).iter().copied().collect();
        let col2: Vec<f64> = x.column(1).iter().copied().collect();
        let fd = weighted_fd(&col, &col2, &s2).unwrap();
        for (a, b) in sys[1].rhs.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn difference_mode_with_constant_background() {
        let model = SpectralModel::new(
            vec![Profile::constant(1.0), Profile::Poly(vec![0.0, 2.0])],
            vec![0.0, 0.5],
        )
        .unwrap();
        let s = sample_spectral_matrix(&model).unwrap();
        let x = DMatrix::from_fn(4, 2, |j, q| (j + 3 * q) as f64);
        let m = DMatrix::zeros(4, 3);
        let sys = build_system(&m, &x, &s, &model.frequencies, &Mode::Difference { active: vec![1] }).unwrap();
        assert_eq!(sys.len(), 1);
        // forward difference of X is 3 / 0.5 = 6, divided by s_1' = 2
        assert!(sys[0].rhs.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn too_few_frequencies_for_direct_mode() {
        let model = SpectralModel::new(
            vec![Profile::constant(1.0), Profile::Poly(vec![0.0, 1.0])],
            vec![0.5],
        )
        .unwrap();
        let s = sample_spectral_matrix(&model).unwrap();
        let x = DMatrix::zeros(4, 1);
        let m = DMatrix::zeros(4, 3);
        assert!(matches!(
            build_system(&m, &x, &s, &model.frequencies, &Mode::Direct { profiles: vec![0, 1] }),
            Err(Error::RankDeficient { .. })
        ));
    }
}
