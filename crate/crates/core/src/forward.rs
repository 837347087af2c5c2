//! Piecewise-linear finite element solvers for the continuum Neumann problem
//! and the complete electrode model (CEM).
//!
//! Both discrete systems are singular by one constant. The continuum system
//! is factored with one node pinned and the solution is shifted afterwards to
//! zero boundary mean. The CEM system gets the rank-one term `g 1 1^T` on the
//! electrode block, which forces `sum U = 0` for zero-sum currents and leaves
//! the matrix positive definite. Matrices are equilibrated by a power of two
//! before factorization so that scaling the conductivity by a power of two
//! scales the solution exactly.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::mesh::{Boundary, ElectrodeLayout, Mesh};
use crate::sparse::{EnvelopeCholesky, SymmetricCsr, TripletBuilder};

/// Per-element conductivity.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField(Vec<f64>);

impl ConductivityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(l) = values.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "conductivity must be positive and finite, element {l} has {}",
                values[l]
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(num_elements: usize, value: f64) -> Self {
        Self(vec![value; num_elements])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `sum_l sigma_l int grad phi_i . grad phi_j` over the mesh.
pub fn assemble_stiffness(mesh: &Mesh, sigma: &ConductivityField) -> Result<TripletBuilder> {
    if sigma.len() != mesh.num_elements() {
        return Err(Error::Dimension(format!(
            "{} conductivity values for {} elements",
            sigma.len(),
            mesh.num_elements()
        )));
    }
    let mut b = TripletBuilder::new(mesh.num_nodes());
    add_stiffness(&mut b, mesh, sigma);
    Ok(b)
}

fn add_stiffness(b: &mut TripletBuilder, mesh: &Mesh, sigma: &ConductivityField) {
    for (l, el) in mesh.elements().iter().enumerate() {
        let g = mesh.basis_gradients(l);
        let area = mesh.areas()[l];
        for a in 0..3 {
            for c in 0..=a {
                let local = area * (g[a][0] * g[c][0] + g[a][1] * g[c][1]);
                let v = sigma.values()[l] * local;
                b.add(el[a], el[c], v);
                if a != c {
                    b.add(el[c], el[a], v);
                }
            }
        }
    }
}

/// `2^-e` where `2^e` is the leading power of two of `x`.
fn pow2_scale(x: f64) -> f64 {
    let exponent = ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    2f64.powi(-exponent)
}

/// Cholesky factor of a power-of-two equilibrated SPD matrix.
#[derive(Debug, Clone)]
struct Factor {
    chol: EnvelopeCholesky,
    matrix: SymmetricCsr,
    scale: f64,
}

impl Factor {
    fn new(builder: TripletBuilder) -> Result<Self> {
        let raw = builder.build();
        let max_diag = (0..raw.dim()).map(|i| raw.diagonal(i)).fold(0.0, f64::max);
        if !(max_diag > 0.0 && max_diag.is_finite()) {
            return Err(Error::Singular("system has no positive diagonal".into()));
        }
        let scale = pow2_scale(max_diag);
        let mut scaled = TripletBuilder::new(raw.dim());
        for i in 0..raw.dim() {
            for (j, v) in raw.row(i) {
                scaled.add(i, j, v * scale);
            }
        }
        let matrix = scaled.build();
        let chol = EnvelopeCholesky::factor(&matrix)?;
        Ok(Self {
            chol,
            matrix,
            scale,
        })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = rhs.iter().map(|v| v * self.scale).collect();
        self.chol.solve(&scaled)
    }

    /// `A x` in the original (unscaled) units.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(x).into_iter().map(|v| v / self.scale).collect()
    }
}

/// Boundary current density as nodal samples on boundary nodes, with a
/// piecewise-linear trace along the boundary. Interior entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFlux {
    values: Vec<f64>,
}

impl BoundaryFlux {
    /// Samples `f(t)` at every boundary node (boundary parameter `t`) and
    /// subtracts the constant that makes the boundary integral vanish.
    pub fn from_fn(mesh: &Mesh, f: impl Fn(f64) -> f64) -> Self {
        let mut values = vec![0.0; mesh.num_nodes()];
        for n in 0..mesh.num_nodes() {
            if let Some(t) = mesh.boundary_param(n) {
                values[n] = f(t);
            }
        }
        let mut flux = Self { values };
        let shift = flux.integral(mesh) / mesh.boundary_length();
        for n in 0..mesh.num_nodes() {
            if mesh.boundary_param(n).is_some() {
                flux.values[n] -= shift;
            }
        }
        flux
    }

    pub fn from_nodal(mesh: &Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.num_nodes() {
            return Err(Error::Dimension("flux must have one value per node".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Exact integral of the linear trace over the polygonal boundary.
    pub fn integral(&self, mesh: &Mesh) -> f64 {
        mesh.boundary_edges()
            .iter()
            .map(|e| 0.5 * mesh.edge_length(e) * (self.values[e.nodes[0]] + self.values[e.nodes[1]]))
            .sum()
    }

    /// Load vector `int f phi_i ds`.
    pub fn load(&self, mesh: &Mesh) -> Vec<f64> {
        let mut b = vec![0.0; mesh.num_nodes()];
        for e in mesh.boundary_edges() {
            let [p, q] = e.nodes;
            let len = mesh.edge_length(e);
            b[p] += len / 6.0 * (2.0 * self.values[p] + self.values[q]);
            b[q] += len / 6.0 * (self.values[p] + 2.0 * self.values[q]);
        }
        b
    }

    /// `int f g ds` for a nodal function `g` with linear trace.
    pub fn pairing(&self, mesh: &Mesh, g: &[f64]) -> f64 {
        self.load(mesh).iter().zip(g).map(|(a, b)| a * b).sum()
    }
}

/// Current density on a deformed boundary: `f~ = (f o F) |det J_F|`, where `F`
/// maps the true boundary onto the nominal unit circle. For an ellipse with
/// semi-axes `(a, b)`, `F(a cos t, b sin t) = (cos t, sin t)` and the boundary
/// Jacobian is `1 / sqrt(a^2 sin^2 t + b^2 cos^2 t)`. Boundary powers are
/// preserved: `int f~ ds~ = int f ds` piece by piece.
pub fn transform_flux(truth: &Mesh, f: impl Fn(f64) -> f64) -> BoundaryFlux {
    match truth.boundary() {
        Boundary::Disk { radius } => BoundaryFlux::from_fn(truth, |t| f(t) / radius),
        Boundary::Ellipse { a, b } => BoundaryFlux::from_fn(truth, |t| {
            f(t) / (a * a * t.sin().powi(2) + b * b * t.cos().powi(2)).sqrt()
        }),
    }
}

/// Factorized continuum Neumann problem for one conductivity.
#[derive(Debug, Clone)]
pub struct ContinuumSolver {
    factor: Factor,
    boundary_weights: Vec<f64>,
    pinned: usize,
}

impl ContinuumSolver {
    pub fn new(mesh: &Mesh, sigma: &ConductivityField) -> Result<Self> {
        let mut b = assemble_stiffness(mesh, sigma)?;
        let mut weights = vec![0.0; mesh.num_nodes()];
        for e in mesh.boundary_edges() {
            let len = mesh.edge_length(e);
            weights[e.nodes[0]] += 0.5 * len;
            weights[e.nodes[1]] += 0.5 * len;
        }
        let pinned = mesh.boundary_edges()[0].nodes[0];
        let pin_value = {
            let k = b.clone().build();
            k.diagonal(pinned)
        };
        b.add(pinned, pinned, pin_value);
        let factor = Factor::new(b).map_err(|e| match e {
            Error::Singular(m) => Error::Singular(format!("stiffness matrix (disconnected mesh?): {m}")),
            other => other,
        })?;
        Ok(Self {
            factor,
            boundary_weights: weights,
            pinned,
        })
    }

    /// Potential with zero boundary mean for a zero-mean flux.
    pub fn solve(&self, mesh: &Mesh, flux: &BoundaryFlux) -> Result<Vec<f64>> {
        let total = flux.integral(mesh);
        let scale = flux.values.iter().fold(0.0f64, |m, v| m.max(v.abs())) * mesh.boundary_length();
        if total.abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidInput(format!(
                "boundary flux must integrate to zero, got {total:e}"
            )));
        }
        let rhs = flux.load(mesh);
        let mut u = self.factor.solve(&rhs);
        let length: f64 = self.boundary_weights.iter().sum();
        let mean = u.iter().zip(&self.boundary_weights).map(|(a, w)| a * w).sum::<f64>() / length;
        for v in &mut u {
            *v -= mean;
        }
        Ok(u)
    }

    /// Residual `K u - b` of the unpinned system.
    pub fn residual(&self, mesh: &Mesh, flux: &BoundaryFlux, u: &[f64]) -> Vec<f64> {
        let mut r = self.factor.apply(u);
        // the pin adds diag * u_p on one row; remove it to recover K u
        let k_pp = 0.5 * self.factor.matrix.diagonal(self.pinned) / self.factor.scale;
        r[self.pinned] -= k_pp * u[self.pinned];
        for (ri, bi) in r.iter_mut().zip(flux.load(mesh)) {
            *ri -= bi;
        }
        r
    }
}

/// One-shot continuum solve.
pub fn solve_continuum(mesh: &Mesh, sigma: &ConductivityField, flux: &BoundaryFlux) -> Result<Vec<f64>> {
    ContinuumSolver::new(mesh, sigma)?.solve(mesh, flux)
}

/// Injected electrode currents `I` with `sum I = 0`.
pub type ElectrodeCurrents = Vec<f64>;

/// Trigonometric current patterns for `E` equally spaced electrodes:
/// `cos(n theta_j)` for `n = 1..=floor(E/2)` and `sin(n theta_j)` for
/// `n = 1..=ceil(E/2)-1`, interleaved as cos 1, sin 1, cos 2, ..., with
/// `theta_j = 2 pi j / E`. Each is shifted to an exact zero sum.
pub fn trig_current_patterns(e: usize) -> Result<Vec<ElectrodeCurrents>> {
    if e < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 electrodes, got {e}")));
    }
    let theta: Vec<f64> = (0..e).map(|j| TAU * j as f64 / e as f64).collect();
    let mut patterns = Vec::with_capacity(e - 1);
    for n in 1..=e / 2 {
        let nf = n as f64;
        patterns.push(zero_sum(theta.iter().map(|t| (nf * t).cos()).collect()));
        if n < e.div_ceil(2) {
            patterns.push(zero_sum(theta.iter().map(|t| (nf * t).sin()).collect()));
        }
    }
    Ok(patterns)
}

fn zero_sum(mut v: Vec<f64>) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in &mut v {
        *x -= mean;
    }
    v
}

/// Nodal potential and grounded electrode voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct CemSolution {
    pub u: Vec<f64>,
    pub voltages: Vec<f64>,
}

/// Factorized CEM system for one conductivity and one set of contact impedances.
#[derive(Debug, Clone)]
pub struct CemSolver {
    factor: Factor,
    num_nodes: usize,
    num_electrodes: usize,
}

impl CemSolver {
    pub fn new(
        mesh: &Mesh,
        layout: &ElectrodeLayout,
        sigma: &ConductivityField,
        z: &[f64],
    ) -> Result<Self> {
        let ne = layout.len();
        if z.len() != ne {
            return Err(Error::Dimension(format!("{} contact impedances for {ne} electrodes", z.len())));
        }
        if let Some(j) = z.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "contact impedance of electrode {j} must be positive, got {}",
                z[j]
            )));
        }
        if layout.edge_map.iter().flatten().any(|&e| e >= mesh.boundary_edges().len()) {
            return Err(Error::Mesh("electrode layout does not match the mesh".into()));
        }
        let nn = mesh.num_nodes();
        if sigma.len() != mesh.num_elements() {
            return Err(Error::Dimension(format!(
                "{} conductivity values for {} elements",
                sigma.len(),
                mesh.num_elements()
            )));
        }
        let mut b_full = TripletBuilder::new(nn + ne);
        add_stiffness(&mut b_full, mesh, sigma);

        let mut contact_len = vec![0.0; ne];
        for (j, edges) in layout.edge_map.iter().enumerate() {
            let inv_z = 1.0 / z[j];
            for &ei in edges {
                let edge = mesh.boundary_edges()[ei];
                let [p, q] = edge.nodes;
                let len = mesh.edge_length(&edge);
                let diag = inv_z * len / 3.0;
                let off = inv_z * len / 6.0;
                let coupling = -(inv_z * len / 2.0);
                b_full.add(p, p, diag);
                b_full.add(q, q, diag);
                b_full.add(q, p, off);
                b_full.add(p, q, off);
                b_full.add(nn + j, p, coupling);
                b_full.add(nn + j, q, coupling);
                contact_len[j] += inv_z * len;
            }
            b_full.add(nn + j, nn + j, contact_len[j]);
        }
        let gamma = contact_len.iter().sum::<f64>() / ne as f64;
        for j in 0..ne {
            for k in 0..=j {
                b_full.add(nn + j, nn + k, gamma);
            }
        }
        Ok(Self {
            factor: Factor::new(b_full)?,
            num_nodes: nn,
            num_electrodes: ne,
        })
    }

    pub fn solve(&self, currents: &[f64]) -> Result<CemSolution> {
        if currents.len() != self.num_electrodes {
            return Err(Error::Dimension(format!(
                "{} currents for {} electrodes",
                currents.len(),
                self.num_electrodes
            )));
        }
        let scale = currents.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let total: f64 = currents.iter().sum();
        if total.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) * currents.len() as f64 {
            return Err(Error::InvalidInput(format!("currents must sum to zero, got {total:e}")));
        }
        let mut rhs = vec![0.0; self.num_nodes + self.num_electrodes];
        rhs[self.num_nodes..].copy_from_slice(currents);
        let mut x = self.factor.solve(&rhs);
        let voltages = x.split_off(self.num_nodes);
        Ok(CemSolution { u: x, voltages })
    }

    /// Residual of the (grounded) discrete system for a computed solution.
    pub fn residual(&self, currents: &[f64], sol: &CemSolution) -> Vec<f64> {
        let x: Vec<f64> = sol.u.iter().chain(&sol.voltages).copied().collect();
        let mut r = self.factor.apply(&x);
        for (j, i) in currents.iter().enumerate() {
            r[self.num_nodes + j] -= i;
        }
        r
    }
}

/// One-shot CEM solve.
pub fn solve_cem(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    sigma: &ConductivityField,
    z: &[f64],
    currents: &[f64],
) -> Result<CemSolution> {
    CemSolver::new(mesh, layout, sigma, z)?.solve(currents)
}

/// Net current through each electrode, `z_j^-1 int_{e_j} (U_j - u) ds`.
pub fn electrode_currents(mesh: &Mesh, layout: &ElectrodeLayout, z: &[f64], sol: &CemSolution) -> Vec<f64> {
    layout
        .edge_map
        .iter()
        .enumerate()
        .map(|(j, edges)| {
            edges
                .iter()
                .map(|&ei| {
                    let e = mesh.boundary_edges()[ei];
                    let len = mesh.edge_length(&e);
                    let mean_u = 0.5 * (sol.u[e.nodes[0]] + sol.u[e.nodes[1]]);
                    len * (sol.voltages[j] - mean_u)
                })
                .sum::<f64>()
                / z[j]
        })
        .collect()
}

/// CEM solutions for the unit background `sigma = 1`, `z = c`, one per
/// pattern, all from a single factorization.
pub fn reference_solutions(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    contact: &[f64],
    patterns: &[ElectrodeCurrents],
) -> Result<Vec<CemSolution>> {
    let solver = CemSolver::new(
        mesh,
        layout,
        &ConductivityField::uniform(mesh.num_elements(), 1.0),
        contact,
    )?;
    patterns.iter().map(|p| solver.solve(p)).collect()
}

/// Continuum analogue of [`reference_solutions`].
pub fn reference_solutions_continuum(mesh: &Mesh, fluxes: &[BoundaryFlux]) -> Result<Vec<Vec<f64>>> {
    let solver = ContinuumSolver::new(mesh, &ConductivityField::uniform(mesh.num_elements(), 1.0))?;
    fluxes.iter().map(|f| solver.solve(mesh, f)).collect()
}
