//! Ground-truth phantoms, noisy measurement sweeps and recovery metrics.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{CemSolver, ConductivityField, ElectrodeCurrents};
use crate::mesh::{build_disk_mesh, build_ellipse_mesh, place_electrodes, Boundary, ElectrodeLayout, Mesh};
use crate::spectral::{Profile, SpectralModel};

/// Effective perturbations `|delta sigma_k s_k(w)|` above this draw a warning.
pub const LINEAR_REGIME_WARN: f64 = 0.5;

/// Axis-aligned rectangle given by its center and half-widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub center: [f64; 2],
    pub half: [f64; 2],
}

impl Rect {
    pub fn square(center: [f64; 2], half: f64) -> Self {
        Self {
            center,
            half: [half, half],
        }
    }

    /// Half-open membership: the lower and left edges belong to the rectangle.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|d| {
            let lo = self.center[d] - self.half[d];
            let hi = self.center[d] + self.half[d];
            p[d] >= lo && p[d] < hi
        })
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half[0] * self.half[1]
    }

    fn overlaps(&self, other: &Rect) -> bool {
        (0..2).all(|d| (self.center[d] - other.center[d]).abs() < self.half[d] + other.half[d])
    }

    fn corners(&self) -> [[f64; 2]; 4] {
        let [cx, cy] = self.center;
        let [hx, hy] = self.half;
        [[cx - hx, cy - hy], [cx + hx, cy - hy], [cx + hx, cy + hy], [cx - hx, cy + hy]]
    }
}

/// One inclusion: abundance `k` takes the value `contrast` inside `shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub shape: Rect,
    pub k: usize,
    pub contrast: f64,
}

fn unit_disk() -> Boundary {
    Boundary::Disk { radius: 1.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub inclusions: Vec<Inclusion>,
    pub spectral: SpectralModel,
    /// True domain. The inversion always uses the unit disk.
    #[serde(default = "unit_disk")]
    pub domain: Boundary,
    /// Per-electrode angular shifts on the true boundary; empty means none.
    #[serde(default)]
    pub electrode_offsets: Vec<f64>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.spectral.validate()?;
        for (i, inc) in self.inclusions.iter().enumerate() {
            if inc.k >= self.spectral.num_profiles() {
                return Err(Error::InvalidInput(format!(
                    "inclusion {i} uses profile {} but only {} are defined",
                    inc.k,
                    self.spectral.num_profiles()
                )));
            }
            if !(inc.shape.half[0] > 0.0 && inc.shape.half[1] > 0.0) || !inc.contrast.is_finite() {
                return Err(Error::InvalidInput(format!("inclusion {i} is degenerate")));
            }
            if inc.shape.corners().iter().any(|&c| self.domain.level(c) >= 1.0) {
                return Err(Error::InvalidInput(format!("inclusion {i} is not strictly inside the domain")));
            }
            for (j, other) in self.inclusions.iter().enumerate().take(i) {
                if inc.shape.overlaps(&other.shape) {
                    return Err(Error::InvalidInput(format!("inclusions {j} and {i} overlap")));
                }
            }
        }
        let effective = self.max_effective_contrast();
        if effective > LINEAR_REGIME_WARN {
            log::warn!("effective conductivity perturbation {effective} is outside the linear regime");
        }
        match self.domain {
            Boundary::Disk { radius } if radius > 0.0 => {}
            Boundary::Ellipse { a, b } if (0.7..=1.3).contains(&a) && (0.7..=1.3).contains(&b) => {}
            other => return Err(Error::InvalidInput(format!("unsupported truth domain {other:?}"))),
        }
        Ok(())
    }

    /// True when the truth setup differs from the nominal unit disk with
    /// evenly spaced electrodes.
    pub fn is_deformed(&self) -> bool {
        self.domain != unit_disk() || self.electrode_offsets.iter().any(|&o| o != 0.0)
    }

    /// Largest effective conductivity perturbation `|delta sigma_k s_k(w)|` over inclusions and frequencies.
    pub fn max_effective_contrast(&self) -> f64 {
        let mut max = 0.0f64;
        for inc in &self.inclusions {
            for q in 0..self.spectral.num_frequencies() {
                max = max.max((inc.contrast * self.spectral.value(inc.k, q)).abs());
            }
        }
        max
    }
}

/// Names of the built-in phantoms.
pub const BUILTIN_NAMES: [&str; 8] = [
    "exam1i", "exam1ii", "exam2i", "exam2ii", "exam2c", "exam3i", "exam3ii", "exam4",
];

fn poly(c: &[f64]) -> Profile {
    Profile::Poly(c.to_vec())
}

/// Built-in phantoms. Inclusion positions and sizes are fixed here; all use
/// `s_0 = 1` and frequencies `0, 0.5, 1`.
pub fn builtin(name: &str) -> Result<PhantomSpec> {
    let freqs = vec![0.0, 0.5, 1.0];
    let top_left = [-0.4, 0.35];
    let top_right = [0.4, 0.35];
    let bottom = [0.0, -0.45];
    let rect = |center, hx, hy| Rect {
        center,
        half: [hx, hy],
    };
    let inc = |shape, k, contrast| Inclusion { shape, k, contrast };

    let exam1 = |s2: f64| PhantomSpec {
        inclusions: vec![
            inc(Rect::square(top_left, 0.15), 1, 1.0),
            inc(Rect::square(top_right, 0.15), 1, 1.0),
            inc(Rect::square(bottom, 0.15), 2, 1.0),
        ],
        spectral: SpectralModel {
            profiles: vec![poly(&[1.0]), poly(&[0.1, 0.1]), poly(&[0.0, s2])],
            frequencies: freqs.clone(),
        },
        domain: unit_disk(),
        electrode_offsets: Vec::new(),
    };
    let exam2 = |s1: f64, contrasts: [f64; 3]| PhantomSpec {
        inclusions: vec![
            inc(rect(top_left, 0.2, 0.12), 1, contrasts[0]),
            inc(rect(top_right, 0.2, 0.12), 2, contrasts[1]),
            inc(rect(bottom, 0.25, 0.12), 3, contrasts[2]),
        ],
        spectral: SpectralModel {
            profiles: vec![
                poly(&[1.0]),
                poly(&[s1, s1]),
                poly(&[0.0, 0.0, 0.1]),
                poly(&[0.1, 0.2]),
            ],
            frequencies: freqs.clone(),
        },
        domain: unit_disk(),
        electrode_offsets: Vec::new(),
    };
    let two_profiles = SpectralModel {
        profiles: vec![poly(&[1.0]), poly(&[0.2, 0.2]), poly(&[0.0, 0.0, 0.1])],
        frequencies: freqs.clone(),
    };
    let exam3 = |a: f64, b: f64| PhantomSpec {
        inclusions: vec![
            inc(Rect::square([0.0, 0.4], 0.15), 1, 1.0),
            inc(Rect::square([0.0, -0.4], 0.15), 2, 1.0),
        ],
        spectral: two_profiles.clone(),
        domain: Boundary::Ellipse { a, b },
        electrode_offsets: Vec::new(),
    };

    let spec = match name {
        "exam1i" => exam1(0.2),
        "exam1ii" => exam1(0.02),
        "exam2i" => exam2(0.2, [1.0; 3]),
        "exam2ii" => exam2(0.02, [1.0; 3]),
        "exam2c" => exam2(0.2, [1.5, 1.0, 0.5]),
        "exam3i" => exam3(1.1, 0.9),
        "exam3ii" => exam3(1.2, 0.8),
        "exam4" => PhantomSpec {
            inclusions: vec![
                inc(rect([0.0, 0.4], 0.25, 0.12), 1, 1.0),
                inc(rect([0.0, -0.4], 0.25, 0.12), 2, 1.0),
            ],
            spectral: two_profiles,
            domain: unit_disk(),
            electrode_offsets: (0..16).map(|j| if j % 2 == 1 { PI / 32.0 } else { 0.0 }).collect(),
        },
        other => {
            return Err(Error::Config(format!(
                "unknown phantom `{other}`, expected one of {}",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    Ok(spec)
}

/// Per-abundance element vectors `A_k`: element `l` gets the contrast of the
/// inclusion containing its centroid.
pub fn rasterize_phantom(spec: &PhantomSpec, mesh: &Mesh) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut out = vec![vec![0.0; mesh.num_elements()]; spec.spectral.num_profiles()];
    for l in 0..mesh.num_elements() {
        let c = mesh.centroid(l);
        if let Some(inc) = spec.inclusions.iter().find(|i| i.shape.contains(c)) {
            out[inc.k][l] = inc.contrast;
        }
    }
    Ok(out)
}

/// `sigma_l(w_q) = s_0(w_q) (1 + A_0l) + sum_k s_k(w_q) A_kl`.
pub fn conductivity_at(spec: &PhantomSpec, abundances: &[Vec<f64>], q: usize) -> Result<ConductivityField> {
    let len = abundances[0].len();
    let values: Vec<f64> = (0..len)
        .map(|l| {
            let mut v = spec.spectral.value(0, q);
            for (k, a) in abundances.iter().enumerate() {
                v += spec.spectral.value(k, q) * a[l];
            }
            v
        })
        .collect();
    if let Some(l) = values.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "conductivity {} at element {l}, frequency index {q} is not positive",
            values[l]
        )));
    }
    ConductivityField::new(values)
}

/// Electrode voltages for every frequency and pattern, with noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySweep {
    /// `noisy[q][n][j]`.
    pub noisy: Vec<Vec<Vec<f64>>>,
    /// Noise-free voltages `U^dag`.
    pub clean: Vec<Vec<Vec<f64>>>,
    /// Homogeneous-background voltages `U(sigma_0)` on the truth mesh.
    pub background: Vec<Vec<Vec<f64>>>,
    /// Added noise `noisy - clean`, stored exactly.
    pub perturbation: Vec<Vec<Vec<f64>>>,
    pub epsilon: f64,
    pub seed: u64,
    pub frequencies: Vec<f64>,
}

/// Generator for frequency `q`, pattern `n`: ChaCha8 seeded with `seed`,
/// stream `q * num_patterns + n`. Serial and parallel runs draw identical numbers.
pub fn noise_rng(seed: u64, q: usize, n: usize, num_patterns: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((q * num_patterns + n) as u64);
    rng
}

/// Simulates `U^delta_j = U^dag_j + epsilon max_l |U^dag_l - U_l(sigma_0)| xi_j`
/// per frequency and pattern, with `z_j = c_j / s_0(w_q)`. The noise vector is
/// shifted to zero mean so the noisy voltages stay grounded.
pub fn simulate_sweep(
    spec: &PhantomSpec,
    truth_mesh: &Mesh,
    layout: &ElectrodeLayout,
    patterns: &[ElectrodeCurrents],
    epsilon: f64,
    seed: u64,
) -> Result<NoisySweep> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("noise level must be nonnegative, got {epsilon}")));
    }
    let abundances = rasterize_phantom(spec, truth_mesh)?;
    let model = &spec.spectral;
    let np = patterns.len();
    let per_freq: Vec<_> = (0..model.num_frequencies())
        .into_par_iter()
        .map(|q| -> Result<_> {
            let s0 = model.value(0, q);
            if !(s0 > 0.0) {
                return Err(Error::InvalidInput(format!("s_0 is not positive at frequency index {q}")));
            }
            let z: Vec<f64> = layout.contact.iter().map(|c| c / s0).collect();
            let sigma = conductivity_at(spec, &abundances, q)?;
            let truth = CemSolver::new(truth_mesh, layout, &sigma, &z)?;
            let homogeneous = CemSolver::new(
                truth_mesh,
                layout,
                &ConductivityField::uniform(truth_mesh.num_elements(), s0),
                &z,
            )?;
            let mut clean = Vec::with_capacity(np);
            let mut background = Vec::with_capacity(np);
            let mut noisy = Vec::with_capacity(np);
            let mut perturbation = Vec::with_capacity(np);
            for (n, p) in patterns.iter().enumerate() {
                let u = truth.solve(p)?.voltages;
                let u0 = homogeneous.solve(p)?.voltages;
                let scale = u.iter().zip(&u0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let mut rng = noise_rng(seed, q, n, np);
                let xi: Vec<f64> = (0..u.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mean = xi.iter().sum::<f64>() / xi.len() as f64;
                let delta: Vec<f64> = xi.iter().map(|x| (scale * (x - mean)) * epsilon).collect();
                let ud = if epsilon == 0.0 {
                    u.clone()
                } else {
                    u.iter().zip(&delta).map(|(a, d)| a + d).collect()
                };
                clean.push(u);
                background.push(u0);
                noisy.push(ud);
                perturbation.push(delta);
            }
            Ok((clean, background, noisy, perturbation))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sweep = NoisySweep {
        noisy: Vec::new(),
        clean: Vec::new(),
        background: Vec::new(),
        perturbation: Vec::new(),
        epsilon,
        seed,
        frequencies: model.frequencies.clone(),
    };
    for (c, b, n, p) in per_freq {
        sweep.clean.push(c);
        sweep.background.push(b);
        sweep.noisy.push(n);
        sweep.perturbation.push(p);
    }
    Ok(sweep)
}

/// Truth mesh and electrode layout for a phantom: the ellipse or disk of
/// `spec.domain`, with electrodes shifted by `spec.electrode_offsets`. Arc
/// lengths are measured in boundary-parameter units, so on an ellipse each
/// electrode spans the same parameter interval as on the nominal disk.
pub fn deformed_truth(
    spec: &PhantomSpec,
    h: f64,
    count: usize,
    arc_length: f64,
    contact: &[f64],
) -> Result<(Mesh, ElectrodeLayout)> {
    let mut mesh = match spec.domain {
        Boundary::Disk { radius } => build_disk_mesh(radius, h)?,
        Boundary::Ellipse { a, b } => {
            if !((0.7..=1.3).contains(&a) && (0.7..=1.3).contains(&b)) {
                return Err(Error::InvalidInput(format!("deformation ({a}, {b}) is too large")));
            }
            build_ellipse_mesh(a, b, h)?
        }
    };
    let layout = place_electrodes(&mut mesh, count, arc_length, &spec.electrode_offsets)?
        .with_contact(contact.to_vec())?;
    Ok((mesh, layout))
}

/// Recovery quality of one abundance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// `||A - A_ref|| / ||A_ref||`, or `||A - A_ref||` when `A_ref = 0`.
    pub relative_error: f64,
    pub relative_is_absolute: bool,
    pub jaccard: f64,
    pub max_abs: f64,
}

/// `{l : |a_l| > threshold * max |a|}`; empty for the zero vector.
pub fn support(a: &[f64], threshold: f64) -> Vec<bool> {
    let max = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().map(|v| max > 0.0 && v.abs() > threshold * max).collect()
}

/// `|S1 n S2| / |S1 u S2|`, 1 when both are empty.
pub fn jaccard(s1: &[bool], s2: &[bool]) -> f64 {
    let inter = s1.iter().zip(s2).filter(|(a, b)| **a && **b).count();
    let union = s1.iter().zip(s2).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn metrics(recovered: &[f64], reference: &[f64], support_threshold: f64) -> Result<Metrics> {
    if recovered.len() != reference.len() {
        return Err(Error::Dimension("metric vectors differ in length".into()));
    }
    let diff = recovered.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    let (relative_error, relative_is_absolute) = if norm > 0.0 { (diff / norm, false) } else { (diff, true) };
    Ok(Metrics {
        relative_error,
        relative_is_absolute,
        jaccard: jaccard(
            &support(recovered, support_threshold),
            &support(reference, support_threshold),
        ),
        max_abs: recovered.iter().fold(0.0f64, |m, v| m.max(v.abs())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::trig_current_patterns;

    #[test]
    fn every_builtin_is_valid() {
        for name in BUILTIN_NAMES {
            builtin(name).unwrap().validate().unwrap();
        }
        assert!(builtin("exam9").unwrap_err().is_config());
        assert!(builtin("exam4").unwrap().is_deformed());
        assert!(builtin("exam3i").unwrap().is_deformed());
        assert!(!builtin("exam1i").unwrap().is_deformed());
    }

    #[test]
    fn empty_spec_rasterizes_to_zero() {
        let mut spec = builtin("exam1i").unwrap();
        spec.inclusions.clear();
        let mesh = build_disk_mesh(1.0, 0.2).unwrap();
        let a = rasterize_phantom(&spec, &mesh).unwrap();
        assert!(a.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterized_area_matches_shape() {
        let h = 0.04;
        let mesh = build_disk_mesh(1.0, h).unwrap();
        let mut spec = builtin("exam1i").unwrap();
        spec.inclusions = vec![Inclusion {
            shape: Rect::square([0.0, 0.0], 0.5),
            k: 1,
            contrast: 1.0,
        }];
        let a = rasterize_phantom(&spec, &mesh).unwrap();
        let area: f64 = a[1].iter().zip(mesh.areas()).map(|(v, w)| v * w).sum();
        assert!((area - 1.0).abs() < 2.0 * h, "{area}");
    }

    #[test]
    fn overlapping_inclusions_are_rejected() {
        let mut spec = builtin("exam1i").unwrap();
        spec.inclusions[1].shape.center = [-0.35, 0.35];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn supports_are_disjoint_across_and_within_k() {
        let mesh = build_disk_mesh(1.0, 0.05).unwrap();
        let a = rasterize_phantom(&builtin("exam1i").unwrap(), &mesh).unwrap();
        assert!(a[1].iter().zip(&a[2]).all(|(x, y)| *x == 0.0 || *y == 0.0));
        assert!(a[1].iter().filter(|&&v| v != 0.0).count() > 0);
    }

    #[test]
    fn metric_cases() {
        let a = [0.0, 1.0, 2.0, 0.0];
        let m = metrics(&a, &a, 0.2).unwrap();
        assert_eq!((m.relative_error, m.jaccard, m.max_abs), (0.0, 1.0, 2.0));
        let b = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(metrics(&a, &b, 0.2).unwrap().jaccard, 0.0);
        let twice: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let m = metrics(&twice, &a, 0.2).unwrap();
        assert!((m.relative_error - 1.0).abs() < 1e-15);
        assert_eq!(m.jaccard, 1.0);
        let zero = metrics(&a, &[0.0; 4], 0.2).unwrap();
        assert!(zero.relative_is_absolute);
    }

    #[test]
    fn sweep_noise_contracts() {
        let spec = builtin("exam1i").unwrap();
        let (mesh, layout) = deformed_truth(&spec, 0.15, 16, PI / 16.0, &[1.0; 16]).unwrap();
        let patterns = trig_current_patterns(16).unwrap();
        let clean = simulate_sweep(&spec, &mesh, &layout, &patterns, 0.0, 7).unwrap();
        assert_eq!(clean.noisy, clean.clean);
        let a = simulate_sweep(&spec, &mesh, &layout, &patterns, 0.01, 7).unwrap();
        let b = simulate_sweep(&spec, &mesh, &layout, &patterns, 0.01, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_sweep(&spec, &mesh, &layout, &patterns, 0.02, 7).unwrap();
        for (pa, pc) in a.perturbation.iter().flatten().flatten().zip(c.perturbation.iter().flatten().flatten()) {
            assert_eq!(2.0 * pa, *pc);
        }
        for v in a.noisy.iter().flatten() {
            assert!(v.iter().sum::<f64>().abs() < 1e-12);
        }

        let mut empty = spec.clone();
        empty.inclusions.clear();
        let e = simulate_sweep(&empty, &mesh, &layout, &patterns, 0.01, 7).unwrap();
        assert_eq!(e.noisy, e.background);
    }

    #[test]
    fn negative_conductivity_is_rejected() {
        let mut spec = builtin("exam1i").unwrap();
        spec.inclusions[0].k = 0;
        spec.inclusions[0].contrast = -1.5;
        let (mesh, layout) = deformed_truth(&spec, 0.2, 16, PI / 16.0, &[1.0; 16]).unwrap();
        let patterns = trig_current_patterns(16).unwrap();
        assert!(simulate_sweep(&spec, &mesh, &layout, &patterns, 0.0, 1).is_err());
    }
}
