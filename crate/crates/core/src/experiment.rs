//! Config-driven experiments: phantom, forward simulation, linearization,
//! decoupling and reconstruction, with every artifact written to disk.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{reference_solutions, trig_current_patterns, ElectrodeCurrents};
use crate::linearize::{assemble_data_cem, assemble_sensitivity, build_system, CentroidTransfer, Mode};
use crate::mesh::{build_disk_mesh, place_electrodes, ElectrodeLayout, Mesh};
use crate::output::{fmt_f64, write_matrix_csv, write_vector_csv};
use crate::phantom::{builtin, deformed_truth, metrics, rasterize_phantom, simulate_sweep, Metrics, NoisySweep, PhantomSpec};
use crate::recon::{Gist, GistConfig, IterRecord, Step};
use crate::spectral::{partial_recover, poly_moments, sample_spectral_matrix, SpectralModel};

/// A built-in phantom name or an inline specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhantomRef {
    Name(String),
    Inline(PhantomSpec),
}

impl PhantomRef {
    pub fn resolve(&self) -> Result<PhantomSpec> {
        let spec = match self {
            PhantomRef::Name(n) => builtin(n)?,
            PhantomRef::Inline(s) => s.clone(),
        };
        spec.validate().map_err(|e| Error::Config(format!("phantom: {e}")))?;
        Ok(spec)
    }
}

/// How the frequency dimension is handled in the inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    /// Right-inverse decoupling of all recoverable profiles.
    Direct,
    /// Forward-difference imaging over the active profiles.
    Difference { active: Vec<usize> },
    /// Polynomial moments with two profiles: recovers `delta sigma_1` up to scale.
    PartialPoly { degree: usize, n: usize },
    /// Single-frequency static imaging of column `frequency` of `X`.
    Static { frequency: usize },
}

/// How `gist.alpha` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaScale {
    /// Multiplied by `||M^t Y_k||_inf` of each system, which makes it
    /// independent of the data amplitude and of the pixel size.
    #[default]
    Relative,
    /// Passed to the solver unchanged.
    Absolute,
}

/// Change of unknowns `B_l = c_l A_l` applied before the solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnScaling {
    /// `c_l = 1`.
    None,
    /// `c_l = |M_l|`: every column of the design matrix has unit norm, so
    /// deep and shallow pixels move at the same rate under the constant step.
    #[default]
    UnitNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SolveOptions {
    alpha_scale: AlphaScale,
    column_scaling: ColumnScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectrodeConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_arc")]
    pub arc_length: f64,
    /// Contact constant `c_j`, the same for every electrode.
    #[serde(default = "default_contact")]
    pub contact: f64,
}

fn default_count() -> usize {
    16
}
fn default_arc() -> f64 {
    PI / 16.0
}
fn default_contact() -> f64 {
    1.0
}
fn default_mode() -> ModeConfig {
    ModeConfig::Direct
}
fn default_h_inv() -> f64 {
    0.0636
}
fn default_noise() -> f64 {
    0.01
}
fn default_threshold() -> f64 {
    0.25
}

impl Default for ElectrodeConfig {
    fn default() -> Self {
        Self {
            count: default_count(),
            arc_length: default_arc(),
            contact: default_contact(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomRef,
    /// Profiles assumed by the inversion; the phantom's own profiles if absent.
    #[serde(default)]
    pub spectral: Option<SpectralModel>,
    #[serde(default = "default_mode")]
    pub mode: ModeConfig,
    /// Whether `delta sigma_0` is an unknown. Defaults to true exactly when
    /// the truth domain or electrodes are deformed.
    #[serde(default)]
    pub recover_background: Option<bool>,
    /// Simulation mesh size; half of `h_inv` if absent.
    #[serde(default)]
    pub h_sim: Option<f64>,
    #[serde(default = "default_h_inv")]
    pub h_inv: f64,
    #[serde(default)]
    pub electrodes: ElectrodeConfig,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gist: GistConfig,
    #[serde(default)]
    pub alpha_scale: AlphaScale,
    #[serde(default)]
    pub column_scaling: ColumnScaling,
    /// Relative threshold defining supports for the Jaccard index.
    #[serde(default = "default_threshold")]
    pub support_threshold: f64,
    #[serde(default)]
    pub write_sensitivity: bool,
    #[serde(default)]
    pub write_data: bool,
}

impl ExperimentConfig {
    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            alpha_scale: self.alpha_scale,
            column_scaling: self.column_scaling,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn h_sim(&self) -> f64 {
        self.h_sim.unwrap_or(0.5 * self.h_inv)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.h_inv > 0.0 && self.h_inv < 1.0) {
            return bad(format!("h_inv must lie in (0, 1), got {}", self.h_inv));
        }
        if !(self.h_sim() > 0.0) || self.h_sim() > self.h_inv {
            return bad(format!("h_sim {} must be positive and at most h_inv", self.h_sim()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be nonnegative, got {}", self.noise));
        }
        if self.electrodes.count < 2 || !(self.electrodes.arc_length > 0.0) || !(self.electrodes.contact > 0.0) {
            return bad("electrodes need count >= 2, positive arc length and contact".into());
        }
        if !(self.support_threshold > 0.0 && self.support_threshold < 1.0) {
            return bad("support_threshold must lie in (0, 1)".into());
        }
        self.gist.validate()?;
        match &self.mode {
            ModeConfig::Difference { active } if active.is_empty() => {
                bad("difference mode requires a nonempty active set".into())
            }
            ModeConfig::PartialPoly { n: 0, .. } => bad("partial_poly needs n >= 1".into()),
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One recovered unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    /// File label: `k<k>` or `static`.
    pub label: String,
    /// Abundance index for decoupled recoveries.
    pub k: Option<usize>,
    pub values: Vec<f64>,
    pub log: Vec<IterRecord>,
    pub converged: bool,
    /// Known rather than recovered: the background perturbation when the
    /// boundary is trusted.
    pub fixed: bool,
}

/// Metrics of one recovery against one truth abundance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub k: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub recoveries: Vec<Recovery>,
    /// Per recovery label, metrics against the truth abundances.
    pub metrics: BTreeMap<String, Vec<MetricRow>>,
    /// Truth abundances rasterized on the inversion mesh.
    pub truth: Vec<Vec<f64>>,
    pub inversion_mesh: Mesh,
    pub timing_ms: BTreeMap<String, u128>,
}

impl ExperimentReport {
    pub fn recovery(&self, label: &str) -> Option<&Recovery> {
        self.recoveries.iter().find(|r| r.label == label)
    }

    pub fn metric(&self, label: &str, k: usize) -> Option<Metrics> {
        self.metrics.get(label)?.iter().find(|r| r.k == k).map(|r| r.metrics)
    }
}

/// Everything computed before the reconstruction step.
struct Prepared {
    spec: PhantomSpec,
    sim_mesh: Mesh,
    truth_mesh: Option<(Mesh, ElectrodeLayout)>,
    sim_layout: ElectrodeLayout,
    patterns: Vec<ElectrodeCurrents>,
    reference_voltages: Vec<Vec<f64>>,
    reference_potentials: Vec<Vec<f64>>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(_) => e,
        other => other.in_stage(name),
    })
}

fn prepare(cfg: &ExperimentConfig, timing: &mut BTreeMap<String, u128>) -> Result<Prepared> {
    let spec = cfg.phantom.resolve()?;
    let el = &cfg.electrodes;
    let contact = vec![el.contact; el.count];

    let t = Instant::now();
    let mut sim_mesh = stage("mesh", build_disk_mesh(1.0, cfg.h_sim()))?;
    let sim_layout = stage(
        "mesh",
        place_electrodes(&mut sim_mesh, el.count, el.arc_length, &[]).and_then(|l| l.with_contact(contact.clone())),
    )?;
    let truth_mesh = if spec.is_deformed() {
        Some(stage("mesh", deformed_truth(&spec, cfg.h_sim(), el.count, el.arc_length, &contact))?)
    } else {
        None
    };
    timing.insert("mesh".into(), t.elapsed().as_millis());

    let t = Instant::now();
    let patterns = stage("forward", trig_current_patterns(el.count))?;
    let refs = stage("forward", reference_solutions(&sim_mesh, &sim_layout, &contact, &patterns))?;
    timing.insert("reference".into(), t.elapsed().as_millis());
    Ok(Prepared {
        spec,
        sim_mesh,
        truth_mesh,
        sim_layout,
        patterns,
        reference_voltages: refs.iter().map(|r| r.voltages.clone()).collect(),
        reference_potentials: refs.into_iter().map(|r| r.u).collect(),
    })
}

impl Prepared {
    fn truth(&self) -> (&Mesh, &ElectrodeLayout) {
        match &self.truth_mesh {
            Some((m, l)) => (m, l),
            None => (&self.sim_mesh, &self.sim_layout),
        }
    }

    fn sweep(&self, noise: f64, seed: u64) -> Result<NoisySweep> {
        let (mesh, layout) = self.truth();
        stage("simulate", simulate_sweep(&self.spec, mesh, layout, &self.patterns, noise, seed))
    }

    fn sensitivity(&self, inv_mesh: &Mesh) -> Result<DMatrix<f64>> {
        let transfer = stage("linearize", CentroidTransfer::new(&self.sim_mesh, inv_mesh))?;
        stage(
            "linearize",
            assemble_sensitivity(&self.sim_mesh, &self.reference_potentials, &transfer),
        )
    }

    fn data(&self, sweep: &NoisySweep, model: &SpectralModel) -> Result<DMatrix<f64>> {
        stage(
            "linearize",
            assemble_data_cem(&sweep.noisy, &self.reference_voltages, &self.patterns, &model.background()),
        )
    }
}

fn recovers_background(cfg: &ExperimentConfig, spec: &PhantomSpec) -> bool {
    cfg.recover_background.unwrap_or(spec.is_deformed())
}

/// The spectral model assumed by the inversion.
fn inversion_model(cfg: &ExperimentConfig, spec: &PhantomSpec) -> Result<SpectralModel> {
    let model = cfg.spectral.clone().unwrap_or_else(|| spec.spectral.clone());
    model.validate().map_err(|e| Error::Config(format!("spectral: {e}")))?;
    if model.frequencies != spec.spectral.frequencies {
        return Err(Error::Config("inversion and phantom frequencies differ".into()));
    }
    Ok(model)
}

type Labelled = Vec<(String, Option<usize>, DVector<f64>)>;

/// Right-hand sides with their labels, ready for GIST.
fn decoupled_systems(
    cfg: &ExperimentConfig,
    spec: &PhantomSpec,
    model: &SpectralModel,
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<Labelled> {
    let recover_background = recovers_background(cfg, spec);
    let s = stage("spectral", sample_spectral_matrix(model))?;
    let freqs = &model.frequencies;
    let labelled = |sys: Vec<crate::linearize::DecoupledSystem>| {
        sys.into_iter()
            .map(|d| (format!("k{}", d.k), Some(d.k), d.rhs))
            .collect::<Vec<_>>()
    };
    match &cfg.mode {
        ModeConfig::Direct => {
            let first = if recover_background { 0 } else { 1 };
            let profiles: Vec<usize> = (first..model.num_profiles()).collect();
            if profiles.is_empty() {
                return Err(Error::Config("no profiles to recover".into()));
            }
            Ok(labelled(stage("spectral", build_system(m, x, &s, freqs, &Mode::Direct { profiles }))?))
        }
        ModeConfig::Difference { active } => {
            if active.iter().any(|&k| k >= model.num_profiles()) {
                return Err(Error::Config("active set names a missing profile".into()));
            }
            Ok(labelled(stage(
                "spectral",
                build_system(m, x, &s, freqs, &Mode::Difference { active: active.clone() }),
            )?))
        }
        ModeConfig::PartialPoly { degree, n } => {
            if model.num_profiles() != 2 {
                return Err(Error::Config("partial_poly supports exactly two profiles".into()));
            }
            let alpha0 = model.profiles[0]
                .coefficients()
                .ok_or_else(|| Error::Config("partial_poly needs a polynomial s_0".into()))?
                .to_vec();
            let moments = stage("spectral", poly_moments(x, freqs, *degree))?;
            let rhs = stage("spectral", partial_recover(&moments.b, &alpha0, *n))?;
            Ok(vec![("k1".into(), Some(1), rhs)])
        }
        ModeConfig::Static { frequency } => {
            if *frequency >= x.ncols() {
                return Err(Error::Config(format!("static frequency index {frequency} out of range")));
            }
            Ok(vec![("static".into(), None, x.column(*frequency).into_owned())])
        }
    }
}

/// `||M^t y||_inf`, the smallest weight for which the plain l1 problem has
/// the zero solution.
pub fn alpha_max(m: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    (m.transpose() * y).amax()
}

fn reconstruct(
    m: &DMatrix<f64>,
    neighbors: &[Vec<usize>],
    gist_cfg: &GistConfig,
    opts: SolveOptions,
    systems: Labelled,
) -> Result<Vec<Recovery>> {
    let norms: Vec<f64> = match opts.column_scaling {
        ColumnScaling::None => vec![1.0; m.ncols()],
        ColumnScaling::UnitNorm => m.column_iter().map(|c| if c.norm() > 0.0 { c.norm() } else { 1.0 }).collect(),
    };
    let scaled = opts.column_scaling != ColumnScaling::None;
    let mut design = m.clone();
    if scaled {
        for (mut c, n) in design.column_iter_mut().zip(&norms) {
            c /= *n;
        }
    }
    let design = &design;
    let mut base = gist_cfg.clone();
    base.step = Step::Fixed(stage("recon", Gist::new(design, neighbors, gist_cfg.clone()))?.step_size());
    let solver = |alpha_max: f64| -> Result<Gist<'_>> {
        let mut c = base.clone();
        if opts.alpha_scale == AlphaScale::Relative && alpha_max > 0.0 {
            c.alpha *= alpha_max;
        }
        let g = Gist::new(design, neighbors, c)?;
        if scaled {
            g.with_box_scale(norms.clone())
        } else {
            Ok(g)
        }
    };
    let recovery = |(label, k, _): (String, Option<usize>, DVector<f64>), r: crate::recon::GistResult| Recovery {
        label,
        k,
        values: r.a.iter().zip(&norms).map(|(b, n)| b / n).collect(),
        log: r.log,
        converged: r.converged,
        fixed: false,
    };
    if gist_cfg.disjoint && systems.len() > 1 {
        let ys: Vec<DVector<f64>> = systems.iter().map(|s| s.2.clone()).collect();
        let amax = ys.iter().map(|y| alpha_max(design, y)).fold(0.0, f64::max);
        let results = stage("recon", solver(amax).and_then(|g| g.solve_disjoint(&ys)))?;
        return Ok(systems.into_iter().zip(results).map(|(s, r)| recovery(s, r)).collect());
    }
    systems
        .into_par_iter()
        .map(|sys| {
            let r = stage("recon", solver(alpha_max(design, &sys.2)).and_then(|g| g.solve(&sys.2)))?;
            Ok(recovery(sys, r))
        })
        .collect()
}

/// Runs one experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Artifacts)> {
    cfg.validate()?;
    let total = Instant::now();
    let mut timing = BTreeMap::new();
    let prep = prepare(cfg, &mut timing)?;
    let inv_mesh = stage("mesh", build_disk_mesh(1.0, cfg.h_inv))?;

    let t = Instant::now();
    let sweep = prep.sweep(cfg.noise, cfg.seed)?;
    timing.insert("simulate".into(), t.elapsed().as_millis());

    let t = Instant::now();
    let model = inversion_model(cfg, &prep.spec)?;
    let m = prep.sensitivity(&inv_mesh)?;
    let x = prep.data(&sweep, &model)?;
    timing.insert("linearize".into(), t.elapsed().as_millis());

    let systems = decoupled_systems(cfg, &prep.spec, &model, &m, &x)?;
    let t = Instant::now();
    let mut recoveries = reconstruct(&m, inv_mesh.neighbors(), &cfg.gist, cfg.solve_options(), systems)?;
    timing.insert("recon".into(), t.elapsed().as_millis());
    if cfg.mode == ModeConfig::Direct && !recovers_background(cfg, &prep.spec) {
        recoveries.insert(
            0,
            Recovery {
                label: "k0".into(),
                k: Some(0),
                values: vec![0.0; inv_mesh.num_elements()],
                log: Vec::new(),
                converged: true,
                fixed: true,
            },
        );
    }

    let truth = rasterize_phantom(&prep.spec, &inv_mesh)?;
    let mut metric_map = BTreeMap::new();
    for r in &recoveries {
        let rows = match r.k {
            Some(k) => vec![MetricRow {
                k,
                metrics: metrics(&r.values, &truth[k], cfg.support_threshold)?,
            }],
            None => truth
                .iter()
                .enumerate()
                .map(|(k, t)| Ok(MetricRow { k, metrics: metrics(&r.values, t, cfg.support_threshold)? }))
                .collect::<Result<Vec<_>>>()?,
        };
        metric_map.insert(r.label.clone(), rows);
    }
    timing.insert("total".into(), total.elapsed().as_millis());

    let (truth_mesh, truth_layout) = prep.truth();
    let artifacts = Artifacts {
        truth_mesh: truth_mesh.clone(),
        truth_layout: truth_layout.clone(),
        sweep,
        sensitivity: cfg.write_sensitivity.then(|| m.clone()),
        data: cfg.write_data.then_some(x),
    };
    Ok((
        ExperimentReport {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            recoveries,
            metrics: metric_map,
            truth,
            inversion_mesh: inv_mesh,
            timing_ms: timing,
        },
        artifacts,
    ))
}

/// Intermediate results that are written to disk alongside the report.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub truth_mesh: Mesh,
    pub truth_layout: ElectrodeLayout,
    pub sweep: NoisySweep,
    pub sensitivity: Option<DMatrix<f64>>,
    pub data: Option<DMatrix<f64>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// The JSON document written as `report.json`.
pub fn report_json(report: &ExperimentReport) -> serde_json::Value {
    let metrics: Vec<serde_json::Value> = report
        .metrics
        .iter()
        .flat_map(|(label, rows)| {
            let rec = report.recovery(label);
            rows.iter().map(move |row| {
                json!({
                    "label": label,
                    "k": row.k,
                    "relative_error": fmt_f64(row.metrics.relative_error),
                    "relative_is_absolute": row.metrics.relative_is_absolute,
                    "jaccard": fmt_f64(row.metrics.jaccard),
                    "max_abs": fmt_f64(row.metrics.max_abs),
                    "iterations": rec.map_or(0, |r| r.log.len()),
                    "converged": rec.is_some_and(|r| r.converged),
                    "fixed": rec.is_some_and(|r| r.fixed),
                })
            })
        })
        .collect();
    json!({
        "config_echo": report.config,
        "config_hash": report.config_hash,
        "seed": report.config.seed,
        "versions": { "mfeit": env!("CARGO_PKG_VERSION") },
        "metrics": metrics,
        "timing_ms": report.timing_ms,
    })
}

fn write_all(dir: &Path, report: &ExperimentReport, artifacts: &Artifacts) -> Result<()> {
    // Recovered element ids refer to the inversion mesh; the simulation
    // truth goes in its own directory.
    report.inversion_mesh.write_csv(dir)?;
    artifacts.truth_layout.write_csv(dir)?;
    let truth_dir = dir.join("truth");
    fs::create_dir_all(&truth_dir)?;
    artifacts.truth_mesh.write_csv(&truth_dir)?;
    artifacts.truth_layout.write_csv(&truth_dir)?;
    for (k, a) in report.truth.iter().enumerate() {
        write_vector_csv(&truth_dir.join(format!("abundance_k{k}.csv")), "value", a)?;
    }
    let sweep = &artifacts.sweep;
    for (q, per_pattern) in sweep.noisy.iter().enumerate() {
        let header: Vec<String> = std::iter::once("pattern".to_string())
            .chain((0..artifacts.truth_layout.len()).map(|j| format!("e{j}")))
            .collect();
        let rows: Vec<Vec<f64>> = per_pattern
            .iter()
            .enumerate()
            .map(|(n, v)| std::iter::once(n as f64).chain(v.iter().copied()).collect())
            .collect();
        write_sweep_csv(&dir.join(format!("sweep_w{q}.csv")), &header, &rows)?;
    }
    let meta = json!({
        "epsilon": fmt_f64(sweep.epsilon),
        "seed": sweep.seed,
        "frequencies": sweep.frequencies.iter().map(|&w| fmt_f64(w)).collect::<Vec<_>>(),
    });
    fs::write(dir.join("sweep_meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    for r in &report.recoveries {
        write_vector_csv(&dir.join(format!("recovered_{}.csv", r.label)), "value", &r.values)?;
        let rows: Vec<Vec<f64>> = r
            .log
            .iter()
            .map(|l| vec![l.iter as f64, l.residual, l.nnz as f64, l.rel_change])
            .collect();
        write_log_csv(&dir.join(format!("iterations_{}.csv", r.label)), &rows)?;
    }
    if let Some(m) = &artifacts.sensitivity {
        let header: Vec<String> = (0..m.ncols()).map(|l| format!("l{l}")).collect();
        write_matrix_csv(&dir.join("sensitivity.csv"), &header, &matrix_rows(m))?;
    }
    if let Some(x) = &artifacts.data {
        for q in 0..x.ncols() {
            write_vector_csv(&dir.join(format!("data_w{q}.csv")), "x", x.column(q).as_slice())?;
        }
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report_json(report))? + "\n")?;
    Ok(())
}

fn write_sweep_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let mut line = format!("{}", row[0] as usize);
        for v in &row[1..] {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_log_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "iter,residual,nnz,rel_change")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r[0] as usize, fmt_f64(r[1]), r[2] as usize, fmt_f64(r[3]))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes into a staging directory next to `out` and renames it into place
/// on success; on failure nothing is left behind. An existing `out` is only
/// replaced if it holds a previous report.
pub fn write_outputs(out: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        let previous = out.join("report.json").exists() || out.join("table1.csv").exists();
        let empty = out.read_dir().map(|mut d| d.next().is_none()).unwrap_or(false);
        if !(previous || empty) {
            return Err(Error::Config(format!(
                "output directory {} exists and does not hold a previous run",
                out.display()
            )));
        }
    }
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let staging: PathBuf = out.with_file_name(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    match f(&staging) {
        Ok(()) => {
            if out.exists() {
                fs::remove_dir_all(out)?;
            }
            fs::rename(&staging, out)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

/// Runs an experiment and writes every artifact into `out`.
pub fn run_experiment_to(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let mut report = None;
    write_outputs(out, |dir| {
        let (r, artifacts) = run_experiment(cfg)?;
        write_all(dir, &r, &artifacts)?;
        report = Some(r);
        Ok(())
    })?;
    Ok(report.expect("report is set on success"))
}

fn default_h_grid() -> Vec<f64> {
    vec![0.127, 0.0636, 0.0318]
}
fn default_noise_grid() -> Vec<f64> {
    vec![1e-3, 3e-3, 1e-2]
}
fn default_alpha_grid() -> Vec<f64> {
    vec![5e-3, 1e-2, 5e-2]
}

/// Grid for the mesh-size, noise and regularization study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    pub base: ExperimentConfig,
    /// Inversion mesh sizes, coarse to fine; the last is the reference.
    #[serde(default = "default_h_grid")]
    pub h: Vec<f64>,
    #[serde(default = "default_noise_grid")]
    pub noise: Vec<f64>,
    #[serde(default = "default_alpha_grid")]
    pub alpha: Vec<f64>,
}

impl Table1Config {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.h.len() < 2 || self.noise.is_empty() || self.alpha.is_empty() {
            return Err(Error::Config("table1 needs at least two mesh sizes and one noise and alpha value".into()));
        }
        if self.h.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("table1 mesh sizes must decrease".into()));
        }
        if self.h.iter().any(|&h| !(h > 0.0 && h < 1.0)) {
            return Err(Error::Config("table1 mesh sizes must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One cell: relative error against the finest-mesh recovery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Table1Cell {
    pub alpha: f64,
    pub h: f64,
    pub noise: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    pub cells: Vec<Table1Cell>,
    pub h: Vec<f64>,
    pub noise: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Table1 {
    pub fn get(&self, alpha: f64, h: f64, noise: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.alpha == alpha && c.h == h && c.noise == noise)
            .map(|c| c.relative_error)
    }

    /// CSV laid out as one row per `(alpha, h)` and one column per noise level.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,h");
        for e in &self.noise {
            s.push_str(&format!(",eps={}", fmt_f64(*e)));
        }
        s.push('\n');
        for &a in &self.alpha {
            for &h in &self.h {
                s.push_str(&format!("{},{}", fmt_f64(a), fmt_f64(h)));
                for &e in &self.noise {
                    s.push(',');
                    s.push_str(&fmt_f64(self.get(a, h, e).unwrap_or(f64::NAN)));
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Relative error over all abundances, area weighted on the finest mesh.
fn stacked_error(coarse: &[Vec<f64>], fine: &[Vec<f64>], transfer: Option<&CentroidTransfer>, areas: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, f) in coarse.iter().zip(fine) {
        let c_on_fine = match transfer {
            Some(t) => t.pull_back(c),
            None => c.clone(),
        };
        for ((a, b), w) in c_on_fine.iter().zip(f).zip(areas) {
            num += w * (a - b).powi(2);
            den += w * b * b;
        }
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// Runs the whole grid with one simulation mesh of size `min(h) / 2` and
/// one seed. Errors are measured against the recovery on the finest mesh.
pub fn run_table1(cfg: &Table1Config) -> Result<Table1> {
    cfg.validate()?;
    let finest = *cfg.h.last().expect("validated");
    let mut base = cfg.base.clone();
    base.h_sim = Some(0.5 * finest);
    base.h_inv = finest;
    let mut timing = BTreeMap::new();
    let prep = prepare(&base, &mut timing)?;
    let model = inversion_model(&base, &prep.spec)?;

    let sweeps: Vec<NoisySweep> = cfg
        .noise
        .iter()
        .map(|&e| prep.sweep(e, base.seed))
        .collect::<Result<_>>()?;
    let meshes: Vec<Mesh> = cfg
        .h
        .iter()
        .map(|&h| stage("mesh", build_disk_mesh(1.0, h)))
        .collect::<Result<_>>()?;
    let fine_mesh = meshes.last().expect("validated");
    let transfers: Vec<Option<CentroidTransfer>> = meshes
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if i + 1 == meshes.len() {
                Ok(None)
            } else {
                stage("linearize", CentroidTransfer::new(fine_mesh, m)).map(Some)
            }
        })
        .collect::<Result<_>>()?;

    let mut recovered: BTreeMap<(usize, usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    let mut jobs = Vec::new();
    for (hi, mesh) in meshes.iter().enumerate() {
        let m = prep.sensitivity(mesh)?;
        for (ei, sweep) in sweeps.iter().enumerate() {
            let x = prep.data(sweep, &model)?;
            let systems = decoupled_systems(&base, &prep.spec, &model, &m, &x)?;
            for (ai, &alpha) in cfg.alpha.iter().enumerate() {
                jobs.push((hi, ei, ai, alpha, systems.clone()));
            }
        }
        let gist_template = base.gist.clone();
        let results: Vec<((usize, usize, usize), Vec<Vec<f64>>)> = jobs
            .drain(..)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(hi, ei, ai, alpha, systems)| {
                let gist_cfg = GistConfig { alpha, ..gist_template.clone() };
                let rec = reconstruct(&m, mesh.neighbors(), &gist_cfg, base.solve_options(), systems)?;
                Ok(((hi, ei, ai), rec.into_iter().map(|r| r.values).collect()))
            })
            .collect::<Result<_>>()?;
        recovered.extend(results);
    }

    let last = cfg.h.len() - 1;
    let mut cells = Vec::new();
    for (ai, &alpha) in cfg.alpha.iter().enumerate() {
        for (hi, &h) in cfg.h.iter().enumerate() {
            for (ei, &noise) in cfg.noise.iter().enumerate() {
                let reference = &recovered[&(last, ei, ai)];
                let coarse = &recovered[&(hi, ei, ai)];
                let relative_error = stacked_error(coarse, reference, transfers[hi].as_ref(), fine_mesh.areas());
                cells.push(Table1Cell { alpha, h, noise, relative_error });
            }
        }
    }
    Ok(Table1 {
        cells,
        h: cfg.h.clone(),
        noise: cfg.noise.clone(),
        alpha: cfg.alpha.clone(),
    })
}

/// Runs the grid and writes `table1.csv` and `table1.json` into `out`.
pub fn run_table1_to(cfg: &Table1Config, out: &Path) -> Result<Table1> {
    let mut table = None;
    write_outputs(out, |dir| {
        let t = run_table1(cfg)?;
        fs::write(dir.join("table1.csv"), t.to_csv())?;
        let doc = json!({
            "config_echo": cfg,
            "seed": cfg.base.seed,
            "cells": t.cells.iter().map(|c| json!({
                "alpha": fmt_f64(c.alpha),
                "h": fmt_f64(c.h),
                "noise": fmt_f64(c.noise),
                "relative_error": fmt_f64(c.relative_error),
            })).collect::<Vec<_>>(),
        });
        fs::write(dir.join("table1.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        table = Some(t);
        Ok(())
    })?;
    Ok(table.expect("table is set on success"))
}
