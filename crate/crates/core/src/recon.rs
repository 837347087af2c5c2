//! Group iterative soft thresholding (GIST).
//!
//! Each iteration takes a gradient step on `||M A - Y||^2 / 2`, measures how
//! much energy the step carries around every element and its edge
//! neighbors, and thresholds elements in weak neighborhoods harder than
//! elements in strong ones. The result is clustered rather than scattered
//! supports. The iterate is projected onto box bounds after thresholding.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard in the relative-change denominator.
pub const REL_CHANGE_FLOOR: f64 = 1e-12;

/// Power-iteration steps used to estimate `||M||_2`.
pub const POWER_ITERATIONS: usize = 50;

/// `max(|t| - lambda, 0) sign(t)`.
pub fn soft_threshold(t: f64, lambda: f64) -> f64 {
    let mag = (t.abs() - lambda).max(0.0);
    if t < 0.0 {
        -mag
    } else if t > 0.0 {
        mag
    } else {
        0.0
    }
}

/// Step size: a positive constant or `1 / ||M||_2^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Step {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl Step {
    pub const AUTO: Step = Step::Auto(AutoTag::Auto);
}

impl Default for Step {
    fn default() -> Self {
        Step::AUTO
    }
}

fn default_alpha() -> f64 {
    1e-2
}
fn default_beta() -> f64 {
    0.5
}
fn default_lower() -> Option<f64> {
    Some(-0.9)
}
fn default_upper() -> Option<f64> {
    Some(10.0)
}
fn default_max_iters() -> usize {
    300
}
fn default_tol() -> f64 {
    1e-6
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GistConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub step: Step,
    /// Lower box bound; `None` is unbounded.
    #[serde(default = "default_lower")]
    pub lower: Option<f64>,
    #[serde(default = "default_upper")]
    pub upper: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub rel_change_tol: f64,
    #[serde(default)]
    pub disjoint: bool,
    #[serde(default = "default_eps")]
    pub epsilon_disjoint: f64,
}

impl Default for GistConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            step: Step::AUTO,
            lower: default_lower(),
            upper: default_upper(),
            max_iters: default_max_iters(),
            rel_change_tol: default_tol(),
            disjoint: false,
            epsilon_disjoint: default_eps(),
        }
    }
}

impl GistConfig {
    /// No box, no grouping: plain iterative soft thresholding.
    pub fn plain(alpha: f64) -> Self {
        Self {
            alpha,
            beta: 0.0,
            lower: None,
            upper: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if let Step::Fixed(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("step must be positive, got {s}")));
            }
        }
        if self.lower.is_some_and(|l| !(l <= 0.0)) || self.upper.is_some_and(|u| !(u >= 0.0)) {
            return Err(Error::Config("box bounds must contain zero".into()));
        }
        if !(self.rel_change_tol > 0.0) {
            return Err(Error::Config("rel_change_tol must be positive".into()));
        }
        if !(self.epsilon_disjoint > 0.0) {
            return Err(Error::Config("epsilon_disjoint must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    fn project(&self, v: f64, scale: f64) -> f64 {
        let v = self.lower.map_or(v, |l| v.max(l * scale));
        self.upper.map_or(v, |u| v.min(u * scale))
    }
}

/// Iterate and the intermediate quantities of the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct GistState {
    pub a: DVector<f64>,
    pub g: DVector<f64>,
    pub d: DVector<f64>,
    pub d_bar: DVector<f64>,
    pub alpha_bar: DVector<f64>,
    pub iter: usize,
}

impl GistState {
    pub fn zeros(len: usize) -> Self {
        Self {
            a: DVector::zeros(len),
            g: DVector::zeros(len),
            d: DVector::zeros(len),
            d_bar: DVector::from_element(len, 1.0),
            alpha_bar: DVector::zeros(len),
            iter: 0,
        }
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub residual: f64,
    pub nnz: usize,
    pub rel_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GistResult {
    pub a: DVector<f64>,
    pub log: Vec<IterRecord>,
    pub converged: bool,
}

/// Estimate of `||M||_2` by power iteration on `M^T M` from a fixed seed.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut v = DVector::from_fn(m.ncols(), |_, _| StandardNormal.sample(&mut rng));
    let mut est = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let n = v.norm();
        if n == 0.0 {
            return 0.0;
        }
        v /= n;
        let w = m.tr_mul(&(m * &v));
        est = w.norm();
        v = w;
    }
    est.sqrt()
}

/// GIST bound to one design matrix and one element adjacency.
#[derive(Debug, Clone)]
pub struct Gist<'a> {
    m: &'a DMatrix<f64>,
    neighbors: &'a [Vec<usize>],
    config: GistConfig,
    step: f64,
    box_scale: Option<Vec<f64>>,
}

impl<'a> Gist<'a> {
    pub fn new(m: &'a DMatrix<f64>, neighbors: &'a [Vec<usize>], config: GistConfig) -> Result<Self> {
        config.validate()?;
        if neighbors.len() != m.ncols() {
            return Err(Error::Dimension(format!(
                "{} adjacency lists for {} unknowns",
                neighbors.len(),
                m.ncols()
            )));
        }
        let step = match config.step {
            Step::Fixed(s) => s,
            Step::Auto(_) => {
                let norm = spectral_norm(m);
                if !(norm > 0.0) {
                    return Err(Error::Singular("design matrix is zero".into()));
                }
                1.0 / (norm * norm)
            }
        };
        Ok(Self {
            m,
            neighbors,
            config,
            step,
            box_scale: None,
        })
    }

    /// Per-element box: element `l` is kept in `[lower * c_l, upper * c_l]`.
    /// Used when the unknowns are rescaled copies of the physical ones.
    pub fn with_box_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.m.ncols() {
            return Err(Error::Dimension(format!("{} box scales for {} unknowns", scale.len(), self.m.ncols())));
        }
        if scale.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidInput("box scales must be positive".into()));
        }
        self.box_scale = Some(scale);
        Ok(self)
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }

    pub fn config(&self) -> &GistConfig {
        &self.config
    }

    fn gradient_step(&self, a: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let r = self.m * a - y;
        a - self.m.tr_mul(&r) * self.step
    }

    fn proxy(&self, g: &DVector<f64>) -> DVector<f64> {
        let sq = g.map(|v| v * v);
        DVector::from_fn(g.len(), |l, _| {
            sq[l] + self.config.beta * self.neighbors[l].iter().map(|&k| sq[k]).sum::<f64>()
        })
    }

    fn normalize(&self, d: &DVector<f64>) -> DVector<f64> {
        let max = d.max();
        if self.config.beta == 0.0 || !(max > 0.0) {
            return DVector::from_element(d.len(), 1.0);
        }
        d.map(|v| (v / max).max(f64::MIN_POSITIVE))
    }

    fn threshold(&self, g: &DVector<f64>, alpha_bar: &DVector<f64>) -> DVector<f64> {
        let t = g.zip_map(alpha_bar, |t, ab| soft_threshold(t, self.step * ab));
        match &self.box_scale {
            None => t.map(|v| self.config.project(v, 1.0)),
            Some(c) => DVector::from_fn(t.len(), |l, _| self.config.project(t[l], c[l])),
        }
    }

    /// One full update: proxy, generalized proxy, normalization, spatial
    /// regularization, projected thresholding.
    pub fn step(&self, y: &DVector<f64>, state: &GistState) -> Result<GistState> {
        let g = self.gradient_step(&state.a, y);
        let d = self.proxy(&g);
        let d_bar = self.normalize(&d);
        let alpha_bar = d_bar.map(|v| self.config.alpha / v);
        let a = self.threshold(&g, &alpha_bar);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iter: state.iter + 1 });
        }
        Ok(GistState {
            a,
            g,
            d,
            d_bar,
            alpha_bar,
            iter: state.iter + 1,
        })
    }

    fn record(&self, y: &DVector<f64>, prev: &DVector<f64>, next: &DVector<f64>, iter: usize) -> IterRecord {
        let rel_change = (next - prev).norm() / prev.norm().max(REL_CHANGE_FLOOR);
        IterRecord {
            iter,
            residual: (self.m * next - y).norm(),
            nnz: next.iter().filter(|&&v| v != 0.0).count(),
            rel_change,
        }
    }

    /// Iterates from zero until the relative change drops below the
    /// tolerance or `max_iters` is reached.
    pub fn solve(&self, y: &DVector<f64>) -> Result<GistResult> {
        if y.len() != self.m.nrows() {
            return Err(Error::Dimension("data length does not match the design matrix".into()));
        }
        let mut state = GistState::zeros(self.m.ncols());
        let mut log = Vec::new();
        for _ in 0..self.config.max_iters {
            let next = self.step(y, &state)?;
            let rec = self.record(y, &state.a, &next.a, next.iter);
            log.push(rec);
            state = next;
            if rec.rel_change < self.config.rel_change_tol {
                return Ok(GistResult {
                    a: state.a,
                    log,
                    converged: true,
                });
            }
        }
        Ok(GistResult {
            a: state.a,
            log,
            converged: false,
        })
    }

    /// Joint solve of several systems sharing `M`, coupled by the disjoint
    /// sparsity rule on the normalized proxies.
    pub fn solve_disjoint(&self, ys: &[DVector<f64>]) -> Result<Vec<GistResult>> {
        let n = self.m.ncols();
        if ys.iter().any(|y| y.len() != self.m.nrows()) {
            return Err(Error::Dimension("data length does not match the design matrix".into()));
        }
        let mut a: Vec<DVector<f64>> = vec![DVector::zeros(n); ys.len()];
        let mut logs = vec![Vec::new(); ys.len()];
        for iter in 1..=self.config.max_iters {
            let g: Vec<DVector<f64>> = a.iter().zip(ys).map(|(ak, y)| self.gradient_step(ak, y)).collect();
            let d_bar: Vec<DVector<f64>> = g.iter().map(|gk| self.normalize(&self.proxy(gk))).collect();
            let d_bar = disjoint_update(&d_bar, self.config.epsilon_disjoint);
            let mut done = true;
            for k in 0..ys.len() {
                let alpha_bar = d_bar[k].map(|v| self.config.alpha / v);
                let next = self.threshold(&g[k], &alpha_bar);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { iter });
                }
                let rec = self.record(&ys[k], &a[k], &next, iter);
                done &= rec.rel_change < self.config.rel_change_tol;
                logs[k].push(rec);
                a[k] = next;
            }
            if done {
                break;
            }
        }
        Ok(a.into_iter()
            .zip(logs)
            .map(|(a, log)| {
                let converged = log.last().is_some_and(|r| r.rel_change < self.config.rel_change_tol);
                GistResult { a, log, converged }
            })
            .collect())
    }
}

/// Keeps, per element, only the largest normalized proxy across abundances;
/// the others are set to `epsilon`. Ties go to the smallest index.
pub fn disjoint_update(d_bar: &[DVector<f64>], epsilon: f64) -> Vec<DVector<f64>> {
    if d_bar.len() <= 1 {
        return d_bar.to_vec();
    }
    let len = d_bar[0].len();
    let mut out: Vec<DVector<f64>> = d_bar.iter().map(|v| DVector::from_element(v.len(), epsilon)).collect();
    for l in 0..len {
        let mut best = 0;
        for k in 1..d_bar.len() {
            if d_bar[k][l] > d_bar[best][l] {
                best = k;
            }
        }
        out[best][l] = d_bar[best][l];
    }
    out
}

/// Convenience wrapper: `Gist::new(..).solve(y)`.
pub fn gist_solve(
    m: &DMatrix<f64>,
    y: &DVector<f64>,
    neighbors: &[Vec<usize>],
    config: GistConfig,
) -> Result<GistResult> {
    Gist::new(m, neighbors, config)?.solve(y)
}

/// Adjacency of a 1D chain, `l` next to `l - 1` and `l + 1`.
pub fn chain_neighbors(len: usize) -> Vec<Vec<usize>> {
    (0..len)
        .map(|l| {
            let mut v = Vec::with_capacity(2);
            if l > 0 {
                v.push(l - 1);
            }
            if l + 1 < len {
                v.push(l + 1);
            }
            v
        })
        .collect()
}
