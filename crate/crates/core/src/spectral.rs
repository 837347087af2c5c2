//! Spectral profiles, the spectral matrix and the decoupling operators.
//!
//! The conductivity is separable, `sigma(x, w) = sum_k sigma_k(x) s_k(w)`,
//! so the multifrequency data matrix factors as `X = M A S` with `S_kq =
//! s_k(w_q)`. Everything here acts on the frequency side of that product.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Vandermonde condition numbers above this trigger a warning.
pub const VANDERMONDE_WARN: f64 = 1e8;

/// One spectral profile `s_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Monomial coefficients `a_0, a_1, ...` of `sum a_n w^n`.
    Poly(Vec<f64>),
    /// Values at the working frequencies, in order.
    Table(Vec<f64>),
}

impl Profile {
    pub fn constant(c: f64) -> Self {
        Profile::Poly(vec![c])
    }

    /// Value at working frequency index `q`, whose frequency is `w`.
    pub fn eval(&self, q: usize, w: f64) -> f64 {
        match self {
            Profile::Poly(c) => c.iter().rev().fold(0.0, |acc, &a| acc * w + a),
            Profile::Table(v) => v.get(q).copied().unwrap_or(f64::NAN),
        }
    }

    /// Polynomial coefficients, if the profile is a polynomial.
    pub fn coefficients(&self) -> Option<&[f64]> {
        match self {
            Profile::Poly(c) => Some(c),
            Profile::Table(_) => None,
        }
    }
}

/// Profiles `s_0..s_K` together with the working frequencies. `s_0` is the
/// known background profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    pub profiles: Vec<Profile>,
    pub frequencies: Vec<f64>,
}

impl SpectralModel {
    pub fn new(profiles: Vec<Profile>, frequencies: Vec<f64>) -> Result<Self> {
        let model = Self {
            profiles,
            frequencies,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::InvalidInput("spectral model needs the background profile".into()));
        }
        if self.frequencies.is_empty() {
            return Err(Error::InvalidInput("spectral model needs at least one frequency".into()));
        }
        if self.frequencies.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("frequencies must be finite".into()));
        }
        if self.frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("frequencies must be strictly increasing".into()));
        }
        for (k, p) in self.profiles.iter().enumerate() {
            if let Profile::Table(v) = p {
                if v.len() != self.frequencies.len() {
                    return Err(Error::Dimension(format!(
                        "profile {k} tabulates {} values for {} frequencies",
                        v.len(),
                        self.frequencies.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of profiles, `K + 1`.
    pub fn num_profiles(&self) -> usize {
        self.profiles.len()
    }

    pub fn num_frequencies(&self) -> usize {
        self.frequencies.len()
    }

    pub fn value(&self, k: usize, q: usize) -> f64 {
        self.profiles[k].eval(q, self.frequencies[q])
    }

    /// `s_0(w_q)` for every `q`.
    pub fn background(&self) -> Vec<f64> {
        (0..self.num_frequencies()).map(|q| self.value(0, q)).collect()
    }
}

/// `S_kq = s_k(w_q)` with its numerical rank and condition number.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMatrix {
    pub values: DMatrix<f64>,
    pub rank: usize,
    /// Ratio of the largest to the smallest nonzero singular value.
    pub condition: f64,
}

impl SpectralMatrix {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (k, q) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::NonFiniteProfile { k, q });
        }
        let sv = values.singular_values();
        let max = sv.iter().copied().fold(0.0, f64::max);
        let kept: Vec<f64> = sv
            .iter()
            .copied()
            .filter(|&s| max > 0.0 && s > RANK_TOLERANCE * max)
            .collect();
        let min = kept.iter().copied().fold(f64::INFINITY, f64::min);
        let condition = if kept.is_empty() { f64::INFINITY } else { max / min };
        Ok(Self {
            rank: kept.len(),
            condition,
            values,
        })
    }

    /// `K + 1`.
    pub fn num_profiles(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_frequencies(&self) -> usize {
        self.values.ncols()
    }

    pub fn has_full_row_rank(&self) -> bool {
        self.rank == self.num_profiles()
    }
}

pub fn sample_spectral_matrix(model: &SpectralModel) -> Result<SpectralMatrix> {
    model.validate()?;
    let values = DMatrix::from_fn(model.num_profiles(), model.num_frequencies(), |k, q| {
        model.value(k, q)
    });
    SpectralMatrix::from_matrix(values)
}

/// Minimum-norm right inverse `S^+` (Q x (K+1)) with `S S^+ = I`.
///
/// Computed from a QR factorization of `S^T = Q R`, giving `S^+ = Q R^{-T}`.
pub fn right_inverse(s: &SpectralMatrix) -> Result<DMatrix<f64>> {
    if !s.has_full_row_rank() {
        return Err(Error::RankDeficient {
            rank: s.rank,
            expected: s.num_profiles(),
            condition: s.condition,
        });
    }
    let qr = s.values.transpose().qr();
    let r = qr.r();
    let q = qr.q();
    let r_inv_t = r
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::Singular("triangular factor of the spectral matrix".into()))?;
    Ok(q * r_inv_t)
}

/// `Y = X S^+`, returned column by column as `Y_0..Y_K`.
pub fn decouple(x: &DMatrix<f64>, s: &SpectralMatrix) -> Result<Vec<DVector<f64>>> {
    if x.ncols() != s.num_frequencies() {
        return Err(Error::Dimension(format!(
            "data has {} frequency columns, spectral matrix has {}",
            x.ncols(),
            s.num_frequencies()
        )));
    }
    let y = x * right_inverse(s)?;
    Ok(y.column_iter().map(|c| c.into_owned()).collect())
}

/// Weighted frequency difference: the second column of `[X1 X2] S^{-1}` for
/// a 2x2 spectral matrix, `(s_0(w_1) X2 - s_0(w_2) X1) / det S`.
pub fn weighted_fd(x1: &[f64], x2: &[f64], s: &Matrix2<f64>) -> Result<Vec<f64>> {
    if x1.len() != x2.len() {
        return Err(Error::Dimension("frequency data vectors differ in length".into()));
    }
    let det = s.determinant();
    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(det.abs() > 1e-14 * scale * scale) {
        return Err(Error::Singular(format!("2x2 spectral matrix has determinant {det:e}")));
    }
    let (a, b) = (s[(0, 0)], s[(0, 1)]);
    Ok(x1.iter().zip(x2).map(|(u, v)| (a * v - b * u) / det).collect())
}

/// Forward-differenced data and spectral rows for frequency-difference imaging.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSystem {
    /// `|P| x (Q-1)` differenced spectral rows of the active profiles.
    pub s_tilde: SpectralMatrix,
    /// `J x (Q-1)` differenced data.
    pub x_diff: DMatrix<f64>,
    pub active: Vec<usize>,
}

/// Replaces each frequency derivative by its forward difference and keeps
/// only the profiles in `active`.
pub fn difference_system(
    x: &DMatrix<f64>,
    s: &SpectralMatrix,
    frequencies: &[f64],
    active: &[usize],
) -> Result<DifferenceSystem> {
    let q = frequencies.len();
    if q < 2 {
        return Err(Error::InvalidInput("difference imaging needs two frequencies".into()));
    }
    if frequencies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "frequencies must be distinct and increasing".into(),
        ));
    }
    if x.ncols() != q || s.num_frequencies() != q {
        return Err(Error::Dimension("data, spectra and frequencies disagree on Q".into()));
    }
    if active.is_empty() {
        return Err(Error::InvalidInput("active profile set is empty".into()));
    }
    if let Some(&k) = active.iter().find(|&&k| k >= s.num_profiles()) {
        return Err(Error::InvalidInput(format!("active profile {k} does not exist")));
    }
    let dw: Vec<f64> = frequencies.windows(2).map(|w| w[1] - w[0]).collect();
    let x_diff = DMatrix::from_fn(x.nrows(), q - 1, |j, c| (x[(j, c + 1)] - x[(j, c)]) / dw[c]);
    let s_rows = DMatrix::from_fn(active.len(), q - 1, |p, c| {
        let k = active[p];
        (s.values[(k, c + 1)] - s.values[(k, c)]) / dw[c]
    });
    Ok(DifferenceSystem {
        s_tilde: SpectralMatrix::from_matrix(s_rows)?,
        x_diff,
        active: active.to_vec(),
    })
}

/// Monomial moments `B_0..B_N` of the data rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub b: Vec<DVector<f64>>,
    /// Condition number of the Vandermonde matrix used in the fit.
    pub condition: f64,
}

/// Fits every data row by a polynomial of degree `degree` in `w`.
pub fn poly_moments(x: &DMatrix<f64>, frequencies: &[f64], degree: usize) -> Result<Moments> {
    let q = frequencies.len();
    if x.ncols() != q {
        return Err(Error::Dimension("data columns must match frequencies".into()));
    }
    if q < degree + 1 {
        return Err(Error::InvalidInput(format!(
            "degree {degree} needs at least {} frequencies, got {q}",
            degree + 1
        )));
    }
    let mut sorted = frequencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("frequencies must be distinct".into()));
    }
    let v = DMatrix::from_fn(q, degree + 1, |r, n| frequencies[r].powi(n as i32));
    let sv = v.singular_values();
    let condition = sv.max() / sv.min();
    if condition > VANDERMONDE_WARN {
        log::warn!("Vandermonde matrix is ill-conditioned (condition number {condition:e})");
    }
    // rows of X are samples; solve V c = x_row for every row at once
    let coeffs = v
        .svd(true, true)
        .solve(&x.transpose(), 0.0)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(Moments {
        b: coeffs.row_iter().map(|r| r.transpose()).collect(),
        condition,
    })
}

/// `a0[0] B_n - a0[n] B_0` with `a0` the known coefficients of `s_0`.
///
/// With two profiles this equals `(a0[0] a1[n] - a0[n] a1[0]) Y_1`, so the
/// support and sign pattern of `Y_1` survive up to one unknown factor.
pub fn partial_recover(b: &[DVector<f64>], alpha0: &[f64], n: usize) -> Result<DVector<f64>> {
    if n == 0 {
        return Err(Error::InvalidInput("moment index 0 carries no information".into()));
    }
    if n >= b.len() {
        return Err(Error::InvalidInput(format!("moment {n} was not computed")));
    }
    let a00 = alpha0.first().copied().unwrap_or(0.0);
    let a0n = alpha0.get(n).copied().unwrap_or(0.0);
    Ok(&b[n] * a00 - &b[0] * a0n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn exam1i() -> SpectralModel {
        SpectralModel::new(
            vec![
                Profile::constant(1.0),
                Profile::Poly(vec![0.1, 0.1]),
                Profile::Poly(vec![0.0, 0.2]),
            ],
            vec![0.0, 0.5, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn samples_profiles_entrywise() {
        let s = sample_spectral_matrix(&exam1i()).unwrap();
        let expected = dmatrix![1.0, 1.0, 1.0; 0.1, 0.15, 0.2; 0.0, 0.1, 0.2];
        assert!((s.values.clone() - expected).amax() < 1e-15);
        // 0.1 w + 0.1 = 0.1 * 1 + 0.5 * (0.2 w): the background row makes it singular
        assert_eq!(s.rank, 2);
        let without_background = SpectralMatrix::from_matrix(s.values.rows(1, 2).into_owned()).unwrap();
        assert_eq!(without_background.rank, 2);
    }

    #[test]
    fn proportional_profiles_have_rank_one() {
        for q in [2, 3, 5] {
            let freqs: Vec<f64> = (0..q).map(|i| i as f64 / 4.0).collect();
            let model = SpectralModel::new(
                vec![Profile::Poly(vec![1.0, 1.0]), Profile::Poly(vec![2.0, 2.0])],
                freqs,
            )
            .unwrap();
            let s = sample_spectral_matrix(&model).unwrap();
            assert_eq!(s.rank, 1);
            assert!(matches!(
                right_inverse(&s),
                Err(Error::RankDeficient { rank: 1, expected: 2, .. })
            ));
        }
    }

    #[test]
    fn scalar_case() {
        let model = SpectralModel::new(vec![Profile::constant(1.0)], vec![0.3]).unwrap();
        let s = sample_spectral_matrix(&model).unwrap();
        assert_eq!(s.values, dmatrix![1.0]);
        assert_eq!(s.rank, 1);
        assert_eq!(right_inverse(&s).unwrap(), dmatrix![1.0]);
    }

    #[test]
    fn non_finite_profile_is_named() {
        let model = SpectralModel::new(
            vec![Profile::constant(1.0), Profile::Table(vec![1.0, f64::NAN])],
            vec![0.0, 1.0],
        )
        .unwrap();
        assert!(matches!(
            sample_spectral_matrix(&model),
            Err(Error::NonFiniteProfile { k: 1, q: 1 })
        ));
    }

    #[test]
    fn identity_inverse() {
        let s = SpectralMatrix::from_matrix(DMatrix::identity(2, 2)).unwrap();
        let inv = right_inverse(&s).unwrap();
        assert!((inv - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn right_inverse_residual() {
        let model = SpectralModel::new(
            vec![
                Profile::Poly(vec![0.2, 0.2]),
                Profile::Poly(vec![0.0, 0.0, 0.1]),
                Profile::Poly(vec![0.1, 0.2]),
            ],
            vec![0.0, 0.5, 1.0],
        )
        .unwrap();
        let s = sample_spectral_matrix(&model).unwrap();
        let inv = right_inverse(&s).unwrap();
        assert!((&s.values * inv - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn single_profile_collapse_is_least_squares() {
        let s = SpectralMatrix::from_matrix(dmatrix![1.0, 1.0, 1.0]).unwrap();
        let x = dmatrix![1.0, 2.0, 6.0; -3.0, 0.0, 0.0];
        let y = decouple(&x, &s).unwrap();
        assert!((y[0][0] - 3.0).abs() < 1e-14);
        assert!((y[0][1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn weighted_fd_identity_and_equal_backgrounds() {
        let x1 = [1.0, 2.0];
        let x2 = [3.0, 5.0];
        assert_eq!(weighted_fd(&x1, &x2, &Matrix2::identity()).unwrap(), vec![3.0, 5.0]);
        let s = Matrix2::new(2.0, 2.0, 1.0, 3.0);
        let out = weighted_fd(&x1, &x2, &s).unwrap();
        // det = 4, so the result is (X2 - X1) / 2
        assert_eq!(out, vec![1.0, 1.5]);
        assert!(weighted_fd(&x1, &x2, &Matrix2::new(1.0, 2.0, 2.0, 4.0)).is_err());
    }

    #[test]
    fn difference_rows_by_hand() {
        let model = SpectralModel::new(
            vec![
                Profile::constant(1.0),
                Profile::Poly(vec![0.1, 0.1]),
                Profile::Poly(vec![0.0, 0.0, 0.1]),
            ],
            vec![0.0, 0.5, 1.0],
        )
        .unwrap();
        let s = sample_spectral_matrix(&model).unwrap();
        let x = DMatrix::from_fn(2, 3, |j, q| (j + q) as f64);
        let d = difference_system(&x, &s, &model.frequencies, &[0, 1, 2]).unwrap();
        let rows = &d.s_tilde.values;
        assert_eq!(rows.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert!((rows[(1, 0)] - 0.1).abs() < 1e-15 && (rows[(1, 1)] - 0.1).abs() < 1e-15);
        assert!((rows[(2, 0)] - 0.05).abs() < 1e-15 && (rows[(2, 1)] - 0.15).abs() < 1e-15);
        assert_eq!(d.x_diff, DMatrix::from_element(2, 2, 2.0));
        assert!(difference_system(&x.columns(0, 1).into_owned(), &s, &[0.0], &[1]).is_err());
    }

    #[test]
    fn moments_of_linear_rows() {
        let freqs = [0.0, 0.5, 1.0];
        let x = DMatrix::from_fn(4, 3, |_, q| 3.0 + 2.0 * freqs[q]);
        let m = poly_moments(&x, &freqs, 1).unwrap();
        assert!(m.b[0].iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert!(m.b[1].iter().all(|v| (v - 2.0).abs() < 1e-12));
        let c = DMatrix::from_fn(2, 3, |j, _| j as f64 + 0.5);
        let m0 = poly_moments(&c, &freqs, 0).unwrap();
        assert!((m0.b[0][1] - 1.5).abs() < 1e-12);
        assert!(poly_moments(&x.columns(0, 2).into_owned(), &freqs[..2], 2).is_err());
    }

    #[test]
    fn partial_recovery_is_parallel() {
        let y0 = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let y1 = DVector::from_vec(vec![0.0, 3.0, -1.0]);
        // s_0 = 1, s_1 = 2w: B_0 = Y_0, B_1 = 2 Y_1
        let b = vec![y0.clone(), &y1 * 2.0];
        let out = partial_recover(&b, &[1.0, 0.0], 1).unwrap();
        assert_eq!(out, &y1 * 2.0);
        assert!(partial_recover(&b, &[1.0, 0.0], 0).is_err());
        let zero = partial_recover(&[y0, DVector::zeros(3)], &[1.0, 0.0], 1).unwrap();
        assert_eq!(zero, DVector::zeros(3));
    }
}
