//! Primal and dual certificates for the thermal-state HCRB semidefinite
//! program, and their numerical verification.
//!
//! The program pairs a Hermitian `X = X₁ ⊕ X₂` (4 + 4 dimensional) against
//! `C = [[0, I], [I, 0]] ⊕ 0₄ ⊕ ℂ` with `ℂ = (I + iD/2)⁻¹`. Verification is
//! blockwise. The primal value is taken as `tr{X₁ · 0₄} + Re tr{X₂ · (0₂ ⊕ ℂ)}`;
//! `X₂` is supported on the same 2×2 corner as `ℂ`, and that pairing alone
//! reproduces `4 + 2n₁ + 2n₂`. The dual value is `yᵀb`.

use nalgebra::{Complex, DMatrix, Matrix2, Matrix4, SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bounds::{hcrb_thermal, ThermalParams};
use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Eigenvalues at or above `−PSD_TOL` count as non-negative.
pub const PSD_TOL: f64 = 1e-9;

/// Default tolerance for [`verify_certificates`].
pub const DEFAULT_TOL: f64 = 1e-9;

/// The fixed data of the program at one `(n1, n2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpData {
    /// Columns `e₁, e₂` of the symplectic basis.
    pub e: Matrix2<f64>,
    pub m: Matrix2<f64>,
    pub d: Matrix2<f64>,
    /// `A₁..A₆` (the last three are zero).
    pub a: [Matrix2<f64>; 6],
    /// `B₁..B₆` (the first three are zero).
    pub b_mats: [Matrix2<f64>; 6],
    pub b: [f64; 6],
    /// First block of `C`.
    pub c_real: Matrix4<f64>,
    /// `ℂ = (I + iD/2)⁻¹`; `None` when singular (vacuum, `n1 = n2 = 0`).
    pub c_complex: Option<Matrix2<C64>>,
}

pub fn build_sdp_data(params: ThermalParams) -> SdpData {
    let (v1, v2) = (params.v1(), params.v2());
    let (s1, s2) = (v1.sqrt(), v2.sqrt());
    let k = 2.0 / (v1 * v2).sqrt();
    let a1 = Matrix2::new(1.0, 0.0, 0.0, 0.0);
    let a2 = Matrix2::new(0.0, 0.0, 0.0, 1.0);
    let a3 = Matrix2::new(0.0, 1.0, 1.0, 0.0);
    let z = Matrix2::zeros();
    let d = Matrix2::new(0.0, k, -k, 0.0);
    let i = C64::new(0.0, 1.0);
    let shifted: Matrix2<C64> = Matrix2::identity() + d.map(|v| i * (v / 2.0));
    let mut c_real = Matrix4::zeros();
    c_real.fixed_view_mut::<2, 2>(0, 2).fill_with_identity();
    c_real.fixed_view_mut::<2, 2>(2, 0).fill_with_identity();
    SdpData {
        e: Matrix2::new(0.0, 1.0 / s2, 1.0 / s1, 0.0),
        m: Matrix2::new(1.0 / s1, 0.0, 0.0, 1.0 / s2),
        d,
        a: [a1, a2, a3, z, z, z],
        b_mats: [z, z, z, a1, a2, a3],
        b: [0.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        c_real,
        c_complex: if params.is_vacuum() {
            None
        } else {
            shifted.try_inverse()
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalCertificate {
    pub x1: Matrix4<f64>,
    pub x2: Matrix4<C64>,
    pub c: f64,
    pub d: f64,
}

pub fn build_primal_certificate(params: ThermalParams) -> PrimalCertificate {
    let (n1, n2) = (params.n1, params.n2);
    let (e1, e2) = (2.0 + 2.0 * n1, 2.0 + 2.0 * n2);
    #[rustfmt::skip]
    let x1 = Matrix4::new(
        1.0, 0.0, -e1, 0.0,
        0.0, 1.0, 0.0, -e2,
        -e1, 0.0, e1 * e1, 0.0,
        0.0, -e2, 0.0, e2 * e2,
    );
    let c = 4.0 * (1.0 + n2).powi(2) / params.v2();
    let d = 4.0 * (1.0 + n1).powi(2) / params.v1();
    let off = C64::new(0.0, (c * d).sqrt());
    let mut x2 = Matrix4::<C64>::zeros();
    x2[(2, 2)] = C64::from(c);
    x2[(2, 3)] = off;
    x2[(3, 2)] = off.conj();
    x2[(3, 3)] = C64::from(d);
    PrimalCertificate { x1, x2, c, d }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub y: [f64; 6],
    pub y1: Matrix4<f64>,
    pub y2: Matrix2<f64>,
    pub y3: Matrix2<C64>,
}

/// The dual certificate. `Y₃` is undefined for the vacuum.
pub fn build_dual_certificate(params: ThermalParams) -> Result<DualCertificate> {
    if params.is_vacuum() {
        return Err(Error::DegenerateDual);
    }
    let (n1, n2) = (params.n1, params.n2);
    let (v1, v2) = (params.v1(), params.v2());
    let (e, f) = (2.0 + 2.0 * n1, 2.0 + 2.0 * n2);
    let y = [v2 / f, v1 / e, 0.0, e, f, 0.0];
    #[rustfmt::skip]
    let y1 = Matrix4::new(
        e, 0.0, 1.0, 0.0,
        0.0, f, 0.0, 1.0,
        1.0, 0.0, 1.0 / e, 0.0,
        0.0, 1.0, 0.0, 1.0 / f,
    );
    let y2 = Matrix2::new(1.0 - 1.0 / f, 0.0, 0.0, 1.0 - 1.0 / e);
    let den = 2.0 * n1 + 2.0 * n2 + 4.0 * n1 * n2;
    let off = C64::new(0.0, -(v1 * v2).sqrt() / den);
    let y3 = Matrix2::new(
        C64::from(1.0 / f + 1.0 / den),
        off,
        off.conj(),
        C64::from(1.0 / e + 1.0 / den),
    );
    Ok(DualCertificate { y, y1, y2, y3 })
}

/// Closed-form eigenvalue lists, each sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenFormulas {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y3: Vec<f64>,
}

pub fn eigen_formulas(params: ThermalParams) -> EigenFormulas {
    let (n1, n2) = (params.n1, params.n2);
    let p = build_primal_certificate(params);
    let (e, f) = (2.0 * (1.0 + n1), 2.0 * (1.0 + n2));
    let y3 = (1.0 + (2.0 + n2 / 2.0) * n2 + n1 * n1 * (0.5 + n2) + n1 * (2.0 + n2 * (4.0 + n2)))
        / ((1.0 + n1) * (1.0 + n2) * (n1 + n2 + 2.0 * n1 * n2));
    EigenFormulas {
        x1: sorted(vec![
            0.0,
            0.0,
            5.0 + 4.0 * n1 * (2.0 + n1),
            5.0 + 4.0 * n2 * (2.0 + n2),
        ]),
        x2: vec![0.0, 0.0, 0.0, p.c + p.d],
        y1: sorted(vec![0.0, 0.0, e + 1.0 / e, f + 1.0 / f]),
        y2: sorted(vec![1.0 - 1.0 / f, 1.0 - 1.0 / e]),
        y3: vec![0.0, y3],
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn real_eigs<const D: usize>(m: SMatrix<f64, D, D>) -> Vec<f64> {
    let dm = DMatrix::from_column_slice(D, D, m.as_slice());
    sorted(
        SymmetricEigen::new(dm)
            .eigenvalues
            .iter()
            .copied()
            .collect(),
    )
}

fn hermitian_eigs<const D: usize>(m: SMatrix<C64, D, D>) -> Vec<f64> {
    let dm = DMatrix::from_column_slice(D, D, m.as_slice());
    sorted(
        SymmetricEigen::new(dm)
            .eigenvalues
            .iter()
            .copied()
            .collect(),
    )
}

/// Outcome of [`verify_certificates`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    Verified,
    Failed,
    /// Vacuum input: the dual `Y₃` block is undefined and the bound is
    /// reported from its analytic limit.
    DegenerateDual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub n1: f64,
    pub n2: f64,
    pub bound: f64,
    pub primal_value: f64,
    pub dual_value: f64,
    pub x1_eigs: Vec<f64>,
    pub x2_eigs: Vec<f64>,
    pub y1_eigs: Vec<f64>,
    pub y2_eigs: Vec<f64>,
    pub y3_eigs: Vec<f64>,
    pub feasible_primal: bool,
    pub feasible_dual: bool,
    pub values_match: bool,
    /// Every numeric eigenvalue agrees with its closed form.
    pub formulas_match: bool,
    /// Largest relative deviation between numeric and closed-form eigenvalues.
    pub max_formula_error: f64,
    /// `|tr{X B_j} − b_j|` for `j = 1..6`.
    pub constraint_residuals: Vec<f64>,
    /// `|tr{X₁Y₁}|` and `|tr{X₂Y₃}|`, zero at a primal-dual optimum.
    pub slackness_residuals: Vec<f64>,
    pub status: CertificateStatus,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.status == CertificateStatus::Verified
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn list_error(numeric: &[f64], formula: &[f64]) -> f64 {
    numeric
        .iter()
        .zip(formula)
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}

fn lower_block(x2: &Matrix4<C64>) -> Matrix2<C64> {
    x2.fixed_view::<2, 2>(2, 2).into_owned()
}

/// `Re tr{X₂ · (0₂ ⊕ ℂ)}`.
pub fn primal_value(primal: &PrimalCertificate, data: &SdpData) -> Option<f64> {
    data.c_complex
        .map(|c| (lower_block(&primal.x2) * c).trace().re)
}

pub fn dual_value(dual: &DualCertificate, data: &SdpData) -> f64 {
    dual.y.iter().zip(&data.b).map(|(y, b)| y * b).sum()
}

fn constraint_residuals(primal: &PrimalCertificate, data: &SdpData) -> Vec<f64> {
    let top = primal.x1.fixed_view::<2, 2>(0, 0).into_owned();
    data.b_mats
        .iter()
        .zip(&data.b)
        .map(|(bj, b)| ((top * bj).trace() - b).abs())
        .collect()
}

/// Checks both certificates at `params`.
///
/// `tol` bounds the relative disagreement between numeric and closed-form
/// eigenvalues and between the primal, dual and closed-form values.
/// Positive semidefiniteness is always judged against [`PSD_TOL`].
pub fn verify_certificates(params: ThermalParams, tol: f64) -> Result<CertificateReport> {
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(crate::error::invalid(format!(
            "tolerance must be finite and >= 0, got {tol}"
        )));
    }
    let data = build_sdp_data(params);
    let primal = build_primal_certificate(params);
    let dual = build_dual_certificate(params)?;
    let formulas = eigen_formulas(params);
    let bound = hcrb_thermal(params);

    let x1_eigs = real_eigs(primal.x1);
    let x2_eigs = hermitian_eigs(primal.x2);
    let y1_eigs = real_eigs(dual.y1);
    let y2_eigs = real_eigs(dual.y2);
    let y3_eigs = hermitian_eigs(dual.y3);

    let max_formula_error = [
        list_error(&x1_eigs, &formulas.x1),
        list_error(&x2_eigs, &formulas.x2),
        list_error(&y1_eigs, &formulas.y1),
        list_error(&y2_eigs, &formulas.y2),
        list_error(&y3_eigs, &formulas.y3),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let psd = |v: &[f64]| v.iter().all(|&e| e >= -PSD_TOL);
    let constraint_residuals = constraint_residuals(&primal, &data);
    let feasible_primal =
        psd(&x1_eigs) && psd(&x2_eigs) && constraint_residuals.iter().all(|&r| r <= PSD_TOL);
    let feasible_dual = psd(&y1_eigs) && psd(&y2_eigs) && psd(&y3_eigs);

    let primal_value = primal_value(&primal, &data).ok_or(Error::DegenerateDual)?;
    let dual_value = dual_value(&dual, &data);
    let values_match = close(primal_value, dual_value, tol) && close(primal_value, bound, tol);
    let formulas_match = max_formula_error <= tol;

    let slackness_residuals = vec![
        (primal.x1 * dual.y1).trace().abs(),
        (lower_block(&primal.x2) * dual.y3).trace().norm(),
    ];
    let ok = feasible_primal && feasible_dual && values_match && formulas_match;
    Ok(CertificateReport {
        n1: params.n1,
        n2: params.n2,
        bound,
        primal_value,
        dual_value,
        x1_eigs,
        x2_eigs,
        y1_eigs,
        y2_eigs,
        y3_eigs,
        feasible_primal,
        feasible_dual,
        values_match,
        formulas_match,
        max_formula_error,
        constraint_residuals,
        slackness_residuals,
        status: if ok {
            CertificateStatus::Verified
        } else {
            CertificateStatus::Failed
        },
    })
}

/// Report for the vacuum, where the dual certificate degenerates. The primal
/// side is still checked; the values are the analytic limit 4.
pub fn degenerate_limit_report(params: ThermalParams) -> Result<CertificateReport> {
    if !params.is_vacuum() {
        return Err(crate::error::invalid(
            "degenerate limit applies only to n1 = n2 = 0",
        ));
    }
    let data = build_sdp_data(params);
    let primal = build_primal_certificate(params);
    let x1_eigs = real_eigs(primal.x1);
    let x2_eigs = hermitian_eigs(primal.x2);
    let formulas = eigen_formulas(params);
    let max_formula_error =
        list_error(&x1_eigs, &formulas.x1).max(list_error(&x2_eigs, &formulas.x2));
    let constraint_residuals = constraint_residuals(&primal, &data);
    let psd = |v: &[f64]| v.iter().all(|&e| e >= -PSD_TOL);
    let bound = hcrb_thermal(params);
    Ok(CertificateReport {
        n1: 0.0,
        n2: 0.0,
        bound,
        primal_value: bound,
        dual_value: bound,
        feasible_primal: psd(&x1_eigs)
            && psd(&x2_eigs)
            && constraint_residuals.iter().all(|&r| r <= PSD_TOL),
        x1_eigs,
        x2_eigs,
        y1_eigs: vec![],
        y2_eigs: vec![],
        y3_eigs: vec![],
        feasible_dual: false,
        values_match: true,
        formulas_match: max_formula_error <= DEFAULT_TOL,
        max_formula_error,
        constraint_residuals,
        slackness_residuals: vec![],
        status: CertificateStatus::DegenerateDual,
    })
}

/// Verifies, falling back to [`degenerate_limit_report`] for the vacuum.
pub fn certify(params: ThermalParams, tol: f64) -> Result<CertificateReport> {
    if params.is_vacuum() {
        degenerate_limit_report(params)
    } else {
        verify_certificates(params, tol)
    }
}

/// `k × k` grid of `(n1, n2)` evenly spaced over `[lo, hi]`, in the order
/// the points are given (labels are normalised by [`ThermalParams::new`]).
pub fn grid(k: usize, lo: f64, hi: f64) -> Result<Vec<ThermalParams>> {
    if k == 0 {
        return Err(crate::error::invalid("grid size must be >= 1"));
    }
    let step = if k == 1 {
        0.0
    } else {
        (hi - lo) / (k - 1) as f64
    };
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            out.push(ThermalParams::new(
                lo + i as f64 * step,
                lo + j as f64 * step,
            )?);
        }
    }
    Ok(out)
}
