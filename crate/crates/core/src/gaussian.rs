//! Gaussian states in the covariance-matrix picture.
//!
//! Quadratures are interleaved per mode (`x0, p0, x1, p1, ...`) and measured
//! in shot-noise units, so the vacuum has identity covariance and physical
//! states satisfy `cov + iΩ ≥ 0` with `Ω = ⊕ [[0, 1], [-1, 0]]`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative symmetry tolerance for covariance matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalue slack allowed by the physicality check.
pub const PHYSICALITY_TOL: f64 = 1e-9;

/// One of the two conjugate field quadratures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    X,
    P,
}

impl Quadrature {
    /// Offset of this quadrature inside a mode's 2-vector.
    pub fn offset(self) -> usize {
        match self {
            Quadrature::X => 0,
            Quadrature::P => 1,
        }
    }

    pub fn other(self) -> Quadrature {
        match self {
            Quadrature::X => Quadrature::P,
            Quadrature::P => Quadrature::X,
        }
    }
}

impl fmt::Display for Quadrature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quadrature::X => "x",
            Quadrature::P => "p",
        })
    }
}

impl FromStr for Quadrature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(Quadrature::X),
            "p" => Ok(Quadrature::P),
            other => Err(Error::Parse(format!("unknown quadrature '{other}'"))),
        }
    }
}

/// The three receiving parties. The dealer state is stored in the order
/// (C, B, A), so party A owns mode 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    A,
    B,
    C,
}

impl Party {
    pub const ALL: [Party; 3] = [Party::A, Party::B, Party::C];

    /// Mode index of this party in the dealer state.
    pub fn mode(self) -> usize {
        match self {
            Party::C => 0,
            Party::B => 1,
            Party::A => 2,
        }
    }

    pub fn from_mode(mode: usize) -> Option<Party> {
        match mode {
            0 => Some(Party::C),
            1 => Some(Party::B),
            2 => Some(Party::A),
            _ => None,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::A => "A",
            Party::B => "B",
            Party::C => "C",
        })
    }
}

impl FromStr for Party {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Party::A),
            "B" | "b" => Ok(Party::B),
            "C" | "c" => Ok(Party::C),
            other => Err(Error::Parse(format!("unknown party '{other}'"))),
        }
    }
}

/// Mean vector and covariance matrix of an n-mode Gaussian state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianState {
    /// Builds a state after checking dimensions, symmetry, positive
    /// definiteness and the uncertainty principle.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(invalid(format!(
                "mean length {dim} is not a positive even number"
            )));
        }
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(invalid(format!(
                "covariance is {}x{}, expected {dim}x{dim}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite entry"));
        }
        let scale = cov.amax().max(1.0);
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(invalid(format!(
                "covariance is not symmetric (max |C - C^T| = {asym:e})"
            )));
        }
        if cov.clone().cholesky().is_none() {
            return Err(invalid("covariance is not positive definite"));
        }
        let state = GaussianState { mean, cov };
        let min_eig = state.min_uncertainty_eigenvalue();
        if min_eig < -PHYSICALITY_TOL {
            return Err(Error::NotPhysical(min_eig));
        }
        Ok(state)
    }

    fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianState { mean, cov }
    }

    pub fn n_modes(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Smallest eigenvalue of the Hermitian matrix `cov + iΩ`.
    ///
    /// Computed through the real embedding `[[cov, -Ω], [Ω, cov]]`, whose
    /// spectrum is that of `cov + iΩ` with every eigenvalue doubled.
    pub fn min_uncertainty_eigenvalue(&self) -> f64 {
        let dim = self.cov.nrows();
        let omega = symplectic_form(self.n_modes());
        let mut big = DMatrix::<f64>::zeros(2 * dim, 2 * dim);
        big.view_mut((0, 0), (dim, dim)).copy_from(&self.cov);
        big.view_mut((dim, dim), (dim, dim)).copy_from(&self.cov);
        big.view_mut((0, dim), (dim, dim)).copy_from(&(-&omega));
        big.view_mut((dim, 0), (dim, dim)).copy_from(&omega);
        SymmetricEigen::new(big).eigenvalues.min()
    }

    pub fn is_physical(&self) -> bool {
        self.min_uncertainty_eigenvalue() >= -PHYSICALITY_TOL
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.n_modes() {
            return Err(invalid(format!(
                "mode {mode} out of range for a {}-mode state",
                self.n_modes()
            )));
        }
        Ok(())
    }

    /// Adds `(dx, dp)` to the mean of `mode`.
    pub fn displace(&self, mode: usize, dx: f64, dp: f64) -> Result<Self> {
        self.check_mode(mode)?;
        let mut out = self.clone();
        out.mean[2 * mode] += dx;
        out.mean[2 * mode + 1] += dp;
        Ok(out)
    }

    /// Mixes two modes on a beamsplitter of intensity transmissivity `t`.
    ///
    /// The symplectic map acting on `(mode_i, mode_j)` is
    /// `[[√t I, √(1-t) I], [-√(1-t) I, √t I]]`.
    pub fn beamsplitter(&self, mode_i: usize, mode_j: usize, t: f64) -> Result<Self> {
        self.check_mode(mode_i)?;
        self.check_mode(mode_j)?;
        if mode_i == mode_j {
            return Err(invalid("beamsplitter needs two distinct modes"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("transmissivity {t} outside [0, 1]")));
        }
        let dim = self.mean.len();
        let (ct, st) = (t.sqrt(), (1.0 - t).sqrt());
        let mut s = DMatrix::<f64>::identity(dim, dim);
        for q in 0..2 {
            let (i, j) = (2 * mode_i + q, 2 * mode_j + q);
            s[(i, i)] = ct;
            s[(i, j)] = st;
            s[(j, i)] = -st;
            s[(j, j)] = ct;
        }
        Ok(self.transform(&s))
    }

    /// Applies a linear map `S` to the quadratures: `mean -> S mean`,
    /// `cov -> S cov Sᵀ`.
    fn transform(&self, s: &DMatrix<f64>) -> Self {
        let mean = s * &self.mean;
        let cov = s * &self.cov * s.transpose();
        GaussianState::from_parts(mean, symmetrize(cov))
    }

    /// Pure-loss channel with transmissivity `eta` on one mode.
    pub fn loss(&self, mode: usize, eta: f64) -> Result<Self> {
        self.check_mode(mode)?;
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(invalid(format!("transmissivity {eta} outside (0, 1]")));
        }
        let dim = self.mean.len();
        let g = eta.sqrt();
        let mut scale = DVector::<f64>::from_element(dim, 1.0);
        scale[2 * mode] = g;
        scale[2 * mode + 1] = g;
        let mean = self.mean.component_mul(&scale);
        let mut cov = self.cov.clone();
        for r in 0..dim {
            for c in 0..dim {
                cov[(r, c)] *= scale[r] * scale[c];
            }
        }
        cov[(2 * mode, 2 * mode)] += 1.0 - eta;
        cov[(2 * mode + 1, 2 * mode + 1)] += 1.0 - eta;
        Ok(GaussianState::from_parts(mean, cov))
    }

    /// Adds `eps` shot-noise units of thermal noise to both quadratures of a mode.
    pub fn add_excess_noise(&self, mode: usize, eps: f64) -> Result<Self> {
        self.check_mode(mode)?;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(invalid(format!(
                "excess noise {eps} must be finite and >= 0"
            )));
        }
        let mut out = self.clone();
        out.cov[(2 * mode, 2 * mode)] += eps;
        out.cov[(2 * mode + 1, 2 * mode + 1)] += eps;
        Ok(out)
    }

    /// Restricts the state to the listed modes, in the order given.
    pub fn partial_trace(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(invalid("partial trace must keep at least one mode"));
        }
        for (k, &m) in keep.iter().enumerate() {
            self.check_mode(m)?;
            if keep[..k].contains(&m) {
                return Err(invalid(format!("mode {m} listed twice")));
            }
        }
        let idx: Vec<usize> = keep.iter().flat_map(|&m| [2 * m, 2 * m + 1]).collect();
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.cov[(idx[r], idx[c])]);
        Ok(GaussianState::from_parts(mean, cov))
    }

    /// Tensor product `self ⊗ other`, with `other`'s modes appended.
    pub fn tensor(&self, other: &GaussianState) -> GaussianState {
        let (d1, d2) = (self.mean.len(), other.mean.len());
        let mut mean = DVector::zeros(d1 + d2);
        mean.rows_mut(0, d1).copy_from(&self.mean);
        mean.rows_mut(d1, d2).copy_from(&other.mean);
        let mut cov = DMatrix::zeros(d1 + d2, d1 + d2);
        cov.view_mut((0, 0), (d1, d1)).copy_from(&self.cov);
        cov.view_mut((d1, d1), (d2, d2)).copy_from(&other.cov);
        GaussianState::from_parts(mean, cov)
    }

    /// Writes the plain-text matrix format: `n_modes`, the mean row, then the
    /// covariance rows, all whitespace separated.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.n_modes())?;
        writeln!(w, "{}", join_row(self.mean.iter()))?;
        for r in 0..self.cov.nrows() {
            writeln!(w, "{}", join_row(self.cov.row(r).iter()))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("formatted floats are ASCII")
    }

    /// Parses the format produced by [`GaussianState::write_text`]. Blank
    /// lines and `#` comments are skipped.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                rows.push(line.to_string());
            }
        }
        let mut rows = rows.into_iter();
        let n_modes: usize = rows
            .next()
            .ok_or_else(|| Error::Parse("missing n_modes line".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad n_modes: {e}")))?;
        if n_modes == 0 {
            return Err(Error::Parse("n_modes must be positive".into()));
        }
        let dim = 2 * n_modes;
        let parse_row = |line: Option<String>, what: &str| -> Result<Vec<f64>> {
            let line = line.ok_or_else(|| Error::Parse(format!("missing {what}")))?;
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("{what}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != dim {
                return Err(Error::Parse(format!(
                    "{what} has {} entries, expected {dim}",
                    vals.len()
                )));
            }
            Ok(vals)
        };
        let mean = DVector::from_vec(parse_row(rows.next(), "mean row")?);
        let mut cov = DMatrix::zeros(dim, dim);
        for r in 0..dim {
            let row = parse_row(rows.next(), &format!("covariance row {r}"))?;
            for (c, v) in row.into_iter().enumerate() {
                cov[(r, c)] = v;
            }
        }
        if rows.next().is_some() {
            return Err(Error::Parse("trailing data after covariance".into()));
        }
        GaussianState::new(mean, cov)
    }
}

fn join_row<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
    vals.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Block-diagonal symplectic form `⊕ [[0, 1], [-1, 0]]`.
pub fn symplectic_form(n_modes: usize) -> DMatrix<f64> {
    let mut omega = DMatrix::zeros(2 * n_modes, 2 * n_modes);
    for m in 0..n_modes {
        omega[(2 * m, 2 * m + 1)] = 1.0;
        omega[(2 * m + 1, 2 * m)] = -1.0;
    }
    omega
}

/// The n-mode vacuum: zero mean, identity covariance.
pub fn vacuum(n_modes: usize) -> Result<GaussianState> {
    if n_modes == 0 {
        return Err(invalid("vacuum needs at least one mode"));
    }
    let dim = 2 * n_modes;
    Ok(GaussianState::from_parts(
        DVector::zeros(dim),
        DMatrix::identity(dim, dim),
    ))
}

/// Single-mode squeezed vacuum with variance `e^{-2r}` on `squeezed`.
pub fn squeezed_vacuum(r: f64, squeezed: Quadrature) -> Result<GaussianState> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(invalid(format!("squeezing {r} must be finite and >= 0")));
    }
    let (lo, hi) = ((-2.0 * r).exp(), (2.0 * r).exp());
    let diag = match squeezed {
        Quadrature::X => [lo, hi],
        Quadrature::P => [hi, lo],
    };
    Ok(GaussianState::from_parts(
        DVector::zeros(2),
        DMatrix::from_diagonal(&DVector::from_row_slice(&diag)),
    ))
}

/// Single-mode thermal state with per-quadrature variances `(vx, vp)`.
pub fn thermal(vx: f64, vp: f64) -> Result<GaussianState> {
    GaussianState::new(
        DVector::zeros(2),
        DMatrix::from_diagonal(&DVector::from_row_slice(&[vx, vp])),
    )
}

/// Squeezing plus per-arm transmissivity and excess noise; determines the
/// state the dealer distributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentModel {
    pub r: f64,
    pub eta_a: f64,
    pub eta_b: f64,
    pub eta_c: f64,
    pub eps_a: f64,
    pub eps_b: f64,
    pub eps_c: f64,
}

impl ExperimentModel {
    /// Lossless, noiseless model with squeezing `r`.
    pub fn ideal(r: f64) -> Self {
        ExperimentModel {
            r,
            eta_a: 1.0,
            eta_b: 1.0,
            eta_c: 1.0,
            eps_a: 0.0,
            eps_b: 0.0,
            eps_c: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(invalid(format!(
                "squeezing r = {} must be finite and >= 0",
                self.r
            )));
        }
        for (name, eta) in [
            ("eta_a", self.eta_a),
            ("eta_b", self.eta_b),
            ("eta_c", self.eta_c),
        ] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(invalid(format!("{name} = {eta} outside (0, 1]")));
            }
        }
        for (name, eps) in [
            ("eps_a", self.eps_a),
            ("eps_b", self.eps_b),
            ("eps_c", self.eps_c),
        ] {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(invalid(format!("{name} = {eps} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn eta(&self, party: Party) -> f64 {
        match party {
            Party::A => self.eta_a,
            Party::B => self.eta_b,
            Party::C => self.eta_c,
        }
    }

    pub fn eps(&self, party: Party) -> f64 {
        match party {
            Party::A => self.eps_a,
            Party::B => self.eps_b,
            Party::C => self.eps_c,
        }
    }
}

/// Builds the distributed three-mode state, modes ordered (C, B, A).
///
/// An x-squeezed mode (B) and a p-squeezed mode (A) are mixed on a 50:50
/// beamsplitter to form a TMSV; the B arm is then split with a vacuum ancilla
/// (C). The displacement is applied to A before per-arm loss and noise.
pub fn build_dealer_state(
    model: &ExperimentModel,
    alpha_x: f64,
    alpha_p: f64,
) -> Result<GaussianState> {
    model.validate()?;
    let (c, b, a) = (Party::C.mode(), Party::B.mode(), Party::A.mode());
    let mut state = vacuum(1)?
        .tensor(&squeezed_vacuum(model.r, Quadrature::X)?)
        .tensor(&squeezed_vacuum(model.r, Quadrature::P)?);
    state = state.beamsplitter(b, a, 0.5)?;
    state = state.beamsplitter(b, c, 0.5)?;
    state = state.displace(a, alpha_x, alpha_p)?;
    for party in Party::ALL {
        state = state.loss(party.mode(), model.eta(party))?;
        state = state.add_excess_noise(party.mode(), model.eps(party))?;
    }
    Ok(state)
}

/// Entrywise closed form of the ideal dealer covariance, modes (C, B, A).
pub fn ideal_dealer_covariance(r: f64) -> DMatrix<f64> {
    let (ch, sh) = (r.cosh(), r.sinh());
    let c2 = ch * ch;
    let s2 = sh * sh;
    let k = std::f64::consts::SQRT_2 * ch * sh;
    let c2r = (2.0 * r).cosh();
    #[rustfmt::skip]
    let entries = [
        c2,   0.0,  -s2,  0.0,  -k,   0.0,
        0.0,  c2,   0.0,  -s2,  0.0,  k,
        -s2,  0.0,  c2,   0.0,  k,    0.0,
        0.0,  -s2,  0.0,  c2,   0.0,  -k,
        -k,   0.0,  k,    0.0,  c2r,  0.0,
        0.0,  k,    0.0,  -k,   0.0,  c2r,
    ];
    DMatrix::from_row_slice(6, 6, &entries)
}
