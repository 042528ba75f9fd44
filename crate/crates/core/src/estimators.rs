//! Linear coalition estimators for the displacement on party A's arm.
//!
//! Every coalition estimator has the form `s · (q_A − g · u)`, where `u` is a
//! fixed combination of the partners' outcomes in the same quadrature, `g` is
//! a gain and `s = 1/√η_A` undoes the loss on A's arm. The partner signs are
//! folded into `u` so that, for the ideal dealer state, `u` is positively
//! correlated with `q_A` in both quadratures:
//!
//! | coalition | `u` for x          | `u` for p            |
//! |-----------|--------------------|----------------------|
//! | AB        | `x_B`              | `−p_B`               |
//! | AC        | `−x_C`             | `p_C`                |
//! | ABC       | `(x_B − x_C)/√2`   | `−(p_B − p_C)/√2`    |
//!
//! so the pair estimator for x is `x_A − g_B x_B` and the triple estimator for
//! p is `p_A + g_BC (p_B − p_C)/√2`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::{build_dealer_state, ExperimentModel, Party, Quadrature};
use crate::sampler::{ColumnLabel, OutcomeMatrix};
use crate::stats;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Variance below which an auxiliary combination is treated as degenerate.
pub const AUX_VARIANCE_TOL: f64 = 1e-12;

/// Groups of parties that pool their outcomes. Coalitions without A carry no
/// signal and are rejected at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Coalition {
    #[serde(rename = "A_alone")]
    AAlone,
    AB,
    AC,
    ABC,
}

impl Coalition {
    pub const ALL: [Coalition; 4] = [
        Coalition::AAlone,
        Coalition::AB,
        Coalition::AC,
        Coalition::ABC,
    ];

    pub fn parties(self) -> &'static [Party] {
        match self {
            Coalition::AAlone => &[Party::A],
            Coalition::AB => &[Party::A, Party::B],
            Coalition::AC => &[Party::A, Party::C],
            Coalition::ABC => &[Party::A, Party::B, Party::C],
        }
    }

    /// Builds a coalition from a set of parties.
    pub fn from_parties(parties: &[Party]) -> Result<Self> {
        let has = |p| parties.contains(&p);
        let label: String = Party::ALL
            .iter()
            .filter(|p| has(**p))
            .map(|p| p.to_string())
            .collect();
        match (has(Party::A), has(Party::B), has(Party::C)) {
            (true, false, false) => Ok(Coalition::AAlone),
            (true, true, false) => Ok(Coalition::AB),
            (true, false, true) => Ok(Coalition::AC),
            (true, true, true) => Ok(Coalition::ABC),
            (false, false, false) => Err(invalid("empty coalition")),
            (false, _, _) => Err(Error::NoSignal(label)),
        }
    }

    /// A alone uses dual homodyne and gets both quadratures from every probe.
    pub fn uses_dual_homodyne(self) -> bool {
        self == Coalition::AAlone
    }

    /// Factor converting the per-round squared error of one quadrature into
    /// an MSE normalised to the total probe budget. Homodyne coalitions spend
    /// half the probes on each quadrature, so their factor is 2.
    pub fn allocation_factor(self) -> f64 {
        if self.uses_dual_homodyne() {
            1.0
        } else {
            2.0
        }
    }

    /// Partner terms of the auxiliary combination `u` (see module docs).
    pub fn auxiliary_terms(self, quadrature: Quadrature) -> &'static [(Party, f64)] {
        use Quadrature::{P, X};
        match (self, quadrature) {
            (Coalition::AAlone, _) => &[],
            (Coalition::AB, X) => &[(Party::B, 1.0)],
            (Coalition::AB, P) => &[(Party::B, -1.0)],
            (Coalition::AC, X) => &[(Party::C, -1.0)],
            (Coalition::AC, P) => &[(Party::C, 1.0)],
            (Coalition::ABC, X) => &[(Party::B, FRAC_1_SQRT_2), (Party::C, -FRAC_1_SQRT_2)],
            (Coalition::ABC, P) => &[(Party::B, -FRAC_1_SQRT_2), (Party::C, FRAC_1_SQRT_2)],
        }
    }

    /// `u` as a coefficient vector over the 6 quadratures of the dealer state.
    pub fn auxiliary_vector(self, quadrature: Quadrature) -> DVector<f64> {
        let mut v = DVector::zeros(6);
        for &(party, w) in self.auxiliary_terms(quadrature) {
            v[2 * party.mode() + quadrature.offset()] = w;
        }
        v
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Coalition::AAlone => "A_alone",
            Coalition::AB => "AB",
            Coalition::AC => "AC",
            Coalition::ABC => "ABC",
        })
    }
}

impl FromStr for Coalition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("a_alone") {
            return Ok(Coalition::AAlone);
        }
        let parties = s
            .chars()
            .filter(|c| !matches!(c, '+' | ',' | ' ' | '_'))
            .map(|c| c.to_string().parse::<Party>())
            .collect::<Result<Vec<_>>>()?;
        Coalition::from_parties(&parties)
    }
}

/// Gains applied by the coalition estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    /// Pair gain (AB or AC).
    pub g_b: f64,
    /// Triple gain on `(q_B − q_C)/√2`.
    pub g_bc: f64,
    /// Loss-inversion factor `1/√η_A`.
    pub bias_scale: f64,
}

impl GainSet {
    /// Gains from the model covariance. Only the gain the coalition uses is
    /// populated; the other is left at zero.
    pub fn analytic(model: &ExperimentModel, coalition: Coalition) -> Result<Self> {
        let cov = build_dealer_state(model, 0.0, 0.0)?.cov().clone();
        let target = 2 * Party::A.mode();
        let mut gains = GainSet {
            g_b: 0.0,
            g_bc: 0.0,
            bias_scale: 1.0 / model.eta_a.sqrt(),
        };
        match coalition {
            Coalition::AAlone => {}
            Coalition::AB | Coalition::AC => {
                gains.g_b = optimal_gain(&cov, target, &coalition.auxiliary_vector(Quadrature::X))?;
            }
            Coalition::ABC => {
                gains.g_bc =
                    optimal_gain(&cov, target, &coalition.auxiliary_vector(Quadrature::X))?;
            }
        }
        Ok(gains)
    }

    /// Gains fitted on calibration outcomes, pooling the x and p rounds.
    pub fn fit(
        coalition: Coalition,
        calib_x: &OutcomeMatrix,
        calib_p: &OutcomeMatrix,
        bias_scale: f64,
    ) -> Result<Self> {
        let mut gains = GainSet {
            g_b: 0.0,
            g_bc: 0.0,
            bias_scale,
        };
        if coalition.uses_dual_homodyne() {
            return Ok(gains);
        }
        let (mut cross, mut var) = (0.0, 0.0);
        for (m, q) in [(calib_x, Quadrature::X), (calib_p, Quadrature::P)] {
            let target = m.column(ColumnLabel::party(Party::A, q))?;
            let aux = auxiliary_values(coalition, m, q)?;
            cross += stats::covariance(&target, &aux)?;
            var += stats::variance(&aux)?;
        }
        if var <= AUX_VARIANCE_TOL {
            return Err(Error::DegenerateAuxiliary(var));
        }
        match coalition {
            Coalition::ABC => gains.g_bc = cross / var,
            _ => gains.g_b = cross / var,
        }
        Ok(gains)
    }

    fn for_coalition(&self, coalition: Coalition) -> f64 {
        match coalition {
            Coalition::AAlone => 0.0,
            Coalition::AB | Coalition::AC => self.g_b,
            Coalition::ABC => self.g_bc,
        }
    }
}

/// The `g` minimising `Var(q_target − g·u)` for `u = auxᵀ q`:
/// `Cov(target, u) / Var(u)`.
pub fn optimal_gain(cov: &DMatrix<f64>, target_index: usize, aux: &DVector<f64>) -> Result<f64> {
    check_aux(cov, target_index, aux)?;
    let var_u = aux.dot(&(cov * aux));
    if var_u <= AUX_VARIANCE_TOL {
        return Err(Error::DegenerateAuxiliary(var_u));
    }
    let cross = cov.row(target_index).transpose().dot(aux);
    Ok(cross / var_u)
}

/// `Var(q_target − g·u)` under `cov`.
pub fn residual_variance(
    cov: &DMatrix<f64>,
    target_index: usize,
    aux: &DVector<f64>,
    gain: f64,
) -> Result<f64> {
    check_aux(cov, target_index, aux)?;
    let var_u = aux.dot(&(cov * aux));
    let cross = cov.row(target_index).transpose().dot(aux);
    Ok(cov[(target_index, target_index)] - 2.0 * gain * cross + gain * gain * var_u)
}

fn check_aux(cov: &DMatrix<f64>, target_index: usize, aux: &DVector<f64>) -> Result<()> {
    if aux.len() != cov.nrows() || target_index >= cov.nrows() {
        return Err(invalid(
            "auxiliary vector / target index do not match the covariance",
        ));
    }
    Ok(())
}

fn auxiliary_values(
    coalition: Coalition,
    outcomes: &OutcomeMatrix,
    q: Quadrature,
) -> Result<Vec<f64>> {
    let mut u = vec![0.0; outcomes.n_rows()];
    for &(party, w) in coalition.auxiliary_terms(q) {
        let col = outcomes.column(ColumnLabel::party(party, q))?;
        for (ui, ci) in u.iter_mut().zip(col) {
            *ui += w * ci;
        }
    }
    Ok(u)
}

/// Per-round estimates of the displacement in `quadrature`.
///
/// `outcomes` must hold the `quadrature` columns of every coalition member;
/// for A alone these are the dual-homodyne outcomes of A.
pub fn estimate(
    coalition: Coalition,
    outcomes: &OutcomeMatrix,
    gains: &GainSet,
    quadrature: Quadrature,
) -> Result<Vec<f64>> {
    let a = outcomes.column(ColumnLabel::party(Party::A, quadrature))?;
    let g = gains.for_coalition(coalition);
    let u = auxiliary_values(coalition, outcomes, quadrature)?;
    Ok(a.iter()
        .zip(&u)
        .map(|(a, u)| gains.bias_scale * (a - g * u))
        .collect())
}

/// Entanglement-witness estimators of `(α_x, α_p)/√2`:
/// `x₋ = x_A/√2 − (x_B − x_C)/2` and `p₊ = p_A/√2 + (p_B − p_C)/2`.
pub fn witness_estimate(
    outcomes_x: &OutcomeMatrix,
    outcomes_p: &OutcomeMatrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let col = |m: &OutcomeMatrix, p, q| m.column(ColumnLabel::party(p, q));
    let (xa, xb, xc) = (
        col(outcomes_x, Party::A, Quadrature::X)?,
        col(outcomes_x, Party::B, Quadrature::X)?,
        col(outcomes_x, Party::C, Quadrature::X)?,
    );
    let (pa, pb, pc) = (
        col(outcomes_p, Party::A, Quadrature::P)?,
        col(outcomes_p, Party::B, Quadrature::P)?,
        col(outcomes_p, Party::C, Quadrature::P)?,
    );
    let x_minus = (0..xa.len())
        .map(|i| xa[i] * FRAC_1_SQRT_2 - (xb[i] - xc[i]) / 2.0)
        .collect();
    let p_plus = (0..pa.len())
        .map(|i| pa[i] * FRAC_1_SQRT_2 + (pb[i] - pc[i]) / 2.0)
        .collect();
    Ok((x_minus, p_plus))
}

/// Mean squared error between estimates and true values.
pub fn empirical_mse(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_pairs(estimates, truths, 1)?;
    let s: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    Ok(s / estimates.len() as f64)
}

/// Standard error of [`empirical_mse`].
pub fn mse_standard_error(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_pairs(estimates, truths, 2)?;
    let sq: Vec<f64> = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t) * (e - t))
        .collect();
    Ok(stats::mean_and_se(&sq)?.1)
}

fn check_pairs(estimates: &[f64], truths: &[f64], min: usize) -> Result<()> {
    if estimates.len() != truths.len() {
        return Err(invalid(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::EmptyInput);
    }
    if estimates.len() < min {
        return Err(Error::InsufficientData {
            needed: min,
            got: estimates.len(),
        });
    }
    Ok(())
}

/// Mean residual and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCheck {
    pub mean_error: f64,
    pub standard_error: f64,
    pub n: usize,
}

impl BiasCheck {
    /// `|mean| > k · SE`.
    pub fn is_biased(&self, k: f64) -> bool {
        self.mean_error.abs() > k * self.standard_error
    }
}

pub fn bias_check(estimates: &[f64], truths: &[f64]) -> Result<BiasCheck> {
    check_pairs(estimates, truths, 2)?;
    let resid: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
    let (mean_error, standard_error) = stats::mean_and_se(&resid)?;
    Ok(BiasCheck {
        mean_error,
        standard_error,
        n: resid.len(),
    })
}

/// Empirical MSEs for one coalition.
///
/// `mse_x` and `mse_p` are normalised to the probe budget: the per-round
/// mean squared error times [`Coalition::allocation_factor`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub coalition: Coalition,
    pub mse_x: f64,
    pub mse_p: f64,
    pub mse_sum: f64,
    pub n_x: usize,
    pub n_p: usize,
    pub gains: GainSet,
}

impl MseReport {
    pub fn from_estimates(
        coalition: Coalition,
        gains: GainSet,
        (est_x, truth_x): (&[f64], &[f64]),
        (est_p, truth_p): (&[f64], &[f64]),
    ) -> Result<Self> {
        let f = coalition.allocation_factor();
        let mse_x = f * empirical_mse(est_x, truth_x)?;
        let mse_p = f * empirical_mse(est_p, truth_p)?;
        Ok(MseReport {
            coalition,
            mse_x,
            mse_p,
            mse_sum: mse_x + mse_p,
            n_x: est_x.len(),
            n_p: est_p.len(),
            gains,
        })
    }
}
