//! Closed-form precision limits and model-based MSE predictions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{optimal_gain, residual_variance, Coalition};
use crate::gaussian::{build_dealer_state, ExperimentModel, GaussianState, Party, Quadrature};
use crate::sampler::RandomStream;

/// Witness MSE sum at or above which the dealer state admits a separable
/// explanation.
pub const SEPARABLE_WITNESS_BOUND: f64 = 4.0;

/// Tolerance on the off-diagonal entry of a reduced state treated as thermal.
pub const THERMAL_OFFDIAG_TOL: f64 = 1e-9;

/// Thermal occupations of a diagonal single-mode state with variances
/// `v1 = 1 + 2 n1 ≥ v2 = 1 + 2 n2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalParams {
    pub n1: f64,
    pub n2: f64,
}

impl ThermalParams {
    /// Builds the parameters, swapping labels so that `n1 ≥ n2`.
    pub fn new(n1: f64, n2: f64) -> Result<Self> {
        if !(n1.is_finite() && n2.is_finite()) || n1 < 0.0 || n2 < 0.0 {
            return Err(invalid(format!(
                "thermal occupations must be finite and >= 0, got ({n1}, {n2})"
            )));
        }
        Ok(if n1 >= n2 {
            ThermalParams { n1, n2 }
        } else {
            ThermalParams { n1: n2, n2: n1 }
        })
    }

    /// From the two quadrature variances, each of which must be ≥ 1.
    pub fn from_variances(vx: f64, vp: f64) -> Result<Self> {
        ThermalParams::new((vx - 1.0) / 2.0, (vp - 1.0) / 2.0)
    }

    pub fn v1(&self) -> f64 {
        1.0 + 2.0 * self.n1
    }

    pub fn v2(&self) -> f64 {
        1.0 + 2.0 * self.n2
    }

    pub fn is_vacuum(&self) -> bool {
        self.n1 == 0.0 && self.n2 == 0.0
    }
}

/// Holevo Cramér-Rao bound on `v_x + v_p` for a displaced thermal state.
pub fn hcrb_thermal(params: ThermalParams) -> f64 {
    4.0 + 2.0 * params.n1 + 2.0 * params.n2
}

/// Reads thermal parameters off a diagonal single-mode state.
pub fn thermal_params_from_state(reduced: &GaussianState) -> Result<ThermalParams> {
    if reduced.n_modes() != 1 {
        return Err(Error::UnsupportedState(format!(
            "expected a single mode, got {}",
            reduced.n_modes()
        )));
    }
    let c = reduced.cov();
    if c[(0, 1)].abs() > THERMAL_OFFDIAG_TOL {
        return Err(Error::UnsupportedState(format!(
            "x-p covariance {} is not zero",
            c[(0, 1)]
        )));
    }
    ThermalParams::from_variances(c[(0, 0)], c[(1, 1)])
}

/// Two-party MSE sum with the ideal state, independent of squeezing.
pub fn ideal_two_party_mse_sum() -> f64 {
    4.0
}

/// Three-party MSE sum with the ideal state: `8/(e^{2r} + e^{−2r})`.
pub fn ideal_three_party_mse_sum(r: f64) -> f64 {
    8.0 / ((2.0 * r).exp() + (-2.0 * r).exp())
}

/// Witness MSE sum with the ideal state: `4 e^{−2r}`.
pub fn witness_bound(r: f64) -> f64 {
    4.0 * (-2.0 * r).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedMse {
    pub mse_x: f64,
    pub mse_p: f64,
    pub mse_sum: f64,
}

impl PredictedMse {
    fn new(mse_x: f64, mse_p: f64) -> Self {
        PredictedMse {
            mse_x,
            mse_p,
            mse_sum: mse_x + mse_p,
        }
    }
}

/// Expected MSEs of a coalition's estimator under an imperfection model,
/// normalised the same way as [`crate::estimators::MseReport`].
///
/// Homodyne coalitions: `2 · (Var(q_A) − Cov(q_A, u)²/Var(u)) / η_A`.
/// A alone (dual homodyne): `(Var(q_A) + 1) / η_A` per quadrature, which sums
/// to the HCRB of A's lossy reduced state divided by `η_A`.
pub fn predicted_mse(model: &ExperimentModel, coalition: Coalition) -> Result<PredictedMse> {
    let cov = build_dealer_state(model, 0.0, 0.0)?.cov().clone();
    let a = 2 * Party::A.mode();
    let per_quadrature = |q: Quadrature| -> Result<f64> {
        let t = a + q.offset();
        let raw = if coalition.uses_dual_homodyne() {
            cov[(t, t)] + 1.0
        } else {
            let aux = coalition.auxiliary_vector(q);
            let g = optimal_gain(&cov, t, &aux)?;
            residual_variance(&cov, t, &aux, g)?
        };
        Ok(coalition.allocation_factor() * raw / model.eta_a)
    };
    Ok(PredictedMse::new(
        per_quadrature(Quadrature::X)?,
        per_quadrature(Quadrature::P)?,
    ))
}

/// Variance part of the witness MSE sum under a model: twice the variances
/// of `x₋` and `p₊`. Loss on A also biases the witness, which this omits.
pub fn predicted_witness_variance_sum(model: &ExperimentModel) -> Result<f64> {
    let cov = build_dealer_state(model, 0.0, 0.0)?.cov().clone();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut total = 0.0;
    for (q, sign) in [(Quadrature::X, -1.0), (Quadrature::P, 1.0)] {
        let mut w = nalgebra::DVector::zeros(6);
        w[2 * Party::A.mode() + q.offset()] = h;
        w[2 * Party::B.mode() + q.offset()] = sign * 0.5;
        w[2 * Party::C.mode() + q.offset()] = -sign * 0.5;
        total += 2.0 * w.dot(&(&cov * &w));
    }
    Ok(total)
}

/// Sampling law for parameter fluctuations around a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// Each parameter scaled by a factor uniform in `[1 − f, 1 + f]`.
    Uniform,
    /// Each parameter scaled by `1 + f·z` with `z` standard normal.
    Gaussian,
}

impl std::str::FromStr for BandMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BandMode::Uniform),
            "gaussian" => Ok(BandMode::Gaussian),
            other => Err(invalid(format!("unknown band mode {other:?}"))),
        }
    }
}

/// Range of predicted `mse_sum` when `r`, every `η` and every `ε` fluctuate
/// by a relative amount `rel`. Transmissivities are clipped to `(0, 1]` and
/// the other parameters to `[0, ∞)`. Returns `(min, max)` over `samples`
/// perturbed models.
pub fn fluctuation_band(
    model: &ExperimentModel,
    coalition: Coalition,
    rel: f64,
    mode: BandMode,
    samples: usize,
    stream: RandomStream,
) -> Result<(f64, f64)> {
    model.validate()?;
    if !(0.0..1.0).contains(&rel) {
        return Err(invalid(format!(
            "relative fluctuation must lie in [0, 1), got {rel}"
        )));
    }
    if samples == 0 {
        return Err(invalid("band needs at least one sample"));
    }
    let mut rng = stream.rng();
    let mut factor = || match mode {
        BandMode::Uniform => 1.0 + rel * rng.random_range(-1.0..=1.0),
        BandMode::Gaussian => 1.0 + rel * rng.sample::<f64, _>(StandardNormal),
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..samples {
        let eta = |v: f64, f: f64| (v * f).clamp(f64::MIN_POSITIVE, 1.0);
        let pos = |v: f64, f: f64| (v * f).max(0.0);
        let m = ExperimentModel {
            r: pos(model.r, factor()),
            eta_a: eta(model.eta_a, factor()),
            eta_b: eta(model.eta_b, factor()),
            eta_c: eta(model.eta_c, factor()),
            eps_a: pos(model.eps_a, factor()),
            eps_b: pos(model.eps_b, factor()),
            eps_c: pos(model.eps_c, factor()),
        };
        let v = predicted_mse(&m, coalition)?.mse_sum;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{thermal, vacuum};
    use approx::assert_abs_diff_eq;

    fn model(r: f64, eta: [f64; 3], eps: [f64; 3]) -> ExperimentModel {
        ExperimentModel {
            r,
            eta_a: eta[0],
            eta_b: eta[1],
            eta_c: eta[2],
            eps_a: eps[0],
            eps_b: eps[1],
            eps_c: eps[2],
        }
    }

    #[test]
    fn hcrb_closed_form() {
        assert_eq!(hcrb_thermal(ThermalParams::new(0.0, 0.0).unwrap()), 4.0);
        assert_eq!(hcrb_thermal(ThermalParams::new(1.0, 2.0).unwrap()), 10.0);
        assert_abs_diff_eq!(
            hcrb_thermal(ThermalParams::new(0.7, 0.7).unwrap()),
            4.0 + 4.0 * 0.7,
            epsilon = 1e-15
        );
        assert!(ThermalParams::new(-0.1, 0.0).is_err());
        let p = ThermalParams::new(0.5, 2.0).unwrap();
        assert_eq!((p.n1, p.n2), (2.0, 0.5));
        assert!(p.v1() >= p.v2());
        assert_eq!(
            ideal_two_party_mse_sum(),
            hcrb_thermal(ThermalParams::new(0.0, 0.0).unwrap())
        );
    }

    #[test]
    fn params_from_states() {
        let s = build_dealer_state(&ExperimentModel::ideal(1.0), 0.0, 0.0).unwrap();
        let p = thermal_params_from_state(&s.partial_trace(&[Party::A.mode()]).unwrap()).unwrap();
        let sh2 = 1f64.sinh().powi(2);
        assert_abs_diff_eq!(p.n1, sh2, epsilon = 1e-12);
        assert_abs_diff_eq!(p.n2, sh2, epsilon = 1e-12);
        assert_abs_diff_eq!(hcrb_thermal(p), 9.524391382167263, epsilon = 1e-12);

        let p = thermal_params_from_state(&vacuum(1).unwrap()).unwrap();
        assert!(p.is_vacuum());
        let p = thermal_params_from_state(&thermal(3.0, 2.0).unwrap()).unwrap();
        assert_eq!((p.n1, p.n2), (1.0, 0.5));
        assert_eq!(hcrb_thermal(p), 7.0);

        assert!(thermal_params_from_state(&s).is_err());
    }

    #[test]
    fn correlated_single_mode_is_rejected() {
        let cov = nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]);
        let s = GaussianState::new(nalgebra::DVector::zeros(2), cov).unwrap();
        assert!(matches!(
            thermal_params_from_state(&s),
            Err(Error::UnsupportedState(_))
        ));
    }

    #[test]
    fn ideal_curves() {
        assert_eq!(ideal_three_party_mse_sum(0.0), 4.0);
        assert_abs_diff_eq!(
            ideal_three_party_mse_sum(1.0),
            4.0 / 2f64.cosh(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            ideal_three_party_mse_sum(1.0),
            1.063208915336319,
            epsilon = 1e-12
        );
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let v = ideal_three_party_mse_sum(i as f64 * 0.2);
            assert!(v < last);
            last = v;
        }
        assert!(ideal_three_party_mse_sum(20.0) < 1e-16);

        assert_eq!(witness_bound(0.0), SEPARABLE_WITNESS_BOUND);
        assert_abs_diff_eq!(witness_bound(1.0), 0.5413411329464508, epsilon = 1e-15);
        for i in 1..40 {
            assert!(witness_bound(i as f64 * 0.05) < SEPARABLE_WITNESS_BOUND);
        }
    }

    #[test]
    fn ideal_predictions_match_closed_forms() {
        for r in [0.0, 0.25, 0.5, 1.0, 1.5] {
            let m = ExperimentModel::ideal(r);
            if r > 0.0 {
                assert_abs_diff_eq!(
                    predicted_mse(&m, Coalition::ABC).unwrap().mse_sum,
                    ideal_three_party_mse_sum(r),
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(
                    predicted_mse(&m, Coalition::AB).unwrap().mse_sum,
                    4.0,
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(
                    predicted_mse(&m, Coalition::AC).unwrap().mse_sum,
                    4.0,
                    epsilon = 1e-12
                );
            }
            let n = r.sinh().powi(2);
            let alone = predicted_mse(&m, Coalition::AAlone).unwrap();
            assert_abs_diff_eq!(alone.mse_sum, 4.0 + 4.0 * n, epsilon = 1e-12);
            assert_abs_diff_eq!(alone.mse_x, alone.mse_p, epsilon = 1e-12);
            assert_abs_diff_eq!(
                predicted_witness_variance_sum(&m).unwrap(),
                witness_bound(r),
                epsilon = 1e-12
            );
        }
        // r = 0: B and C carry nothing, so every auxiliary is uncorrelated
        // but still non-degenerate; the coalitions fall back to A's vacuum.
        let vac = predicted_mse(&ExperimentModel::ideal(0.0), Coalition::ABC).unwrap();
        assert_abs_diff_eq!(vac.mse_sum, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn lossy_single_party() {
        let m = model(1.0, [0.9, 1.0, 1.0], [0.0; 3]);
        let reduced = build_dealer_state(&m, 0.0, 0.0)
            .unwrap()
            .partial_trace(&[Party::A.mode()])
            .unwrap();
        let p = thermal_params_from_state(&reduced).unwrap();
        let expected = hcrb_thermal(p) / 0.9;
        assert_abs_diff_eq!(
            predicted_mse(&m, Coalition::AAlone).unwrap().mse_sum,
            expected,
            epsilon = 1e-12
        );
        // channel composition by hand: v' = 0.9 cosh 2 + 0.1
        let v = 0.9 * 2f64.cosh() + 0.1;
        assert_abs_diff_eq!(expected, 2.0 * (v + 1.0) / 0.9, epsilon = 1e-12);
    }

    #[test]
    fn noisy_triple_matches_conditional_variance() {
        let m = model(1.0, [1.0; 3], [0.02, 0.0, 0.0]);
        let cov = build_dealer_state(&m, 0.0, 0.0).unwrap().cov().clone();
        // Var(x_A) − Cov(x_A,u)²/Var(u) with u = (x_B − x_C)/√2
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let var_u = 0.5 * (cov[(2, 2)] + cov[(0, 0)] - 2.0 * cov[(0, 2)]);
        let cross = h * (cov[(4, 2)] - cov[(4, 0)]);
        let expected = 2.0 * 2.0 * (cov[(4, 4)] - cross * cross / var_u);
        assert_abs_diff_eq!(
            predicted_mse(&m, Coalition::ABC).unwrap().mse_sum,
            expected,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            expected,
            ideal_three_party_mse_sum(1.0) + 4.0 * 0.02,
            epsilon = 1e-12
        );
    }

    #[test]
    fn monotone_in_loss_and_noise() {
        let etas = [0.5, 0.7, 0.9, 1.0];
        let epss = [0.0, 0.02, 0.05, 0.1];
        for c in Coalition::ALL {
            for r in [0.3, 1.0] {
                for arm in 0..3 {
                    let mut last = f64::INFINITY;
                    for &e in &etas {
                        let mut eta = [0.95; 3];
                        eta[arm] = e;
                        let v = predicted_mse(&model(r, eta, [0.01; 3]), c).unwrap().mse_sum;
                        assert!(v <= last + 1e-12, "{c} eta arm {arm}");
                        last = v;
                    }
                    let mut last = 0.0;
                    for &e in &epss {
                        let mut eps = [0.01; 3];
                        eps[arm] = e;
                        let v = predicted_mse(&model(r, [0.9; 3], eps), c).unwrap().mse_sum;
                        assert!(v >= last - 1e-12, "{c} eps arm {arm}");
                        last = v;
                    }
                }
            }
        }
    }

    #[test]
    fn coalition_ordering_on_model_grid() {
        for r in [0.1, 0.25, 0.5, 0.75, 1.0, 1.5] {
            for eta in [0.5, 0.6, 0.8, 0.9, 1.0] {
                for eps in [0.0, 0.02, 0.05, 0.1] {
                    let m = model(r, [eta, eta, eta], [eps; 3]);
                    let s = |c| predicted_mse(&m, c).unwrap().mse_sum;
                    let (abc, ab, ac, alone) = (
                        s(Coalition::ABC),
                        s(Coalition::AB),
                        s(Coalition::AC),
                        s(Coalition::AAlone),
                    );
                    assert!(
                        abc <= ab + 1e-12 && abc <= ac + 1e-12,
                        "r={r} eta={eta} eps={eps}"
                    );
                    // the pair only beats dual homodyne once squeezing
                    // outweighs the factor-2 split
                    if r >= 0.75 {
                        assert!(
                            ab <= alone + 1e-12 && ac <= alone + 1e-12,
                            "r={r} eta={eta} eps={eps}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pair_can_exceed_single_party_without_squeezing() {
        // With r = 0 the partner carries nothing and the factor-2 split of
        // homodyne loses to dual homodyne once A's arm is noisy.
        let m = model(0.0, [1.0; 3], [0.1, 0.0, 0.0]);
        let ab = predicted_mse(&m, Coalition::AB).unwrap().mse_sum;
        let alone = predicted_mse(&m, Coalition::AAlone).unwrap().mse_sum;
        assert_abs_diff_eq!(ab, 4.4, epsilon = 1e-12);
        assert_abs_diff_eq!(alone, 4.2, epsilon = 1e-12);

        let m = model(0.25, [0.6; 3], [0.02; 3]);
        let ab = predicted_mse(&m, Coalition::AB).unwrap().mse_sum;
        let alone = predicted_mse(&m, Coalition::AAlone).unwrap().mse_sum;
        assert!(ab > alone, "{ab} {alone}");
    }
    #[test]
    fn fluctuation_band_brackets_nominal_and_widens() {
        let m = model(0.8, [0.85, 0.9, 0.8], [0.02, 0.01, 0.03]);
        for c in Coalition::ALL {
            let nominal = predicted_mse(&m, c).unwrap().mse_sum;
            let (lo0, hi0) =
                fluctuation_band(&m, c, 0.0, BandMode::Uniform, 5, RandomStream::new(1, 0))
                    .unwrap();
            assert_abs_diff_eq!(lo0, nominal, epsilon = 1e-12);
            assert_abs_diff_eq!(hi0, nominal, epsilon = 1e-12);
            let mut prev = 0.0;
            for rel in [0.01, 0.03, 0.1] {
                for mode in [BandMode::Uniform, BandMode::Gaussian] {
                    let (lo, hi) =
                        fluctuation_band(&m, c, rel, mode, 400, RandomStream::new(2, 0)).unwrap();
                    assert!(lo < nominal && nominal < hi, "{c} {rel} {mode:?}");
                    if mode == BandMode::Uniform {
                        assert!(hi - lo > prev);
                        prev = hi - lo;
                    }
                }
            }
        }
        assert!(fluctuation_band(
            &m,
            Coalition::AB,
            1.0,
            BandMode::Uniform,
            5,
            RandomStream::new(1, 0)
        )
        .is_err());
        assert!("normal".parse::<BandMode>().is_err());
    }
}
