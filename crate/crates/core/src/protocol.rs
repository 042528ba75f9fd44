//! Full protocol runs: displacement drawing, basis choice, measurement,
//! sifting, estimation, entanglement verification and bias spot-checks.
//!
//! Every round has a role drawn at random: most rounds feed the coalition's
//! estimate, a `witness_fraction` share is measured by all three parties for
//! the entanglement witness, and a `bias_fraction` share is held out for an
//! unbiasedness check. The dealer picks a basis per round; a cooperating
//! coalition shares one basis per round. A round is kept only if every
//! participant's basis covers the dealer's; dual-homodyne rounds of a lone
//! party A cover both quadratures and are always kept.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::SEPARABLE_WITNESS_BOUND;
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    bias_check, estimate, mse_standard_error, BiasCheck, Coalition, GainSet, MseReport,
};
use crate::gaussian::{build_dealer_state, ExperimentModel, Party, Quadrature};
use crate::sampler::{ColumnLabel, GaussianSampler, OutcomeMatrix, RandomStream};
use crate::stats;

/// Significance, in standard errors, used for the witness and bias flags.
pub const DECISION_SIGMAS: f64 = 5.0;

/// Minimum witness rounds per quadrature for [`entanglement_check`].
pub const MIN_WITNESS_ROUNDS: usize = 100;

/// Default cap on the number of Gaussian deviates drawn by
/// [`batch_mse_distribution`].
pub const DEFAULT_SAMPLE_CAP: u64 = 500_000_000;

const ROUNDS_PER_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisplacementMode {
    /// The same displacement in every round.
    Fixed { alpha_x: f64, alpha_p: f64 },
    /// Fresh `(α_x, α_p)` per round, each `N(0, v_dist)`.
    GaussianModulated { v_dist: f64 },
}

/// How the dealer chooses displacements.
///
/// With `repetitions = n > 1`, each round sends `n` probes displaced by
/// `α/√n` and reports `√n` times their mean outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementPlan {
    pub mode: DisplacementMode,
    pub repetitions: u32,
}

impl DisplacementPlan {
    pub fn fixed(alpha_x: f64, alpha_p: f64) -> Self {
        DisplacementPlan {
            mode: DisplacementMode::Fixed { alpha_x, alpha_p },
            repetitions: 1,
        }
    }

    pub fn gaussian(v_dist: f64) -> Self {
        DisplacementPlan {
            mode: DisplacementMode::GaussianModulated { v_dist },
            repetitions: 1,
        }
    }

    pub fn with_repetitions(mut self, repetitions: u32) -> Self {
        self.repetitions = repetitions;
        self
    }

    /// Per-probe displacement scale `1/√repetitions`.
    pub fn probe_scale(&self) -> f64 {
        1.0 / (self.repetitions as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be >= 1"));
        }
        match self.mode {
            DisplacementMode::Fixed { alpha_x, alpha_p }
                if !(alpha_x.is_finite() && alpha_p.is_finite()) =>
            {
                Err(invalid("displacement must be finite"))
            }
            DisplacementMode::GaussianModulated { v_dist }
                if !(v_dist.is_finite() && v_dist > 0.0) =>
            {
                Err(invalid(format!(
                    "v_dist must be finite and > 0, got {v_dist}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match self.mode {
            DisplacementMode::Fixed { alpha_x, alpha_p } => (alpha_x, alpha_p),
            DisplacementMode::GaussianModulated { v_dist } => {
                let s = v_dist.sqrt();
                let x: f64 = rng.sample(rand_distr::StandardNormal);
                let p: f64 = rng.sample(rand_distr::StandardNormal);
                (s * x, s * p)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    /// Gains from the model covariance.
    #[default]
    Analytic,
    /// Gains fitted on every other kept estimation round; the MSE is then
    /// reported on the remaining rounds only.
    Fitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPolicy {
    /// Abort when the declared transmissivity of A's arm is below this.
    pub eta_min: f64,
    pub witness_fraction: f64,
    pub bias_fraction: f64,
    #[serde(default)]
    pub gain_mode: GainMode,
}

impl Default for ProtocolPolicy {
    fn default() -> Self {
        ProtocolPolicy {
            eta_min: 0.5,
            witness_fraction: 0.05,
            bias_fraction: 0.05,
            gain_mode: GainMode::Analytic,
        }
    }
}

impl ProtocolPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min > 0.0 && self.eta_min <= 1.0) {
            return Err(invalid(format!(
                "eta_min must lie in (0, 1], got {}",
                self.eta_min
            )));
        }
        for (name, f) in [
            ("witness_fraction", self.witness_fraction),
            ("bias_fraction", self.bias_fraction),
        ] {
            if !(0.0..=0.5).contains(&f) {
                return Err(invalid(format!("{name} must lie in [0, 0.5], got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    X,
    P,
    /// Dual homodyne: both quadratures at once.
    Dual,
}

impl Basis {
    pub fn covers(self, q: Quadrature) -> bool {
        match self {
            Basis::Dual => true,
            Basis::X => q == Quadrature::X,
            Basis::P => q == Quadrature::P,
        }
    }
}

impl From<Quadrature> for Basis {
    fn from(q: Quadrature) -> Self {
        match q {
            Quadrature::X => Basis::X,
            Quadrature::P => Basis::P,
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::X => "x",
            Basis::P => "p",
            Basis::Dual => "xp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundRole {
    Estimation,
    Witness,
    BiasCheck,
}

impl fmt::Display for RoundRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoundRole::Estimation => "estimation",
            RoundRole::Witness => "witness",
            RoundRole::BiasCheck => "bias_check",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartyReading {
    pub basis: Basis,
    pub x: Option<f64>,
    pub p: Option<f64>,
}

impl PartyReading {
    pub fn value(&self, q: Quadrature) -> Option<f64> {
        match q {
            Quadrature::X => self.x,
            Quadrature::P => self.p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: u64,
    pub true_alpha: (f64, f64),
    pub dealer_basis: Quadrature,
    /// Readings of A, B and C, `None` for parties that did not measure.
    pub readings: [Option<PartyReading>; 3],
    pub role: RoundRole,
    pub kept: bool,
}

fn slot(p: Party) -> usize {
    match p {
        Party::A => 0,
        Party::B => 1,
        Party::C => 2,
    }
}

impl RoundRecord {
    pub fn reading(&self, party: Party) -> Option<&PartyReading> {
        self.readings[slot(party)].as_ref()
    }

    pub fn outcome(&self, party: Party, q: Quadrature) -> Option<f64> {
        self.reading(party).and_then(|r| r.value(q))
    }

    pub fn truth(&self, q: Quadrature) -> f64 {
        match q {
            Quadrature::X => self.true_alpha.0,
            Quadrature::P => self.true_alpha.1,
        }
    }

    /// Whether this round contributes to the estimate of `q`.
    pub fn retained_for(&self, q: Quadrature) -> bool {
        let mut readings = self.readings.iter().flatten().peekable();
        if readings.peek().is_none() {
            return false;
        }
        let all_dual = self
            .readings
            .iter()
            .flatten()
            .all(|r| r.basis == Basis::Dual);
        readings.all(|r| r.basis.covers(q)) && (all_dual || self.dealer_basis == q)
    }
}

/// Rounds usable for estimating `basis`.
pub fn sift(records: &[RoundRecord], basis: Quadrature) -> Vec<&RoundRecord> {
    records.iter().filter(|r| r.retained_for(basis)).collect()
}

/// Covariance and mean response of the distributed state. The mean is
/// linear in the displacement, so one covariance serves every round.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cov: DMatrix<f64>,
    response_x: DVector<f64>,
    response_p: DVector<f64>,
}

impl Pipeline {
    pub fn from_model(model: &ExperimentModel) -> Result<Self> {
        let base = build_dealer_state(model, 0.0, 0.0)?;
        let rx = build_dealer_state(model, 1.0, 0.0)?;
        let rp = build_dealer_state(model, 0.0, 1.0)?;
        Ok(Pipeline {
            cov: base.cov().clone(),
            response_x: rx.mean() - base.mean(),
            response_p: rp.mean() - base.mean(),
        })
    }

    /// Intercept-resend surrogate: A's mode is replaced by an independent
    /// state with the same reduced covariance and mean, so all correlations
    /// between A and the other parties vanish.
    pub fn intercept_resend(model: &ExperimentModel) -> Result<Self> {
        let mut p = Pipeline::from_model(model)?;
        let a = 2 * Party::A.mode();
        for i in a..a + 2 {
            for j in 0..6 {
                if !(a..a + 2).contains(&j) {
                    p.cov[(i, j)] = 0.0;
                    p.cov[(j, i)] = 0.0;
                }
            }
        }
        Ok(p)
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mean(&self, alpha_x: f64, alpha_p: f64) -> DVector<f64> {
        &self.response_x * alpha_x + &self.response_p * alpha_p
    }

    fn sampler(&self, idx: &[usize], extra_noise: f64) -> Result<GaussianSampler> {
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| {
            self.cov[(idx[r], idx[c])] + if r == c { extra_noise } else { 0.0 }
        });
        GaussianSampler::new(DVector::zeros(idx.len()), cov)
    }
}

/// Precomputed zero-mean samplers for one round type.
struct Channel {
    parties: Vec<Party>,
    idx: Vec<usize>,
    basis: Basis,
    sampler: GaussianSampler,
}

impl Channel {
    fn homodyne(pipeline: &Pipeline, parties: &[Party], q: Quadrature) -> Result<Self> {
        let idx: Vec<usize> = parties.iter().map(|p| 2 * p.mode() + q.offset()).collect();
        Ok(Channel {
            parties: parties.to_vec(),
            sampler: pipeline.sampler(&idx, 0.0)?,
            idx,
            basis: q.into(),
        })
    }

    fn dual(pipeline: &Pipeline) -> Result<Self> {
        let a = 2 * Party::A.mode();
        let idx = vec![a, a + 1];
        Ok(Channel {
            parties: vec![Party::A],
            sampler: pipeline.sampler(&idx, 1.0)?,
            idx,
            basis: Basis::Dual,
        })
    }

    fn measure<R: Rng + ?Sized>(
        &self,
        pipeline: &Pipeline,
        alpha: (f64, f64),
        plan: &DisplacementPlan,
        rng: &mut R,
    ) -> [Option<PartyReading>; 3] {
        let reps = plan.repetitions as usize;
        let scale = plan.probe_scale();
        let mean = pipeline.mean(alpha.0 * scale, alpha.1 * scale);
        let d = self.idx.len();
        let mut acc = [0.0f64; 6];
        let mut draw = [0.0f64; 6];
        for _ in 0..reps {
            self.sampler.draw_into(rng, &mut draw[..d]);
            for k in 0..d {
                acc[k] += draw[k] + mean[self.idx[k]];
            }
        }
        let norm = (reps as f64).sqrt() / reps as f64;
        let mut out = [None; 3];
        match self.basis {
            Basis::Dual => {
                out[slot(Party::A)] = Some(PartyReading {
                    basis: Basis::Dual,
                    x: Some(acc[0] * norm),
                    p: Some(acc[1] * norm),
                });
            }
            basis => {
                for (k, &party) in self.parties.iter().enumerate() {
                    let v = Some(acc[k] * norm);
                    let (x, p) = if basis == Basis::X {
                        (v, None)
                    } else {
                        (None, v)
                    };
                    out[slot(party)] = Some(PartyReading { basis, x, p });
                }
            }
        }
        out
    }
}

struct RoundGenerator<'a> {
    pipeline: &'a Pipeline,
    plan: &'a DisplacementPlan,
    coalition: Coalition,
    witness_fraction: f64,
    bias_fraction: f64,
    estimation: [Channel; 2],
    dual: Option<Channel>,
    witness: [Channel; 2],
}

impl<'a> RoundGenerator<'a> {
    fn new(
        pipeline: &'a Pipeline,
        plan: &'a DisplacementPlan,
        coalition: Coalition,
        witness_fraction: f64,
        bias_fraction: f64,
    ) -> Result<Self> {
        let parties = coalition.parties();
        Ok(RoundGenerator {
            pipeline,
            plan,
            coalition,
            witness_fraction,
            bias_fraction,
            estimation: [
                Channel::homodyne(pipeline, parties, Quadrature::X)?,
                Channel::homodyne(pipeline, parties, Quadrature::P)?,
            ],
            dual: if coalition.uses_dual_homodyne() {
                Some(Channel::dual(pipeline)?)
            } else {
                None
            },
            witness: [
                Channel::homodyne(pipeline, &Party::ALL, Quadrature::X)?,
                Channel::homodyne(pipeline, &Party::ALL, Quadrature::P)?,
            ],
        })
    }

    fn round<R: Rng + ?Sized>(&self, index: u64, rng: &mut R) -> RoundRecord {
        let u: f64 = rng.random();
        let role = if u < self.witness_fraction {
            RoundRole::Witness
        } else if u < self.witness_fraction + self.bias_fraction {
            RoundRole::BiasCheck
        } else {
            RoundRole::Estimation
        };
        let alpha = self.plan.draw(rng);
        let pick = |rng: &mut R| {
            if rng.random::<bool>() {
                Quadrature::X
            } else {
                Quadrature::P
            }
        };
        let dealer_basis = pick(rng);
        let party_basis = pick(rng);
        let channel = match (role, &self.dual) {
            (RoundRole::Witness, _) => &self.witness[party_basis.offset()],
            (_, Some(dual)) => dual,
            _ => &self.estimation[party_basis.offset()],
        };
        let readings = channel.measure(self.pipeline, alpha, self.plan, rng);
        let mut record = RoundRecord {
            round_index: index,
            true_alpha: alpha,
            dealer_basis,
            readings,
            role,
            kept: false,
        };
        record.kept = record.retained_for(dealer_basis);
        debug_assert!(self
            .coalition
            .parties()
            .iter()
            .all(|p| record.reading(*p).is_some()));
        record
    }

    fn generate(&self, n_rounds: usize, stream: RandomStream) -> Vec<RoundRecord> {
        let n_chunks = n_rounds.div_ceil(ROUNDS_PER_CHUNK);
        (0..n_chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = stream.child(c as u64).rng();
                let start = c * ROUNDS_PER_CHUNK;
                let end = (start + ROUNDS_PER_CHUNK).min(n_rounds);
                (start..end)
                    .map(move |i| self.round(i as u64, &mut rng))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Gathers the `q` columns of `parties` and the true displacements.
fn collect(
    records: &[&RoundRecord],
    parties: &[Party],
    q: Quadrature,
) -> Result<(OutcomeMatrix, Vec<f64>)> {
    let mut cols: Vec<(ColumnLabel, Vec<f64>)> = parties
        .iter()
        .map(|&p| (ColumnLabel::party(p, q), Vec::with_capacity(records.len())))
        .collect();
    for r in records {
        for (k, &p) in parties.iter().enumerate() {
            let v = r
                .outcome(p, q)
                .ok_or_else(|| Error::MissingColumn(ColumnLabel::party(p, q).to_string()))?;
            cols[k].1.push(v);
        }
    }
    let truths = records.iter().map(|r| r.truth(q)).collect();
    Ok((OutcomeMatrix::from_columns(cols)?, truths))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessResult {
    pub mse_x: f64,
    pub mse_p: f64,
    pub mse_sum: f64,
    pub mse_sum_se: f64,
    pub n_x: usize,
    pub n_p: usize,
    /// `mse_sum` lies more than five standard errors below the separable
    /// bound 4.
    pub entangled: bool,
}

/// Witness MSE of `(α_x, α_p)/√2` from kept rounds where all three parties
/// measured. Each quadrature's mean squared error is doubled for the
/// resource split.
pub fn entanglement_check(witness_records: &[RoundRecord]) -> Result<WitnessResult> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut parts = [(0.0, 0.0, 0usize); 2];
    for q in [Quadrature::X, Quadrature::P] {
        let kept: Vec<&RoundRecord> = witness_records
            .iter()
            .filter(|r| r.retained_for(q) && Party::ALL.iter().all(|p| r.outcome(*p, q).is_some()))
            .collect();
        if kept.len() < MIN_WITNESS_ROUNDS {
            return Err(Error::InsufficientData {
                needed: MIN_WITNESS_ROUNDS,
                got: kept.len(),
            });
        }
        let sign = if q == Quadrature::X { -1.0 } else { 1.0 };
        let errs: Vec<f64> = kept
            .iter()
            .map(|r| {
                let v = |p| r.outcome(p, q).unwrap_or(f64::NAN);
                let est = h * v(Party::A) + sign * (v(Party::B) - v(Party::C)) / 2.0;
                est - h * r.truth(q)
            })
            .collect();
        let zeros = vec![0.0; errs.len()];
        let mse = crate::estimators::empirical_mse(&errs, &zeros)?;
        let se = mse_standard_error(&errs, &zeros)?;
        parts[q.offset()] = (2.0 * mse, 2.0 * se, errs.len());
    }
    let mse_sum = parts[0].0 + parts[1].0;
    let mse_sum_se = parts[0].1.hypot(parts[1].1);
    Ok(WitnessResult {
        mse_x: parts[0].0,
        mse_p: parts[1].0,
        mse_sum,
        mse_sum_se,
        n_x: parts[0].2,
        n_p: parts[1].2,
        entangled: mse_sum + DECISION_SIGMAS * mse_sum_se < SEPARABLE_WITNESS_BOUND,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasResult {
    pub x: BiasCheck,
    pub p: BiasCheck,
    /// Either quadrature's mean error exceeds five standard errors.
    pub biased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub records: Vec<RoundRecord>,
    pub report: MseReport,
    /// Standard error of `report.mse_sum`.
    pub mse_sum_se: f64,
    pub witness: Option<WitnessResult>,
    pub bias: Option<BiasResult>,
    pub n_rounds: usize,
    pub kept_rounds: usize,
}

/// Runs `n_rounds` protocol rounds and evaluates the coalition's estimate.
pub fn run_protocol(
    model: &ExperimentModel,
    plan: &DisplacementPlan,
    n_rounds: usize,
    coalition: Coalition,
    policy: &ProtocolPolicy,
    stream: RandomStream,
) -> Result<ProtocolOutcome> {
    model.validate()?;
    plan.validate()?;
    policy.validate()?;
    if n_rounds < 10 {
        return Err(invalid(format!("n_rounds must be >= 10, got {n_rounds}")));
    }
    if model.eta_a < policy.eta_min {
        return Err(Error::AbortLoss {
            eta: model.eta_a,
            eta_min: policy.eta_min,
        });
    }
    let pipeline = Pipeline::from_model(model)?;
    let generator = RoundGenerator::new(
        &pipeline,
        plan,
        coalition,
        policy.witness_fraction,
        policy.bias_fraction,
    )?;
    let records = generator.generate(n_rounds, stream);

    let parties = coalition.parties();
    let by_role = |role: RoundRole, q: Quadrature| -> Vec<&RoundRecord> {
        records
            .iter()
            .filter(|r| r.role == role && r.retained_for(q))
            .collect()
    };
    let mut est_rounds = [
        by_role(RoundRole::Estimation, Quadrature::X),
        by_role(RoundRole::Estimation, Quadrature::P),
    ];

    let gains = match policy.gain_mode {
        GainMode::Analytic => GainSet::analytic(model, coalition)?,
        GainMode::Fitted => {
            let mut calib = Vec::new();
            for rounds in est_rounds.iter_mut() {
                calib.push(rounds.iter().step_by(2).copied().collect::<Vec<_>>());
                *rounds = rounds.iter().skip(1).step_by(2).copied().collect();
            }
            for c in &calib {
                if c.len() < 2 {
                    return Err(Error::ProtocolFailure(format!(
                        "only {} calibration rounds",
                        c.len()
                    )));
                }
            }
            let (mx, _) = collect(&calib[0], parties, Quadrature::X)?;
            let (mp, _) = collect(&calib[1], parties, Quadrature::P)?;
            GainSet::fit(coalition, &mx, &mp, 1.0 / model.eta_a.sqrt())?
        }
    };

    let mut est = Vec::with_capacity(2);
    for (q, rounds) in [Quadrature::X, Quadrature::P].into_iter().zip(&est_rounds) {
        if rounds.len() < 2 {
            return Err(Error::ProtocolFailure(format!(
                "{} kept {q} rounds, need at least 2",
                rounds.len()
            )));
        }
        let (m, truths) = collect(rounds, parties, q)?;
        est.push((estimate(coalition, &m, &gains, q)?, truths));
    }
    let report = MseReport::from_estimates(
        coalition,
        gains,
        (&est[0].0, &est[0].1),
        (&est[1].0, &est[1].1),
    )?;
    let f = coalition.allocation_factor();
    let mse_sum_se = (f * mse_standard_error(&est[0].0, &est[0].1)?)
        .hypot(f * mse_standard_error(&est[1].0, &est[1].1)?);

    let witness_records: Vec<RoundRecord> = records
        .iter()
        .filter(|r| r.role == RoundRole::Witness)
        .copied()
        .collect();
    let witness = if policy.witness_fraction > 0.0 {
        match entanglement_check(&witness_records) {
            Ok(w) => Some(w),
            Err(Error::InsufficientData { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let bias = {
        let bx = by_role(RoundRole::BiasCheck, Quadrature::X);
        let bp = by_role(RoundRole::BiasCheck, Quadrature::P);
        if bx.len() >= 2 && bp.len() >= 2 {
            let check = |rounds: &[&RoundRecord], q| -> Result<BiasCheck> {
                let (m, truths) = collect(rounds, parties, q)?;
                bias_check(&estimate(coalition, &m, &gains, q)?, &truths)
            };
            let x = check(&bx, Quadrature::X)?;
            let p = check(&bp, Quadrature::P)?;
            Some(BiasResult {
                x,
                p,
                biased: x.is_biased(DECISION_SIGMAS) || p.is_biased(DECISION_SIGMAS),
            })
        } else {
            None
        }
    };

    let kept_rounds = records.iter().filter(|r| r.kept).count();
    Ok(ProtocolOutcome {
        records,
        report,
        mse_sum_se,
        witness,
        bias,
        n_rounds,
        kept_rounds,
    })
}

/// Witness-only run: every round is measured by all three parties. With
/// `surrogate` the intercept-resend state of [`Pipeline::intercept_resend`]
/// is distributed instead of the dealer state.
pub fn run_witness(
    model: &ExperimentModel,
    plan: &DisplacementPlan,
    n_rounds: usize,
    surrogate: bool,
    stream: RandomStream,
) -> Result<WitnessResult> {
    model.validate()?;
    plan.validate()?;
    let pipeline = if surrogate {
        Pipeline::intercept_resend(model)?
    } else {
        Pipeline::from_model(model)?
    };
    let generator = RoundGenerator::new(&pipeline, plan, Coalition::ABC, 1.0, 0.0)?;
    entanglement_check(&generator.generate(n_rounds, stream))
}

/// Summed batch MSEs of a coalition over `n_batches` independent batches of
/// `n_probes` probes per quadrature.
///
/// Homodyne coalitions spend `n_probes` probes on each quadrature and report
/// `2 · (mean e_x² + mean e_p²)`; A alone measures `n_probes` dual-homodyne
/// probes and reports `mean e_x² + mean e_p²`. Errors do not depend on the
/// displacement, which is therefore set to zero.
pub fn batch_mse_distribution(
    model: &ExperimentModel,
    coalition: Coalition,
    n_probes: usize,
    n_batches: usize,
    stream: RandomStream,
) -> Result<Vec<f64>> {
    batch_mse_distribution_capped(
        model,
        coalition,
        n_probes,
        n_batches,
        stream,
        DEFAULT_SAMPLE_CAP,
    )
}

pub fn batch_mse_distribution_capped(
    model: &ExperimentModel,
    coalition: Coalition,
    n_probes: usize,
    n_batches: usize,
    stream: RandomStream,
    cap: u64,
) -> Result<Vec<f64>> {
    model.validate()?;
    if n_batches < 100 {
        return Err(invalid(format!(
            "n_batches must be >= 100, got {n_batches}"
        )));
    }
    if n_probes == 0 {
        return Err(invalid("n_probes must be >= 1"));
    }
    let per_probe = if coalition.uses_dual_homodyne() {
        2
    } else {
        2 * coalition.parties().len()
    } as u64;
    let requested = (n_batches as u64)
        .saturating_mul(n_probes as u64)
        .saturating_mul(per_probe);
    if requested > cap {
        return Err(Error::ResourceExhausted { requested, cap });
    }
    let pipeline = Pipeline::from_model(model)?;
    let gains = GainSet::analytic(model, coalition)?;
    let parties = coalition.parties();
    let channels = if coalition.uses_dual_homodyne() {
        vec![Channel::dual(&pipeline)?]
    } else {
        vec![
            Channel::homodyne(&pipeline, parties, Quadrature::X)?,
            Channel::homodyne(&pipeline, parties, Quadrature::P)?,
        ]
    };
    let plan = DisplacementPlan::fixed(0.0, 0.0);
    let f = coalition.allocation_factor();
    (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream.child(b as u64).rng();
            let mut total = 0.0;
            for ch in &channels {
                let rounds: Vec<RoundRecord> = (0..n_probes)
                    .map(|i| RoundRecord {
                        round_index: i as u64,
                        true_alpha: (0.0, 0.0),
                        dealer_basis: Quadrature::X,
                        readings: ch.measure(&pipeline, (0.0, 0.0), &plan, &mut rng),
                        role: RoundRole::Estimation,
                        kept: true,
                    })
                    .collect();
                let refs: Vec<&RoundRecord> = rounds.iter().collect();
                for q in [Quadrature::X, Quadrature::P] {
                    if !ch.basis.covers(q) {
                        continue;
                    }
                    let (m, truths) = collect(&refs, parties, q)?;
                    total += crate::estimators::empirical_mse(
                        &estimate(coalition, &m, &gains, q)?,
                        &truths,
                    )?;
                }
            }
            Ok(f * total)
        })
        .collect()
}

/// Writes records as CSV, one row per round. Unmeasured values are empty.
pub fn write_rounds_csv<W: Write>(records: &[RoundRecord], mut w: W) -> Result<()> {
    write!(w, "round_index,role,dealer_basis,alpha_x,alpha_p,kept")?;
    for p in Party::ALL {
        write!(w, ",basis_{p},x_{p},p_{p}")?;
    }
    writeln!(w)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for r in records {
        write!(
            w,
            "{},{},{},{:?},{:?},{}",
            r.round_index, r.role, r.dealer_basis, r.true_alpha.0, r.true_alpha.1, r.kept
        )?;
        for p in Party::ALL {
            match r.reading(p) {
                Some(rd) => write!(w, ",{},{},{}", rd.basis, opt(rd.x), opt(rd.p))?,
                None => write!(w, ",,,")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Mean and standard error of a batch-MSE sample.
pub fn batch_summary(batches: &[f64]) -> Result<(f64, f64)> {
    stats::mean_and_se(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{ideal_three_party_mse_sum, predicted_mse, witness_bound};
    use approx::assert_abs_diff_eq;

    fn reading(basis: Basis) -> Option<PartyReading> {
        let (x, p) = match basis {
            Basis::X => (Some(0.0), None),
            Basis::P => (None, Some(0.0)),
            Basis::Dual => (Some(0.0), Some(0.0)),
        };
        Some(PartyReading { basis, x, p })
    }

    fn synthetic(dealer: Quadrature, bases: [Option<Basis>; 3]) -> RoundRecord {
        RoundRecord {
            round_index: 0,
            true_alpha: (0.0, 0.0),
            dealer_basis: dealer,
            readings: bases.map(|b| b.and_then(reading)),
            role: RoundRole::Estimation,
            kept: false,
        }
    }

    #[test]
    fn sifting_rules() {
        use Basis::*;
        let all_x = vec![synthetic(Quadrature::X, [Some(X), Some(X), None]); 6];
        assert_eq!(sift(&all_x, Quadrature::X).len(), 6);
        assert_eq!(sift(&all_x, Quadrature::P).len(), 0);
        let alternating: Vec<RoundRecord> = (0..10)
            .map(|i| {
                synthetic(
                    Quadrature::X,
                    [Some(X), Some(if i % 2 == 0 { X } else { P }), None],
                )
            })
            .collect();
        assert_eq!(sift(&alternating, Quadrature::X).len(), 5);
        let dual = synthetic(Quadrature::P, [Some(Dual), None, None]);
        assert!(dual.retained_for(Quadrature::X) && dual.retained_for(Quadrature::P));
        let empty = synthetic(Quadrature::X, [None, None, None]);
        assert!(!empty.retained_for(Quadrature::X));
    }

    #[test]
    fn policy_and_plan_validation() {
        assert!(ProtocolPolicy::default().validate().is_ok());
        assert!(ProtocolPolicy {
            witness_fraction: 0.6,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ProtocolPolicy {
            eta_min: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DisplacementPlan::gaussian(-1.0).validate().is_err());
        assert!(DisplacementPlan::fixed(0.1, 0.1)
            .with_repetitions(0)
            .validate()
            .is_err());
        assert_eq!(
            DisplacementPlan::fixed(0.0, 0.0)
                .with_repetitions(4)
                .probe_scale(),
            0.5
        );
    }

    #[test]
    fn abort_on_loss() {
        let model = ExperimentModel {
            eta_a: 0.1,
            ..ExperimentModel::ideal(1.0)
        };
        let err = run_protocol(
            &model,
            &DisplacementPlan::fixed(0.2, 0.2),
            1000,
            Coalition::ABC,
            &ProtocolPolicy::default(),
            RandomStream::new(1, 0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::AbortLoss { .. }));
        assert_eq!(err.kind(), "abort-loss");
    }

    #[test]
    fn too_few_rounds() {
        let model = ExperimentModel::ideal(1.0);
        let plan = DisplacementPlan::fixed(0.2, 0.2);
        let p = ProtocolPolicy::default();
        assert!(
            run_protocol(&model, &plan, 5, Coalition::AB, &p, RandomStream::new(1, 0)).is_err()
        );
        // 10 rounds can leave fewer than two kept rounds per quadrature
        let failures = (0..200)
            .filter(|&s| {
                matches!(
                    run_protocol(
                        &model,
                        &plan,
                        10,
                        Coalition::AB,
                        &p,
                        RandomStream::new(s, 0)
                    ),
                    Err(Error::ProtocolFailure(_))
                )
            })
            .count();
        assert!(failures > 0);
    }

    #[test]
    fn sifting_keeps_about_half() {
        let model = ExperimentModel::ideal(0.5);
        let policy = ProtocolPolicy {
            witness_fraction: 0.0,
            bias_fraction: 0.0,
            ..Default::default()
        };
        let n = 20_000;
        let out = run_protocol(
            &model,
            &DisplacementPlan::fixed(0.2, 0.2),
            n,
            Coalition::AB,
            &policy,
            RandomStream::new(3, 0),
        )
        .unwrap();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((out.kept_rounds as f64 - n as f64 / 2.0).abs() < 5.0 * sd);
        assert_eq!(out.report.n_x + out.report.n_p, out.kept_rounds);
        // deterministic given the stream
        let again = run_protocol(
            &model,
            &DisplacementPlan::fixed(0.2, 0.2),
            n,
            Coalition::AB,
            &policy,
            RandomStream::new(3, 0),
        )
        .unwrap();
        assert_eq!(out.records, again.records);
    }

    #[test]
    fn dual_homodyne_rounds_all_kept() {
        let model = ExperimentModel::ideal(0.5);
        let policy = ProtocolPolicy {
            witness_fraction: 0.0,
            bias_fraction: 0.0,
            ..Default::default()
        };
        let out = run_protocol(
            &model,
            &DisplacementPlan::fixed(0.1, 0.0),
            2000,
            Coalition::AAlone,
            &policy,
            RandomStream::new(4, 0),
        )
        .unwrap();
        assert_eq!(out.kept_rounds, 2000);
        assert_eq!(out.report.n_x, 2000);
        assert!(out.witness.is_none());
    }

    #[test]
    fn triple_protocol_mse() {
        let r = 1.0;
        let model = ExperimentModel::ideal(r);
        let out = run_protocol(
            &model,
            &DisplacementPlan::fixed(0.2, 0.2),
            200_000,
            Coalition::ABC,
            &ProtocolPolicy::default(),
            RandomStream::new(11, 0),
        )
        .unwrap();
        let target = ideal_three_party_mse_sum(r);
        assert!(
            (out.report.mse_sum - target).abs() < 5.0 * out.mse_sum_se,
            "{} vs {target}",
            out.report.mse_sum
        );
        let w = out.witness.unwrap();
        assert!(w.entangled);
        assert!((w.mse_sum - witness_bound(r)).abs() < 5.0 * w.mse_sum_se);
        assert!(!out.bias.unwrap().biased);
    }

    #[test]
    fn witness_boundaries() {
        let plan = DisplacementPlan::fixed(0.2, 0.2);
        let vac = run_witness(
            &ExperimentModel::ideal(0.0),
            &plan,
            100_000,
            false,
            RandomStream::new(5, 0),
        )
        .unwrap();
        assert!(!vac.entangled);
        assert!((vac.mse_sum - 4.0).abs() < 5.0 * vac.mse_sum_se);
        let fake = run_witness(
            &ExperimentModel::ideal(1.0),
            &plan,
            100_000,
            true,
            RandomStream::new(5, 1),
        )
        .unwrap();
        assert!(!fake.entangled);
        assert!((fake.mse_sum - 4.0 * 2f64.cosh()).abs() < 5.0 * fake.mse_sum_se);
        assert!(entanglement_check(&[]).is_err());
    }

    #[test]
    fn surrogate_is_physical_and_uncorrelated() {
        let p = Pipeline::intercept_resend(&ExperimentModel::ideal(1.0)).unwrap();
        let s = crate::gaussian::GaussianState::new(DVector::zeros(6), p.cov().clone()).unwrap();
        assert!(s.is_physical());
        assert_eq!(p.cov()[(4, 0)], 0.0);
        assert_abs_diff_eq!(p.cov()[(4, 4)], 2f64.cosh(), epsilon = 1e-12);
    }

    #[test]
    fn lossy_estimates_are_unbiased() {
        for eta in [1.0, 0.9, 0.8] {
            let model = ExperimentModel {
                eta_a: eta,
                ..ExperimentModel::ideal(0.7)
            };
            for c in Coalition::ALL {
                let policy = ProtocolPolicy {
                    witness_fraction: 0.0,
                    bias_fraction: 0.5,
                    ..Default::default()
                };
                let out = run_protocol(
                    &model,
                    &DisplacementPlan::fixed(1.0, -0.5),
                    200_000,
                    c,
                    &policy,
                    RandomStream::new(21, c as u64),
                )
                .unwrap();
                let b = out.bias.unwrap();
                assert!(!b.biased, "{c} eta={eta}: {b:?}");
                assert!(b.x.n > 20_000);
            }
        }
    }

    #[test]
    fn gaussian_plan_variances() {
        let v_dist = 2.0;
        let model = ExperimentModel::ideal(1.0);
        let policy = ProtocolPolicy {
            witness_fraction: 0.0,
            bias_fraction: 0.0,
            ..Default::default()
        };
        let out = run_protocol(
            &model,
            &DisplacementPlan::gaussian(v_dist),
            100_000,
            Coalition::AB,
            &policy,
            RandomStream::new(8, 0),
        )
        .unwrap();
        let alphas: Vec<f64> = out.records.iter().map(|r| r.true_alpha.0).collect();
        let var = stats::variance(&alphas).unwrap();
        assert!((var - v_dist).abs() < 5.0 * v_dist * (2.0 / alphas.len() as f64).sqrt());
        // player-side estimate variance: V_dist + per-quadrature MSE (1 for AB)
        let kept = sift(&out.records, Quadrature::X);
        let (m, _) = collect(&kept, Coalition::AB.parties(), Quadrature::X).unwrap();
        let est = estimate(Coalition::AB, &m, &out.report.gains, Quadrature::X).unwrap();
        let v = stats::variance(&est).unwrap();
        assert!(
            (v - (v_dist + 1.0)).abs() < 5.0 * (v_dist + 1.0) * (2.0 / est.len() as f64).sqrt(),
            "{v}"
        );
    }

    #[test]
    fn probe_scaling_preserves_mse() {
        let model = ExperimentModel::ideal(0.8);
        let policy = ProtocolPolicy {
            witness_fraction: 0.0,
            bias_fraction: 0.0,
            ..Default::default()
        };
        let plan = DisplacementPlan::fixed(0.3, 0.3);
        let single = run_protocol(
            &model,
            &plan,
            100_000,
            Coalition::ABC,
            &policy,
            RandomStream::new(2, 0),
        )
        .unwrap();
        let scaled = run_protocol(
            &model,
            &plan.with_repetitions(9),
            100_000,
            Coalition::ABC,
            &policy,
            RandomStream::new(2, 1),
        )
        .unwrap();
        let se = single.mse_sum_se.hypot(scaled.mse_sum_se);
        assert!((single.report.mse_sum - scaled.report.mse_sum).abs() < 5.0 * se);
    }

    #[test]
    fn sifting_does_not_change_retained_distribution() {
        // kept rounds of a sifted run versus a run where nothing is sifted
        // (dual homodyne keeps everything): compare against the prediction
        let model = ExperimentModel {
            eta_b: 0.9,
            ..ExperimentModel::ideal(0.6)
        };
        let policy = ProtocolPolicy {
            witness_fraction: 0.0,
            bias_fraction: 0.0,
            ..Default::default()
        };
        let out = run_protocol(
            &model,
            &DisplacementPlan::fixed(0.2, 0.1),
            200_000,
            Coalition::AB,
            &policy,
            RandomStream::new(31, 0),
        )
        .unwrap();
        let predicted = predicted_mse(&model, Coalition::AB).unwrap().mse_sum;
        assert!((out.report.mse_sum - predicted).abs() < 5.0 * out.mse_sum_se);
    }

    #[test]
    fn fitted_gains_close_to_analytic() {
        let model = ExperimentModel {
            eta_c: 0.8,
            eps_a: 0.03,
            ..ExperimentModel::ideal(1.0)
        };
        let policy = ProtocolPolicy {
            gain_mode: GainMode::Fitted,
            ..Default::default()
        };
        let out = run_protocol(
            &model,
            &DisplacementPlan::fixed(0.2, 0.2),
            100_000,
            Coalition::ABC,
            &policy,
            RandomStream::new(6, 0),
        )
        .unwrap();
        let analytic = GainSet::analytic(&model, Coalition::ABC).unwrap();
        assert!((out.report.gains.g_bc - analytic.g_bc).abs() < 0.02);
        let predicted = predicted_mse(&model, Coalition::ABC).unwrap().mse_sum;
        assert!((out.report.mse_sum - predicted).abs() < 5.0 * out.mse_sum_se);
    }

    #[test]
    fn batch_distribution_mean() {
        let model = ExperimentModel::ideal(1.0);
        for c in [Coalition::ABC, Coalition::AAlone] {
            let b = batch_mse_distribution(&model, c, 10, 4000, RandomStream::new(12, 0)).unwrap();
            let (m, se) = batch_summary(&b).unwrap();
            let mu = predicted_mse(&model, c).unwrap().mse_sum;
            assert!((m - mu).abs() < 5.0 * se, "{c}: {m} vs {mu}");
            // variance of the scaled χ² law: μ²/N
            let v = stats::variance(&b).unwrap();
            assert!(
                (v - mu * mu / 10.0).abs() < 0.1 * mu * mu / 10.0,
                "{c}: {v}"
            );
        }
    }

    #[test]
    fn batch_guards() {
        let model = ExperimentModel::ideal(1.0);
        assert!(
            batch_mse_distribution(&model, Coalition::AB, 10, 99, RandomStream::new(1, 0)).is_err()
        );
        let err = batch_mse_distribution_capped(
            &model,
            Coalition::ABC,
            1000,
            1000,
            RandomStream::new(1, 0),
            1_000_000,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::ResourceExhausted {
                requested: 6_000_000,
                cap: 1_000_000
            }
        ));
    }

    #[test]
    fn rounds_csv() {
        let model = ExperimentModel::ideal(0.5);
        let out = run_protocol(
            &model,
            &DisplacementPlan::fixed(0.2, 0.2),
            50,
            Coalition::AB,
            &ProtocolPolicy::default(),
            RandomStream::new(1, 0),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_rounds_csv(&out.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 51);
        assert_eq!(lines[0], "round_index,role,dealer_basis,alpha_x,alpha_p,kept,basis_A,x_A,p_A,basis_B,x_B,p_B,basis_C,x_C,p_C");
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 15));
    }
}
