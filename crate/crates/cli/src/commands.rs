use std::fs;

use cvshare_core::bounds::{
    fluctuation_band, predicted_mse, predicted_witness_variance_sum, witness_bound,
};
use cvshare_core::certificates::{certify, grid, CertificateStatus};
use cvshare_core::gaussian::build_dealer_state;
use cvshare_core::protocol::{run_protocol, run_witness, write_rounds_csv};
use cvshare_core::security::{
    crossing_threshold, mutual_information, prob_mi_above, required_mse, security_probabilities,
};
use cvshare_core::{Coalition, DisplacementPlan, MseDistribution, RandomStream, ThermalParams};
use serde::Serialize;

use crate::config::SimulateConfig;
use crate::output::OutDir;
use crate::{
    BoundsArgs, CertifyArgs, Cli, CliError, Command, MiArgs, MuArgs, SecurityArgs, SimulateArgs,
    StateArgs, WitnessArgs,
};

type Result<T> = std::result::Result<T, CliError>;

/// Coalitions plotted against the single party, with their mean MSEs.
fn coalition_mus(mu: &MuArgs) -> [(Coalition, f64); 2] {
    [(Coalition::AB, mu.mu_pair), (Coalition::ABC, mu.mu_triple)]
}

pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let mut out = OutDir::create(&cli.out)?;
    let mut resolved = None;
    let name = match &cli.command {
        Command::State(a) => state(a, &mut out)?,
        Command::Bounds(a) => bounds(a, &mut out)?,
        Command::Certify(a) => certify_cmd(a, &mut out)?,
        Command::Simulate(a) => {
            resolved = Some(simulate(a, &mut out)?);
            "simulate"
        }
        Command::Security(a) => security(a, &mut out)?,
        Command::Mi(a) => mi(a, &mut out)?,
        Command::Witness(a) => witness(a, &mut out)?,
    };

    #[derive(Serialize)]
    struct Config<'a> {
        args: &'a Command,
        #[serde(skip_serializing_if = "Option::is_none")]
        resolved: Option<SimulateConfig>,
    }
    let files = out.finish(
        name,
        argv,
        &Config {
            args: &cli.command,
            resolved,
        },
    )?;
    println!("wrote {} to {}", files.join(", "), cli.out.display());
    Ok(())
}

fn state(a: &StateArgs, out: &mut OutDir) -> Result<&'static str> {
    let mut st = build_dealer_state(&a.loss.model(a.r), a.alpha_x, a.alpha_p)?;
    if let Some(p) = a.party {
        st = st.partial_trace(&[p.mode()])?;
    }
    out.write_bytes("state.txt", st.to_text().as_bytes())?;
    Ok("state")
}

fn bounds(a: &BoundsArgs, out: &mut OutDir) -> Result<&'static str> {
    if a.steps < 2 || a.r_max.partial_cmp(&a.r_min) != Some(std::cmp::Ordering::Greater) {
        return Err(CliError::Usage(
            "need --steps >= 2 and --r-max > --r-min".into(),
        ));
    }
    let rs: Vec<f64> = (0..a.steps)
        .map(|i| a.r_min + (a.r_max - a.r_min) * i as f64 / (a.steps - 1) as f64)
        .collect();
    let mut rows = Vec::new();
    let mut band_rows = Vec::new();
    for (i, &r) in rs.iter().enumerate() {
        let model = a.loss.model(r);
        for (j, c) in Coalition::ALL.into_iter().enumerate() {
            let p = predicted_mse(&model, c)?;
            rows.push(format!("{r},{c},{},{},{}", p.mse_x, p.mse_p, p.mse_sum));
            if let Some(mode) = a.band {
                let stream = RandomStream::new(a.seed, (i * Coalition::ALL.len() + j) as u64);
                let (lo, hi) =
                    fluctuation_band(&model, c, a.band_rel, mode, a.band_samples, stream)?;
                band_rows.push(format!("{r},{c},{lo},{hi}"));
            }
        }
    }
    out.write_csv("bounds.csv", "r,coalition,mse_x,mse_p,mse_sum", &rows)?;
    if a.band.is_some() {
        out.write_csv("bounds_band.csv", "r,coalition,lower,upper", &band_rows)?;
    }
    Ok("bounds")
}

fn certify_cmd(a: &CertifyArgs, out: &mut OutDir) -> Result<&'static str> {
    let points = match (a.n1, a.n2, a.grid) {
        (Some(n1), Some(n2), _) => vec![ThermalParams::new(n1, n2)?],
        (_, _, Some(k)) => grid(k, a.lo, a.hi)?,
        _ => return Err(CliError::Usage("give --n1 and --n2, or --grid".into())),
    };
    let reports = points
        .into_iter()
        .map(|p| certify(p, a.tol))
        .collect::<cvshare_core::Result<Vec<_>>>()?;
    out.write_json("certificates.json", &reports)?;
    let failed = reports
        .iter()
        .filter(|r| r.status == CertificateStatus::Failed)
        .count();
    let degenerate = reports
        .iter()
        .filter(|r| r.status == CertificateStatus::DegenerateDual)
        .count();
    println!(
        "{} of {} points verified, {degenerate} at the degenerate vacuum limit, {failed} failed",
        reports.len() - failed - degenerate,
        reports.len()
    );
    if failed > 0 {
        return Err(CliError::CertificateFailed(failed));
    }
    Ok("certify")
}

fn simulate(a: &SimulateArgs, out: &mut OutDir) -> Result<SimulateConfig> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", a.config.display())))?;
    let cfg = SimulateConfig::parse(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", a.config.display())))?;
    let outcome = run_protocol(
        &cfg.model,
        &cfg.plan,
        cfg.n_rounds,
        cfg.coalition,
        &cfg.policy,
        RandomStream::new(cfg.seed, 0),
    )?;

    #[derive(Serialize)]
    struct Report<'a> {
        report: &'a cvshare_core::MseReport,
        mse_sum_se: f64,
        predicted_mse_sum: f64,
        n_rounds: usize,
        kept_rounds: usize,
        bias: &'a Option<cvshare_core::protocol::BiasResult>,
    }
    out.write_json(
        "report.json",
        &Report {
            report: &outcome.report,
            mse_sum_se: outcome.mse_sum_se,
            predicted_mse_sum: predicted_mse(&cfg.model, cfg.coalition)?.mse_sum,
            n_rounds: outcome.n_rounds,
            kept_rounds: outcome.kept_rounds,
            bias: &outcome.bias,
        },
    )?;
    out.write_json("witness.json", &outcome.witness)?;
    if a.dump_rounds {
        let mut buf = Vec::new();
        write_rounds_csv(&outcome.records, &mut buf)?;
        out.write_bytes("rounds.csv", &buf)?;
    }
    println!(
        "{}: mse_sum {:.6} (se {:.6}) over {} kept rounds",
        cfg.coalition, outcome.report.mse_sum, outcome.mse_sum_se, outcome.kept_rounds
    );

    Ok(cfg)
}

fn security(a: &SecurityArgs, out: &mut OutDir) -> Result<&'static str> {
    if a.n_max == 0 {
        return Err(CliError::Usage("--n-max must be >= 1".into()));
    }
    let threshold = |mu_c: f64| -> Result<f64> {
        match a.v_t {
            Some(v) => Ok(v),
            None => Ok(crossing_threshold(a.mu.mu_single, mu_c)?),
        }
    };
    let mut reports = Vec::new();
    for (c, mu_c) in coalition_mus(&a.mu) {
        let rep = security_probabilities(
            threshold(mu_c)?,
            &MseDistribution::new(a.mu.mu_single, a.n_probes)?,
            &MseDistribution::new(mu_c, a.n_probes)?,
            c,
        )?;
        println!(
            "{c}: v_T {:.4}, delta {:.4e}, P_s {:.6}",
            rep.v_t, rep.delta, rep.p_success
        );
        reports.push(rep);
    }
    out.write_json("security.json", &reports)?;

    let mut rows = Vec::new();
    for n in 1..=a.n_max {
        for (c, mu_c) in coalition_mus(&a.mu) {
            let rep = security_probabilities(
                threshold(mu_c)?,
                &MseDistribution::new(a.mu.mu_single, n)?,
                &MseDistribution::new(mu_c, n)?,
                c,
            )?;
            rows.push(format!(
                "{n},{c},{},{},{}",
                rep.v_t, rep.delta, rep.p_success
            ));
        }
    }
    out.write_csv(
        "security_sweep.csv",
        "n_probes,coalition,v_t,delta,p_success",
        &rows,
    )?;
    Ok("security")
}

fn mi(a: &MiArgs, out: &mut OutDir) -> Result<&'static str> {
    if a.n_max == 0 {
        return Err(CliError::Usage("--n-max must be >= 1".into()));
    }
    // Information against per-quadrature MSE on a log grid, 1e-2 .. 1e2 × V.
    let rows: Vec<String> = (0..=80)
        .map(|i| {
            let v = a.v_dist * 10f64.powf(-2.0 + i as f64 / 20.0);
            Ok(format!("{v},{}", mutual_information(a.v_dist, v)?))
        })
        .collect::<cvshare_core::Result<_>>()?;
    out.write_csv("mi_vs_mse.csv", "v_alpha,mi_bits", &rows)?;

    let rows: Vec<String> = (1..=80)
        .map(|i| {
            let c = i as f64 / 10.0;
            Ok(format!("{c},{}", required_mse(c, a.v_dist)?))
        })
        .collect::<cvshare_core::Result<_>>()?;
    out.write_csv("mi_required_mse.csv", "c_bits,required_mse", &rows)?;

    let mut rows = Vec::new();
    let all = [
        (Coalition::AAlone, a.mu.mu_single),
        (Coalition::AB, a.mu.mu_pair),
        (Coalition::ABC, a.mu.mu_triple),
    ];
    for n in 1..=a.n_max {
        for (c, mu) in all {
            let p = prob_mi_above(a.c_bits, a.v_dist, &MseDistribution::new(mu, n)?)?;
            rows.push(format!("{n},{c},{mu},{p}"));
        }
    }
    out.write_csv(
        "mi_exceedance.csv",
        "n_probes,coalition,mu,probability",
        &rows,
    )?;
    Ok("mi")
}

fn witness(a: &WitnessArgs, out: &mut OutDir) -> Result<&'static str> {
    let model = a.loss.model(a.r);
    let w = run_witness(
        &model,
        &DisplacementPlan::fixed(a.alpha_x, a.alpha_p),
        a.n_rounds,
        a.surrogate,
        RandomStream::new(a.seed, 0),
    )?;

    #[derive(Serialize)]
    struct Report {
        witness: cvshare_core::protocol::WitnessResult,
        separable_bound: f64,
        ideal_mse_sum: f64,
        predicted_variance_sum: Option<f64>,
    }
    let report = Report {
        witness: w,
        separable_bound: cvshare_core::bounds::SEPARABLE_WITNESS_BOUND,
        ideal_mse_sum: witness_bound(a.r),
        predicted_variance_sum: if a.surrogate {
            None
        } else {
            Some(predicted_witness_variance_sum(&model)?)
        },
    };
    out.write_json("witness.json", &report)?;
    println!(
        "witness mse_sum {:.6} (se {:.6}): {}",
        w.mse_sum,
        w.mse_sum_se,
        if w.entangled {
            "entangled"
        } else {
            "not certified"
        }
    );
    Ok("witness")
}
