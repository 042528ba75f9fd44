//! Line-oriented `key = value` configuration for the `simulate` subcommand.

use std::collections::BTreeMap;
use std::str::FromStr;

use cvshare_core::protocol::GainMode;
use cvshare_core::{Coalition, DisplacementPlan, ExperimentModel, ProtocolPolicy};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateConfig {
    pub model: ExperimentModel,
    pub plan: DisplacementPlan,
    pub coalition: Coalition,
    pub n_rounds: usize,
    pub seed: u64,
    pub policy: ProtocolPolicy,
}

const KEYS: [&str; 19] = [
    "r",
    "eta_a",
    "eta_b",
    "eta_c",
    "eps_a",
    "eps_b",
    "eps_c",
    "plan",
    "v_dist",
    "alpha_x",
    "alpha_p",
    "repetitions",
    "coalition",
    "n_rounds",
    "seed",
    "eta_min",
    "witness_fraction",
    "bias_fraction",
    "gain_mode",
];

fn parse_value<T: FromStr>(
    entries: &BTreeMap<String, (usize, String)>,
    key: &str,
    default: T,
) -> Result<T, String> {
    match entries.get(key) {
        None => Ok(default),
        Some((line, raw)) => raw
            .parse()
            .map_err(|_| format!("line {line}: cannot parse {key} = {raw:?}")),
    }
}

impl SimulateConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(format!("line {}: unknown key {key:?}", i + 1));
            }
            if entries
                .insert(key.to_string(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(format!("line {}: duplicate key {key:?}", i + 1));
            }
        }

        let ideal = ExperimentModel::ideal(0.0);
        let model = ExperimentModel {
            r: parse_value(&entries, "r", 1.0)?,
            eta_a: parse_value(&entries, "eta_a", ideal.eta_a)?,
            eta_b: parse_value(&entries, "eta_b", ideal.eta_b)?,
            eta_c: parse_value(&entries, "eta_c", ideal.eta_c)?,
            eps_a: parse_value(&entries, "eps_a", 0.0)?,
            eps_b: parse_value(&entries, "eps_b", 0.0)?,
            eps_c: parse_value(&entries, "eps_c", 0.0)?,
        };

        let plan_kind: String = parse_value(&entries, "plan", "fixed".to_string())?;
        let plan = match plan_kind.as_str() {
            "fixed" => {
                if entries.contains_key("v_dist") {
                    return Err("v_dist only applies to plan = gaussian".into());
                }
                DisplacementPlan::fixed(
                    parse_value(&entries, "alpha_x", 1.0)?,
                    parse_value(&entries, "alpha_p", 1.0)?,
                )
            }
            "gaussian" => {
                if entries.contains_key("alpha_x") || entries.contains_key("alpha_p") {
                    return Err("alpha_x/alpha_p only apply to plan = fixed".into());
                }
                DisplacementPlan::gaussian(parse_value(&entries, "v_dist", 1.0)?)
            }
            other => {
                return Err(format!(
                    "unknown plan {other:?} (expected fixed or gaussian)"
                ))
            }
        }
        .with_repetitions(parse_value(&entries, "repetitions", 1)?);

        let coalition = match entries.get("coalition") {
            None => Coalition::ABC,
            Some((line, raw)) => raw.parse().map_err(|e| format!("line {line}: {e}"))?,
        };
        let gain_mode = match parse_value(&entries, "gain_mode", "analytic".to_string())?.as_str() {
            "analytic" => GainMode::Analytic,
            "fitted" => GainMode::Fitted,
            other => {
                return Err(format!(
                    "unknown gain_mode {other:?} (expected analytic or fitted)"
                ))
            }
        };
        let defaults = ProtocolPolicy::default();
        let policy = ProtocolPolicy {
            eta_min: parse_value(&entries, "eta_min", defaults.eta_min)?,
            witness_fraction: parse_value(&entries, "witness_fraction", defaults.witness_fraction)?,
            bias_fraction: parse_value(&entries, "bias_fraction", defaults.bias_fraction)?,
            gain_mode,
        };

        let cfg = SimulateConfig {
            model,
            plan,
            coalition,
            n_rounds: parse_value(&entries, "n_rounds", 100_000)?,
            seed: parse_value(&entries, "seed", 1)?,
            policy,
        };
        cfg.model.validate().map_err(|e| e.to_string())?;
        cfg.plan.validate().map_err(|e| e.to_string())?;
        cfg.policy.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}
