//! `attn-surgery debias`

use std::path::PathBuf;
use std::process::Command;
use std::str::FromStr;

use attn_surgery::attention::{AttentionConfig, DEFAULT_QUERY_COUNT, DEFAULT_SIM_SEED};
use attn_surgery::debias::{
    aggregate_delta, search_lambda, search_shared_lambda, BiasObservation, BiasReport, Probe,
    ProfessionDataset, SearchConfig, SimulatorOracle, Stereotype,
};
use attn_surgery::tensor_store::TensorFile;
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::{
    check_output, load_model, read_input, read_text, to_json_bytes, write_with_manifest, CliError,
    Outcome, PatternArgs, Result, RunManifest,
};

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

/// Where female fractions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleSpec {
    /// The attention simulator on `--weights` / `--embeddings`.
    Simulator,
    /// `100 / (1 + λ/λ*)` female for male-stereotyped professions, mirrored
    /// for female-stereotyped ones.
    Rational(f64),
    Constant(f64),
}

impl FromStr for OracleSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let number = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| format!("{v:?} is not a number"))
        };
        match s.split_once(':') {
            None if s == "sim" => Ok(OracleSpec::Simulator),
            Some(("rational", v)) => {
                let x = number(v)?;
                if x > 0.0 && x.is_finite() {
                    Ok(OracleSpec::Rational(x))
                } else {
                    Err("rational crossing must be positive".into())
                }
            }
            Some(("constant", v)) => Ok(OracleSpec::Constant(number(v)?)),
            _ => Err(format!(
                "unknown oracle {s:?}; expected sim, rational:<lambda> or constant:<percent>"
            )),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DebiasArgs {
    /// Profession dataset (JSON).
    #[arg(long)]
    pub professions: PathBuf,
    /// Calibration report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Oracle: sim, rational:<lambda*> or constant:<percent>.
    #[arg(long, default_value = "sim")]
    pub oracle: OracleSpec,
    /// Shell command printing a female percentage; `{lambda}`, `{profession}`
    /// and `{repeat}` are substituted.
    #[arg(long, conflicts_with = "oracle")]
    pub oracle_cmd: Option<String>,
    /// Checkpoint for the simulator oracle.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Prompt embeddings for the simulator oracle.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub patterns: PatternArgs,
    /// Target bound on the balance gap.
    #[arg(long, default_value_t = 0.1)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda_low: f64,
    #[arg(long, default_value_t = 1e8)]
    pub lambda_high: f64,
    #[arg(long, default_value_t = 30)]
    pub max_iterations: usize,
    /// Bracket width in log10(lambda) at which the search stops.
    #[arg(long, default_value_t = 1e-3)]
    pub log_precision: f64,
    /// Oracle calls averaged per probe.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Stop at the first probe inside the tolerance.
    #[arg(long)]
    pub stop_at_tolerance: bool,
    /// One shared lambda for all professions, edited together.
    #[arg(long)]
    pub multi: bool,
    /// Simulator seeds per oracle call.
    #[arg(long, default_value_t = 8)]
    pub seeds_per_call: usize,
    #[arg(long, default_value_t = DEFAULT_QUERY_COUNT)]
    pub queries: usize,
    #[arg(long, default_value_t = DEFAULT_SIM_SEED)]
    pub sim_seed: u64,
    /// Edit value projections only.
    #[arg(long)]
    pub value_only: bool,
}

#[derive(Debug, Serialize)]
pub struct ProfessionRow {
    pub profession: String,
    pub stereotype: Stereotype,
    pub lambda: f64,
    pub female_fraction: f64,
    pub delta_p: f64,
    pub converged: bool,
    pub non_monotone: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_female_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<Probe>>,
}

#[derive(Debug, Serialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub mode: &'static str,
    pub oracle: String,
    pub search: SearchConfig,
    pub professions: Vec<ProfessionRow>,
    pub calibrated: BiasReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BiasReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shared: Option<SharedSummary>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct SharedSummary {
    pub lambda: f64,
    pub converged: bool,
    pub non_monotone: bool,
    pub iterations: usize,
    pub probes: Vec<Probe>,
}

fn rational(stereotype: Stereotype, crossing: f64, lambda: f64) -> f64 {
    let stereotyped_share = 100.0 / (1.0 + lambda / crossing);
    match stereotype {
        Stereotype::Male => stereotyped_share,
        Stereotype::Female => 100.0 - stereotyped_share,
    }
}

fn run_command(
    template: &str,
    lambda: f64,
    profession: &str,
    repeat: usize,
) -> std::result::Result<f64, String> {
    let cmd = template
        .replace("{lambda}", &format!("{lambda:e}"))
        .replace("{profession}", profession)
        .replace("{repeat}", &repeat.to_string());
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| format!("cannot run {cmd:?}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "{cmd:?} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.trim()
        .parse::<f64>()
        .map_err(|_| format!("{cmd:?} printed {:?}, expected a percentage", text.trim()))
}

enum Oracle<'a> {
    Simulator(SimulatorOracle<'a>),
    Rational(f64),
    Constant(f64),
    Command(String),
}

impl Oracle<'_> {
    fn female(
        &self,
        index: usize,
        entry: (&str, Stereotype),
        lambda: f64,
        repeat: usize,
    ) -> std::result::Result<f64, String> {
        match self {
            Oracle::Simulator(o) => o
                .female_fraction(index, lambda, repeat)
                .map_err(|e| e.to_string()),
            Oracle::Rational(c) => Ok(rational(entry.1, *c, lambda)),
            Oracle::Constant(f) => Ok(*f),
            Oracle::Command(t) => run_command(t, lambda, entry.0, repeat),
        }
    }

    fn joint(
        &self,
        entries: &[(String, Stereotype)],
        lambda: f64,
        repeat: usize,
    ) -> std::result::Result<Vec<f64>, String> {
        match self {
            Oracle::Simulator(o) => o
                .female_fractions_joint(lambda, repeat)
                .map_err(|e| e.to_string()),
            _ => entries
                .iter()
                .enumerate()
                .map(|(i, (name, st))| self.female(i, (name, *st), lambda, repeat))
                .collect(),
        }
    }
}

fn search_config(args: &DebiasArgs) -> SearchConfig {
    SearchConfig {
        lambda_low: args.lambda_low,
        lambda_high: args.lambda_high,
        max_iterations: args.max_iterations,
        tolerance: args.tolerance,
        log_precision: args.log_precision,
        repeats: args.repeats,
        stereotype: Stereotype::Male,
        stop_at_tolerance: args.stop_at_tolerance,
    }
}

pub fn calibrate(args: &DebiasArgs, manifest: &mut RunManifest) -> Result<CalibrationReport> {
    let text = read_text(&args.professions)?;
    manifest.input("professions", &args.professions, text.as_bytes());
    let dataset = ProfessionDataset::from_json(&text)?;
    let config = search_config(args);
    config.validate()?;

    let loaded;
    let embeddings;
    let oracle = match (&args.oracle_cmd, &args.oracle) {
        (Some(t), _) => Oracle::Command(t.clone()),
        (None, OracleSpec::Rational(c)) => Oracle::Rational(*c),
        (None, OracleSpec::Constant(f)) => Oracle::Constant(*f),
        (None, OracleSpec::Simulator) => {
            let weights = args
                .weights
                .as_ref()
                .ok_or_else(|| CliError::usage("the sim oracle needs --weights"))?;
            let emb_path = args
                .embeddings
                .as_ref()
                .ok_or_else(|| CliError::usage("the sim oracle needs --embeddings"))?;
            let (model, model_bytes) = load_model(weights, &args.patterns.pattern())?;
            manifest.input("weights", weights, &model_bytes);
            let emb_bytes = read_input(emb_path)?;
            manifest.input("embeddings", emb_path, &emb_bytes);
            embeddings = TensorFile::from_bytes(emb_bytes)?;
            loaded = model;
            let sim_config = AttentionConfig::for_model(&loaded, args.queries, args.sim_seed)?;
            let o = SimulatorOracle::new(
                &loaded,
                &dataset,
                &embeddings,
                sim_config,
                args.seeds_per_call,
            )?;
            Oracle::Simulator(if args.value_only { o.value_only() } else { o })
        }
    };
    let oracle_name = match (&args.oracle_cmd, &args.oracle) {
        (Some(t), _) => format!("command:{t}"),
        (None, OracleSpec::Simulator) => "sim".into(),
        (None, OracleSpec::Rational(c)) => format!("rational:{c}"),
        (None, OracleSpec::Constant(f)) => format!("constant:{f}"),
    };
    let entries: Vec<(String, Stereotype)> = dataset
        .professions
        .iter()
        .map(|p| (p.profession.clone(), p.stereotype))
        .collect();

    let baselines = match &oracle {
        Oracle::Simulator(o) => Some(
            (0..entries.len())
                .map(|i| {
                    let sum = (0..args.repeats)
                        .map(|r| o.baseline(i, r))
                        .sum::<std::result::Result<f64, _>>()?;
                    Ok(sum / args.repeats as f64)
                })
                .collect::<std::result::Result<Vec<f64>, attn_surgery::debias::DebiasError>>()?,
        ),
        _ => None,
    };

    let mut warnings = Vec::new();
    let (rows, shared) = if args.multi {
        let r = search_shared_lambda(&entries, &config, |l, rep| oracle.joint(&entries, l, rep))?;
        let rows = r
            .report
            .professions
            .iter()
            .zip(&entries)
            .enumerate()
            .map(|(i, (p, (_, st)))| ProfessionRow {
                profession: p.profession.clone(),
                stereotype: *st,
                lambda: r.lambda,
                female_fraction: p.female_fraction,
                delta_p: p.delta_p,
                converged: p.delta_p < config.tolerance,
                non_monotone: r.non_monotone,
                iterations: None,
                baseline_female_fraction: baselines.as_ref().map(|b| b[i]),
                probes: None,
            })
            .collect();
        if !r.converged {
            warnings.push(format!(
                "shared search did not reach mean gap < {}",
                config.tolerance
            ));
        }
        let summary = SharedSummary {
            lambda: r.lambda,
            converged: r.converged,
            non_monotone: r.non_monotone,
            iterations: r.iterations,
            probes: r.probes,
        };
        (rows, Some(summary))
    } else {
        let mut rows = Vec::with_capacity(entries.len());
        for (i, (name, st)) in entries.iter().enumerate() {
            let cfg = SearchConfig {
                stereotype: *st,
                ..config.clone()
            };
            let r = search_lambda(name, &cfg, |l, rep| oracle.female(i, (name, *st), l, rep))?;
            rows.push(ProfessionRow {
                profession: name.clone(),
                stereotype: *st,
                lambda: r.lambda,
                female_fraction: r.achieved.female_fraction,
                delta_p: r.delta_p,
                converged: r.converged,
                non_monotone: r.non_monotone,
                iterations: Some(r.iterations),
                baseline_female_fraction: baselines.as_ref().map(|b| b[i]),
                probes: Some(r.probes),
            });
        }
        (rows, None)
    };
    for row in &rows {
        if !row.converged {
            warnings.push(format!(
                "{}: best gap {:.3} does not meet tolerance {}",
                row.profession, row.delta_p, config.tolerance
            ));
        }
        if row.non_monotone {
            warnings.push(format!(
                "{}: oracle responses were not monotone in lambda",
                row.profession
            ));
        }
    }
    let observations = |fractions: Vec<f64>| -> Result<BiasReport> {
        let obs = rows
            .iter()
            .zip(fractions)
            .map(|(r, f)| BiasObservation::new(r.profession.clone(), f))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(aggregate_delta(&obs)?)
    };
    let calibrated = observations(rows.iter().map(|r| r.female_fraction).collect())?;
    let baseline = baselines.map(observations).transpose()?;
    Ok(CalibrationReport {
        schema_version: CALIBRATION_SCHEMA_VERSION,
        mode: if args.multi {
            "shared"
        } else {
            "per-profession"
        },
        oracle: oracle_name,
        search: config,
        professions: rows,
        calibrated,
        baseline,
        shared,
        warnings,
    })
}

pub fn run(args: &DebiasArgs) -> Result<Outcome> {
    let mut inputs = vec![args.professions.as_path()];
    inputs.extend(args.weights.as_deref());
    inputs.extend(args.embeddings.as_deref());
    check_output(&args.out, &inputs)?;
    let mut manifest = RunManifest::new(
        "debias",
        json!({
            "oracle": args.oracle_cmd.as_ref().map_or_else(|| format!("{:?}", args.oracle), |c| format!("command:{c}")),
            "tolerance": args.tolerance,
            "lambda_low": args.lambda_low,
            "lambda_high": args.lambda_high,
            "max_iterations": args.max_iterations,
            "log_precision": args.log_precision,
            "repeats": args.repeats,
            "stop_at_tolerance": args.stop_at_tolerance,
            "multi": args.multi,
            "seeds_per_call": args.seeds_per_call,
            "queries": args.queries,
            "sim_seed": args.sim_seed,
            "value_only": args.value_only,
            "key_pattern": args.patterns.key_pattern,
            "value_pattern": args.patterns.value_pattern,
            "transpose": args.patterns.transpose,
        }),
    );
    let report = calibrate(args, &mut manifest)?;
    let warnings = report.warnings.clone();
    write_with_manifest(&args.out, &to_json_bytes(&report), manifest)?;
    Ok(Outcome {
        warnings,
        stdout: None,
    })
}
