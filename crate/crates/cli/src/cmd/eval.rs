//! `attn-surgery eval`

use std::path::PathBuf;

use attn_surgery::attention::{AttentionConfig, DEFAULT_QUERY_COUNT, DEFAULT_SIM_SEED};
use attn_surgery::eval::{
    aggregate, evaluate_dataset, Dataset, EvalReport, TrialOutcome, REPORT_SCHEMA_VERSION,
};
use attn_surgery::tensor_store::TensorFile;
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::{
    check_output, load_model, read_input, read_text, to_json_bytes, write_with_manifest, CliError,
    Outcome, PatternArgs, Result, RunManifest,
};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Dataset of edits with positive and negative prompts (JSON).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Unedited checkpoint; also supplies the reference features.
    #[arg(long)]
    pub original: Option<PathBuf>,
    /// Edited checkpoint to score.
    #[arg(long)]
    pub edited: Option<PathBuf>,
    /// Prompt embeddings (safetensors).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Score stored classifications (JSON list of outcomes) instead of running the simulator.
    #[arg(long, conflicts_with_all = ["dataset", "original", "edited", "embeddings"])]
    pub labels: Option<PathBuf>,
    /// Number of seeds per prompt.
    #[arg(long, default_value_t = 24)]
    pub seeds: usize,
    /// Query rows drawn per layer.
    #[arg(long, default_value_t = DEFAULT_QUERY_COUNT)]
    pub queries: usize,
    /// Base seed of the simulator's query stream.
    #[arg(long, default_value_t = DEFAULT_SIM_SEED)]
    pub sim_seed: u64,
    #[command(flatten)]
    pub patterns: PatternArgs,
    /// Report path [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct EvalOutput<'a> {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub report: &'a EvalReport,
    pub outcomes: &'a [TrialOutcome],
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("--{flag} is required unless --labels is given")))
}

pub fn run(args: &EvalArgs) -> Result<Outcome> {
    if args.seeds == 0 {
        return Err(CliError::usage("--seeds must be >= 1"));
    }
    let mut manifest = RunManifest::new(
        "eval",
        json!({
            "seeds": args.seeds,
            "queries": args.queries,
            "sim_seed": args.sim_seed,
            "key_pattern": args.patterns.key_pattern,
            "value_pattern": args.patterns.value_pattern,
            "transpose": args.patterns.transpose,
            "mode": if args.labels.is_some() { "labels" } else { "simulator" },
        }),
    );
    let (seeds, outcomes) = if let Some(labels) = &args.labels {
        let text = read_text(labels)?;
        manifest.input("labels", labels, text.as_bytes());
        let outcomes: Vec<TrialOutcome> =
            serde_json::from_str(&text).map_err(|e| CliError::data("Labels", e.to_string()))?;
        let n = outcomes.first().map_or(0, |o| o.classifications.len()) as u64;
        ((0..n).collect(), outcomes)
    } else {
        let dataset_path = required(&args.dataset, "dataset")?;
        let original_path = required(&args.original, "original")?;
        let edited_path = required(&args.edited, "edited")?;
        let embeddings_path = required(&args.embeddings, "embeddings")?;
        if let Some(out) = &args.out {
            check_output(
                out,
                &[dataset_path, original_path, edited_path, embeddings_path],
            )?;
        }
        let text = read_text(dataset_path)?;
        let dataset = Dataset::from_json(&text)?;
        let pattern = args.patterns.pattern();
        let (original, original_bytes) = load_model(original_path, &pattern)?;
        let (edited, edited_bytes) = load_model(edited_path, &pattern)?;
        let embedding_bytes = read_input(embeddings_path)?;
        let embeddings = TensorFile::from_bytes(embedding_bytes.clone())?;
        let config = AttentionConfig::for_model(&original, args.queries, args.sim_seed)?;
        let seeds: Vec<u64> = (0..args.seeds as u64).collect();
        let outcomes =
            evaluate_dataset(&dataset, &original, &edited, &embeddings, &config, &seeds)?;
        manifest.input("dataset", dataset_path, text.as_bytes());
        manifest.input("original", original_path, &original_bytes);
        manifest.input("edited", edited_path, &edited_bytes);
        manifest.input("embeddings", embeddings_path, &embedding_bytes);
        (seeds, outcomes)
    };
    let report = aggregate(&outcomes)?;
    let body = to_json_bytes(&EvalOutput {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds,
        report: &report,
        outcomes: &outcomes,
    });
    match &args.out {
        Some(out) => {
            write_with_manifest(out, &body, manifest)?;
            Ok(Outcome::default())
        }
        None => Ok(Outcome {
            warnings: vec![],
            stdout: Some(String::from_utf8(body).expect("JSON is UTF-8")),
        }),
    }
}
