//! `attn-surgery edit`

use std::path::PathBuf;

use attn_surgery::edit::{multi_edit, EditRequest};
use attn_surgery::tensor_store::TensorFile;
use clap::Args;
use serde_json::json;

use crate::{
    check_output, load_model, read_input, write_with_manifest, CliError, Outcome, PatternArgs,
    Result, RunManifest,
};

pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Below this strength the solve is refused unless `--force` is given.
pub const STABLE_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    /// Checkpoint to edit (safetensors).
    #[arg(long)]
    pub weights: PathBuf,
    /// Edit request (JSON).
    #[arg(long)]
    pub edits: PathBuf,
    /// Prompt embeddings referenced by the request (safetensors).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Where to write the edited checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Regularization strength [default: request file's value, else 0.1]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Leave key projections untouched.
    #[arg(long)]
    pub value_only: bool,
    #[command(flatten)]
    pub patterns: PatternArgs,
    /// Allow lambda below 0.01.
    #[arg(long)]
    pub force: bool,
}

/// Explicit flag, then the request file, then the default.
pub fn resolve_lambda(
    flag: Option<f64>,
    request: &EditRequest,
    force: bool,
) -> Result<(f64, Vec<String>)> {
    let lambda = flag.or(request.lambda).unwrap_or(DEFAULT_LAMBDA);
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(CliError::usage(format!(
            "lambda must be a positive number, got {lambda}"
        )));
    }
    let mut warnings = Vec::new();
    if lambda < STABLE_LAMBDA {
        let msg = format!("lambda {lambda} is below {STABLE_LAMBDA}; the solve is numerically unstable in this range");
        if !force {
            return Err(CliError::usage(format!("{msg} (pass --force to proceed)")));
        }
        warnings.push(msg);
    }
    Ok((lambda, warnings))
}

pub fn run(args: &EditArgs) -> Result<Outcome> {
    check_output(&args.out, &[&args.weights, &args.edits, &args.embeddings])?;
    let request_bytes = read_input(&args.edits)?;
    let request_text = String::from_utf8(request_bytes.clone())
        .map_err(|_| CliError::data("Request", "edit request is not valid UTF-8"))?;
    let request = EditRequest::from_json(&request_text)?;
    let (lambda, warnings) = resolve_lambda(args.lambda, &request, args.force)?;

    let pattern = args.patterns.pattern();
    let (model, weight_bytes) = load_model(&args.weights, &pattern)?;
    if model.layers().is_empty() {
        return Err(CliError::data(
            "EmptyModel",
            format!(
                "no tensors match {:?} / {:?}",
                pattern.key_suffix, pattern.value_suffix
            ),
        ));
    }
    let embedding_bytes = read_input(&args.embeddings)?;
    let embeddings = TensorFile::from_bytes(embedding_bytes.clone())?;
    let contexts = request.contexts(&embeddings, lambda)?;
    let edited = multi_edit(&model, &contexts, !args.value_only)?;
    let out_bytes = edited.to_bytes()?;

    let mut manifest = RunManifest::new(
        "edit",
        json!({
            "lambda": lambda,
            "lambda_source": if args.lambda.is_some() { "flag" } else if request.lambda.is_some() { "request" } else { "default" },
            "value_only": args.value_only,
            "key_pattern": pattern.key_suffix,
            "value_pattern": pattern.value_suffix,
            "transpose": pattern.transpose,
            "force": args.force,
            "layers": model.layers().iter().map(|l| l.name()).collect::<Vec<_>>(),
            "contexts": contexts.iter().map(|c| c.len()).collect::<Vec<_>>(),
        }),
    );
    manifest.input("weights", &args.weights, &weight_bytes);
    manifest.input("edits", &args.edits, &request_bytes);
    manifest.input("embeddings", &args.embeddings, &embedding_bytes);
    write_with_manifest(&args.out, &out_bytes, manifest)?;
    Ok(Outcome {
        warnings,
        stdout: None,
    })
}
