//! `attn-surgery inspect`

use std::path::PathBuf;

use attn_surgery::edit::discover_layers;
use clap::Args;
use serde::Serialize;

use crate::{load_tensor_file, to_json_bytes, Outcome, PatternArgs, Result};

pub const INSPECT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Checkpoint to inspect (safetensors).
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub patterns: PatternArgs,
    /// Only count tensors under this name prefix in the parameter total.
    #[arg(long)]
    pub scope_prefix: Option<String>,
    /// Omit the per-tensor listing.
    #[arg(long)]
    pub summary: bool,
}

#[derive(Debug, Serialize)]
pub struct TensorRow {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct PairRow {
    pub layer: String,
    pub key_tensor: String,
    pub value_tensor: String,
    pub key_shape: Vec<usize>,
    pub value_shape: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct InspectReport {
    pub schema_version: u32,
    pub tensor_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tensors: Option<Vec<TensorRow>>,
    pub pair_count: usize,
    pub pairs: Vec<PairRow>,
    pub unpaired: Vec<String>,
    pub scope_prefix: Option<String>,
    pub projection_parameters: usize,
    pub total_parameters: usize,
    pub edited_fraction: f64,
}

pub fn inspect(args: &InspectArgs) -> Result<InspectReport> {
    let (file, _) = load_tensor_file(&args.weights)?;
    let pattern = args.patterns.pattern();
    let found = discover_layers(file.names(), &pattern);
    let shape = |name: &str| file.info(name).map(|i| i.shape.clone());
    let mut pairs = Vec::with_capacity(found.pairs.len());
    let mut projection_parameters = 0;
    for p in &found.pairs {
        let key_shape = shape(&p.key_tensor)?;
        let value_shape = shape(&p.value_tensor)?;
        projection_parameters +=
            key_shape.iter().product::<usize>() + value_shape.iter().product::<usize>();
        pairs.push(PairRow {
            layer: p.layer.clone(),
            key_tensor: p.key_tensor.clone(),
            value_tensor: p.value_tensor.clone(),
            key_shape,
            value_shape,
        });
    }
    let in_scope = |name: &str| {
        args.scope_prefix
            .as_deref()
            .is_none_or(|p| name.starts_with(p))
    };
    let total_parameters: usize = file
        .tensors()
        .filter(|(n, _)| in_scope(n))
        .map(|(_, i)| i.element_count())
        .sum();
    let tensors = (!args.summary).then(|| {
        file.tensors()
            .map(|(n, i)| TensorRow {
                name: n.to_string(),
                dtype: i.dtype.to_string(),
                shape: i.shape.clone(),
            })
            .collect()
    });
    Ok(InspectReport {
        schema_version: INSPECT_SCHEMA_VERSION,
        tensor_count: file.len(),
        tensors,
        pair_count: pairs.len(),
        pairs,
        unpaired: found.unpaired,
        scope_prefix: args.scope_prefix.clone(),
        projection_parameters,
        total_parameters,
        edited_fraction: if total_parameters == 0 {
            0.0
        } else {
            projection_parameters as f64 / total_parameters as f64
        },
    })
}

pub fn run(args: &InspectArgs) -> Result<Outcome> {
    let report = inspect(args)?;
    let mut warnings = Vec::new();
    if !report.unpaired.is_empty() {
        warnings.push(format!(
            "{} projection tensors have no partner",
            report.unpaired.len()
        ));
    }
    Ok(Outcome {
        warnings,
        stdout: Some(String::from_utf8(to_json_bytes(&report)).expect("JSON is UTF-8")),
    })
}
