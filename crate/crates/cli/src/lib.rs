//! Command-line front end for `attn-surgery`.
//!
//! Every command reads its inputs whole, never writes to an input path, and
//! leaves a `<out>.manifest.json` next to each file it produces. Failures are
//! reported on stderr as one JSON object and mapped to exit codes: 1 for
//! usage errors, 2 for bad data, 3 for numerical failures.

pub mod cmd;
pub mod error;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use attn_surgery::edit::{LayerPattern, ModelWeights};
use attn_surgery::tensor_store::TensorFile;
use clap::{Args, Parser, Subcommand};

pub use error::{Category, CliError};
pub use manifest::RunManifest;

pub type Result<T> = std::result::Result<T, CliError>;

pub const THREADS_ENV: &str = "ATTN_SURGERY_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "attn-surgery",
    version,
    about = "Closed-form cross-attention projection editing"
)]
pub struct Cli {
    /// Worker threads [env: ATTN_SURGERY_THREADS; default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply an edit request to a checkpoint.
    Edit(cmd::edit::EditArgs),
    /// Score an edited checkpoint with the attention simulator.
    Eval(cmd::eval::EvalArgs),
    /// Calibrate per-profession edit strength against a gender oracle.
    Debias(cmd::debias::DebiasArgs),
    /// List tensors and detected cross-attention projections.
    Inspect(cmd::inspect::InspectArgs),
    /// Write the synthetic fixtures to a directory.
    Fixture(cmd::fixture::FixtureArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PatternArgs {
    /// Suffix identifying key projection tensors.
    #[arg(long, default_value = ".attn2.to_k.weight")]
    pub key_pattern: String,
    /// Suffix identifying value projection tensors.
    #[arg(long, default_value = ".attn2.to_v.weight")]
    pub value_pattern: String,
    /// Projections are stored as `in x out` rather than `out x in`.
    #[arg(long)]
    pub transpose: bool,
}

impl PatternArgs {
    pub fn pattern(&self) -> LayerPattern {
        LayerPattern {
            key_suffix: self.key_pattern.clone(),
            value_suffix: self.value_pattern.clone(),
            transpose: self.transpose,
        }
    }
}

/// Output of a successful command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub warnings: Vec<String>,
    /// Written to stdout when the command has no `--out`.
    pub stdout: Option<String>,
}

pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::data("Io", format!("cannot read {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_input(path)?)
        .map_err(|_| CliError::data("Io", format!("{} is not valid UTF-8", path.display())))
}

pub fn load_tensor_file(path: &Path) -> Result<(TensorFile, Vec<u8>)> {
    let bytes = read_input(path)?;
    let file = TensorFile::from_bytes(bytes.clone())?;
    Ok((file, bytes))
}

pub fn load_model(path: &Path, pattern: &LayerPattern) -> Result<(ModelWeights, Vec<u8>)> {
    let (file, bytes) = load_tensor_file(path)?;
    Ok((ModelWeights::from_tensor_file(&file, pattern)?, bytes))
}

/// Refuses to write over any of `inputs`.
pub fn check_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) {
            return Err(CliError::usage(format!(
                "output {} would overwrite an input",
                out.display()
            )));
        }
    }
    Ok(())
}

pub fn write_output(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| {
            CliError::data("Io", format!("cannot create {}: {e}", parent.display()))
        })?;
    }
    fs::write(path, contents)
        .map_err(|e| CliError::data("Io", format!("cannot write {}: {e}", path.display())))
}

/// Writes `contents` to `out` and the manifest beside it.
pub fn write_with_manifest(
    out: &Path,
    contents: &[u8],
    mut manifest: RunManifest,
) -> Result<PathBuf> {
    write_output(out, contents)?;
    manifest.output("primary", out, contents);
    let path = manifest::manifest_path(out);
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    write_output(&path, &text)?;
    Ok(path)
}

pub fn to_json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let threads = match threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                CliError::usage(format!("{THREADS_ENV}={v:?} is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("thread count must be >= 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<Outcome> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Edit(a) => cmd::edit::run(&a),
        Command::Eval(a) => cmd::eval::run(&a),
        Command::Debias(a) => cmd::debias::run(&a),
        Command::Inspect(a) => cmd::inspect::run(&a),
        Command::Fixture(a) => cmd::fixture::run(&a),
    }
}
