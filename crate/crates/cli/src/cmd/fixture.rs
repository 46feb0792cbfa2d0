//! `attn-surgery fixture`

use std::path::PathBuf;

use attn_surgery::synthetic::{bias_fixture, edit_fixture, sd_layout_checkpoint};
use clap::{Args, ValueEnum};

use crate::{write_output, Outcome, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    /// Rose/blue-rose edit checkpoint, embeddings, dataset and request.
    Edit,
    /// Profession checkpoint, embeddings and dataset.
    Bias,
    /// A scaled-down checkpoint with the SD v1 cross-attention naming.
    Sd,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = FixtureKind::All)]
    pub kind: FixtureKind,
    /// Width divisor for the SD layout checkpoint.
    #[arg(long, default_value_t = 40)]
    pub sd_divisor: usize,
}

pub fn run(args: &FixtureArgs) -> Result<Outcome> {
    let want = |k| args.kind == k || args.kind == FixtureKind::All;
    let mut files = Vec::new();
    if want(FixtureKind::Edit) {
        files.extend(edit_fixture().files());
    }
    if want(FixtureKind::Bias) {
        files.extend(bias_fixture().files());
    }
    if want(FixtureKind::Sd) {
        if args.sd_divisor == 0 {
            return Err(crate::CliError::usage("--sd-divisor must be >= 1"));
        }
        files.push((
            "sd_layout.safetensors".into(),
            sd_layout_checkpoint(args.sd_divisor, 0),
        ));
    }
    let mut listing = String::new();
    for (name, bytes) in files {
        let path = args.out_dir.join(&name);
        write_output(&path, &bytes)?;
        listing.push_str(&format!("{}\n", path.display()));
    }
    Ok(Outcome {
        warnings: Vec::new(),
        stdout: Some(listing),
    })
}
