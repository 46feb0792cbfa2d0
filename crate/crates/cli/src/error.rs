//! Command failures and their exit codes.

use std::fmt;

use attn_surgery::attention::SimError;
use attn_surgery::baseline::BaselineError;
use attn_surgery::debias::DebiasError;
use attn_surgery::edit::EditError;
use attn_surgery::eval::EvalError;
use attn_surgery::linalg::LinalgError;
use attn_surgery::tensor_store::TensorError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Usage,
    Data,
    Numerical,
}

impl Category {
    pub fn exit_code(self) -> u8 {
        match self {
            Category::Usage => 1,
            Category::Data => 2,
            Category::Numerical => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub category: Category,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            category: Category::Usage,
            kind: "Usage".into(),
            message: message.into(),
        }
    }

    pub fn data(kind: &str, message: impl Into<String>) -> Self {
        Self {
            category: Category::Data,
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.category.exit_code()
    }

    /// `{"error": {...}}` on one line.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": {
            "category": self.category,
            "kind": self.kind,
            "code": self.exit_code(),
            "message": self.message,
        }})
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

/// Name of the innermost enum variant in a `Debug` rendering, skipping the
/// wrapper variants that only forward another module's error.
fn variant_name(debug: &str) -> String {
    const WRAPPERS: [&str; 6] = ["Edit(", "Tensor(", "Linalg(", "Sim(", "Eval(", "Debias("];
    let mut rest = debug;
    while let Some(w) = WRAPPERS.iter().find(|w| rest.starts_with(**w)) {
        rest = &rest[w.len()..];
    }
    rest.chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect()
}

fn linalg_category(e: &LinalgError) -> Category {
    match e {
        LinalgError::NotPositiveDefinite { .. }
        | LinalgError::NonFinite(_)
        | LinalgError::NotSymmetric { .. } => Category::Numerical,
        LinalgError::InvalidLambda { .. } => Category::Usage,
        LinalgError::DimensionMismatch(_) | LinalgError::EmptyProblem => Category::Data,
    }
}

fn edit_category(e: &EditError) -> Category {
    match e {
        EditError::Linalg(l) => linalg_category(l),
        EditError::InvalidLambda(_) => Category::Usage,
        _ => Category::Data,
    }
}

fn from_debug<E: fmt::Debug + fmt::Display>(e: &E, category: Category) -> CliError {
    CliError {
        category,
        kind: variant_name(&format!("{e:?}")),
        message: e.to_string(),
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        from_debug(&e, Category::Data)
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        from_debug(&e, linalg_category(&e))
    }
}

impl From<EditError> for CliError {
    fn from(e: EditError) -> Self {
        from_debug(&e, edit_category(&e))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        from_debug(&e, Category::Data)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let category = match &e {
            EvalError::Edit(inner) => edit_category(inner),
            _ => Category::Data,
        };
        from_debug(&e, category)
    }
}

impl From<DebiasError> for CliError {
    fn from(e: DebiasError) -> Self {
        let category = match &e {
            DebiasError::InvalidBracket { .. } | DebiasError::InvalidConfig(_) => Category::Usage,
            DebiasError::Edit(inner) => edit_category(inner),
            _ => Category::Data,
        };
        from_debug(&e, category)
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        from_debug(&e, Category::Numerical)
    }
}
