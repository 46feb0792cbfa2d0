//! Edit-request files and prompt references into an embeddings checkpoint.
//!
//! ```json
//! { "lambda": 0.1,
//!   "edits": [ { "pairs": [ { "source": {"tokens": ["a", "rose"], "tensor": "src"},
//!                             "destination": {"tokens": ["a", "blue", "rose"], "tensor": "dst"} } ] } ] }
//! ```
//!
//! Each referenced tensor is an `l x c` matrix with one row per token.

use serde::{Deserialize, Serialize};

use crate::tensor_store::TensorFile;

use super::align::EmbeddingSequence;
use super::context::{build_context, EditContext};
use super::{EditError, Result};

/// Prefixes used to build the augmented prompt variants of an edit.
pub const AUGMENTATION_PREFIXES: [&str; 3] = ["A photo of", "An image of", "A picture of"];

/// A prompt whose embeddings live in a tensor file.
///
/// Written either as a bare string (the text, which doubles as the tensor
/// name and is split on whitespace for tokens) or as an object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptRef {
    Text(String),
    Detailed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tensor: Option<String>,
    },
}

impl PromptRef {
    pub fn text(&self) -> Option<&str> {
        match self {
            PromptRef::Text(t) => Some(t),
            PromptRef::Detailed { text, .. } => text.as_deref(),
        }
    }

    pub fn tensor_name(&self) -> Result<&str> {
        match self {
            PromptRef::Text(t) => Ok(t),
            PromptRef::Detailed {
                tensor: Some(t), ..
            } => Ok(t),
            PromptRef::Detailed { text: Some(t), .. } => Ok(t),
            PromptRef::Detailed { .. } => Err(EditError::Request(
                "prompt needs a tensor name or text".into(),
            )),
        }
    }

    pub fn tokens(&self) -> Option<Vec<String>> {
        match self {
            PromptRef::Detailed {
                tokens: Some(t), ..
            } => Some(t.clone()),
            _ => self
                .text()
                .map(|t| t.split_whitespace().map(str::to_lowercase).collect()),
        }
    }

    /// Loads the referenced embeddings.
    pub fn load(&self, embeddings: &TensorFile) -> Result<EmbeddingSequence> {
        let name = self.tensor_name()?;
        let rows = embeddings.read_matrix(name)?;
        let tokens = match self.tokens() {
            Some(t) => t,
            None => (0..rows.rows()).map(|i| format!("<{i}>")).collect(),
        };
        if tokens.len() != rows.rows() {
            return Err(EditError::TokenCountMismatch {
                tokens: tokens.len(),
                embeddings: rows.rows(),
            });
        }
        EmbeddingSequence::from_matrix(tokens, &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub source: PromptRef,
    pub destination: PromptRef,
}

/// One edit: a prompt pair and, optionally, its augmented variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    pub pairs: Vec<PromptPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub edits: Vec<EditSpec>,
}

impl EditRequest {
    pub fn from_json(text: &str) -> Result<Self> {
        let req: EditRequest =
            serde_json::from_str(text).map_err(|e| EditError::Request(e.to_string()))?;
        if req.edits.is_empty() {
            return Err(EditError::Request("request contains no edits".into()));
        }
        if let Some(k) = req.edits.iter().position(|e| e.pairs.is_empty()) {
            return Err(EditError::Request(format!("edit {k} has no prompt pairs")));
        }
        Ok(req)
    }

    /// One context per edit, all at `lambda`.
    pub fn contexts(&self, embeddings: &TensorFile, lambda: f64) -> Result<Vec<EditContext>> {
        self.edits
            .iter()
            .map(|edit| {
                let pairs = edit
                    .pairs
                    .iter()
                    .map(|p| Ok((p.source.load(embeddings)?, p.destination.load(embeddings)?)))
                    .collect::<Result<Vec<_>>>()?;
                build_context(&pairs, lambda)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::tensor_store::{parse_file, Dtype, TensorError, TensorWriter};

    fn embeddings() -> TensorFile {
        let mut w = TensorWriter::new();
        w.add_matrix(
            "src",
            &Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
            Dtype::F32,
        )
        .unwrap();
        w.add_matrix(
            "dst",
            &Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5], [0.0, 2.0]]),
            Dtype::F32,
        )
        .unwrap();
        w.add_matrix(
            "a rose",
            &Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0]]),
            Dtype::F32,
        )
        .unwrap();
        parse_file(&w.to_bytes()).unwrap()
    }

    #[test]
    fn parses_and_resolves() {
        let req = EditRequest::from_json(
            r#"{"lambda": 0.5, "edits": [{"pairs": [{"source": {"tokens": ["a", "rose"], "tensor": "src"},
                 "destination": {"tokens": ["a", "blue", "rose"], "tensor": "dst"}}]}]}"#,
        )
        .unwrap();
        assert_eq!(req.lambda, Some(0.5));
        let ctxs = req.contexts(&embeddings(), 0.5).unwrap();
        assert_eq!(ctxs.len(), 1);
        assert_eq!(ctxs[0].len(), 2);
        assert_eq!(ctxs[0].destination_vectors()[1].as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn bare_string_prompt() {
        let p: PromptRef = serde_json::from_str(r#""a rose""#).unwrap();
        assert_eq!(p.tensor_name().unwrap(), "a rose");
        let seq = p.load(&embeddings()).unwrap();
        assert_eq!(seq.tokens(), &["a".to_string(), "rose".to_string()]);
    }

    #[test]
    fn request_errors() {
        assert!(EditRequest::from_json(r#"{"edits": []}"#).is_err());
        assert!(EditRequest::from_json(r#"{"edits": [{"pairs": []}]}"#).is_err());
        assert!(EditRequest::from_json("not json").is_err());
        let req = EditRequest::from_json(
            r#"{"edits": [{"pairs": [{"source": {"tokens": ["a"], "tensor": "nope"},
                 "destination": {"tokens": ["a"], "tensor": "src"}}]}]}"#,
        )
        .unwrap();
        assert_eq!(
            req.contexts(&embeddings(), 0.1),
            Err(EditError::Tensor(TensorError::NotFound("nope".into())))
        );
        let mismatch = EditRequest::from_json(
            r#"{"edits": [{"pairs": [{"source": {"tokens": ["a"], "tensor": "src"},
                 "destination": {"tokens": ["a"], "tensor": "src"}}]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            mismatch.contexts(&embeddings(), 0.1),
            Err(EditError::TokenCountMismatch { .. })
        ));
    }
}
