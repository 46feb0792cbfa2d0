use crate::linalg::{Vector, MIN_LAMBDA};

use super::align::{align_tokens, EmbeddingSequence};
use super::{EditError, Result};

/// Matched `(c_i, c*_i)` embedding pairs for one edit, plus its strength.
#[derive(Debug, Clone, PartialEq)]
pub struct EditContext {
    source_vectors: Vec<Vector>,
    destination_vectors: Vec<Vector>,
    lambda: f64,
}

impl EditContext {
    pub fn new(
        source_vectors: Vec<Vector>,
        destination_vectors: Vec<Vector>,
        lambda: f64,
    ) -> Result<Self> {
        if !lambda.is_finite() || lambda < MIN_LAMBDA {
            return Err(EditError::InvalidLambda(lambda));
        }
        if source_vectors.is_empty() {
            return Err(EditError::EmptyContext);
        }
        if source_vectors.len() != destination_vectors.len() {
            return Err(EditError::DimensionMismatch(format!(
                "{} source vectors but {} destination vectors",
                source_vectors.len(),
                destination_vectors.len()
            )));
        }
        let dim = source_vectors[0].dim();
        if source_vectors
            .iter()
            .chain(&destination_vectors)
            .any(|v| v.dim() != dim)
        {
            return Err(EditError::MixedDimensions(
                "context vectors differ in dimension".into(),
            ));
        }
        Ok(Self {
            source_vectors,
            destination_vectors,
            lambda,
        })
    }

    pub fn len(&self) -> usize {
        self.source_vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.source_vectors[0].dim()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn source_vectors(&self) -> &[Vector] {
        &self.source_vectors
    }

    pub fn destination_vectors(&self) -> &[Vector] {
        &self.destination_vectors
    }

    /// Same pairs at a different strength.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(
            self.source_vectors.clone(),
            self.destination_vectors.clone(),
            lambda,
        )
    }

    /// Pairs of both contexts, in order, at this context's strength.
    pub fn concat(&self, other: &EditContext) -> Result<Self> {
        let mut src = self.source_vectors.clone();
        let mut dst = self.destination_vectors.clone();
        src.extend_from_slice(&other.source_vectors);
        dst.extend_from_slice(&other.destination_vectors);
        Self::new(src, dst, self.lambda)
    }
}

/// Aligns every prompt pair and concatenates the matched embeddings.
///
/// Passing a prompt pair together with its prefixed variants ("A photo of
/// ...", "An image of ...", "A picture of ...") yields the augmented edit.
pub fn build_context(
    pairs: &[(EmbeddingSequence, EmbeddingSequence)],
    lambda: f64,
) -> Result<EditContext> {
    if pairs.is_empty() {
        return Err(EditError::EmptyContext);
    }
    let dim = pairs[0].0.dim();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (k, (s, d)) in pairs.iter().enumerate() {
        if s.dim() != dim || d.dim() != dim {
            return Err(EditError::MixedDimensions(format!(
                "prompt pair {k} has dims ({}, {}), expected {dim}",
                s.dim(),
                d.dim()
            )));
        }
        let al = align_tokens(s, d)?;
        for &(i, j) in al.pairs() {
            src.push(s.embeddings()[i].clone());
            dst.push(d.embeddings()[j].clone());
        }
    }
    EditContext::new(src, dst, lambda)
}
