use crate::linalg::{Matrix, Vector};

use super::{EditError, Result};

/// Token labels and their embeddings for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    tokens: Vec<String>,
    embeddings: Vec<Vector>,
}

impl EmbeddingSequence {
    pub fn new(tokens: Vec<String>, embeddings: Vec<Vector>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(EditError::EmptySequence);
        }
        if tokens.len() != embeddings.len() {
            return Err(EditError::TokenCountMismatch {
                tokens: tokens.len(),
                embeddings: embeddings.len(),
            });
        }
        let dim = embeddings[0].dim();
        if embeddings.iter().any(|e| e.dim() != dim) {
            return Err(EditError::MixedDimensions(
                "embeddings within one sequence differ in dimension".into(),
            ));
        }
        Ok(Self { tokens, embeddings })
    }

    /// One token per row of `rows` (l x c).
    pub fn from_matrix(tokens: Vec<String>, rows: &Matrix) -> Result<Self> {
        let embeddings = (0..rows.rows()).map(|i| rows.row_vector(i)).collect();
        Self::new(tokens, embeddings)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &[Vector] {
        &self.embeddings
    }
}

/// Source-to-destination token correspondence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pairs: Vec<(usize, usize)>,
}

impl Alignment {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Destination indices not paired with any source token.
    pub fn discarded(&self, destination_len: usize) -> Vec<usize> {
        let mut used = vec![false; destination_len];
        for &(_, d) in &self.pairs {
            used[d] = true;
        }
        (0..destination_len).filter(|&i| !used[i]).collect()
    }
}

/// Greedy in-order alignment.
///
/// Each source token, left to right, takes the first unconsumed destination
/// token with the same string. Destination tokens skipped over are treated as
/// inserted and dropped. A source token with no remaining string match takes
/// the next unconsumed destination token instead.
pub fn align_tokens(
    source: &EmbeddingSequence,
    destination: &EmbeddingSequence,
) -> Result<Alignment> {
    align_token_strings(source.tokens(), destination.tokens())
}

pub(crate) fn align_token_strings(source: &[String], destination: &[String]) -> Result<Alignment> {
    let mut next = 0usize;
    let mut pairs = Vec::with_capacity(source.len());
    for (i, tok) in source.iter().enumerate() {
        if next >= destination.len() {
            return Err(EditError::DestinationTooShort {
                source_len: source.len(),
                destination_len: destination.len(),
                unmatched: i,
            });
        }
        let j = destination[next..]
            .iter()
            .position(|d| d == tok)
            .map_or(next, |off| next + off);
        pairs.push((i, j));
        next = j + 1;
    }
    Ok(Alignment { pairs })
}
