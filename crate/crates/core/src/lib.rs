//! Closed-form editing of cross-attention key/value projections.
//!
//! The crate covers the whole offline pipeline: reading and writing
//! safetensors checkpoints ([`tensor_store`]), the regularized
//! least-squares solver ([`linalg`]), turning prompt embeddings into
//! per-layer edits ([`edit`]), a small cross-attention simulator used to
//! check what an edit does ([`attention`]), the editing metrics
//! ([`eval`]), per-profession strength calibration ([`debias`]) and a
//! gradient-descent reference optimizer ([`baseline`]).

pub mod attention;
pub mod baseline;
pub mod debias;
pub mod edit;
pub mod eval;
pub mod linalg;
pub mod rng;
pub mod synthetic;
pub mod tensor_store;
