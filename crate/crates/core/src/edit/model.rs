use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::linalg::{regularized_factor, solve_with_factor, Cholesky, GramAccumulator, Matrix};
use crate::tensor_store::{Dtype, TensorFile, TensorWriter};

use super::context::EditContext;
use super::{EditError, Result};

/// Key and value projections of one cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    name: String,
    w_k: Matrix,
    w_v: Matrix,
}

impl LayerWeights {
    pub fn new(name: impl Into<String>, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        if w_k.cols() != w_v.cols() {
            return Err(EditError::DimensionMismatch(format!(
                "key projection has {} columns, value projection {}",
                w_k.cols(),
                w_v.cols()
            )));
        }
        Ok(Self {
            name: name.into(),
            w_k,
            w_v,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    /// Text embedding dimension `c`.
    pub fn embed_dim(&self) -> usize {
        self.w_k.cols()
    }

    pub fn parameter_count(&self) -> usize {
        self.w_k.as_slice().len() + self.w_v.as_slice().len()
    }
}

/// How cross-attention projections are found in a checkpoint.
///
/// A layer is any name ending in `key_suffix` whose prefix also has a tensor
/// ending in `value_suffix`. With `transpose`, tensors are stored as `c x m`
/// and are transposed on load and save.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerPattern {
    pub key_suffix: String,
    pub value_suffix: String,
    pub transpose: bool,
}

impl Default for LayerPattern {
    fn default() -> Self {
        Self {
            key_suffix: ".attn2.to_k.weight".into(),
            value_suffix: ".attn2.to_v.weight".into(),
            transpose: false,
        }
    }
}

/// Tensor names of a detected key/value pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionPair {
    pub layer: String,
    pub key_tensor: String,
    pub value_tensor: String,
}

/// Detected pairs, plus names that matched one suffix but had no partner.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Discovery {
    pub pairs: Vec<ProjectionPair>,
    pub unpaired: Vec<String>,
}

pub fn discover_layers<'a>(
    names: impl IntoIterator<Item = &'a str>,
    pattern: &LayerPattern,
) -> Discovery {
    let names: BTreeSet<&str> = names.into_iter().collect();
    let mut out = Discovery::default();
    let mut paired_values = BTreeSet::new();
    for &name in &names {
        if let Some(prefix) = name.strip_suffix(pattern.key_suffix.as_str()) {
            let value = format!("{prefix}{}", pattern.value_suffix);
            if names.contains(value.as_str()) {
                out.pairs.push(ProjectionPair {
                    layer: prefix.to_string(),
                    key_tensor: name.to_string(),
                    value_tensor: value.clone(),
                });
                paired_values.insert(value);
            } else {
                out.unpaired.push(name.to_string());
            }
        }
    }
    for &name in &names {
        if name.ends_with(pattern.value_suffix.as_str())
            && !paired_values.contains(name)
            && !name.ends_with(pattern.key_suffix.as_str())
        {
            out.unpaired.push(name.to_string());
        }
    }
    out.unpaired.sort();
    out
}

/// A tensor carried through an edit untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Binding {
    key_tensor: String,
    value_tensor: String,
    key_dtype: Dtype,
    value_dtype: Dtype,
}

/// Edited-parameter accounting for a model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ParameterReport {
    pub layers: usize,
    pub projection_parameters: usize,
    pub total_parameters: usize,
    pub fraction: f64,
}

/// All cross-attention layers of a checkpoint plus every other tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    layers: Vec<LayerWeights>,
    bindings: Vec<Binding>,
    transpose: bool,
    passthrough: BTreeMap<String, RawTensor>,
    metadata: Option<BTreeMap<String, String>>,
}

impl ModelWeights {
    /// An in-memory model with no passthrough tensors. Layers are saved under
    /// the default pattern names as `F32`.
    pub fn new(layers: Vec<LayerWeights>) -> Result<Self> {
        let pattern = LayerPattern::default();
        let mut seen = BTreeSet::new();
        let mut bindings = Vec::with_capacity(layers.len());
        for l in &layers {
            if !seen.insert(l.name.clone()) {
                return Err(EditError::DuplicateLayer(l.name.clone()));
            }
            bindings.push(Binding {
                key_tensor: format!("{}{}", l.name, pattern.key_suffix),
                value_tensor: format!("{}{}", l.name, pattern.value_suffix),
                key_dtype: Dtype::F32,
                value_dtype: Dtype::F32,
            });
        }
        Ok(Self {
            layers,
            bindings,
            transpose: false,
            passthrough: BTreeMap::new(),
            metadata: None,
        })
    }

    /// Splits a parsed checkpoint into cross-attention layers and passthrough
    /// tensors.
    pub fn from_tensor_file(file: &TensorFile, pattern: &LayerPattern) -> Result<Self> {
        let found = discover_layers(file.names(), pattern);
        if let Some(name) = found.unpaired.first() {
            return Err(EditError::UnpairedProjection(name.clone()));
        }
        let mut layers = Vec::with_capacity(found.pairs.len());
        let mut bindings = Vec::with_capacity(found.pairs.len());
        let mut edited = BTreeSet::new();
        for p in &found.pairs {
            let mut w_k = file.read_matrix(&p.key_tensor)?;
            let mut w_v = file.read_matrix(&p.value_tensor)?;
            if pattern.transpose {
                w_k = w_k.transpose();
                w_v = w_v.transpose();
            }
            layers.push(LayerWeights::new(p.layer.clone(), w_k, w_v)?);
            bindings.push(Binding {
                key_tensor: p.key_tensor.clone(),
                value_tensor: p.value_tensor.clone(),
                key_dtype: file.info(&p.key_tensor)?.dtype,
                value_dtype: file.info(&p.value_tensor)?.dtype,
            });
            edited.insert(p.key_tensor.as_str());
            edited.insert(p.value_tensor.as_str());
        }
        let mut passthrough = BTreeMap::new();
        for (name, info) in file.tensors() {
            if edited.contains(name) {
                continue;
            }
            passthrough.insert(
                name.to_string(),
                RawTensor {
                    dtype: info.dtype,
                    shape: info.shape.clone(),
                    bytes: file.payload(name)?.to_vec(),
                },
            );
        }
        Ok(Self {
            layers,
            bindings,
            transpose: pattern.transpose,
            passthrough,
            metadata: file.metadata().cloned(),
        })
    }

    pub fn add_passthrough(&mut self, name: impl Into<String>, tensor: RawTensor) -> Result<()> {
        let name = name.into();
        let clashes = self
            .bindings
            .iter()
            .any(|b| b.key_tensor == name || b.value_tensor == name);
        if clashes || self.passthrough.contains_key(&name) {
            return Err(EditError::DuplicateLayer(name));
        }
        self.passthrough.insert(name, tensor);
        Ok(())
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerWeights> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn passthrough(&self) -> &BTreeMap<String, RawTensor> {
        &self.passthrough
    }

    /// Embedding dimension shared by all layers, if there are any.
    pub fn embed_dim(&self) -> Option<usize> {
        self.layers.first().map(LayerWeights::embed_dim)
    }

    pub fn parameter_report(&self) -> ParameterReport {
        let projection: usize = self.layers.iter().map(LayerWeights::parameter_count).sum();
        let other: usize = self
            .passthrough
            .values()
            .map(RawTensor::element_count)
            .sum();
        let total = projection + other;
        ParameterReport {
            layers: self.layers.len(),
            projection_parameters: projection,
            total_parameters: total,
            fraction: if total == 0 {
                0.0
            } else {
                projection as f64 / total as f64
            },
        }
    }

    /// Same bindings and passthrough with replacement layers.
    fn with_layers(&self, layers: Vec<LayerWeights>) -> Self {
        Self {
            layers,
            bindings: self.bindings.clone(),
            transpose: self.transpose,
            passthrough: self.passthrough.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Canonical safetensors bytes. Projections keep their original dtype and
    /// orientation; passthrough payloads are copied verbatim.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = TensorWriter::new().with_metadata(self.metadata.clone());
        for (layer, b) in self.layers.iter().zip(&self.bindings) {
            let (k, v) = if self.transpose {
                (layer.w_k.transpose(), layer.w_v.transpose())
            } else {
                (layer.w_k.clone(), layer.w_v.clone())
            };
            w.add_matrix(&b.key_tensor, &k, b.key_dtype)?;
            w.add_matrix(&b.value_tensor, &v, b.value_dtype)?;
        }
        for (name, t) in &self.passthrough {
            w.add_raw(name, t.dtype, t.shape.clone(), t.bytes.clone())?;
        }
        Ok(w.to_bytes())
    }
}

fn check_contexts(contexts: &[&EditContext], embed_dim: usize) -> Result<f64> {
    let first = contexts.first().ok_or(EditError::EmptyContext)?;
    let lambda = first.lambda();
    for ctx in contexts {
        if ctx.lambda() != lambda {
            return Err(EditError::LambdaMismatch {
                expected: lambda,
                found: ctx.lambda(),
            });
        }
        if ctx.dim() != embed_dim {
            return Err(EditError::DimensionMismatch(format!(
                "context embeddings have dim {}, layers expect {embed_dim}",
                ctx.dim()
            )));
        }
    }
    Ok(lambda)
}

/// Cholesky factor of `lambda I + sum c_i c_iᵀ` over every context's pairs.
fn shared_factor(contexts: &[&EditContext], embed_dim: usize, lambda: f64) -> Result<Cholesky> {
    let mut acc = GramAccumulator::gram_only(embed_dim);
    for ctx in contexts {
        for c in ctx.source_vectors() {
            acc.add_pair(c, &[])?;
        }
    }
    let (_, gram) = acc.finish();
    Ok(regularized_factor(&gram, lambda)?)
}

/// Closed-form update of one projection. Targets use the original matrix.
fn edit_projection(
    w: &Matrix,
    contexts: &[&EditContext],
    lambda: f64,
    factor: &Cholesky,
) -> Result<Matrix> {
    let mut acc = GramAccumulator::cross_only(w.cols(), w.rows());
    for ctx in contexts {
        for (c, c_star) in ctx.source_vectors().iter().zip(ctx.destination_vectors()) {
            let target = w.matvec(c_star)?;
            acc.add_pair(c, &target)?;
        }
    }
    let (cross, _) = acc.finish();
    Ok(solve_with_factor(w, &cross, lambda, factor)?)
}

fn edit_with_factor(
    layer: &LayerWeights,
    contexts: &[&EditContext],
    lambda: f64,
    factor: &Cholesky,
    key_and_value: bool,
) -> Result<LayerWeights> {
    let w_k = if key_and_value {
        edit_projection(&layer.w_k, contexts, lambda, factor)?
    } else {
        layer.w_k.clone()
    };
    let w_v = edit_projection(&layer.w_v, contexts, lambda, factor)?;
    Ok(LayerWeights {
        name: layer.name.clone(),
        w_k,
        w_v,
    })
}

/// Edits both projections of a single layer.
pub fn edit_layer(layer: &LayerWeights, context: &EditContext) -> Result<LayerWeights> {
    let contexts = [context];
    let lambda = check_contexts(&contexts, layer.embed_dim())?;
    let factor = shared_factor(&contexts, layer.embed_dim(), lambda)?;
    edit_with_factor(layer, &contexts, lambda, &factor, true)
}

/// Applies one edit to every layer. With `key_and_value == false` only the
/// value projections change.
pub fn edit_model(
    model: &ModelWeights,
    context: &EditContext,
    key_and_value: bool,
) -> Result<ModelWeights> {
    multi_edit(model, std::slice::from_ref(context), key_and_value)
}

/// Applies several edits in one solve per projection by summing their
/// cross and Gram terms. All contexts must share one lambda.
pub fn multi_edit(
    model: &ModelWeights,
    contexts: &[EditContext],
    key_and_value: bool,
) -> Result<ModelWeights> {
    let embed_dim = model.embed_dim().ok_or(EditError::EmptyModel)?;
    if let Some(l) = model.layers.iter().find(|l| l.embed_dim() != embed_dim) {
        return Err(EditError::DimensionMismatch(format!(
            "layer {:?} has embedding dim {}, expected {embed_dim}",
            l.name,
            l.embed_dim()
        )));
    }
    let refs: Vec<&EditContext> = contexts.iter().collect();
    let lambda = check_contexts(&refs, embed_dim)?;
    let factor = shared_factor(&refs, embed_dim, lambda)?;
    let layers = model
        .layers
        .par_iter()
        .map(|l| edit_with_factor(l, &refs, lambda, &factor, key_and_value))
        .collect::<Result<Vec<_>>>()?;
    Ok(model.with_layers(layers))
}
