//! A single-head cross-attention forward pass and a toy readout.
//!
//! `M = softmax(Q Kᵀ / sqrt(m))`, `O = M V`, with keys and values projected
//! from the prompt embeddings by each layer. A [`Feature`] is `O` averaged
//! over query rows and layers; it is affine in every `W_V`, so value edits
//! move it directly. Queries are drawn from the seeded generator in
//! [`crate::rng`], so a `(model, prompt, config, seed)` tuple always gives
//! the same feature.

use thiserror::Error;

use crate::edit::{EmbeddingSequence, ModelWeights};
use crate::linalg::{LinalgError, Matrix, Vector};
use crate::rng::{mix_seeds, Xoshiro256};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("reference feature is the zero vector")]
    ZeroVector,
    #[error("invalid attention config: {0}")]
    InvalidConfig(String),
}

impl From<LinalgError> for SimError {
    fn from(e: LinalgError) -> Self {
        SimError::DimensionMismatch(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SimError>;

pub const DEFAULT_QUERY_COUNT: usize = 16;
pub const DEFAULT_SIM_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub key_dim: usize,
    pub value_dim: usize,
    pub embed_dim: usize,
    pub query_count: usize,
    pub seed: u64,
}

impl AttentionConfig {
    /// Reads the dimensions off a model whose layers all share `m`, `d`, `c`.
    pub fn for_model(model: &ModelWeights, query_count: usize, seed: u64) -> Result<Self> {
        let first = model
            .layers()
            .first()
            .ok_or_else(|| SimError::InvalidConfig("model has no layers".into()))?;
        let cfg = Self {
            key_dim: first.w_k().rows(),
            value_dim: first.w_v().rows(),
            embed_dim: first.embed_dim(),
            query_count,
            seed,
        };
        cfg.check(model)?;
        Ok(cfg)
    }

    pub fn check(&self, model: &ModelWeights) -> Result<()> {
        if self.key_dim == 0 || self.value_dim == 0 || self.embed_dim == 0 || self.query_count == 0
        {
            return Err(SimError::InvalidConfig(
                "all dimensions must be >= 1".into(),
            ));
        }
        for l in model.layers() {
            let got = (l.w_k().rows(), l.w_v().rows(), l.embed_dim());
            if got != (self.key_dim, self.value_dim, self.embed_dim) {
                return Err(SimError::DimensionMismatch(format!(
                    "layer {:?} has (m, d, c) = {got:?}, config expects ({}, {}, {})",
                    l.name(),
                    self.key_dim,
                    self.value_dim,
                    self.embed_dim
                )));
            }
        }
        Ok(())
    }
}

/// Row-stochastic `n x l` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Matrix,
}

impl AttentionMap {
    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }
}

/// `softmax(Q Kᵀ / sqrt(m))`, row-wise, with max subtraction.
pub fn attention_map(queries: &Matrix, keys: &Matrix) -> Result<AttentionMap> {
    let m = queries.cols();
    if m == 0 || keys.cols() != m {
        return Err(SimError::DimensionMismatch(format!(
            "queries {:?} and keys {:?}",
            queries.shape(),
            keys.shape()
        )));
    }
    let scale = 1.0 / (m as f64).sqrt();
    let l = keys.rows();
    let mut out = Matrix::zeros(queries.rows(), l);
    for i in 0..queries.rows() {
        let q = queries.row(i);
        let row = out.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = crate::linalg::dot(q, keys.row(j)) * scale;
        }
        softmax_in_place(row);
    }
    Ok(AttentionMap { values: out })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `O = M V`.
pub fn attention_output(map: &AttentionMap, values: &Matrix) -> Result<Matrix> {
    Ok(map.values.matmul(values)?)
}

/// Mean-pooled attention output, dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature(Vector);

impl Feature {
    pub fn new(v: Vector) -> Self {
        Self(v)
    }

    pub fn vector(&self) -> &Vector {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Queries for every layer, drawn in layer order from one stream.
fn draw_queries(config: &AttentionConfig, seed: u64, layers: usize) -> Vec<Matrix> {
    let mut rng = Xoshiro256::seed_from_u64(mix_seeds(config.seed, seed));
    (0..layers)
        .map(|_| {
            let n = config.query_count * config.key_dim;
            Matrix::new(config.query_count, config.key_dim, rng.normal_vec(n))
                .expect("normal draws are finite")
        })
        .collect()
}

pub fn generate_feature(
    model: &ModelWeights,
    prompt: &EmbeddingSequence,
    config: &AttentionConfig,
    seed: u64,
) -> Result<Feature> {
    config.check(model)?;
    if model.layers().is_empty() {
        return Err(SimError::InvalidConfig("model has no layers".into()));
    }
    if prompt.dim() != config.embed_dim {
        return Err(SimError::DimensionMismatch(format!(
            "prompt embeddings have dim {}, model expects {}",
            prompt.dim(),
            config.embed_dim
        )));
    }
    let emb = Matrix::from_row_vectors(prompt.embeddings())?;
    let queries = draw_queries(config, seed, model.layers().len());
    let mut acc = vec![0.0; config.value_dim];
    for (layer, q) in model.layers().iter().zip(&queries) {
        let keys = emb.matmul(&layer.w_k().transpose())?;
        let values = emb.matmul(&layer.w_v().transpose())?;
        let out = attention_output(&attention_map(q, &keys)?, &values)?;
        for i in 0..out.rows() {
            for (a, v) in acc.iter_mut().zip(out.row(i)) {
                *a += v;
            }
        }
    }
    let denom = (config.query_count * model.layers().len()) as f64;
    let pooled = acc.into_iter().map(|v| v / denom).collect();
    Ok(Feature(Vector::new(pooled)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Choice {
    A,
    B,
}

/// Nearest reference by cosine similarity; an exact tie goes to `A`.
pub fn classify(feature: &Feature, reference_a: &Feature, reference_b: &Feature) -> Result<Choice> {
    let na = reference_a.0.norm();
    let nb = reference_b.0.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(SimError::ZeroVector);
    }
    if feature.0.dim() != reference_a.0.dim() || feature.0.dim() != reference_b.0.dim() {
        return Err(SimError::DimensionMismatch(
            "feature and reference dims differ".into(),
        ));
    }
    let nf = feature.0.norm();
    if nf == 0.0 {
        return Ok(Choice::A);
    }
    let ca = feature.0.dot(&reference_a.0) / (nf * na);
    let cb = feature.0.dot(&reference_b.0) / (nf * nb);
    Ok(if cb > ca { Choice::B } else { Choice::A })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit::{edit_model, EditContext, LayerWeights};

    fn feat(x: &[f64]) -> Feature {
        Feature(Vector::new(x.to_vec()).unwrap())
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let q = Matrix::zeros(2, 4);
        let k = Matrix::new(3, 4, (0..12).map(f64::from).collect()).unwrap();
        let m = attention_map(&q, &k).unwrap();
        for i in 0..2 {
            for &v in m.matrix().row(i) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_key_gets_all_weight() {
        let q = Matrix::from_rows(&[[3.0, -1.0], [100.0, 7.0]]);
        let k = Matrix::from_rows(&[[0.5, 2.0]]);
        let m = attention_map(&q, &k).unwrap();
        assert_eq!(m.matrix().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn two_key_softmax() {
        let q = Matrix::from_rows(&[[2.0, 0.0, 0.0, 0.0]]);
        let k = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        let m = attention_map(&q, &k).unwrap();
        // Logits (1, 0): e/(1+e) = 0.7310585786300049.
        assert!((m.matrix()[(0, 0)] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((m.matrix()[(0, 1)] - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn map_dimension_errors() {
        assert!(attention_map(&Matrix::zeros(1, 3), &Matrix::zeros(2, 4)).is_err());
        assert!(attention_map(&Matrix::zeros(1, 0), &Matrix::zeros(2, 0)).is_err());
        let m = attention_map(&Matrix::zeros(1, 2), &Matrix::zeros(3, 2)).unwrap();
        assert!(attention_output(&m, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn output_of_uniform_and_one_hot_maps() {
        let uniform = attention_map(&Matrix::zeros(2, 1), &Matrix::zeros(2, 1)).unwrap();
        let v = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]);
        let o = attention_output(&uniform, &v).unwrap();
        assert_eq!(o, Matrix::from_rows(&[[2.0, 4.0], [2.0, 4.0]]));
        let one_hot = AttentionMap {
            values: Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]),
        };
        assert_eq!(
            attention_output(&one_hot, &v).unwrap(),
            Matrix::from_rows(&[[3.0, 6.0], [1.0, 2.0]])
        );
    }

    #[test]
    fn classify_rules() {
        let a = feat(&[1.0, 0.0]);
        let b = feat(&[0.0, 1.0]);
        assert_eq!(classify(&a, &a, &b).unwrap(), Choice::A);
        assert_eq!(classify(&feat(&[-1.0, 0.0]), &a, &b).unwrap(), Choice::B);
        assert_eq!(classify(&feat(&[1.0, 1.0]), &a, &b).unwrap(), Choice::A);
        assert_eq!(
            classify(&a, &feat(&[0.0, 0.0]), &b),
            Err(SimError::ZeroVector)
        );
    }

    fn single_layer_model() -> ModelWeights {
        let l = LayerWeights::new(
            "l0",
            Matrix::from_rows(&[[1.0, 0.5, 0.0], [0.0, 1.0, -1.0]]),
            Matrix::from_rows(&[
                [2.0, 0.0, 1.0],
                [0.0, 3.0, 0.0],
                [1.0, 1.0, 1.0],
                [0.5, 0.0, 0.0],
            ]),
        )
        .unwrap();
        ModelWeights::new(vec![l]).unwrap()
    }

    #[test]
    fn single_token_feature_is_value_projection() {
        let model = single_layer_model();
        let c = Vector::new(vec![0.3, -1.0, 2.0]).unwrap();
        let prompt = EmbeddingSequence::new(vec!["x".into()], vec![c.clone()]).unwrap();
        let cfg = AttentionConfig::for_model(&model, 5, 77).unwrap();
        let expected = model.layers()[0].w_v().matvec(&c).unwrap();
        for seed in [0, 1, 99] {
            let f = generate_feature(&model, &prompt, &cfg, seed).unwrap();
            for (a, b) in f.as_slice().iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn features_are_deterministic_and_edit_stable() {
        let model = single_layer_model();
        let e = |x: &[f64]| Vector::new(x.to_vec()).unwrap();
        let prompt = EmbeddingSequence::new(
            vec!["a".into(), "b".into()],
            vec![e(&[1.0, 0.0, 0.5]), e(&[0.0, 1.0, -0.5])],
        )
        .unwrap();
        let cfg = AttentionConfig::for_model(&model, 4, 1).unwrap();
        let f1 = generate_feature(&model, &prompt, &cfg, 3).unwrap();
        assert_eq!(f1, generate_feature(&model, &prompt, &cfg, 3).unwrap());
        assert_ne!(f1, generate_feature(&model, &prompt, &cfg, 4).unwrap());

        let ctx = EditContext::new(
            prompt.embeddings().to_vec(),
            prompt.embeddings().to_vec(),
            0.1,
        )
        .unwrap();
        let edited = edit_model(&model, &ctx, true).unwrap();
        let f2 = generate_feature(&edited, &prompt, &cfg, 3).unwrap();
        for (a, b) in f1.as_slice().iter().zip(f2.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn config_mismatch() {
        let model = single_layer_model();
        let mut cfg = AttentionConfig::for_model(&model, 4, 1).unwrap();
        cfg.value_dim = 7;
        let prompt = EmbeddingSequence::new(
            vec!["a".into()],
            vec![Vector::new(vec![1.0, 0.0, 0.0]).unwrap()],
        )
        .unwrap();
        assert!(matches!(
            generate_feature(&model, &prompt, &cfg, 0),
            Err(SimError::DimensionMismatch(_))
        ));
        let cfg = AttentionConfig::for_model(&model, 4, 1).unwrap();
        let bad = EmbeddingSequence::new(vec!["a".into()], vec![Vector::new(vec![1.0]).unwrap()])
            .unwrap();
        assert!(generate_feature(&model, &bad, &cfg, 0).is_err());
    }
}
