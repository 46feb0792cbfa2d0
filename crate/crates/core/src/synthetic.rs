//! Deterministic toy models and prompt embeddings.
//!
//! Prompts are embedded token by token: each word has a base vector, and a
//! modifier word ("blue", "female", ...) shifts every later token of the
//! prompt along its own direction, the way a causal text encoder lets an
//! adjective colour the noun after it. A little per-occurrence noise, keyed
//! on the prompt text, keeps repeated words from being identical.

use std::collections::BTreeMap;

use crate::attention::{AttentionConfig, DEFAULT_QUERY_COUNT, DEFAULT_SIM_SEED};
use crate::debias::ProfessionDataset;
use crate::edit::{EditRequest, EmbeddingSequence, LayerWeights, ModelWeights, RawTensor};
use crate::eval::Dataset;
use crate::linalg::{Matrix, RidgeProblem, Vector};
use crate::rng::{mix_seeds, Xoshiro256};
use crate::tensor_store::{parse_file, Dtype, TensorFile, TensorWriter};

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn round_f32(m: Matrix) -> Matrix {
    m.map(|x| x as f32 as f64)
}

/// Word-level embedding model for synthetic prompts.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    dim: usize,
    seed: u64,
    noise: f64,
    bases: BTreeMap<String, Vec<f64>>,
    modifiers: BTreeMap<String, (Vec<f64>, f64)>,
}

impl Vocabulary {
    pub fn new(dim: usize, seed: u64, noise: f64) -> Self {
        Self {
            dim,
            seed,
            noise,
            bases: BTreeMap::new(),
            modifiers: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, word: &str, base: Vec<f64>) {
        assert_eq!(
            base.len(),
            self.dim,
            "base for {word:?} has the wrong dimension"
        );
        self.bases.insert(word.to_string(), base);
    }

    /// Marks `word` as shifting every later token by `strength * direction`.
    pub fn modifier(&mut self, word: &str, direction: Vec<f64>, strength: f64) {
        assert_eq!(direction.len(), self.dim);
        self.modifiers
            .insert(word.to_string(), (direction, strength));
    }

    pub fn base(&self, word: &str) -> Option<&[f64]> {
        self.bases.get(word).map(Vec::as_slice)
    }

    pub fn tokens(prompt: &str) -> Vec<String> {
        prompt.split_whitespace().map(str::to_lowercase).collect()
    }

    /// Embeds `prompt`, or `None` if it uses an unknown word.
    pub fn embed(&self, prompt: &str) -> Option<EmbeddingSequence> {
        let tokens = Self::tokens(prompt);
        let mut rng = Xoshiro256::seed_from_u64(mix_seeds(self.seed, fnv1a(&tokens.join(" "))));
        let mut shift = vec![0.0; self.dim];
        let mut rows = Vec::with_capacity(tokens.len());
        for t in &tokens {
            let base = self.bases.get(t)?;
            let noise = rng.normal_vec(self.dim);
            let row: Vec<f64> = base
                .iter()
                .zip(&shift)
                .zip(&noise)
                .map(|((b, s), n)| b + s + self.noise * n)
                .collect();
            rows.push(Vector::new(row).ok()?);
            if let Some((dir, strength)) = self.modifiers.get(t) {
                for (s, d) in shift.iter_mut().zip(dir) {
                    *s += strength * d;
                }
            }
        }
        EmbeddingSequence::new(tokens, rows).ok()
    }

    /// A tensor file with one `F64` entry per prompt, named by the prompt.
    ///
    /// # Panics
    /// If a prompt uses a word outside the vocabulary.
    pub fn embeddings_file<'a>(&self, prompts: impl IntoIterator<Item = &'a str>) -> Vec<u8> {
        let mut w = TensorWriter::new();
        let mut seen = std::collections::BTreeSet::new();
        for p in prompts {
            if !seen.insert(p.to_string()) {
                continue;
            }
            let seq = self
                .embed(p)
                .unwrap_or_else(|| panic!("prompt {p:?} uses unknown words"));
            let m = Matrix::from_row_vectors(seq.embeddings()).expect("uniform rows");
            w.add_matrix(p, &m, Dtype::F64).expect("finite embeddings");
        }
        w.to_bytes()
    }
}

/// `count` orthonormal vectors in `dim` dimensions.
fn orthonormal(rng: &mut Xoshiro256, dim: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(count <= dim);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = rng.normal_vec(dim);
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn combine(parts: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = vec![0.0; parts[0].1.len()];
    for (w, v) in parts {
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += w * x);
    }
    out
}

/// Layers with orthonormal-row projections, so word geometry survives the
/// value map; `key_gain` sets how peaked attention gets.
fn random_model(
    rng: &mut Xoshiro256,
    layers: usize,
    key_dim: usize,
    key_gain: f64,
    embed_dim: usize,
) -> ModelWeights {
    let layers = (0..layers)
        .map(|i| {
            let rows = |rng: &mut Xoshiro256, n: usize, gain: f64| {
                let data: Vec<f64> = orthonormal(rng, embed_dim, n)
                    .into_iter()
                    .flatten()
                    .map(|x| gain * x)
                    .collect();
                round_f32(Matrix::new(n, embed_dim, data).unwrap())
            };
            let w_k = rows(rng, key_dim, key_gain);
            let w_v = rows(rng, embed_dim, 1.0);
            LayerWeights::new(format!("blocks.{i}"), w_k, w_v).unwrap()
        })
        .collect();
    let mut model = ModelWeights::new(layers).unwrap();
    for i in 0..2 {
        let values: Vec<f32> = rng
            .normal_vec(embed_dim)
            .into_iter()
            .map(|x| x as f32)
            .collect();
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        model
            .add_passthrough(
                format!("blocks.{i}.norm.weight"),
                RawTensor {
                    dtype: Dtype::F32,
                    shape: vec![embed_dim],
                    bytes,
                },
            )
            .unwrap();
    }
    model
}

/// Everything needed to run and score one edit end to end.
#[derive(Debug, Clone)]
pub struct EditFixture {
    pub model: ModelWeights,
    pub vocabulary: Vocabulary,
    pub embeddings: TensorFile,
    pub dataset: Dataset,
    pub request: EditRequest,
    pub config: AttentionConfig,
}

impl EditFixture {
    pub const LAMBDA: f64 = 0.1;
    pub const SEEDS: usize = 24;

    pub fn seeds(&self) -> Vec<u64> {
        (0..Self::SEEDS as u64).collect()
    }

    /// `(file name, contents)` for every fixture file.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        vec![
            (
                "model.safetensors".into(),
                self.model.to_bytes().expect("fixture model serializes"),
            ),
            (
                "embeddings.safetensors".into(),
                self.embeddings.as_bytes().to_vec(),
            ),
            (
                "dataset.json".into(),
                serde_json::to_vec_pretty(&self.dataset).unwrap(),
            ),
            (
                "edits.json".into(),
                serde_json::to_vec_pretty(&self.request).unwrap(),
            ),
        ]
    }
}

const FUNCTION_WORDS: [&str; 10] = [
    "a", "an", "the", "of", "in", "as", "photo", "image", "picture", "portrait",
];

const EDIT_WORDS: [&str; 20] = [
    "a", "an", "photo", "image", "picture", "of", "rose", "blue", "bush", "vase", "in", "garden",
    "field", "tulip", "car", "sky", "apple", "cup", "the", "house",
];

/// Two-layer model with a "rose -> blue rose" edit, five positives and five
/// negatives.
pub fn edit_fixture() -> EditFixture {
    let dim = 32;
    let mut rng = Xoshiro256::seed_from_u64(0x7153_ed17);
    let basis = orthonormal(&mut rng, dim, EDIT_WORDS.len() + 2);
    let mut vocab = Vocabulary::new(dim, 11, 0.03);
    for (w, b) in EDIT_WORDS.iter().zip(&basis) {
        let gain = if FUNCTION_WORDS.contains(w) { 0.3 } else { 1.0 };
        vocab.insert(w, b.iter().map(|x| gain * x).collect());
    }
    let rose = vocab.base("rose").unwrap().to_vec();
    let flower_own = &basis[EDIT_WORDS.len()];
    vocab.insert("flower", combine(&[(0.45, &rose), (0.89, flower_own)]));
    vocab.insert("roses", combine(&[(0.97, &rose), (0.24, flower_own)]));
    let blue_dir = basis[EDIT_WORDS.len() + 1].clone();
    vocab.insert(
        "blue",
        combine(&[(0.3, vocab.base("blue").unwrap()), (0.95, &blue_dir)]),
    );
    vocab.modifier("blue", blue_dir, 1.0);

    let model = random_model(&mut rng, 2, 8, 2.5, dim);
    let config = AttentionConfig::for_model(&model, DEFAULT_QUERY_COUNT, DEFAULT_SIM_SEED).unwrap();

    let pair = |s: &str, d: &str| serde_json::json!({"source": s, "destination": d});
    let dataset = serde_json::json!([{
        "source": "a rose",
        "destination": "a blue rose",
        "positives": [
            pair("a rose bush", "a blue rose bush"),
            pair("a rose in a vase", "a blue rose in a vase"),
            pair("a garden of roses", "a garden of blue roses"),
            pair("a field of roses", "a field of blue roses"),
            pair("the rose in the garden", "the blue rose in the garden"),
        ],
        "negatives": [
            pair("a tulip", "a blue tulip"),
            pair("a car", "a blue car"),
            pair("the sky", "the blue sky"),
            pair("a flower", "a blue flower"),
            pair("a cup", "a blue cup"),
        ],
    }]);
    let dataset: Dataset = serde_json::from_value(dataset).unwrap();

    let mut edit_pairs = vec![pair("a rose", "a blue rose")];
    for prefix in crate::edit::AUGMENTATION_PREFIXES {
        let p = prefix.to_lowercase();
        edit_pairs.push(pair(&format!("{p} a rose"), &format!("{p} a blue rose")));
    }
    let request: EditRequest = serde_json::from_value(serde_json::json!({
        "lambda": EditFixture::LAMBDA,
        "edits": [{"pairs": edit_pairs}],
    }))
    .unwrap();

    let mut prompts: Vec<String> = Vec::new();
    for e in &dataset.entries {
        for (_, _, p) in e.probes(0) {
            prompts.push(p.source.tensor_name().unwrap().to_string());
            prompts.push(p.destination.tensor_name().unwrap().to_string());
        }
    }
    for edit in &request.edits {
        for p in &edit.pairs {
            prompts.push(p.source.tensor_name().unwrap().to_string());
            prompts.push(p.destination.tensor_name().unwrap().to_string());
        }
    }
    let embeddings =
        parse_file(&vocab.embeddings_file(prompts.iter().map(String::as_str))).unwrap();
    EditFixture {
        model,
        vocabulary: vocab,
        embeddings,
        dataset,
        request,
        config,
    }
}

/// Professions with a gender lean, gender reference prompts and a model.
#[derive(Debug, Clone)]
pub struct BiasFixture {
    pub model: ModelWeights,
    pub vocabulary: Vocabulary,
    pub embeddings: TensorFile,
    pub dataset: ProfessionDataset,
    pub config: AttentionConfig,
}

impl BiasFixture {
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        vec![
            (
                "bias_model.safetensors".into(),
                self.model.to_bytes().expect("fixture model serializes"),
            ),
            (
                "bias_embeddings.safetensors".into(),
                self.embeddings.as_bytes().to_vec(),
            ),
            (
                "professions.json".into(),
                serde_json::to_vec_pretty(&self.dataset).unwrap(),
            ),
        ]
    }
}

const BIAS_WORDS: [&str; 14] = [
    "a", "photo", "of", "portrait", "person", "working", "as", "doctor", "ceo", "nurse", "teacher",
    "woman", "man", "the",
];

/// `(profession, stereotype, gender lean)`; positive leans are male.
const PROFESSIONS: [(&str, &str, f64); 4] = [
    ("doctor", "male", 0.35),
    ("ceo", "male", 0.5),
    ("nurse", "female", -0.6),
    ("teacher", "female", -0.75),
];

pub fn bias_fixture() -> BiasFixture {
    let dim = 24;
    let mut rng = Xoshiro256::seed_from_u64(0xb1a5);
    let basis = orthonormal(&mut rng, dim, BIAS_WORDS.len() + 1);
    let gender = basis[BIAS_WORDS.len()].clone();
    let mut vocab = Vocabulary::new(dim, 23, 0.08);
    for (w, b) in BIAS_WORDS.iter().zip(&basis) {
        let gain = if FUNCTION_WORDS.contains(w) { 0.3 } else { 1.0 };
        vocab.insert(w, b.iter().map(|x| gain * x).collect());
    }
    let neutral = vocab.base("person").unwrap().to_vec();
    vocab.insert("woman", combine(&[(0.6, &neutral), (-0.8, &gender)]));
    vocab.insert("man", combine(&[(0.6, &neutral), (0.8, &gender)]));
    vocab.insert(
        "female",
        combine(&[(0.3, &basis[BIAS_WORDS.len() - 1]), (-0.95, &gender)]),
    );
    vocab.insert(
        "male",
        combine(&[(0.3, &basis[BIAS_WORDS.len() - 1]), (0.95, &gender)]),
    );
    vocab.modifier("female", gender.iter().map(|g| -g).collect(), 1.5);
    vocab.modifier("male", gender.clone(), 1.5);
    for (name, _, lean) in PROFESSIONS {
        let base = vocab.base(name).unwrap().to_vec();
        vocab.insert(name, combine(&[(1.0, &base), (lean, &gender)]));
    }

    let model = random_model(&mut rng, 2, 8, 2.5, dim);
    let config = AttentionConfig::for_model(&model, DEFAULT_QUERY_COUNT, DEFAULT_SIM_SEED).unwrap();

    let professions: Vec<_> = PROFESSIONS
        .iter()
        .map(|(name, stereotype, _)| {
            let attribute = if *stereotype == "male" { "female" } else { "male" };
            serde_json::json!({
                "profession": name,
                "stereotype": stereotype,
                "editing": {"source": format!("a {name}"), "destination": format!("a {attribute} {name}")},
                "validation_prompt": format!("a photo of a {name}"),
                "test_prompts": [
                    format!("a portrait of a {name}"),
                    format!("a {name}"),
                    format!("the {name}"),
                    format!("a person working as a {name}"),
                    format!("a photo of the {name}"),
                ],
            })
        })
        .collect();
    let dataset: ProfessionDataset = serde_json::from_value(serde_json::json!({
        "gender_references": {"female": "a photo of a woman", "male": "a photo of a man"},
        "professions": professions,
    }))
    .unwrap();

    let mut prompts = vec![
        "a photo of a woman".to_string(),
        "a photo of a man".to_string(),
    ];
    for p in &dataset.professions {
        prompts.push(p.editing.source.tensor_name().unwrap().to_string());
        prompts.push(p.editing.destination.tensor_name().unwrap().to_string());
        prompts.push(p.validation_prompt.tensor_name().unwrap().to_string());
        for t in &p.test_prompts {
            prompts.push(t.tensor_name().unwrap().to_string());
        }
    }
    let embeddings =
        parse_file(&vocab.embeddings_file(prompts.iter().map(String::as_str))).unwrap();
    BiasFixture {
        model,
        vocabulary: vocab,
        embeddings,
        dataset,
        config,
    }
}

/// Regularization strengths swept by the randomized ridge checks.
pub const LAMBDA_GRID: [f64; 7] = [1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4];

/// A random ridge instance: output and input widths in `2..=max_dim`,
/// `1..=max_len` pairs, standard normal `W` and targets, inputs scaled by
/// `1/√c`.
pub fn random_ridge_problem(
    rng: &mut Xoshiro256,
    max_dim: usize,
    max_len: usize,
    lambda: f64,
) -> RidgeProblem {
    assert!(max_dim >= 2 && max_len >= 1);
    let d = 2 + rng.below(max_dim - 1);
    let c = 2 + rng.below(max_dim - 1);
    let l = 1 + rng.below(max_len);
    let scale = 1.0 / (c as f64).sqrt();
    let original = Matrix::new(d, c, rng.normal_vec(d * c)).expect("shape");
    let inputs = (0..l)
        .map(|_| Vector::new(rng.normal_vec(c)).expect("finite").scale(scale))
        .collect();
    let targets = (0..l)
        .map(|_| Vector::new(rng.normal_vec(d)).expect("finite"))
        .collect();
    RidgeProblem::new(original, inputs, targets, lambda).expect("valid instance")
}

/// Cross-attention block names of an SD v1 UNet, in diffusers layout, with
/// each block's channel width.
pub fn sd_v1_cross_attention_blocks() -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (b, ch) in [(0, 320), (1, 640), (2, 1280)] {
        for a in 0..2 {
            out.push((
                format!("down_blocks.{b}.attentions.{a}.transformer_blocks.0.attn2"),
                ch,
            ));
        }
    }
    out.push((
        "mid_block.attentions.0.transformer_blocks.0.attn2".to_string(),
        1280,
    ));
    for (b, ch) in [(1, 1280), (2, 640), (3, 320)] {
        for a in 0..3 {
            out.push((
                format!("up_blocks.{b}.attentions.{a}.transformer_blocks.0.attn2"),
                ch,
            ));
        }
    }
    out
}

/// A checkpoint with SD v1's cross-attention names and shapes shrunk by
/// `divisor`, plus a few passthrough tensors.
pub fn sd_layout_checkpoint(divisor: usize, seed: u64) -> Vec<u8> {
    let text_dim = 768 / divisor;
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let mut w = TensorWriter::new();
    for (block, ch) in sd_v1_cross_attention_blocks() {
        let ch = ch / divisor;
        for proj in ["to_k", "to_v"] {
            let m = Matrix::new(ch, text_dim, rng.normal_vec(ch * text_dim))
                .unwrap()
                .scale(0.05);
            w.add_matrix(&format!("{block}.{proj}.weight"), &m, Dtype::F32)
                .unwrap();
        }
        let q = Matrix::new(ch, ch, rng.normal_vec(ch * ch))
            .unwrap()
            .scale(0.05);
        w.add_matrix(&format!("{block}.to_q.weight"), &q, Dtype::F32)
            .unwrap();
    }
    let conv = rng.normal_vec(320 / divisor * 4);
    w.add_values("conv_in.weight", vec![320 / divisor, 4], &conv, Dtype::F32)
        .unwrap();
    w.to_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit::{align_tokens, LayerPattern};

    #[test]
    fn embeddings_are_deterministic_and_contextual() {
        let f = edit_fixture();
        let a = f.vocabulary.embed("a blue rose").unwrap();
        assert_eq!(a, f.vocabulary.embed("a blue rose").unwrap());
        let plain = f.vocabulary.embed("a rose").unwrap();
        let shift = a.embeddings()[2]
            .add(&plain.embeddings()[1].scale(-1.0))
            .norm();
        assert!(shift > 0.5, "{shift}");
        assert!(f.vocabulary.embed("a unicorn").is_none());
        assert_eq!(align_tokens(&plain, &a).unwrap().pairs(), &[(0, 0), (1, 2)]);
    }

    #[test]
    fn fixture_files_reload() {
        let f = edit_fixture();
        let files = f.files();
        let model_bytes = &files[0].1;
        let reloaded = ModelWeights::from_tensor_file(
            &parse_file(model_bytes).unwrap(),
            &LayerPattern::default(),
        )
        .unwrap();
        assert_eq!(reloaded, f.model);
        assert_eq!(f.model.layers().len(), 2);
        let ctxs = f
            .request
            .contexts(&f.embeddings, EditFixture::LAMBDA)
            .unwrap();
        assert_eq!(ctxs.len(), 1);
        assert_eq!(ctxs[0].len(), 2 + 3 * 5);
    }

    #[test]
    fn sd_layout_has_sixteen_pairs() {
        assert_eq!(sd_v1_cross_attention_blocks().len(), 16);
        let file = parse_file(&sd_layout_checkpoint(32, 1)).unwrap();
        let model = ModelWeights::from_tensor_file(&file, &LayerPattern::default()).unwrap();
        assert_eq!(model.layers().len(), 16);
        assert_eq!(model.embed_dim(), Some(24));
    }

    #[test]
    fn bias_fixture_loads() {
        let f = bias_fixture();
        assert_eq!(f.dataset.professions.len(), 4);
        assert!(f
            .dataset
            .professions
            .iter()
            .all(|p| p.test_prompts.len() == 5));
        for (name, bytes) in f.files() {
            assert!(!bytes.is_empty(), "{name}");
        }
    }
}
