//! Gender-balance metrics and per-profession edit-strength search.
//!
//! `Δ_p = |F_p − 50| / 50` where `F_p` is the percentage of generations
//! judged female. [`search_lambda`] bisects `log10(λ)` against any oracle
//! `λ -> F_p`, treating the non-stereotypical share as non-increasing in
//! `λ`. [`SimulatorOracle`] is an in-crate oracle built on the attention
//! simulator.

use std::fmt::Display;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{classify, generate_feature, AttentionConfig, Choice, Feature, SimError};
use crate::edit::{
    build_context, edit_model, multi_edit, EditContext, EditError, EmbeddingSequence, ModelWeights,
    PromptPair, PromptRef,
};
use crate::eval::sample_std;
use crate::tensor_store::TensorFile;

pub const NOISE_BAND: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DebiasError {
    #[error("female fraction {0} is outside [0, 100]")]
    OutOfRange(f64),
    #[error("no observations")]
    Empty,
    #[error("invalid bracket [{low}, {high}]")]
    InvalidBracket { low: f64, high: f64 },
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("oracle failed at lambda {lambda}: {message}")]
    OracleFailure { lambda: f64, message: String },
    #[error("invalid profession dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Edit(#[from] EditError),
}

pub type Result<T> = std::result::Result<T, DebiasError>;

pub fn delta_p(female_fraction: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&female_fraction) {
        return Err(DebiasError::OutOfRange(female_fraction));
    }
    Ok((female_fraction - 50.0).abs() / 50.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasObservation {
    pub profession: String,
    pub female_fraction: f64,
}

impl BiasObservation {
    pub fn new(profession: impl Into<String>, female_fraction: f64) -> Result<Self> {
        delta_p(female_fraction)?;
        Ok(Self {
            profession: profession.into(),
            female_fraction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfessionDelta {
    pub profession: String,
    pub female_fraction: f64,
    pub delta_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub professions: Vec<ProfessionDelta>,
    pub delta: f64,
    pub delta_std: f64,
}

pub fn aggregate_delta(observations: &[BiasObservation]) -> Result<BiasReport> {
    if observations.is_empty() {
        return Err(DebiasError::Empty);
    }
    let professions = observations
        .iter()
        .map(|o| {
            Ok(ProfessionDelta {
                profession: o.profession.clone(),
                female_fraction: o.female_fraction,
                delta_p: delta_p(o.female_fraction)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let deltas: Vec<f64> = professions.iter().map(|p| p.delta_p).collect();
    let delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    Ok(BiasReport {
        delta_std: sample_std(&deltas, delta),
        delta,
        professions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stereotype {
    Male,
    Female,
}

impl Stereotype {
    /// Percentage of generations showing the non-stereotypical gender.
    pub fn non_stereotypical(self, female_fraction: f64) -> f64 {
        match self {
            Stereotype::Male => female_fraction,
            Stereotype::Female => 100.0 - female_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Bracket width in `log10(λ)` at which bisection stops.
    pub log_precision: f64,
    /// Oracle calls averaged per probe.
    pub repeats: usize,
    pub stereotype: Stereotype,
    /// End the search at the first probe inside the tolerance.
    pub stop_at_tolerance: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambda_low: 1e-4,
            lambda_high: 1e8,
            max_iterations: 30,
            tolerance: 0.1,
            log_precision: 1e-3,
            repeats: 3,
            stereotype: Stereotype::Male,
            stop_at_tolerance: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let (low, high) = (self.lambda_low, self.lambda_high);
        if !(low.is_finite() && high.is_finite() && low > 0.0 && low < high) {
            return Err(DebiasError::InvalidBracket { low, high });
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(DebiasError::InvalidConfig(format!(
                "tolerance {} must be in (0, 1)",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 || self.repeats == 0 {
            return Err(DebiasError::InvalidConfig(
                "max_iterations and repeats must be >= 1".into(),
            ));
        }
        if self.log_precision.is_nan() || self.log_precision <= 0.0 {
            return Err(DebiasError::InvalidConfig(
                "log_precision must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub lambda: f64,
    /// Repeat-averaged female fraction (mean over professions in shared mode).
    pub female_fraction: f64,
    pub non_stereotypical: f64,
    /// `Δ_p` of the averaged fraction, or `Δ` in shared mode.
    pub delta: f64,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub lambda: f64,
    pub achieved: BiasObservation,
    pub delta_p: f64,
    pub converged: bool,
    pub non_monotone: bool,
    pub iterations: usize,
    pub probes: Vec<Probe>,
}

fn oracle_sample<E: Display>(lambda: f64, value: std::result::Result<f64, E>) -> Result<f64> {
    match value {
        Ok(f) if (0.0..=100.0).contains(&f) => Ok(f),
        Ok(f) => Err(DebiasError::OracleFailure {
            lambda,
            message: format!("female fraction {f} outside [0, 100]"),
        }),
        Err(e) => Err(DebiasError::OracleFailure {
            lambda,
            message: e.to_string(),
        }),
    }
}

/// True when some larger λ shows a clearly larger non-stereotypical share.
pub fn violates_monotonicity(probes: &[Probe]) -> bool {
    probes.iter().any(|a| {
        probes
            .iter()
            .any(|b| a.lambda < b.lambda && b.non_stereotypical > a.non_stereotypical + NOISE_BAND)
    })
}

fn bisect(
    config: &SearchConfig,
    mut probe: impl FnMut(f64) -> Result<Probe>,
) -> Result<(Vec<Probe>, usize, bool)> {
    config.validate()?;
    let mut lo = config.lambda_low.log10();
    let mut hi = config.lambda_high.log10();
    let mut probes: Vec<Probe> = Vec::new();
    let mut best = 0;
    for _ in 0..config.max_iterations {
        let mid = 0.5 * (lo + hi);
        let p = probe(10f64.powf(mid))?;
        if p.non_stereotypical > 50.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        let hit = p.delta < config.tolerance;
        probes.push(p);
        if probes[probes.len() - 1].delta < probes[best].delta {
            best = probes.len() - 1;
        }
        if (hit && config.stop_at_tolerance) || hi - lo <= config.log_precision {
            break;
        }
    }
    let converged = probes[best].delta < config.tolerance;
    Ok((probes, best, converged))
}

/// Bisects `log10(λ)` for one profession.
///
/// `oracle(λ, r)` returns the female percentage for repeat `r` at strength
/// `λ`; each probe averages `config.repeats` calls. The returned strength
/// is the probe with the smallest `Δ_p` (earliest on ties).
pub fn search_lambda<E: Display>(
    profession: &str,
    config: &SearchConfig,
    mut oracle: impl FnMut(f64, usize) -> std::result::Result<f64, E>,
) -> Result<SearchResult> {
    let (probes, best, converged) = bisect(config, |lambda| {
        let samples = (0..config.repeats)
            .map(|r| oracle_sample(lambda, oracle(lambda, r)))
            .collect::<Result<Vec<_>>>()?;
        let female = samples.iter().sum::<f64>() / samples.len() as f64;
        Ok(Probe {
            lambda,
            female_fraction: female,
            non_stereotypical: config.stereotype.non_stereotypical(female),
            delta: delta_p(female)?,
            samples,
        })
    })?;
    let b = &probes[best];
    Ok(SearchResult {
        lambda: b.lambda,
        achieved: BiasObservation::new(profession, b.female_fraction)?,
        delta_p: b.delta,
        converged,
        non_monotone: violates_monotonicity(&probes),
        iterations: probes.len(),
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedSearchResult {
    pub lambda: f64,
    pub report: BiasReport,
    pub converged: bool,
    pub non_monotone: bool,
    pub iterations: usize,
    pub probes: Vec<Probe>,
}

/// One `λ` for all professions, bisecting on their mean non-stereotypical
/// share. `oracle(λ, r)` returns one female percentage per profession;
/// `config.stereotype` is ignored in favour of `stereotypes`.
pub fn search_shared_lambda<E: Display>(
    professions: &[(String, Stereotype)],
    config: &SearchConfig,
    mut oracle: impl FnMut(f64, usize) -> std::result::Result<Vec<f64>, E>,
) -> Result<SharedSearchResult> {
    if professions.is_empty() {
        return Err(DebiasError::Empty);
    }
    let mut reports = Vec::new();
    let (probes, best, converged) = bisect(config, |lambda| {
        let mut sums = vec![0.0; professions.len()];
        let mut samples = Vec::new();
        for r in 0..config.repeats {
            let fs = oracle(lambda, r).map_err(|e| DebiasError::OracleFailure {
                lambda,
                message: e.to_string(),
            })?;
            if fs.len() != professions.len() {
                return Err(DebiasError::OracleFailure {
                    lambda,
                    message: format!(
                        "{} fractions for {} professions",
                        fs.len(),
                        professions.len()
                    ),
                });
            }
            for (s, f) in sums.iter_mut().zip(fs) {
                let f = oracle_sample::<String>(lambda, Ok(f))?;
                *s += f;
                samples.push(f);
            }
        }
        let observations = professions
            .iter()
            .zip(&sums)
            .map(|((name, _), s)| BiasObservation::new(name.clone(), s / config.repeats as f64))
            .collect::<Result<Vec<_>>>()?;
        let n = professions.len() as f64;
        let non_stereotypical = professions
            .iter()
            .zip(&observations)
            .map(|((_, st), o)| st.non_stereotypical(o.female_fraction))
            .sum::<f64>()
            / n;
        let female = observations.iter().map(|o| o.female_fraction).sum::<f64>() / n;
        let report = aggregate_delta(&observations)?;
        let delta = report.delta;
        reports.push(report);
        Ok(Probe {
            lambda,
            female_fraction: female,
            non_stereotypical,
            delta,
            samples,
        })
    })?;
    Ok(SharedSearchResult {
        lambda: probes[best].lambda,
        report: reports.swap_remove(best),
        converged,
        non_monotone: violates_monotonicity(&probes),
        iterations: probes.len(),
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenderReferences {
    pub female: PromptRef,
    pub male: PromptRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfessionEntry {
    pub profession: String,
    pub stereotype: Stereotype,
    pub editing: PromptPair,
    pub validation_prompt: PromptRef,
    #[serde(default)]
    pub test_prompts: Vec<PromptRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfessionDataset {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender_references: Option<GenderReferences>,
    pub professions: Vec<ProfessionEntry>,
}

impl ProfessionDataset {
    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self =
            serde_json::from_str(text).map_err(|e| DebiasError::Dataset(e.to_string()))?;
        if ds.professions.is_empty() {
            return Err(DebiasError::Dataset("no professions".into()));
        }
        Ok(ds)
    }
}

/// Female-fraction oracle backed by the attention simulator.
///
/// At strength `λ` the model is edited with each profession's editing pair,
/// then the validation prompt is generated under `seeds_per_call` seeds and
/// classified against the original model's female and male reference
/// features under the same seed. Repeat `r` uses seeds
/// `r * seeds_per_call .. (r + 1) * seeds_per_call`.
pub struct SimulatorOracle<'a> {
    model: &'a ModelWeights,
    config: AttentionConfig,
    seeds_per_call: usize,
    key_and_value: bool,
    female: EmbeddingSequence,
    male: EmbeddingSequence,
    professions: Vec<(EmbeddingSequence, EmbeddingSequence, EmbeddingSequence)>,
}

impl<'a> SimulatorOracle<'a> {
    pub fn new(
        model: &'a ModelWeights,
        dataset: &ProfessionDataset,
        embeddings: &TensorFile,
        config: AttentionConfig,
        seeds_per_call: usize,
    ) -> Result<Self> {
        config.check(model)?;
        if seeds_per_call == 0 {
            return Err(DebiasError::InvalidConfig(
                "seeds_per_call must be >= 1".into(),
            ));
        }
        let refs = dataset.gender_references.as_ref().ok_or_else(|| {
            DebiasError::Dataset("simulator oracle needs gender_references".into())
        })?;
        let professions = dataset
            .professions
            .iter()
            .map(|p| {
                Ok((
                    p.editing.source.load(embeddings)?,
                    p.editing.destination.load(embeddings)?,
                    p.validation_prompt.load(embeddings)?,
                ))
            })
            .collect::<std::result::Result<Vec<_>, EditError>>()?;
        Ok(Self {
            model,
            config,
            seeds_per_call,
            key_and_value: true,
            female: refs.female.load(embeddings)?,
            male: refs.male.load(embeddings)?,
            professions,
        })
    }

    pub fn value_only(mut self) -> Self {
        self.key_and_value = false;
        self
    }

    pub fn len(&self) -> usize {
        self.professions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.professions.is_empty()
    }

    fn context(&self, index: usize, lambda: f64) -> Result<EditContext> {
        let (src, dst, _) = &self.professions[index];
        Ok(build_context(&[(src.clone(), dst.clone())], lambda)?)
    }

    fn measure(&self, model: &ModelWeights, index: usize, repeat: usize) -> Result<f64> {
        let validation = &self.professions[index].2;
        let start = (repeat * self.seeds_per_call) as u64;
        let female = (start..start + self.seeds_per_call as u64)
            .into_par_iter()
            .map(|seed| {
                let f = generate_feature(model, validation, &self.config, seed)?;
                let a: Feature = generate_feature(self.model, &self.female, &self.config, seed)?;
                let b = generate_feature(self.model, &self.male, &self.config, seed)?;
                Ok(usize::from(classify(&f, &a, &b)? == Choice::A))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(100.0 * female as f64 / self.seeds_per_call as f64)
    }

    /// Female percentage for profession `index` edited alone.
    pub fn female_fraction(&self, index: usize, lambda: f64, repeat: usize) -> Result<f64> {
        let edited = edit_model(
            self.model,
            &self.context(index, lambda)?,
            self.key_and_value,
        )?;
        self.measure(&edited, index, repeat)
    }

    /// Female percentage for profession `index` in the unedited model.
    pub fn baseline(&self, index: usize, repeat: usize) -> Result<f64> {
        self.measure(self.model, index, repeat)
    }

    /// All professions edited together at one strength.
    pub fn female_fractions_joint(&self, lambda: f64, repeat: usize) -> Result<Vec<f64>> {
        let contexts = (0..self.len())
            .map(|i| self.context(i, lambda))
            .collect::<Result<Vec<_>>>()?;
        let edited = multi_edit(self.model, &contexts, self.key_and_value)?;
        (0..self.len())
            .map(|i| self.measure(&edited, i, repeat))
            .collect()
    }
}
