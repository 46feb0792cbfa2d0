//! Efficacy, generality and specificity from per-seed classifications.
//!
//! Every prompt is classified once per seed as looking like its source or
//! its destination. Efficacy and generality count destination labels on
//! the edited source and positive prompts; specificity counts source
//! labels on the negatives. Dispersion is across seed indices: each metric
//! is evaluated for seed `k` alone, then the sample standard deviation of
//! those per-seed values is reported.
//!
//! All fractions are computed from integer counts, so a report is a pure
//! function of the stored labels and does not depend on outcome order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{classify, generate_feature, AttentionConfig, Choice, SimError};
use crate::edit::{EditError, ModelWeights, PromptPair, PromptRef};
use crate::tensor_store::TensorFile;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MAX_PROMPTS_PER_KIND: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("outcome {0:?} has no classifications")]
    Empty(String),
    #[error("no {0:?} outcomes to aggregate")]
    MissingKind(PromptKind),
    #[error("outcome {prompt_id:?} has {found} seeds, expected {expected}")]
    SeedCountMismatch {
        prompt_id: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Edit(#[from] EditError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Source,
    Destination,
}

impl From<Choice> for Label {
    fn from(c: Choice) -> Self {
        match c {
            Choice::A => Label::Source,
            Choice::B => Label::Destination,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Source,
    Positive,
    Negative,
}

impl PromptKind {
    pub fn desired(self) -> Label {
        match self {
            PromptKind::Source | PromptKind::Positive => Label::Destination,
            PromptKind::Negative => Label::Source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub prompt_id: String,
    pub kind: PromptKind,
    pub classifications: Vec<Label>,
}

impl TrialOutcome {
    pub fn new(
        prompt_id: impl Into<String>,
        kind: PromptKind,
        classifications: Vec<Label>,
    ) -> Result<Self> {
        let prompt_id = prompt_id.into();
        if classifications.is_empty() {
            return Err(EvalError::Empty(prompt_id));
        }
        Ok(Self {
            prompt_id,
            kind,
            classifications,
        })
    }

    pub fn seeds(&self) -> usize {
        self.classifications.len()
    }

    pub fn count(&self, label: Label) -> usize {
        self.classifications.iter().filter(|&&l| l == label).count()
    }
}

pub fn fraction_desired(outcome: &TrialOutcome, desired: Label) -> Result<f64> {
    if outcome.classifications.is_empty() {
        return Err(EvalError::Empty(outcome.prompt_id.clone()));
    }
    Ok(outcome.count(desired) as f64 / outcome.seeds() as f64)
}

/// `2gs / (g + s)`, or 0 when both are 0.
pub fn harmonic_mean(generality: f64, specificity: f64) -> f64 {
    let sum = generality + specificity;
    if sum > 0.0 {
        2.0 * generality * specificity / sum
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mean: f64,
    pub std: f64,
    /// Desired-label count per seed index, summed over prompts.
    pub per_seed_counts: Vec<usize>,
    pub prompts: usize,
}

impl Metric {
    fn from_outcomes(outcomes: &[&TrialOutcome], kind: PromptKind) -> Self {
        let seeds = outcomes[0].seeds();
        let desired = kind.desired();
        let mut per_seed_counts = vec![0usize; seeds];
        for o in outcomes {
            for (c, &l) in per_seed_counts.iter_mut().zip(&o.classifications) {
                *c += usize::from(l == desired);
            }
        }
        let prompts = outcomes.len();
        let total: usize = per_seed_counts.iter().sum();
        let mean = total as f64 / (prompts * seeds) as f64;
        let mut per_seed: Vec<f64> = per_seed_counts
            .iter()
            .map(|&c| c as f64 / prompts as f64)
            .collect();
        per_seed.sort_by(f64::total_cmp);
        Self {
            mean,
            std: sample_std(&per_seed, mean),
            per_seed_counts,
            prompts,
        }
    }
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: usize,
    pub efficacy: Metric,
    pub generality: Metric,
    pub specificity: Metric,
    pub harmonic_mean: f64,
}

pub fn aggregate(outcomes: &[TrialOutcome]) -> Result<EvalReport> {
    let mut seeds = None;
    for o in outcomes {
        if o.classifications.is_empty() {
            return Err(EvalError::Empty(o.prompt_id.clone()));
        }
        match seeds {
            None => seeds = Some(o.seeds()),
            Some(n) if n != o.seeds() => {
                return Err(EvalError::SeedCountMismatch {
                    prompt_id: o.prompt_id.clone(),
                    expected: n,
                    found: o.seeds(),
                })
            }
            Some(_) => {}
        }
    }
    let metric = |kind: PromptKind| -> Result<Metric> {
        let of_kind: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.kind == kind).collect();
        if of_kind.is_empty() {
            return Err(EvalError::MissingKind(kind));
        }
        Ok(Metric::from_outcomes(&of_kind, kind))
    };
    let efficacy = metric(PromptKind::Source)?;
    let generality = metric(PromptKind::Positive)?;
    let specificity = metric(PromptKind::Negative)?;
    Ok(EvalReport {
        seeds: seeds.unwrap_or(0),
        harmonic_mean: harmonic_mean(generality.mean, specificity.mean),
        efficacy,
        generality,
        specificity,
    })
}

/// One edit with its positive and negative probe prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub source: PromptRef,
    pub destination: PromptRef,
    #[serde(default)]
    pub positives: Vec<PromptPair>,
    #[serde(default)]
    pub negatives: Vec<PromptPair>,
}

impl DatasetEntry {
    /// The edit itself, as a prompt pair.
    pub fn edit_pair(&self) -> PromptPair {
        PromptPair {
            source: self.source.clone(),
            destination: self.destination.clone(),
        }
    }

    /// `(id, kind, pair)` for every probe of this entry.
    pub fn probes(&self, entry_index: usize) -> Vec<(String, PromptKind, PromptPair)> {
        let mut out = vec![(
            format!("{entry_index}/source"),
            PromptKind::Source,
            self.edit_pair(),
        )];
        for (i, p) in self.positives.iter().enumerate() {
            out.push((
                format!("{entry_index}/positive/{i}"),
                PromptKind::Positive,
                p.clone(),
            ));
        }
        for (i, p) in self.negatives.iter().enumerate() {
            out.push((
                format!("{entry_index}/negative/{i}"),
                PromptKind::Negative,
                p.clone(),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset =
            serde_json::from_str(text).map_err(|e| EvalError::Dataset(e.to_string()))?;
        if ds.entries.is_empty() {
            return Err(EvalError::Dataset("dataset has no entries".into()));
        }
        for (i, e) in ds.entries.iter().enumerate() {
            if e.positives.len() > MAX_PROMPTS_PER_KIND || e.negatives.len() > MAX_PROMPTS_PER_KIND
            {
                return Err(EvalError::Dataset(format!(
                    "entry {i} has {} positives and {} negatives (at most {MAX_PROMPTS_PER_KIND} each)",
                    e.positives.len(),
                    e.negatives.len()
                )));
            }
        }
        Ok(ds)
    }
}

/// Labels every probe of `dataset` under `edited`, once per seed.
///
/// For each probe and seed, the edited model's feature for the probe's
/// source prompt is compared with the original model's features for the
/// probe's source and destination prompts under the same seed.
pub fn evaluate_dataset(
    dataset: &Dataset,
    original: &ModelWeights,
    edited: &ModelWeights,
    embeddings: &TensorFile,
    config: &AttentionConfig,
    seeds: &[u64],
) -> Result<Vec<TrialOutcome>> {
    if seeds.is_empty() {
        return Err(EvalError::Empty("seed list".into()));
    }
    config.check(original)?;
    config.check(edited)?;
    let probes: Vec<_> = dataset
        .entries
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.probes(i))
        .collect();
    probes
        .par_iter()
        .map(|(id, kind, pair)| {
            let src = pair.source.load(embeddings)?;
            let dst = pair.destination.load(embeddings)?;
            let labels = seeds
                .iter()
                .map(|&seed| {
                    let f = generate_feature(edited, &src, config, seed)?;
                    let ref_a = generate_feature(original, &src, config, seed)?;
                    let ref_b = generate_feature(original, &dst, config, seed)?;
                    Ok(Label::from(classify(&f, &ref_a, &ref_b)?))
                })
                .collect::<Result<Vec<_>>>()?;
            TrialOutcome::new(id.clone(), *kind, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(id: &str, kind: PromptKind, dest: usize, total: usize) -> TrialOutcome {
        let labels = (0..total)
            .map(|i| {
                if i < dest {
                    Label::Destination
                } else {
                    Label::Source
                }
            })
            .collect();
        TrialOutcome::new(id, kind, labels).unwrap()
    }

    #[test]
    fn fractions() {
        let all = outcome("a", PromptKind::Source, 24, 24);
        assert_eq!(fraction_desired(&all, Label::Destination).unwrap(), 1.0);
        let most = outcome("b", PromptKind::Source, 21, 24);
        assert_eq!(fraction_desired(&most, Label::Destination).unwrap(), 0.875);
        let none = outcome("c", PromptKind::Source, 0, 24);
        assert_eq!(fraction_desired(&none, Label::Destination).unwrap(), 0.0);
        assert!(TrialOutcome::new("d", PromptKind::Source, vec![]).is_err());
        let raw = TrialOutcome {
            prompt_id: "e".into(),
            kind: PromptKind::Source,
            classifications: vec![],
        };
        assert!(matches!(
            fraction_desired(&raw, Label::Source),
            Err(EvalError::Empty(_))
        ));
    }

    #[test]
    fn harmonic_mean_values() {
        assert!((harmonic_mean(0.678, 0.654) - 0.665_784).abs() < 5e-7);
        assert_eq!(harmonic_mean(0.0, 1.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(1.0, 1.0), 1.0);
    }

    #[test]
    fn ceiling_report() {
        let outs = vec![
            outcome("s", PromptKind::Source, 4, 4),
            outcome("p0", PromptKind::Positive, 4, 4),
            outcome("p1", PromptKind::Positive, 4, 4),
            outcome("n0", PromptKind::Negative, 0, 4),
        ];
        let r = aggregate(&outs).unwrap();
        assert_eq!(r.efficacy.mean, 1.0);
        assert_eq!(r.generality.mean, 1.0);
        assert_eq!(r.specificity.mean, 1.0);
        assert_eq!(r.harmonic_mean, 1.0);
        assert_eq!(r.generality.std, 0.0);
        assert_eq!(r.seeds, 4);
    }

    #[test]
    fn per_seed_dispersion() {
        // Seed 0: both positives hit; seed 1: one; seed 2: none.
        let p0 = TrialOutcome::new(
            "p0",
            PromptKind::Positive,
            vec![Label::Destination, Label::Destination, Label::Source],
        )
        .unwrap();
        let p1 = TrialOutcome::new(
            "p1",
            PromptKind::Positive,
            vec![Label::Destination, Label::Source, Label::Source],
        )
        .unwrap();
        let outs = vec![
            outcome("s", PromptKind::Source, 3, 3),
            p0,
            p1,
            outcome("n", PromptKind::Negative, 0, 3),
        ];
        let r = aggregate(&outs).unwrap();
        assert_eq!(r.generality.per_seed_counts, vec![2, 1, 0]);
        assert_eq!(r.generality.mean, 0.5);
        // Per-seed values 1, 0.5, 0: sample std 0.5.
        assert!((r.generality.std - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aggregate_errors() {
        let outs = vec![
            outcome("s", PromptKind::Source, 1, 2),
            outcome("p", PromptKind::Positive, 1, 2),
        ];
        assert_eq!(
            aggregate(&outs),
            Err(EvalError::MissingKind(PromptKind::Negative))
        );
        let uneven = vec![
            outcome("s", PromptKind::Source, 1, 2),
            outcome("p", PromptKind::Positive, 1, 3),
        ];
        assert!(matches!(
            aggregate(&uneven),
            Err(EvalError::SeedCountMismatch { .. })
        ));
        assert_eq!(
            aggregate(&[]),
            Err(EvalError::MissingKind(PromptKind::Source))
        );
    }

    #[test]
    fn dataset_parsing() {
        let ds = Dataset::from_json(
            r#"[{"source": "a rose", "destination": "a blue rose",
                 "positives": [{"source": "a rose bush", "destination": "a blue rose bush"}],
                 "negatives": [{"source": "a tulip", "destination": "a blue tulip"}]}]"#,
        )
        .unwrap();
        let probes = ds.entries[0].probes(0);
        assert_eq!(probes.len(), 3);
        assert_eq!(probes[1].0, "0/positive/0");
        assert_eq!(probes[2].1, PromptKind::Negative);
        assert!(Dataset::from_json("[]").is_err());
        let six: Vec<_> = (0..6)
            .map(|i| format!(r#"{{"source": "s{i}", "destination": "d{i}"}}"#))
            .collect();
        let too_many = format!(
            r#"[{{"source": "a", "destination": "b", "positives": [{}]}}]"#,
            six.join(",")
        );
        assert!(Dataset::from_json(&too_many).is_err());
    }

    fn arb_outcomes() -> impl Strategy<Value = (Vec<TrialOutcome>, usize)> {
        (1usize..6).prop_flat_map(|seeds| {
            let one = |kind| {
                prop::collection::vec(any::<bool>(), seeds).prop_map(move |bits| {
                    let labels = bits
                        .into_iter()
                        .map(|b| if b { Label::Destination } else { Label::Source })
                        .collect();
                    TrialOutcome::new("x", kind, labels).unwrap()
                })
            };
            (
                prop::collection::vec(one(PromptKind::Source), 1..3),
                prop::collection::vec(one(PromptKind::Positive), 1..6),
                prop::collection::vec(one(PromptKind::Negative), 1..6),
            )
                .prop_map(move |(a, b, c)| {
                    let mut v = a;
                    v.extend(b);
                    v.extend(c);
                    (v, seeds)
                })
        })
    }

    fn permute_seeds(o: &TrialOutcome, rotation: usize) -> TrialOutcome {
        let mut labels = o.classifications.clone();
        let n = labels.len();
        labels.rotate_left(rotation % n);
        TrialOutcome::new(o.prompt_id.clone(), o.kind, labels).unwrap()
    }

    proptest! {
        #[test]
        fn aggregate_is_order_invariant((outs, seeds) in arb_outcomes(), shift in 0usize..64, rot in 0usize..8) {
            let base = aggregate(&outs).unwrap();
            let mut shuffled = outs.clone();
            shuffled.rotate_left(shift % outs.len());
            shuffled.reverse();
            let r = aggregate(&shuffled).unwrap();
            prop_assert_eq!(&r, &base);

            let rotated: Vec<_> = outs.iter().map(|o| permute_seeds(o, rot)).collect();
            let r = aggregate(&rotated).unwrap();
            prop_assert_eq!(r.generality.mean, base.generality.mean);
            prop_assert_eq!(r.generality.std, base.generality.std);
            prop_assert_eq!(r.specificity.std, base.specificity.std);
            prop_assert_eq!(r.seeds, seeds);
        }

        #[test]
        fn fractions_match_stored_labels((outs, _) in arb_outcomes()) {
            let r = aggregate(&outs).unwrap();
            for (kind, metric) in [
                (PromptKind::Source, &r.efficacy),
                (PromptKind::Positive, &r.generality),
                (PromptKind::Negative, &r.specificity),
            ] {
                let of_kind: Vec<_> = outs.iter().filter(|o| o.kind == kind).collect();
                let mean = of_kind.iter().map(|o| fraction_desired(o, kind.desired()).unwrap()).sum::<f64>()
                    / of_kind.len() as f64;
                prop_assert!((metric.mean - mean).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&metric.mean));
            }
            prop_assert!((0.0..=1.0).contains(&r.harmonic_mean));
        }

        #[test]
        fn harmonic_mean_bounds(g in 0.0f64..=1.0, s in 0.0f64..=1.0) {
            let h = harmonic_mean(g, s);
            let lo = g.min(s);
            let hi = g.max(s);
            if g + s > 0.0 {
                prop_assert!(h >= lo - 1e-15);
                prop_assert!(h <= (g + s) / 2.0 + 1e-15);
                prop_assert!(h <= hi + 1e-15);
                if (g - s).abs() > 1e-9 {
                    prop_assert!(h < (g + s) / 2.0);
                }
            } else {
                prop_assert_eq!(h, 0.0);
            }
        }
    }
}
