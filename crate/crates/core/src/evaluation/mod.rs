//! Confusion matrices, per-class precision/recall/F1 with support-weighted
//! overall rows, class proportions and seeded audit sampling.

mod report;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{BuildingClass, NUM_CLASSES};
use crate::fusion::BuildingPrediction;

pub use report::{evaluate, render_table, round_half_up, EvalConfig, EvalError, EvaluationReport};

/// Counts indexed `[truth][predicted]` in class ordinal order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: BuildingClass, predicted: BuildingClass) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        self.counts.iter().map(|row| row[predicted]).sum()
    }

    /// Fraction of correct predictions; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion<I: IntoIterator<Item = (BuildingClass, BuildingClass)>>(pairs: I) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for (t, p) in pairs {
        m.add(t, p);
    }
    m
}

/// Divides each row by its sum. Rows without support stay zero.
pub fn normalize_rows(m: &ConfusionMatrix) -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
    let mut out = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for (t, row) in m.counts.iter().enumerate() {
        let sum = m.row_sum(t);
        if sum == 0 {
            continue;
        }
        for (p, &c) in row.iter().enumerate() {
            out[t][p] = c as f64 / sum as f64;
        }
    }
    out
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: BuildingClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Per-class values weighted by support.
    #[default]
    Weighted,
    /// Unweighted mean over classes with support.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassRow>,
    pub overall: OverallRow,
    pub averaging: Averaging,
}

/// Per-class rows in ordinal order plus the overall row.
pub fn class_metrics(m: &ConfusionMatrix, averaging: Averaging) -> ClassMetrics {
    let per_class: Vec<ClassRow> = BuildingClass::ALL
        .iter()
        .map(|&class| {
            let i = class.index();
            let tp = m.counts[i][i];
            let precision = ratio(tp, m.col_sum(i));
            let recall = ratio(tp, m.row_sum(i));
            ClassRow {
                class,
                precision,
                recall,
                f1: f1(precision, recall),
                support: m.row_sum(i),
            }
        })
        .collect();
    let overall = aggregate(&per_class, averaging);
    ClassMetrics {
        per_class,
        overall,
        averaging,
    }
}

/// Combines per-class rows into an overall row. Each column is averaged on
/// its own, so the overall F1 is not `f1(overall p, overall r)`.
pub fn aggregate(rows: &[ClassRow], averaging: Averaging) -> OverallRow {
    let support: u64 = rows.iter().map(|r| r.support).sum();
    let supported: Vec<&ClassRow> = rows.iter().filter(|r| r.support > 0).collect();
    let weight = |r: &ClassRow| match averaging {
        Averaging::Weighted => r.support as f64,
        Averaging::Macro => 1.0,
    };
    let norm: f64 = supported.iter().map(|r| weight(r)).sum();
    let mean = |value: fn(&ClassRow) -> f64| {
        if norm == 0.0 {
            return 0.0;
        }
        supported.iter().map(|r| weight(r) * value(r)).sum::<f64>() / norm
    };
    OverallRow {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        support,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub fractions: BTreeMap<BuildingClass, f64>,
    pub counts: BTreeMap<BuildingClass, u64>,
    pub total: u64,
    pub empty: bool,
}

/// Share of each class among classified buildings.
pub fn class_proportions(predictions: &[BuildingPrediction]) -> Proportions {
    let mut counts: BTreeMap<BuildingClass, u64> = BuildingClass::ALL.iter().map(|&c| (c, 0)).collect();
    for p in predictions {
        *counts.get_mut(&p.label).expect("all classes present") += 1;
    }
    let total = predictions.len() as u64;
    Proportions {
        fractions: counts.iter().map(|(&c, &n)| (c, ratio(n, total))).collect(),
        counts,
        total,
        empty: total == 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot sample {requested} of {available} buildings")]
pub struct InsufficientPopulation {
    pub requested: usize,
    pub available: usize,
}

/// Uniform sample of `n` distinct ids, determined by `seed`. The result is
/// sorted; input order does not matter.
pub fn sample_for_audit(ids: &[i64], n: usize, seed: u64) -> Result<Vec<i64>, InsufficientPopulation> {
    let mut population = ids.to_vec();
    population.sort_unstable();
    population.dedup();
    if n > population.len() {
        return Err(InsufficientPopulation {
            requested: n,
            available: population.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<i64> = rand::seq::index::sample(&mut rng, population.len(), n)
        .into_iter()
        .map(|i| population[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ClassDistribution;
    use proptest::prelude::*;
    use rand::Rng;

    fn class(i: usize) -> BuildingClass {
        BuildingClass::from_index(i).unwrap()
    }

    fn prediction(id: i64, label: BuildingClass) -> BuildingPrediction {
        BuildingPrediction {
            building_id: id,
            label,
            confidence: 1.0,
            images_used: 1,
            averaged: ClassDistribution::one_hot(BuildingClass::labels(), label.index()),
        }
    }

    #[test]
    fn confusion_basics() {
        assert_eq!(confusion([]).total(), 0);
        let m = confusion((0..10).map(|i| (class(i % 8), class(i % 8))));
        assert_eq!(m.correct(), 10);
        assert_eq!(m.accuracy(), 1.0);
    }

    #[test]
    fn confusion_matches_independent_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<(usize, usize)> = (0..500).map(|_| (rng.gen_range(0..8), rng.gen_range(0..8))).collect();
        let m = confusion(pairs.iter().map(|&(t, p)| (class(t), class(p))));
        // tally through a string-keyed map instead of indices
        let mut tally: BTreeMap<String, u64> = BTreeMap::new();
        for (t, p) in &pairs {
            *tally.entry(format!("{}->{}", class(*t), class(*p))).or_default() += 1;
        }
        for t in 0..8 {
            for p in 0..8 {
                let key = format!("{}->{}", class(t), class(p));
                assert_eq!(m.counts[t][p], tally.get(&key).copied().unwrap_or(0));
            }
        }
        assert_eq!(m.total(), 500);
    }

    #[test]
    fn normalization() {
        let mut m = ConfusionMatrix::default();
        m.counts[0][0] = 2;
        m.counts[0][1] = 2;
        let n = normalize_rows(&m);
        assert_eq!(&n[0][..3], &[0.5, 0.5, 0.0]);
        assert!(n[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn f1_boundaries() {
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(0.0, 0.7), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn single_class_all_correct() {
        let m = confusion(std::iter::repeat_n((BuildingClass::House, BuildingClass::House), 5));
        let cm = class_metrics(&m, Averaging::Weighted);
        for row in &cm.per_class {
            if row.class == BuildingClass::House {
                assert_eq!((row.precision, row.recall, row.f1, row.support), (1.0, 1.0, 1.0, 5));
            } else {
                assert_eq!(row.support, 0);
                assert_eq!(row.f1, 0.0);
            }
        }
        assert_eq!(cm.overall.f1, 1.0);
    }

    #[test]
    fn macro_averages_supported_classes() {
        let m = confusion([
            (BuildingClass::House, BuildingClass::House),
            (BuildingClass::House, BuildingClass::House),
            (BuildingClass::House, BuildingClass::House),
            (BuildingClass::Roof, BuildingClass::House),
        ]);
        let w = class_metrics(&m, Averaging::Weighted).overall;
        let mac = class_metrics(&m, Averaging::Macro).overall;
        assert_eq!(w.recall, 0.75);
        assert_eq!(mac.recall, 0.5);
        assert_eq!(mac.support, 4);
    }

    #[test]
    fn proportions() {
        let mut preds: Vec<BuildingPrediction> = (0..4).map(|i| prediction(i, BuildingClass::House)).collect();
        preds.extend((4..8).map(|i| prediction(i, BuildingClass::Retail)));
        let p = class_proportions(&preds);
        assert_eq!(p.fractions[&BuildingClass::House], 0.5);
        assert_eq!(p.fractions[&BuildingClass::Retail], 0.5);
        assert_eq!(class_proportions(&preds[..1]).fractions[&BuildingClass::House], 1.0);
        let e = class_proportions(&[]);
        assert!(e.empty);
        assert!(e.fractions.values().all(|&f| f == 0.0));
    }

    #[test]
    fn audit_sample_is_deterministic() {
        let ids: Vec<i64> = (100..160).collect();
        assert_eq!(sample_for_audit(&ids, 60, 1).unwrap(), ids);
        let a = sample_for_audit(&ids, 10, 42).unwrap();
        let mut shuffled = ids.clone();
        shuffled.reverse();
        assert_eq!(sample_for_audit(&shuffled, 10, 42).unwrap(), a);
        assert_eq!(a.len(), 10);
        assert_eq!(
            sample_for_audit(&ids, 61, 0),
            Err(InsufficientPopulation {
                requested: 61,
                available: 60
            })
        );
    }

    #[test]
    fn audit_sample_is_uniform() {
        // 20 ids, draw 5, 4000 seeds: each id expected 1000 times
        let ids: Vec<i64> = (0..20).collect();
        let mut hits = [0u64; 20];
        for seed in 0..4000 {
            for id in sample_for_audit(&ids, 5, seed).unwrap() {
                hits[id as usize] += 1;
            }
        }
        let expected = 1000.0;
        let chi2: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
        // 19 degrees of freedom; 99.9th percentile is 43.82
        assert!(chi2 < 43.82, "chi-square {chi2}");
    }

    fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
        proptest::collection::vec(0u64..50, 64).prop_map(|v| {
            let mut m = ConfusionMatrix::default();
            for (i, c) in v.into_iter().enumerate() {
                m.counts[i / 8][i % 8] = c;
            }
            m
        })
    }

    proptest! {
        #[test]
        fn f1_symmetric_and_bounded(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            prop_assert_eq!(f1(p, r), f1(r, p));
            prop_assert!(f1(p, r) <= p.max(r) + 1e-15);
            prop_assert!(f1(p, r) <= (p + r) / 2.0 + 1e-15);
        }

        #[test]
        fn normalized_rows_sum_to_one(m in matrix()) {
            let n = normalize_rows(&m);
            for (t, row) in n.iter().enumerate() {
                prop_assert!(row.iter().all(|x| x.is_finite()));
                let s: f64 = row.iter().sum();
                if m.row_sum(t) > 0 {
                    prop_assert!((s - 1.0).abs() < 1e-9);
                } else {
                    prop_assert_eq!(s, 0.0);
                }
            }
        }

        #[test]
        fn weighted_overall_within_class_range(m in matrix()) {
            let cm = class_metrics(&m, Averaging::Weighted);
            let supported: Vec<&ClassRow> = cm.per_class.iter().filter(|r| r.support > 0).collect();
            prop_assume!(!supported.is_empty());
            for (value, overall) in [
                (supported.iter().map(|r| r.precision).collect::<Vec<_>>(), cm.overall.precision),
                (supported.iter().map(|r| r.recall).collect(), cm.overall.recall),
                (supported.iter().map(|r| r.f1).collect(), cm.overall.f1),
            ] {
                let lo = value.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = value.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(overall >= lo - 1e-12 && overall <= hi + 1e-12);
            }
            let support: u64 = cm.per_class.iter().map(|r| r.support).sum();
            prop_assert_eq!(support, m.total());
        }

        #[test]
        fn accuracy_equals_weighted_recall(m in matrix()) {
            prop_assume!(m.total() > 0);
            let cm = class_metrics(&m, Averaging::Weighted);
            prop_assert!((cm.overall.recall - m.accuracy()).abs() < 1e-12);
        }
    }
}
