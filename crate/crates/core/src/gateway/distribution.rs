use serde::{Deserialize, Serialize};

/// Tolerance on `Σ probs = 1` for distributions crossing the gateway.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistributionError {
    #[error("{labels} labels but {probs} probabilities")]
    LengthMismatch { labels: usize, probs: usize },
    #[error("probability for `{label}` is {value}")]
    InvalidEntry { label: String, value: f64 },
    #[error("probabilities sum to {0}")]
    BadSum(f64),
    #[error("empty label set")]
    Empty,
    #[error("label `{0}` is not in the label set")]
    UnknownLabel(String),
    #[error("label `{0}` appears twice")]
    DuplicateLabel(String),
}

/// A probability vector aligned to an ordered label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct ClassDistribution {
    labels: Vec<String>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    labels: Vec<String>,
    probs: Vec<f64>,
}

impl TryFrom<RawDistribution> for ClassDistribution {
    type Error = DistributionError;
    fn try_from(raw: RawDistribution) -> Result<Self, Self::Error> {
        ClassDistribution::new(raw.labels, raw.probs)
    }
}

impl From<ClassDistribution> for RawDistribution {
    fn from(d: ClassDistribution) -> Self {
        RawDistribution {
            labels: d.labels,
            probs: d.probs,
        }
    }
}

impl ClassDistribution {
    /// Checks length, non-negativity, finiteness and `|Σ − 1| ≤ 1e-6`.
    pub fn new(labels: Vec<String>, probs: Vec<f64>) -> Result<Self, DistributionError> {
        Self::with_tolerance(labels, probs, SIMPLEX_TOLERANCE)
    }

    pub(crate) fn with_tolerance(
        labels: Vec<String>,
        probs: Vec<f64>,
        tolerance: f64,
    ) -> Result<Self, DistributionError> {
        if labels.is_empty() {
            return Err(DistributionError::Empty);
        }
        if labels.len() != probs.len() {
            return Err(DistributionError::LengthMismatch {
                labels: labels.len(),
                probs: probs.len(),
            });
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(DistributionError::DuplicateLabel(l.clone()));
            }
        }
        for (l, &p) in labels.iter().zip(&probs) {
            if !p.is_finite() || p < 0.0 {
                return Err(DistributionError::InvalidEntry {
                    label: l.clone(),
                    value: p,
                });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(DistributionError::BadSum(sum));
        }
        Ok(ClassDistribution { labels, probs })
    }

    /// Places `entries` onto `label_set`; labels not mentioned get 0.
    pub fn from_entries<'a, I>(label_set: &[String], entries: I) -> Result<Self, DistributionError>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut probs = vec![0.0; label_set.len()];
        let mut seen = vec![false; label_set.len()];
        for (label, p) in entries {
            let i = label_set
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| DistributionError::UnknownLabel(label.to_string()))?;
            if seen[i] {
                return Err(DistributionError::DuplicateLabel(label.to_string()));
            }
            seen[i] = true;
            probs[i] = p;
        }
        Self::new(label_set.to_vec(), probs)
    }

    pub fn one_hot(labels: Vec<String>, index: usize) -> Self {
        let mut probs = vec![0.0; labels.len()];
        probs[index] = 1.0;
        ClassDistribution { labels, probs }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.probs[i])
    }

    /// Index of the maximal probability; the earliest label wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Indices of the `k` most probable labels, ties in label order.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    }
}

/// Most probable label and its probability.
pub fn top1(d: &ClassDistribution) -> (&str, f64) {
    let i = d.argmax();
    (&d.labels[i], d.probs[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::BuildingClass;
    use proptest::prelude::*;

    fn building(probs: Vec<f64>) -> ClassDistribution {
        ClassDistribution::new(BuildingClass::labels(), probs).unwrap()
    }

    #[test]
    fn top1_picks_max() {
        let d = building(vec![0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(top1(&d), ("church", 0.9));
    }

    #[test]
    fn top1_tie_goes_to_first_label() {
        let d = building(vec![0.125; 8]);
        assert_eq!(top1(&d), ("apartment", 0.125));
        let d = building(vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5, 0.0]);
        assert_eq!(top1(&d).0, "garage");
    }

    #[test]
    fn top_k_orders_by_prob_then_label() {
        let d = building(vec![0.2, 0.3, 0.0, 0.3, 0.2, 0.0, 0.0, 0.0]);
        assert_eq!(d.top_k(3), vec![1, 3, 0]);
    }

    #[test]
    fn invariants_enforced() {
        let labels = BuildingClass::labels();
        assert!(matches!(
            ClassDistribution::new(labels.clone(), vec![0.1; 8]),
            Err(DistributionError::BadSum(_))
        ));
        assert!(matches!(
            ClassDistribution::new(labels.clone(), vec![1.0]),
            Err(DistributionError::LengthMismatch { .. })
        ));
        let mut neg = vec![0.0; 8];
        neg[0] = 1.1;
        neg[1] = -0.1;
        assert!(matches!(
            ClassDistribution::new(labels.clone(), neg),
            Err(DistributionError::InvalidEntry { .. })
        ));
        let mut nan = vec![0.0; 8];
        nan[0] = f64::NAN;
        assert!(ClassDistribution::new(labels.clone(), nan).is_err());
        assert!(matches!(
            ClassDistribution::from_entries(&labels, [("castle", 1.0)]),
            Err(DistributionError::UnknownLabel(_))
        ));
        let d = ClassDistribution::from_entries(&labels, [("house", 1.0)]).unwrap();
        assert_eq!(d.prob("house"), Some(1.0));
        assert_eq!(d.prob("roof"), Some(0.0));
    }

    #[test]
    fn serde_validates() {
        let d = building(vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let json = serde_json::to_string(&d).unwrap();
        let back: ClassDistribution = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<ClassDistribution>(r#"{"labels":["a"],"probs":[0.5]}"#).is_err());
    }

    proptest! {
        #[test]
        fn top1_probability_is_linear_scan_max(raw in proptest::collection::vec(0.0f64..1.0, 8)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let d = building(raw.iter().map(|x| x / total).collect());
            let (label, p) = top1(&d);
            let mut max = f64::NEG_INFINITY;
            let mut first = 0;
            for (i, &x) in d.probs().iter().enumerate() {
                if x > max { max = x; first = i; }
            }
            prop_assert_eq!(p, max);
            prop_assert_eq!(label, d.labels()[first].as_str());
        }
    }
}
