//! Multiple-choice task suites.
//!
//! Synthetic suites stand in for an imaging benchmark: every item carries a
//! feature vector instead of an image, and each domain labels its items with
//! a linear scoring rule. The rule of domain `d` interpolates between a
//! shared matrix and a domain-private one,
//!
//! ```text
//! R_d = (1 - alpha) * S + alpha * D_d
//! ```
//!
//! so `alpha = 0` gives perfect transfer between domains and `alpha = 1`
//! gives unrelated rules.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const TRAIN_FRACTION: f64 = 0.8;

/// Labels for the first eight generated domains. Later domains are `D8`, `D9`, ...
pub const DOMAIN_NAMES: [&str; 8] = ["CT", "MRI", "X-Ray", "US", "Der", "FP", "OCT", "Micro"];
pub const GENERATED_TASK: &str = "Disease Diagnosis";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaItem {
    pub id: String,
    pub domain: String,
    pub task_type: String,
    pub features: Vec<f64>,
    pub question: String,
    pub options: BTreeMap<String, String>,
    pub answer: String,
}

impl VqaItem {
    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    /// Index of the ground-truth letter (A = 0).
    pub fn answer_index(&self) -> usize {
        letter_index(&self.answer).expect("validated item")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Item {
            id: self.id.clone(),
            reason,
        };
        let k = self.options.len();
        if !(2..=4).contains(&k) {
            return Err(fail(format!("expected 2 to 4 options, found {k}")));
        }
        for (key, expected) in self.options.keys().zip(LETTERS) {
            if key.len() != 1 || !key.starts_with(expected) {
                return Err(fail(format!(
                    "option letters must run A.. without gaps, found {:?}",
                    self.options.keys().collect::<Vec<_>>()
                )));
            }
        }
        if !self.options.contains_key(&self.answer) {
            return Err(fail(format!(
                "answer {:?} is not one of the option letters",
                self.answer
            )));
        }
        if self.features.is_empty() {
            return Err(fail("empty feature vector".into()));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite feature".into()));
        }
        Ok(())
    }
}

pub fn letter_index(letter: &str) -> Option<usize> {
    let mut chars = letter.chars();
    let c = chars.next()?;
    if chars.next().is_some() {
        return None;
    }
    LETTERS.iter().position(|&l| l == c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub seed: u64,
    pub num_domains: usize,
    pub items_per_domain: usize,
    pub feature_dim: usize,
    pub num_options: usize,
    pub alpha: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            seed: 0,
            num_domains: 8,
            items_per_domain: 500,
            feature_dim: 16,
            num_options: 4,
            alpha: 0.8,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(Error::invalid("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if self.num_domains == 0 {
            return Err(Error::invalid("domains", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("features", "must be positive"));
        }
        if !(2..=4).contains(&self.num_options) {
            return Err(Error::invalid(
                "options",
                format!("{} is outside 2..=4", self.num_options),
            ));
        }
        if self.items_per_domain < self.num_options {
            return Err(Error::invalid(
                "items",
                format!(
                    "{} items per domain is fewer than {} options",
                    self.items_per_domain, self.num_options
                ),
            ));
        }
        Ok(())
    }

    pub fn domain_names(&self) -> Vec<String> {
        (0..self.num_domains)
            .map(|d| match DOMAIN_NAMES.get(d) {
                Some(name) => name.to_string(),
                None => format!("D{d}"),
            })
            .collect()
    }
}

/// Domain name to items, in generation order.
pub type Suite = IndexMap<String, Vec<VqaItem>>;

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// The labelling rule of every domain, in domain order.
pub fn domain_rules(spec: &SuiteSpec) -> Result<Vec<Array2<f64>>> {
    spec.validate()?;
    let (k, f) = (spec.num_options, spec.feature_dim);
    let mut rng = seed::stream(spec.seed, "suite-rules", "");
    let shared = normal_matrix(&mut rng, k, f);
    let rules = (0..spec.num_domains)
        .map(|_| {
            let private = normal_matrix(&mut rng, k, f);
            &shared * (1.0 - spec.alpha) + &private * spec.alpha
        })
        .collect();
    Ok(rules)
}

/// Argmax of `rule · x`, ties toward the lower index.
pub fn rule_label(rule: &Array2<f64>, features: ArrayView1<f64>) -> usize {
    let scores = rule.dot(&features);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn generate_suite(spec: &SuiteSpec) -> Result<Suite> {
    let rules = domain_rules(spec)?;
    let options: BTreeMap<String, String> = LETTERS[..spec.num_options]
        .iter()
        .map(|l| (l.to_string(), format!("option {l}")))
        .collect();

    let mut suite = Suite::new();
    for (name, rule) in spec.domain_names().into_iter().zip(&rules) {
        let mut rng = seed::stream(spec.seed, "suite-items", &name);
        let items = (0..spec.items_per_domain)
            .map(|i| {
                let features: Vec<f64> = (0..spec.feature_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let label = rule_label(rule, ArrayView1::from(&features[..]));
                VqaItem {
                    id: format!("{name}-{i:05}"),
                    domain: name.clone(),
                    task_type: GENERATED_TASK.to_string(),
                    question: format!("Which option best describes this {name} study?"),
                    features,
                    options: options.clone(),
                    answer: LETTERS[label].to_string(),
                }
            })
            .collect();
        suite.insert(name, items);
    }
    Ok(suite)
}

pub fn to_jsonl(items: &[VqaItem]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("item serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, items: &[VqaItem]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(to_jsonl(items).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_jsonl(text: &str, source: &Path) -> Result<Vec<VqaItem>> {
    let mut items = Vec::new();
    let mut dim: Option<(usize, String)> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: VqaItem = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        item.validate()?;
        match &dim {
            None => dim = Some((item.features.len(), item.id.clone())),
            Some((f, first)) if *f != item.features.len() => {
                return Err(Error::Item {
                    id: item.id.clone(),
                    reason: format!(
                        "has {} features but {first} has {f}",
                        item.features.len()
                    ),
                });
            }
            Some(_) => {}
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_dataset(path: &Path) -> Result<Vec<VqaItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(text.strip_prefix('\u{feff}').unwrap_or(&text), path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<VqaItem>,
    pub test: Vec<VqaItem>,
    pub ratio: f64,
}

/// Seeded unstratified shuffle; the first `round(0.8 N)` items train.
pub fn split_80_20(items: &[VqaItem], seed: u64) -> Result<SplitDataset> {
    if items.len() < 5 {
        return Err(Error::invalid(
            "items",
            format!("need at least 5 items to split, found {}", items.len()),
        ));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut seed::stream(seed, "split", ""));
    let n_train = (TRAIN_FRACTION * items.len() as f64).round() as usize;
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok(SplitDataset {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
        ratio: TRAIN_FRACTION,
    })
}

/// Which item label partitions a dataset into generalization domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Domain,
    Task,
}

pub fn group_by(items: Vec<VqaItem>, axis: Axis) -> Suite {
    let mut suite = Suite::new();
    for item in items {
        let key = match axis {
            Axis::Domain => item.domain.clone(),
            Axis::Task => item.task_type.clone(),
        };
        suite.entry(key).or_default().push(item);
    }
    suite
}

/// Splits every group separately, seeding each split by its label.
pub fn split_suite(suite: &Suite, seed: u64) -> Result<IndexMap<String, SplitDataset>> {
    suite
        .iter()
        .map(|(label, items)| {
            let split = split_80_20(items, seed::derive_seed(seed, "split", label))
                .map_err(|e| match e {
                    Error::Invalid { reason, .. } => Error::invalid(label.clone(), reason),
                    other => other,
                })?;
            Ok((label.clone(), split))
        })
        .collect()
}

/// Shared feature dimension and option count of a non-empty item list.
pub fn item_shape(items: &[VqaItem]) -> Result<(usize, usize)> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("dataset", "no items"))?;
    let shape = (first.features.len(), first.num_options());
    for item in items {
        if item.features.len() != shape.0 {
            return Err(Error::Item {
                id: item.id.clone(),
                reason: format!("has {} features, expected {}", item.features.len(), shape.0),
            });
        }
        if item.num_options() != shape.1 {
            return Err(Error::Item {
                id: item.id.clone(),
                reason: format!("has {} options, expected {}", item.num_options(), shape.1),
            });
        }
    }
    Ok(shape)
}

pub fn check_disjoint(split: &SplitDataset) -> bool {
    let train: HashSet<&str> = split.train.iter().map(|i| i.id.as_str()).collect();
    split.test.iter().all(|i| !train.contains(i.id.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(alpha: f64) -> SuiteSpec {
        SuiteSpec {
            seed: 7,
            num_domains: 2,
            items_per_domain: 20,
            feature_dim: 6,
            num_options: 4,
            alpha,
        }
    }

    #[test]
    fn alpha_zero_shares_one_rule() {
        let rules = domain_rules(&spec(0.0)).unwrap();
        assert_eq!(rules[0], rules[1]);
        let suite = generate_suite(&spec(0.0)).unwrap();
        let x = &suite["CT"][3].features;
        let view = ArrayView1::from(&x[..]);
        assert_eq!(rule_label(&rules[0], view), rule_label(&rules[1], view));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_suite(&spec(0.5)).unwrap();
        let b = generate_suite(&spec(0.5)).unwrap();
        for (da, db) in a.values().zip(b.values()) {
            assert_eq!(to_jsonl(da), to_jsonl(db));
        }
    }

    #[test]
    fn independent_rules_give_balanced_labels() {
        let suite = generate_suite(&SuiteSpec {
            seed: 7,
            num_domains: 8,
            items_per_domain: 500,
            feature_dim: 16,
            num_options: 4,
            alpha: 1.0,
        })
        .unwrap();
        for items in suite.values() {
            for letter in ["A", "B", "C", "D"] {
                let freq = items.iter().filter(|i| i.answer == letter).count() as f64 / 500.0;
                assert!((0.15..=0.35).contains(&freq), "{letter}: {freq}");
            }
        }
    }

    #[test]
    fn spec_validation_names_field() {
        let err = spec(1.5).validate().unwrap_err();
        assert!(err.to_string().contains("alpha"));
        let mut s = spec(0.5);
        s.items_per_domain = 3;
        assert!(s.validate().unwrap_err().to_string().contains("items"));
    }

    #[test]
    fn generated_items_are_valid() {
        for item in generate_suite(&spec(0.3)).unwrap().values().flatten() {
            item.validate().unwrap();
        }
    }

    #[test]
    fn rejects_answer_outside_options() {
        let mut item = generate_suite(&spec(0.3)).unwrap()["CT"][0].clone();
        item.answer = "E".into();
        let line = serde_json::to_string(&item).unwrap();
        let err = parse_jsonl(&line, Path::new("x.jsonl")).unwrap_err();
        assert!(err.to_string().contains(&item.id));
    }

    #[test]
    fn rejects_gapped_letters() {
        let mut item = generate_suite(&spec(0.3)).unwrap()["CT"][0].clone();
        item.options.remove("B");
        assert!(item.validate().is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = to_jsonl(&generate_suite(&spec(0.3)).unwrap()["CT"][..2]);
        let text = format!("{good}{{\"id\": 3\n");
        match parse_jsonl(&text, Path::new("d.jsonl")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn extra_keys_rejected() {
        let item = generate_suite(&spec(0.3)).unwrap()["CT"][0].clone();
        let mut value = serde_json::to_value(&item).unwrap();
        value["extra"] = serde_json::json!(1);
        assert!(parse_jsonl(&value.to_string(), Path::new("x")).is_err());
    }

    #[test]
    fn split_sizes() {
        let items = &generate_suite(&spec(0.3)).unwrap()["CT"];
        let s = split_80_20(&items[..10], 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let s = split_80_20(&items[..5], 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (4, 1));
        assert!(split_80_20(&items[..4], 1).is_err());
        assert_eq!(split_80_20(items, 9).unwrap(), split_80_20(items, 9).unwrap());
        assert!(check_disjoint(&split_80_20(items, 9).unwrap()));
    }
}
