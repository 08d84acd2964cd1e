//! Subject-independent splitting, majority voting and classification metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AdFormer;
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::signal::Segment;

/// Train / validation / test shares.
pub const SPLIT_RATIO: [usize; 3] = [6, 2, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Disjoint subject sets for one seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// False when stratification was infeasible and a plain shuffle was used.
    pub stratified: bool,
}

impl SplitPlan {
    pub fn split_of(&self, subject: &str) -> Option<Split> {
        if self.train.iter().any(|s| s == subject) {
            Some(Split::Train)
        } else if self.val.iter().any(|s| s == subject) {
            Some(Split::Val)
        } else if self.test.iter().any(|s| s == subject) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn subjects(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Fails if any subject appears in two sets.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for s in self.subjects(split) {
                if let Some(prev) = seen.insert(s.as_str(), split) {
                    return Err(Error::Leakage(format!("subject {s} is in both {prev:?} and {split:?}")));
                }
            }
        }
        Ok(())
    }

    /// Segments whose subject belongs to `split`, in input order.
    pub fn select<'a, T>(&self, segments: &'a [Segment<T>], split: Split) -> Vec<&'a Segment<T>> {
        let set: HashSet<&str> = self.subjects(split).iter().map(String::as_str).collect();
        segments.iter().filter(|s| set.contains(s.subject_id.as_str())).collect()
    }
}

/// Largest-remainder apportionment of `total` items over `weights`; ties in
/// the remainder go to the earlier share.
pub fn largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    if wsum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / wsum).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // remainders compared exactly as (total·w mod wsum)
    order.sort_by_key(|&i| std::cmp::Reverse(total * weights[i] % wsum));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Subject-level 6:2:2 split. Subjects are shuffled under `seed` within
/// each class and interleaved by within-class rank, so every prefix of the
/// ordering is close to class-proportional; the first share goes to train,
/// the next to validation, the rest to test.
pub fn split_subjects(subjects: &[(String, usize)], seed: u64) -> Result<SplitPlan> {
    if subjects.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 subjects for a train/val/test split, got {}",
            subjects.len()
        )));
    }
    let mut ids = HashSet::new();
    for (s, _) in subjects {
        if !ids.insert(s.as_str()) {
            return Err(Error::Config(format!("duplicate subject id {s}")));
        }
    }
    let sizes = largest_remainder(subjects.len(), &SPLIT_RATIO);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (s, c) in subjects {
        by_class.entry(*c).or_default().push(s);
    }
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    classes.shuffle(&mut rng);
    let mut keyed = Vec::with_capacity(subjects.len());
    for (class_rank, c) in classes.iter().enumerate() {
        let members = by_class.get_mut(c).expect("class present");
        members.shuffle(&mut rng);
        let n = members.len();
        for (i, s) in members.iter().enumerate() {
            // key i/n compared as a fraction, then by class rank
            keyed.push((i, n, class_rank, (*s).clone()));
        }
    }
    keyed.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)).then(a.2.cmp(&b.2)));
    let mut ordered: Vec<String> = keyed.into_iter().map(|k| k.3).collect();
    let stratified = sizes[0] >= classes.len();
    if !stratified {
        log::warn!(
            "{} train subjects cannot cover {} classes; using an unstratified split",
            sizes[0],
            classes.len()
        );
        ordered.sort();
        ordered.shuffle(&mut rng);
    }
    let val_end = sizes[0] + sizes[1];
    Ok(SplitPlan {
        seed,
        train: ordered[..sizes[0]].to_vec(),
        val: ordered[sizes[0]..val_end].to_vec(),
        test: ordered[val_end..].to_vec(),
        stratified,
    })
}

/// Distinct `(subject, label)` pairs in first-seen order.
pub fn subject_labels<T>(segments: &[Segment<T>]) -> Result<Vec<(String, usize)>> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::new();
    for s in segments {
        match seen.get(s.subject_id.as_str()) {
            Some(&l) if l != s.label => {
                return Err(Error::Config(format!(
                    "subject {} has segments labelled {l} and {}",
                    s.subject_id, s.label
                )))
            }
            Some(_) => {}
            None => {
                seen.insert(&s.subject_id, s.label);
                out.push((s.subject_id.clone(), s.label));
            }
        }
    }
    Ok(out)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Subject label from its samples' class probabilities: the most frequent
/// per-sample argmax, ties broken by the highest mean probability among the
/// tied classes and then by the lowest class index.
pub fn majority_vote(probs: &[Vec<f64>]) -> Result<usize> {
    let k = probs.first().map(Vec::len).ok_or_else(|| Error::Parameter("no predictions to vote on".into()))?;
    if k == 0 || probs.iter().any(|p| p.len() != k) {
        return Err(Error::Parameter("probability rows must share a nonzero length".into()));
    }
    let mut votes = vec![0usize; k];
    let mut mean = vec![0.0; k];
    for p in probs {
        votes[argmax(p)] += 1;
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let top = *votes.iter().max().expect("k > 0");
    let mut best: Option<usize> = None;
    for c in (0..k).filter(|&c| votes[c] == top) {
        match best {
            Some(b) if mean[c] <= mean[b] => {}
            _ => best = Some(c),
        }
    }
    Ok(best.expect("at least one class holds the top count"))
}

/// `K × K` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_pairs(k: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::new(k);
        for (t, p) in pairs {
            m.add(t, p);
        }
        m
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }

    /// Per-class `2PR/(P+R)`, zero where `P+R = 0`.
    pub fn class_f1(&self) -> Vec<f64> {
        let k = self.classes();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let predicted: u64 = (0..k).map(|r| self.counts[r][c]).sum();
                let actual: u64 = self.counts[c].iter().sum();
                let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
                if p + r > 0.0 {
                    2.0 * p * r / (p + r)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn f1_macro(cm: &ConfusionMatrix) -> f64 {
    let f = cm.class_f1();
    if f.is_empty() {
        0.0
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// Class F1 averaged with weights proportional to true-class support.
pub fn f1_weighted(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    cm.class_f1()
        .iter()
        .zip(cm.support())
        .map(|(f, s)| f * s as f64)
        .sum::<f64>()
        / total as f64
}

/// F1 averaging used for model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Macro,
    Weighted,
}

impl F1Average {
    pub fn score(self, cm: &ConfusionMatrix) -> f64 {
        match self {
            Self::Macro => f1_macro(cm),
            Self::Weighted => f1_weighted(cm),
        }
    }
}

impl std::str::FromStr for F1Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "macro" => Ok(Self::Macro),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::Config(format!("unknown F1 average {other:?} (macro, weighted)"))),
        }
    }
}

/// Anything that maps one window to class probabilities.
pub trait Classifier<T>: Sync {
    fn classes(&self) -> usize;
    fn predict_proba(&self, x: &Tensor<T>) -> Result<Vec<f64>>;
}

impl<T: Scalar> Classifier<T> for AdFormer<T> {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn predict_proba(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(AdFormer::predict_proba(self, x)?.iter().map(|v| v.to_f64_lossy()).collect())
    }
}

/// Probabilities for every segment, computed in parallel, in input order.
pub fn predict_all<T: Scalar, C: Classifier<T>>(model: &C, segments: &[&Segment<T>]) -> Result<Vec<Vec<f64>>> {
    segments.par_iter().map(|s| model.predict_proba(&s.data)).collect()
}

/// Metrics at sample and subject level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sample_accuracy: f64,
    pub sample_f1_macro: f64,
    pub sample_f1_weighted: f64,
    pub subject_accuracy: f64,
    pub subject_f1_macro: f64,
    pub subject_f1_weighted: f64,
    pub samples: usize,
    pub subjects: usize,
    pub sample_confusion: ConfusionMatrix,
    pub subject_confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// Builds both levels from per-segment probabilities.
    pub fn from_predictions<T>(k: usize, segments: &[&Segment<T>], probs: &[Vec<f64>]) -> Result<Self> {
        if segments.len() != probs.len() {
            return Err(Error::dim("metrics", &[segments.len()], &[probs.len()]));
        }
        let mut sample_cm = ConfusionMatrix::new(k);
        let mut groups: BTreeMap<&str, (usize, Vec<Vec<f64>>)> = BTreeMap::new();
        for (s, p) in segments.iter().zip(probs) {
            if s.label >= k || p.len() != k {
                return Err(Error::Parameter(format!(
                    "label {} / {} probabilities do not fit {k} classes",
                    s.label,
                    p.len()
                )));
            }
            sample_cm.add(s.label, argmax(p));
            groups.entry(&s.subject_id).or_insert((s.label, Vec::new())).1.push(p.clone());
        }
        let mut subject_cm = ConfusionMatrix::new(k);
        for (label, ps) in groups.values() {
            subject_cm.add(*label, majority_vote(ps)?);
        }
        Ok(Self {
            sample_accuracy: sample_cm.accuracy(),
            sample_f1_macro: f1_macro(&sample_cm),
            sample_f1_weighted: f1_weighted(&sample_cm),
            subject_accuracy: subject_cm.accuracy(),
            subject_f1_macro: f1_macro(&subject_cm),
            subject_f1_weighted: f1_weighted(&subject_cm),
            samples: segments.len(),
            subjects: groups.len(),
            sample_confusion: sample_cm,
            subject_confusion: subject_cm,
        })
    }
}

/// Test-set metrics. Every segment must belong to a test subject of `plan`
/// and the plan itself must be disjoint; anything else is leakage.
pub fn evaluate<T: Scalar, C: Classifier<T>>(
    model: &C,
    plan: &SplitPlan,
    segments: &[&Segment<T>],
) -> Result<MetricsReport> {
    plan.check_disjoint()?;
    let test: HashSet<&str> = plan.test.iter().map(String::as_str).collect();
    if let Some(s) = segments.iter().find(|s| !test.contains(s.subject_id.as_str())) {
        let found = plan
            .split_of(&s.subject_id)
            .map_or("no split".to_string(), |sp| format!("the {sp:?} split"));
        return Err(Error::Leakage(format!(
            "evaluated segment of subject {} which belongs to {found}",
            s.subject_id
        )));
    }
    let probs = predict_all(model, segments)?;
    MetricsReport::from_predictions(model.classes(), segments, &probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population deviation (divides by the number of seeds).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Mean ± std of each headline metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub seeds: usize,
    pub sample_accuracy: MeanStd,
    pub sample_f1_macro: MeanStd,
    pub subject_accuracy: MeanStd,
    pub subject_f1_macro: MeanStd,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateMetrics {
    let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    AggregateMetrics {
        seeds: reports.len(),
        sample_accuracy: col(|r| r.sample_accuracy),
        sample_f1_macro: col(|r| r.sample_f1_macro),
        subject_accuracy: col(|r| r.subject_accuracy),
        subject_f1_macro: col(|r| r.subject_f1_macro),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subjects(n: usize, k: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("s{i:02}"), i % k)).collect()
    }

    #[test]
    fn split_sizes() {
        for (n, want) in [(10, [6, 2, 2]), (5, [3, 1, 1]), (20, [12, 4, 4]), (3, [2, 1, 0])] {
            let p = split_subjects(&subjects(n, 2), 41).unwrap();
            assert_eq!([p.train.len(), p.val.len(), p.test.len()], want, "n={n}");
        }
        assert_eq!(largest_remainder(7, &SPLIT_RATIO), vec![4, 2, 1]);
        assert!(split_subjects(&subjects(2, 2), 0).is_err());
    }

    #[test]
    fn split_is_seeded_and_stratified() {
        let subs = subjects(20, 2);
        let a = split_subjects(&subs, 41).unwrap();
        assert_eq!(a, split_subjects(&subs, 41).unwrap());
        assert_ne!(a, split_subjects(&subs, 42).unwrap());
        let label = |s: &String| subs.iter().find(|x| &x.0 == s).unwrap().1;
        for set in [&a.train, &a.val, &a.test] {
            let ones = set.iter().filter(|s| label(s) == 1).count();
            assert_eq!(ones * 2, set.len());
        }
        a.check_disjoint().unwrap();
    }

    #[test]
    fn infeasible_stratification_falls_back() {
        let p = split_subjects(&subjects(4, 4), 1).unwrap();
        assert!(!p.stratified);
        assert_eq!(p.train.len() + p.val.len() + p.test.len(), 4);
    }

    fn onehot(c: usize, k: usize, p: f64) -> Vec<f64> {
        let mut v = vec![(1.0 - p) / (k - 1) as f64; k];
        v[c] = p;
        v
    }

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[onehot(0, 2, 0.9), onehot(0, 2, 0.8), onehot(1, 2, 0.99)]).unwrap(), 0);
        // one vote each; mean score A = 0.6 beats mean score B = 0.55
        let rows = vec![vec![0.75, 0.25], vec![0.45, 0.85]];
        assert_eq!(majority_vote(&rows).unwrap(), 0);
        let rows = vec![vec![0.35, 0.65], vec![0.85, 0.15]];
        assert_eq!(majority_vote(&rows).unwrap(), 0);
        // equal votes and equal means fall back to the lowest index
        let rows = vec![vec![0.6, 0.4], vec![0.4, 0.6]];
        assert_eq!(majority_vote(&rows).unwrap(), 0);
        assert_eq!(majority_vote(&[onehot(1, 3, 0.5)]).unwrap(), 1);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn f1_examples() {
        let cm = ConfusionMatrix {
            counts: vec![vec![8, 2], vec![3, 7]],
        };
        let f = cm.class_f1();
        assert!((f[0] - 16.0 / 21.0).abs() < 1e-12);
        assert!((f[1] - 14.0 / 19.0).abs() < 1e-12);
        assert!((f1_macro(&cm) - 0.7494).abs() < 1e-4);
        assert_eq!(cm.accuracy(), 0.75);
        let all_zero = ConfusionMatrix {
            counts: vec![vec![5, 0], vec![5, 0]],
        };
        assert!((f1_macro(&all_zero) - 1.0 / 3.0).abs() < 1e-12);
        assert!((f1_weighted(&all_zero) - 1.0 / 3.0).abs() < 1e-12);
        let perfect = ConfusionMatrix::from_pairs(3, [(0, 0), (1, 1), (2, 2), (2, 2)]);
        assert_eq!(f1_macro(&perfect), 1.0);
    }

    fn seg(sub: &str, label: usize) -> Segment<f64> {
        Segment {
            subject_id: sub.into(),
            label,
            data: Tensor::zeros(&[1, 1]),
            window_index: 0,
        }
    }

    #[test]
    fn voting_lifts_subject_accuracy() {
        let segs = [seg("a", 0), seg("a", 0), seg("a", 0)];
        let refs: Vec<_> = segs.iter().collect();
        let probs = vec![onehot(0, 2, 0.9), onehot(0, 2, 0.8), onehot(1, 2, 0.7)];
        let r = MetricsReport::from_predictions(2, &refs, &probs).unwrap();
        assert!((r.sample_accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.subject_accuracy, 1.0);
        assert_eq!(r.subjects, 1);
    }

    struct Oracle;

    impl Classifier<f64> for Oracle {
        fn classes(&self) -> usize {
            2
        }

        fn predict_proba(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
            Ok(onehot(x.data()[0] as usize, 2, 1.0))
        }
    }

    #[test]
    fn evaluate_rejects_leakage_and_scores_perfectly() {
        let plan = SplitPlan {
            seed: 0,
            train: vec!["a".into()],
            val: vec!["b".into()],
            test: vec!["c".into(), "d".into()],
            stratified: true,
        };
        let mut segs = vec![seg("c", 0), seg("d", 1), seg("d", 1)];
        segs[1].data = Tensor::scalar(1.0).reshape(vec![1, 1]).unwrap();
        segs[2].data = segs[1].data.clone();
        let refs: Vec<_> = segs.iter().collect();
        let r = evaluate(&Oracle, &plan, &refs).unwrap();
        assert_eq!(
            [r.sample_accuracy, r.sample_f1_macro, r.subject_accuracy, r.subject_f1_macro],
            [1.0; 4]
        );
        let leak = [seg("a", 0)];
        let refs: Vec<_> = leak.iter().collect();
        assert!(matches!(evaluate(&Oracle, &plan, &refs), Err(Error::Leakage(_))));
        let mut bad = plan.clone();
        bad.val.push("c".into());
        assert!(matches!(bad.check_disjoint(), Err(Error::Leakage(_))));
    }

    #[test]
    fn aggregate_mean_std() {
        let m = MeanStd::of(&[0.8, 0.9, 1.0]);
        assert!((m.mean - 0.9).abs() < 1e-12);
        assert!((m.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
