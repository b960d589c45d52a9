//! Benchmark metrics over several test sets: accuracy, ROC AUC, spread of
//! per-set accuracy, and the Easy/Hard breakdown.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{Difficulty, Verdict};
use crate::model::{Authenticity, Manifest};

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("empty evaluation set")]
    EmptySet,
    #[error("prediction and truth lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("spread needs at least two sets, got {0}")]
    TooFewSets(usize),
    #[error("set `{set}`: no verdict for image `{image_id}`")]
    MissingVerdict { set: String, image_id: String },
}

pub fn accuracy(predicted: &[Authenticity], truth: &[Authenticity]) -> Result<f64, BenchError> {
    if predicted.len() != truth.len() {
        return Err(BenchError::LengthMismatch(predicted.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(BenchError::EmptySet);
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mann–Whitney form of ROC AUC, with `score` the fakeness of each image:
/// P(fake scores above real) + ½·P(tie). Computed by ranking, O(n log n).
pub fn auc(scores: &[f64], truth: &[Authenticity]) -> Result<f64, BenchError> {
    if scores.len() != truth.len() {
        return Err(BenchError::LengthMismatch(scores.len(), truth.len()));
    }
    let n_fake = truth.iter().filter(|&&t| t == Authenticity::Fake).count();
    let n_real = truth.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(BenchError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (doubled, to stay integral) mid-ranks of the fakes.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if truth[k] == Authenticity::Fake {
                rank_sum2 += mid2;
            }
        }
        i = j + 1;
    }
    let (nf, nr) = (n_fake as u128, n_real as u128);
    let u2 = rank_sum2 - nf * (nf + 1);
    Ok(u2 as f64 / (2 * nf * nr) as f64)
}

/// Population standard deviation of per-set accuracies.
pub fn sacc(per_set_accs: &[f64]) -> Result<f64, BenchError> {
    let k = per_set_accs.len();
    if k < 2 {
        return Err(BenchError::TooFewSets(k));
    }
    let mean = per_set_accs.iter().sum::<f64>() / k as f64;
    let var = per_set_accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub acc: f64,
    /// `None` when the set holds a single class.
    pub auc: Option<f64>,
    pub n: usize,
    pub easy_count: usize,
    pub hard_count: usize,
    pub acc_easy: Option<f64>,
    pub acc_hard: Option<f64>,
    /// Accuracy of the unprompted (anchor) answer alone on Hard images.
    pub anchor_acc_hard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub acc_pooled: f64,
    pub auc_pooled: Option<f64>,
    pub n: usize,
    pub hard_count: usize,
    pub acc_hard: Option<f64>,
    pub anchor_acc_hard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub per_set: BTreeMap<String, SetReport>,
    pub overall: Overall,
    /// `None` with fewer than two sets.
    pub sacc: Option<f64>,
}

struct Rows {
    truth: Vec<Authenticity>,
    pred: Vec<Authenticity>,
    anchor: Vec<Authenticity>,
    score: Vec<f64>,
    difficulty: Vec<Difficulty>,
}

impl Rows {
    fn new() -> Self {
        Self {
            truth: vec![],
            pred: vec![],
            anchor: vec![],
            score: vec![],
            difficulty: vec![],
        }
    }

    fn push(&mut self, truth: Authenticity, v: &Verdict) {
        self.truth.push(truth);
        self.pred.push(v.label);
        self.anchor.push(v.anchor_label());
        self.score.push(v.fake_score());
        self.difficulty.push(v.difficulty);
    }

    fn acc_where(&self, pred: &[Authenticity], d: Difficulty) -> Option<f64> {
        let (p, t): (Vec<_>, Vec<_>) = (0..self.truth.len())
            .filter(|&i| self.difficulty[i] == d)
            .map(|i| (pred[i], self.truth[i]))
            .unzip();
        accuracy(&p, &t).ok()
    }

    fn count(&self, d: Difficulty) -> usize {
        self.difficulty.iter().filter(|&&x| x == d).count()
    }
}

/// Scores each named set against its verdicts (keyed by image id).
pub fn evaluate(sets: &[(Manifest, HashMap<String, Verdict>)]) -> Result<BenchReport, BenchError> {
    let mut per_set = BTreeMap::new();
    let mut all = Rows::new();
    for (manifest, verdicts) in sets {
        let mut rows = Rows::new();
        for rec in &manifest.records {
            let v = verdicts
                .get(&rec.id)
                .ok_or_else(|| BenchError::MissingVerdict {
                    set: manifest.name.clone(),
                    image_id: rec.id.clone(),
                })?;
            rows.push(rec.authenticity, v);
            all.push(rec.authenticity, v);
        }
        per_set.insert(
            manifest.name.clone(),
            SetReport {
                acc: accuracy(&rows.pred, &rows.truth)?,
                auc: auc(&rows.score, &rows.truth).ok(),
                n: rows.truth.len(),
                easy_count: rows.count(Difficulty::Easy),
                hard_count: rows.count(Difficulty::Hard),
                acc_easy: rows.acc_where(&rows.pred, Difficulty::Easy),
                acc_hard: rows.acc_where(&rows.pred, Difficulty::Hard),
                anchor_acc_hard: rows.acc_where(&rows.anchor, Difficulty::Hard),
            },
        );
    }
    let accs: Vec<f64> = per_set.values().map(|s| s.acc).collect();
    let overall = Overall {
        acc_pooled: accuracy(&all.pred, &all.truth)?,
        auc_pooled: auc(&all.score, &all.truth).ok(),
        n: all.truth.len(),
        hard_count: all.count(Difficulty::Hard),
        acc_hard: all.acc_where(&all.pred, Difficulty::Hard),
        anchor_acc_hard: all.acc_where(&all.anchor, Difficulty::Hard),
    };
    Ok(BenchReport {
        per_set,
        overall,
        sacc: sacc(&accs).ok(),
    })
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "–".to_string(), |v| format!("{:.1}", v * 100.0))
}

/// Markdown table: ACC / AUC per set, pooled ALL, then sACC; followed by
/// the Easy/Hard breakdown.
pub fn render_markdown(report: &BenchReport) -> String {
    let mut s = String::new();
    let names: Vec<&String> = report.per_set.keys().collect();
    s.push_str("| Method |");
    for n in &names {
        let _ = write!(s, " {n} ACC | {n} AUC |");
    }
    s.push_str(" ALL ACC | ALL AUC | sACC |\n|---|");
    for _ in 0..names.len() * 2 + 3 {
        s.push_str("---|");
    }
    s.push_str("\n| FFAA |");
    for r in report.per_set.values() {
        let _ = write!(s, " {} | {} |", pct(Some(r.acc)), pct(r.auc));
    }
    let _ = writeln!(
        s,
        " {} | {} | {} |",
        pct(Some(report.overall.acc_pooled)),
        pct(report.overall.auc_pooled),
        pct(report.sacc)
    );
    s.push_str("\n| Set | n | Easy | Hard | ACC Easy | ACC Hard | Anchor ACC Hard |\n|---|---|---|---|---|---|---|\n");
    for (name, r) in &report.per_set {
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} | {} | {} | {} |",
            r.n,
            r.easy_count,
            r.hard_count,
            pct(r.acc_easy),
            pct(r.acc_hard),
            pct(r.anchor_acc_hard)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Authenticity::{Fake, Real};

    /// O(n²) pairwise oracle.
    fn auc_pairs(scores: &[f64], truth: &[Authenticity]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, ti) in truth.iter().enumerate() {
            for (j, tj) in truth.iter().enumerate() {
                if *ti == Fake && *tj == Real {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[Real, Fake], &[Real, Fake]), Ok(1.0));
        assert_eq!(accuracy(&[Fake, Real], &[Real, Fake]), Ok(0.0));
        assert_eq!(
            accuracy(&[Real, Fake, Fake, Fake], &[Real, Fake, Fake, Real]),
            Ok(0.75)
        );
        assert_eq!(accuracy(&[], &[]), Err(BenchError::EmptySet));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.3, 0.2], &[Fake, Fake, Real, Real]),
            Ok(1.0)
        );
        assert_eq!(
            auc(&[0.9, 0.3, 0.2, 0.8], &[Fake, Fake, Real, Real]),
            Ok(0.75)
        );
        assert_eq!(auc(&[0.4; 4], &[Fake, Real, Fake, Real]), Ok(0.5));
        assert_eq!(
            auc(&[0.1, 0.2], &[Real, Real]),
            Err(BenchError::SingleClass)
        );
    }

    #[test]
    fn sacc_examples() {
        assert_eq!(sacc(&[0.5, 0.5, 0.5]), Ok(0.0));
        assert!((sacc(&[0.8, 0.9, 1.0]).unwrap() - 0.0816497).abs() < 1e-7);
        assert_eq!(sacc(&[0.9]), Err(BenchError::TooFewSets(1)));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 19.0).collect();
            let truth: Vec<Authenticity> = data.iter().map(|(_, f)| if *f { Fake } else { Real }).collect();
            match auc(&scores, &truth) {
                Ok(a) => prop_assert_eq!(a, auc_pairs(&scores, &truth)),
                Err(e) => prop_assert_eq!(e, BenchError::SingleClass),
            }
        }

        #[test]
        fn sacc_is_permutation_invariant(mut v in prop::collection::vec(0.0f64..1.0, 2..8), k in 0usize..8) {
            let a = sacc(&v).unwrap();
            let len = v.len();
            v.rotate_left(k % len);
            prop_assert!((a - sacc(&v).unwrap()).abs() < 1e-12);
        }
    }
}
