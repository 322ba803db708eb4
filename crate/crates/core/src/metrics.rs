//! Bag-level evaluation: max-instance scores, confusion counts, precision-recall
//! curves, step-interpolated average precision and stratified k-fold splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::mil::{select_key_instance, Bag, Label};
use crate::model::ModelParams;

/// Bag score: the highest positive-class probability over its instances.
pub fn bag_score(params: &ModelParams, bag: &Bag) -> Result<f64> {
    Ok(select_key_instance(params, bag)?.prediction.positive())
}

/// Positive iff `score > threshold` (strict).
pub fn classify_bag(score: f64, threshold: f64) -> Result<Label> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MilError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(Label::from_bool(score > threshold))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// 2x2 confusion counts and the rates derived from them.
///
/// Undefined rates (zero denominator) are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
}

pub fn confusion_matrix(predictions: &[Label], labels: &[Label]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(MilError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Label::Positive, Label::Positive) => c.tp += 1,
            (Label::Positive, Label::Negative) => c.fp += 1,
            (Label::Negative, Label::Negative) => c.tn += 1,
            (Label::Negative, Label::Positive) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall points from a descending sweep over the distinct scores.
///
/// At threshold `t` every bag with `score >= t` is called positive. The first
/// point is the conventional `(recall 0, precision 1)` endpoint at threshold
/// `+inf`; the last sweep point always has recall 1.
pub fn pr_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<PrPoint>> {
    if scores.len() != labels.len() {
        return Err(MilError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MilError::Numeric("non-finite score".into()));
    }
    let positives = labels.iter().filter(|l| l.is_positive()).count();
    if positives == 0 {
        return Err(MilError::Empty("positive labels (recall undefined)"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![PrPoint {
        threshold: f64::INFINITY,
        recall: 0.0,
        precision: 1.0,
    }];
    let (mut tp, mut called) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            called += 1;
            tp += usize::from(labels[order[i]].is_positive());
            i += 1;
        }
        points.push(PrPoint {
            threshold: t,
            recall: tp as f64 / positives as f64,
            precision: tp as f64 / called as f64,
        });
    }
    Ok(points)
}

/// `sum_i (recall_i - recall_{i-1}) * precision_i` over a curve from [`pr_curve`].
pub fn average_precision_from_curve(points: &[PrPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * w[1].precision)
        .sum()
}

pub fn average_precision(scores: &[f64], labels: &[Label]) -> Result<f64> {
    Ok(average_precision_from_curve(&pr_curve(scores, labels)?))
}

/// Interpolated precision (best precision at recall >= r) at each grid recall.
pub fn precision_at_recalls(points: &[PrPoint], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&r| {
            points
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Full bag-level evaluation of one model on one set of bags.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub fold_id: usize,
    pub threshold: f64,
    pub confusion: Confusion,
    pub average_precision: f64,
    pub pr_points: Vec<PrPoint>,
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<f64>, labels: Vec<Label>, threshold: f64, fold_id: usize) -> Result<Self> {
        let predictions = scores
            .iter()
            .map(|&s| classify_bag(s, threshold))
            .collect::<Result<Vec<_>>>()?;
        let confusion = confusion_matrix(&predictions, &labels)?;
        let pr_points = pr_curve(&scores, &labels)?;
        Ok(Self {
            fold_id,
            threshold,
            confusion,
            average_precision: average_precision_from_curve(&pr_points),
            pr_points,
            scores,
            labels,
        })
    }
}

pub fn evaluate(params: &ModelParams, bags: &[Bag], threshold: f64, fold_id: usize) -> Result<EvalReport> {
    if bags.is_empty() {
        return Err(MilError::Empty("evaluation set"));
    }
    let scores = bags
        .iter()
        .map(|b| bag_score(params, b))
        .collect::<Result<Vec<_>>>()?;
    let labels = bags.iter().map(|b| b.label).collect();
    EvalReport::from_scores(scores, labels, threshold, fold_id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold partition of bag indices, dealing each shuffled class round-robin.
pub fn kfold_split(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_positive()).collect();
    if k < 2 || k > pos.len() || k > neg.len() {
        return Err(MilError::Config(format!(
            "cannot split {} positive / {} negative bags into {k} stratified folds",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut tests = vec![Vec::new(); k];
    for (j, &i) in pos.iter().chain(&neg).enumerate() {
        let slot = if j < pos.len() { j % k } else { (j - pos.len()) % k };
        tests[slot].push(i);
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, model_forward, ArchConfig};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    use Label::{Negative as N, Positive as P};

    /// Brute-force AP: for each distinct threshold recount every bag.
    fn ap_oracle(scores: &[f64], labels: &[Label]) -> f64 {
        let npos = labels.iter().filter(|l| l.is_positive()).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (s, l) in scores.iter().zip(labels) {
                if *s >= t {
                    if l.is_positive() {
                        tp += 1.0
                    } else {
                        fp += 1.0
                    }
                }
            }
            let recall = tp / npos;
            ap += (recall - prev_recall) * (tp / (tp + fp));
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn paper_confusion_fixture() {
        let c = Confusion {
            tp: 103,
            fn_: 2,
            tn: 3912,
            fp: 25,
        };
        assert_eq!(format!("{:.4}", c.tpr()), "0.9810");
        assert_eq!(format!("{:.4}", c.tnr()), "0.9936");
        assert_eq!(format!("{:.4}", c.accuracy()), "0.9933");
        assert_eq!(c.tp + c.tn, 4015);
        assert_eq!(c.total(), 4042);
    }

    #[test]
    fn confusion_counts() {
        let c = confusion_matrix(&[P, P, N, N, P], &[P, N, N, P, P]).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (2, 1, 1, 1));
        let perfect = confusion_matrix(&[P, N], &[P, N]).unwrap();
        assert_eq!((perfect.tpr(), perfect.tnr()), (1.0, 1.0));
        assert!(confusion_matrix(&[P], &[P, N]).is_err());
    }

    #[test]
    fn confusion_matches_hand_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<Label> = (0..200).map(|_| Label::from_bool(rng.gen())).collect();
        let labels: Vec<Label> = (0..200).map(|_| Label::from_bool(rng.gen_bool(0.3))).collect();
        let c = confusion_matrix(&preds, &labels).unwrap();
        let tally = |p: Label, l: Label| preds.iter().zip(&labels).filter(|(a, b)| **a == p && **b == l).count();
        assert_eq!(c.tp, tally(P, P));
        assert_eq!(c.fp, tally(P, N));
        assert_eq!(c.tn, tally(N, N));
        assert_eq!(c.fn_, tally(N, P));
        assert_eq!(c.total(), 200);
    }

    #[test]
    fn classify_is_strict() {
        assert_eq!(classify_bag(0.49, 0.5).unwrap(), N);
        assert_eq!(classify_bag(0.5, 0.5).unwrap(), N);
        assert_eq!(classify_bag(0.51, 0.5).unwrap(), P);
        assert!(classify_bag(0.5, 1.0).is_err());
    }

    #[test]
    fn four_point_fixture() {
        let pts = pr_curve(&[0.9, 0.8, 0.7, 0.6], &[P, N, P, N]).unwrap();
        let recalls: Vec<f64> = pts[1..].iter().map(|p| p.recall).collect();
        let precisions: Vec<f64> = pts[1..].iter().map(|p| p.precision).collect();
        assert_eq!(recalls, vec![0.5, 0.5, 1.0, 1.0]);
        assert_eq!(precisions, vec![1.0, 0.5, 2.0 / 3.0, 0.5]);
        assert_eq!((pts[0].recall, pts[0].precision), (0.0, 1.0));
        let ap = average_precision_from_curve(&pts);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[P, P, N, N]).unwrap(), 1.0);
        // one positive ranked last: AP = prevalence
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[N, N, N, P]).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
        // tied positives ranked last: AP = prevalence
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.1, 0.1], &[N, N, P, P, P]).unwrap();
        assert!((ap - 0.6).abs() < 1e-15);
        // distinct positives ranked last: (1/P) sum_k k / (N + k)
        let ap = average_precision(&[0.9, 0.8, 0.3, 0.2], &[N, N, P, P]).unwrap();
        assert!((ap - 0.5 * (1.0 / 3.0 + 2.0 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn no_positives_rejected() {
        assert!(matches!(pr_curve(&[0.1, 0.2], &[N, N]), Err(MilError::Empty(_))));
        assert!(pr_curve(&[0.1], &[P, N]).is_err());
    }

    #[test]
    fn ap_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let mut labels: Vec<Label> = (0..n).map(|_| Label::from_bool(rng.gen_bool(0.4))).collect();
            labels[0] = P;
            // coarse scores force ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let ap = average_precision(&scores, &labels).unwrap();
            assert!((ap - ap_oracle(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn top_ranked_true_positive_has_precision_one() {
        let pts = pr_curve(&[0.99, 0.5, 0.4], &[P, N, P]).unwrap();
        assert_eq!(pts[1].precision, 1.0);
    }

    proptest! {
        #[test]
        fn ap_in_unit_interval_and_rank_invariant(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut labels: Vec<Label> = raw.iter().map(|r| Label::from_bool(r.1)).collect();
            labels[0] = P;
            let ap = average_precision(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(ap, average_precision(&warped, &labels).unwrap());
            let pts = pr_curve(&scores, &labels).unwrap();
            prop_assert!(pts.windows(2).all(|w| w[0].recall <= w[1].recall));
            prop_assert_eq!(pts.last().unwrap().recall, 1.0);
        }
    }

    #[test]
    fn kfold_is_stratified_partition() {
        let labels: Vec<Label> = (0..10).map(|i| Label::from_bool(i < 5)).collect();
        let folds = kfold_split(&labels, 5, 3).unwrap();
        let mut seen = vec![0; 10];
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.test.iter().filter(|&&i| labels[i].is_positive()).count(), 1);
            assert_eq!(f.train.len() + f.test.len(), 10);
            for &i in &f.test {
                seen[i] += 1;
                assert!(!f.train.contains(&i));
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(folds, kfold_split(&labels, 5, 3).unwrap());
        assert_ne!(folds, kfold_split(&labels, 5, 4).unwrap());
        assert!(kfold_split(&labels, 6, 3).is_err());
        assert!(kfold_split(&labels, 1, 3).is_err());
    }

    fn random_bag(cfg: &ArchConfig, n: usize, seed: u64) -> Bag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instances = (0..n)
            .map(|_| {
                let data = (0..cfg.input_height * cfg.input_width).map(|_| rng.gen_range(0.0..90.0)).collect();
                Tensor::new(cfg.input_shape().to_vec(), data).unwrap()
            })
            .collect();
        Bag::new("r", P, instances, None).unwrap()
    }

    #[test]
    fn bag_score_is_max_instance_probability() {
        let cfg = ArchConfig::tiny();
        let params = init_params(&cfg, 21).unwrap();
        for seed in 0..4 {
            let bag = random_bag(&cfg, 5, seed);
            let scan = bag
                .instances
                .iter()
                .map(|x| model_forward(&params, x).unwrap().probs[1])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(bag_score(&params, &bag).unwrap(), scan);
        }
        let single = random_bag(&cfg, 1, 9);
        let p = model_forward(&params, &single.instances[0]).unwrap().probs[1];
        assert_eq!(bag_score(&params, &single).unwrap(), p);
    }

    #[test]
    fn zero_head_scores_half_and_predicts_negative() {
        let cfg = ArchConfig::tiny();
        let mut params = init_params(&cfg, 2).unwrap();
        params.zero_head();
        let bags: Vec<Bag> = (0..4)
            .map(|i| {
                let mut b = random_bag(&cfg, 3, i);
                b.label = Label::from_bool(i % 2 == 0);
                b
            })
            .collect();
        let report = evaluate(&params, &bags, 0.5, 0).unwrap();
        assert!(report.scores.iter().all(|&s| s == 0.5));
        assert_eq!((report.confusion.tpr(), report.confusion.tnr()), (0.0, 1.0));
    }
}
