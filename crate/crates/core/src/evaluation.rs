//! Classification metrics at patch level and their cross-fold averages.

use std::io::Write;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    pub y_true: Vec<u8>,
    pub y_prob: Vec<f64>,
    pub fold: String,
    pub method: String,
}

impl ScoredSet {
    pub fn new(
        y_true: Vec<u8>,
        y_prob: Vec<f64>,
        fold: impl Into<String>,
        method: impl Into<String>,
    ) -> Result<Self> {
        if y_true.len() != y_prob.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} probabilities",
                y_true.len(),
                y_prob.len()
            )));
        }
        if let Some(y) = y_true.iter().find(|y| **y > 1) {
            return Err(Error::Data(format!("label {y} is not binary")));
        }
        if let Some(p) = y_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            y_true,
            y_prob,
            fold: fold.into(),
            method: method.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    /// Concatenation of several sets, e.g. the pooled test predictions of
    /// every fold.
    pub fn pooled<'a>(sets: impl IntoIterator<Item = &'a ScoredSet>, method: &str) -> ScoredSet {
        let mut out = ScoredSet {
            y_true: Vec::new(),
            y_prob: Vec::new(),
            fold: "pooled".into(),
            method: method.into(),
        };
        for s in sets {
            out.y_true.extend_from_slice(&s.y_true);
            out.y_prob.extend_from_slice(&s.y_prob);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confusion {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

fn class_counts(y: &[u8]) -> (usize, usize) {
    let pos = y.iter().filter(|v| **v == 1).count();
    (pos, y.len() - pos)
}

fn require_both(y: &[u8], metric: &'static str) -> Result<()> {
    let (pos, neg) = class_counts(y);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric {
            metric,
            reason: format!("{pos} positives and {neg} negatives"),
        });
    }
    Ok(())
}

/// Malignant is the positive class; a probability equal to the threshold
/// counts as positive.
pub fn confusion_metrics(s: &ScoredSet, threshold: f64) -> Result<Confusion> {
    require_both(&s.y_true, "sensitivity/specificity")?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&y, &p) in s.y_true.iter().zip(&s.y_prob) {
        match (y == 1, p >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let f = |a: usize, b: usize| a as f64 / b as f64;
    Ok(Confusion {
        accuracy: f(tp + tn, s.len()),
        sensitivity: f(tp, tp + fn_),
        specificity: f(tn, tn + fp),
        f1: f(2 * tp, 2 * tp + fp + fn_),
    })
}

pub fn auc(s: &ScoredSet) -> Result<f64> {
    require_both(&s.y_true, "auc")?;
    Ok(mann_whitney(&s.y_true, &s.y_prob))
}

/// AUC of arbitrary real scores; labels are 0.0 / 1.0.
pub fn auc_scores(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let y: Vec<u8> = labels.iter().map(|v| (*v == 1.0) as u8).collect();
    require_both(&y, "auc")?;
    Ok(mann_whitney(&y, scores))
}

/// Rank-sum form with mid-ranks for ties.
fn mann_whitney(y: &[u8], scores: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| y[k] == 1).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = class_counts(y);
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    u / (pos as f64 * neg as f64)
}

/// Tie-aware ROC staircase from (0, 0) to (1, 1); tied scores move both
/// coordinates in one step.
pub fn roc_curve(s: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    require_both(&s.y_true, "roc")?;
    let (pos, neg) = class_counts(&s.y_true);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.y_prob[b].total_cmp(&s.y_prob[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = s.y_prob[order[i]];
        while i < order.len() && s.y_prob[order[i]] == score {
            if s.y_true[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a staircase.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn brier(s: &ScoredSet) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    s.y_true
        .iter()
        .zip(&s.y_prob)
        .map(|(&y, &p)| (p - y as f64).powi(2))
        .sum::<f64>()
        / s.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationBin {
    pub mean_prob: f64,
    pub frac_positive: f64,
    pub count: usize,
}

/// Equal-width bins on [0, 1]; the last bin includes 1.0 and empty bins are
/// dropped.
pub fn calibration_curve(s: &ScoredSet, n_bins: usize) -> Result<Vec<CalibrationBin>> {
    if n_bins == 0 {
        return Err(Error::config("n_bins", "must be >= 1"));
    }
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&y, &p) in s.y_true.iter().zip(&s.y_prob) {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        sum_p[b] += p;
        sum_y[b] += y as usize;
        count[b] += 1;
    }
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| CalibrationBin {
            mean_prob: sum_p[b] / count[b] as f64,
            frac_positive: sum_y[b] as f64 / count[b] as f64,
            count: count[b],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub f1: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub brier: f64,
    pub roc_points: Vec<(f64, f64)>,
    pub calibration_bins: Vec<CalibrationBin>,
    pub signature_size: Option<f64>,
}

impl MetricsReport {
    /// Report carrying only scalar metrics, as in a table row.
    pub fn scalars(auc: f64, signature_size: Option<f64>) -> Self {
        Self {
            f1: 0.0,
            auc,
            accuracy: 0.0,
            sensitivity: 0.0,
            specificity: 0.0,
            brier: 0.0,
            roc_points: Vec::new(),
            calibration_bins: Vec::new(),
            signature_size,
        }
    }

    pub fn scalar_fields(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("f1", self.f1),
            ("auc", self.auc),
            ("accuracy", self.accuracy),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("brier", self.brier),
        ];
        if let Some(s) = self.signature_size {
            v.push(("signature_size", s));
        }
        v
    }
}

pub fn evaluate(s: &ScoredSet, threshold: f64, n_bins: usize) -> Result<MetricsReport> {
    let c = confusion_metrics(s, threshold)?;
    Ok(MetricsReport {
        f1: c.f1,
        auc: auc(s)?,
        accuracy: c.accuracy,
        sensitivity: c.sensitivity,
        specificity: c.specificity,
        brier: brier(s),
        roc_points: roc_curve(s)?,
        calibration_bins: calibration_curve(s, n_bins)?,
        signature_size: None,
    })
}

/// Unweighted mean of every scalar across folds; curves are dropped. The
/// signature size is averaged only when every fold has one.
pub fn aggregate_report(per_fold: &[MetricsReport]) -> Result<MetricsReport> {
    if per_fold.is_empty() {
        return Err(Error::Data("no reports to aggregate".into()));
    }
    let n = per_fold.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| per_fold.iter().map(f).sum::<f64>() / n;
    let signature_size = per_fold
        .iter()
        .map(|r| r.signature_size)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Ok(MetricsReport {
        f1: mean(|r| r.f1),
        auc: mean(|r| r.auc),
        accuracy: mean(|r| r.accuracy),
        sensitivity: mean(|r| r.sensitivity),
        specificity: mean(|r| r.specificity),
        brier: mean(|r| r.brier),
        roc_points: Vec::new(),
        calibration_bins: Vec::new(),
        signature_size,
    })
}

/// `(method, fold, metric, value)` records.
pub fn write_report<W: Write>(
    mut out: W,
    method: &str,
    fold: &str,
    r: &MetricsReport,
) -> std::io::Result<()> {
    writeln!(out, "method,fold,metric,value")?;
    for (k, v) in r.scalar_fields() {
        writeln!(out, "{method},{fold},{k},{v}")?;
    }
    Ok(())
}

pub fn write_roc<W: Write>(mut out: W, points: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(out, "fpr,tpr")?;
    for (f, t) in points {
        writeln!(out, "{f},{t}")?;
    }
    Ok(())
}

pub fn write_calibration<W: Write>(mut out: W, bins: &[CalibrationBin]) -> std::io::Result<()> {
    writeln!(out, "bin_mean_prob,bin_frac_positive,count")?;
    for b in bins {
        writeln!(out, "{},{},{}", b.mean_prob, b.frac_positive, b.count)?;
    }
    Ok(())
}

pub fn write_predictions<W: Write>(mut out: W, ids: &[i64], s: &ScoredSet) -> std::io::Result<()> {
    writeln!(out, "sample_id,y_true,y_prob")?;
    for ((id, y), p) in ids.iter().zip(&s.y_true).zip(&s.y_prob) {
        writeln!(out, "{id},{y},{p}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(y: &[u8], p: &[f64]) -> ScoredSet {
        ScoredSet::new(y.to_vec(), p.to_vec(), "f", "m").unwrap()
    }

    fn pairwise_auc(y: &[u8], p: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if p[i] > p[j] {
                        1.0
                    } else if p[i] == p[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&set(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1])).unwrap(),
            0.75
        );
        assert_eq!(auc(&set(&[1, 0, 1], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[1, 0], &[0.9, 0.1])).unwrap(), 1.0);
        assert!(matches!(
            auc(&set(&[1, 1], &[0.2, 0.3])),
            Err(Error::UndefinedMetric { metric: "auc", .. })
        ));
    }

    #[test]
    fn auc_matches_pairs_and_trapezoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            y[0] = 0;
            y[1] = 1;
            // Coarse scores force plenty of ties.
            let p: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..5) as f64 / 4.0)
                .collect();
            let s = set(&y, &p);
            let a = auc(&s).unwrap();
            assert!((a - pairwise_auc(&y, &p)).abs() < 1e-12);
            let roc = roc_curve(&s).unwrap();
            assert!((a - trapezoid(&roc)).abs() < 1e-12);
            assert_eq!(roc[0], (0.0, 0.0));
            assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
            for w in roc.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
            assert_eq!(auc(&set(&y, &sq)).unwrap(), a);
            let logit: Vec<f64> = p
                .iter()
                .map(|v| 1.0 / (1.0 + (-(3.0 * v - 1.0)).exp()))
                .collect();
            assert_eq!(auc(&set(&y, &logit)).unwrap(), a);
            let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
            let inv: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
            assert!((auc(&set(&flipped, &inv)).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_examples() {
        let c = confusion_metrics(&set(&[1, 1, 0], &[1.0, 1.0, 0.0]), 0.5).unwrap();
        assert_eq!(
            (c.accuracy, c.sensitivity, c.specificity, c.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        // TP=3, FN=1, TN=2, FP=2
        let s = set(
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[0.9, 0.8, 0.7, 0.2, 0.1, 0.3, 0.6, 0.9],
        );
        let c = confusion_metrics(&s, 0.5).unwrap();
        assert_eq!(c.sensitivity, 0.75);
        assert_eq!(c.specificity, 0.5);
        assert_eq!(c.accuracy, 0.625);
        assert!((c.f1 - 6.0 / 9.0).abs() < 1e-12);
        let c = confusion_metrics(&set(&[1, 0], &[0.5, 0.5]), 0.5).unwrap();
        assert_eq!((c.sensitivity, c.specificity), (1.0, 0.0));
        assert!(confusion_metrics(&set(&[0, 0], &[0.5, 0.5]), 0.5).is_err());
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&set(&[1, 0], &[1.0, 0.0])), 0.0);
        assert_eq!(brier(&set(&[1, 0, 1], &[0.5; 3])), 0.25);
        assert!((brier(&set(&[1, 0], &[0.8, 0.3])) - 0.065).abs() < 1e-12);
        let y = [1, 1, 0, 0, 0];
        let base = 0.4;
        assert!((brier(&set(&y, &[base; 5])) - base * (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn calibration_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<u8> = p.iter().map(|&q| (rng.random::<f64>() < q) as u8).collect();
        let bins = calibration_curve(&set(&y, &p), 10).unwrap();
        assert_eq!(bins.len(), 10);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), n);
        for b in &bins {
            assert!((b.frac_positive - b.mean_prob).abs() < 0.02);
        }
        let one = calibration_curve(&set(&[1, 0, 1], &[0.31, 0.32, 0.35]), 10).unwrap();
        assert_eq!(one.len(), 1);
        let edge = calibration_curve(&set(&[1, 0], &[1.0, 0.0]), 4).unwrap();
        assert_eq!(edge.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1]);
        assert!(calibration_curve(&set(&[1], &[1.0]), 0).is_err());
    }

    #[test]
    fn aggregation() {
        let r = |a| MetricsReport::scalars(a, None);
        let m = aggregate_report(&[r(0.970), r(0.985), r(0.966), r(0.939)]).unwrap();
        assert!((m.auc - 0.965).abs() < 1e-12);
        let one = evaluate(&set(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]), 0.5, 10).unwrap();
        let agg = aggregate_report(std::slice::from_ref(&one)).unwrap();
        assert_eq!(agg.auc, one.auc);
        assert_eq!(agg.brier, one.brier);
        assert!(agg.roc_points.is_empty());
        let sized: Vec<_> = [36.0, 512.0, 505.0, 172.0]
            .into_iter()
            .map(|s| MetricsReport::scalars(0.9, Some(s)))
            .collect();
        assert_eq!(
            aggregate_report(&sized).unwrap().signature_size,
            Some(306.25)
        );
        assert!(aggregate_report(&[]).is_err());
    }

    #[test]
    fn scored_set_validation() {
        assert!(ScoredSet::new(vec![1], vec![1.2], "f", "m").is_err());
        assert!(ScoredSet::new(vec![1, 0], vec![0.2], "f", "m").is_err());
        assert!(ScoredSet::new(vec![2], vec![0.2], "f", "m").is_err());
    }

    #[test]
    fn export_records() {
        let r = evaluate(&set(&[1, 0], &[0.8, 0.3]), 0.5, 10).unwrap();
        let mut buf = Vec::new();
        write_report(&mut buf, "grl", "40X", &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,fold,metric,value\n"));
        let brier_line = text
            .lines()
            .find(|l| l.starts_with("grl,40X,brier,"))
            .unwrap();
        let v: f64 = brier_line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((v - 0.065).abs() < 1e-12);
        assert_eq!(text.lines().count(), 7);
    }
}
