//! Attack evaluation: success-vs-distance curves, micro-averaged ROC, MSE
//! CDFs and percentile tables, plus the on-disk report bundle.

mod scores;

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{argmax, NUM_CLASSES};

pub use scores::{
    read_clean_scores_csv, read_scores_csv, write_clean_scores_csv, ClassificationScore, CleanScore, RegressionScore,
    ScoreTable, CLEAN_SCORES_HEADER,
};

/// Fraction of attempts that succeeded with `l2_norm ≤ ε`, per ε.
pub fn success_vs_distance(outcomes: &[(bool, f64)], epsilons: &[f64]) -> Result<Vec<(f64, f64)>> {
    if outcomes.is_empty() {
        return Err(Error::invalid("success_vs_distance", "no attack results"));
    }
    let n = outcomes.len() as f64;
    Ok(epsilons
        .iter()
        .map(|&eps| {
            let hits = outcomes.iter().filter(|(ok, l2)| *ok && *l2 <= eps).count();
            (eps, hits as f64 / n)
        })
        .collect())
}

/// `0` followed by every distinct successful norm, ascending.
pub fn default_epsilons(outcomes: &[(bool, f64)]) -> Vec<f64> {
    let mut eps: Vec<f64> = outcomes.iter().filter(|(ok, _)| *ok).map(|(_, l2)| *l2).collect();
    eps.push(0.0);
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    eps
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Micro-averaged one-vs-rest ROC over per-sample class probabilities.
///
/// Every `(sample, class)` pair becomes one binary instance, positive when
/// the class is the sample's label. The threshold sweeps over all distinct
/// scores; tied scores move together. AUC is the trapezoidal area.
pub fn micro_roc(scores: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "micro_roc",
            format!("{} score rows for {} labels", scores.len(), labels.len()),
        ));
    }
    let mut pool: Vec<(f64, bool)> = Vec::with_capacity(scores.len() * NUM_CLASSES);
    for (row, &label) in scores.iter().zip(labels) {
        if label >= NUM_CLASSES || row.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("micro_roc", "labels must be class indices and scores finite"));
        }
        pool.extend(row.iter().enumerate().map(|(k, &s)| (s, k == label)));
    }
    let positives = pool.iter().filter(|(_, p)| *p).count();
    let negatives = pool.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("micro_roc", "pooled expansion needs positives and negatives"));
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pool.len() {
        let s = pool[i].0;
        while i < pool.len() && pool[i].0 == s {
            if pool[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// What each sample contributes to the ROC pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RocScoring {
    /// One-hot on the predicted class: a false positive for a class is an
    /// image classified as that class.
    #[default]
    Decision,
    /// The class probabilities themselves.
    Probability,
}

impl RocScoring {
    pub fn name(self) -> &'static str {
        match self {
            RocScoring::Decision => "decision",
            RocScoring::Probability => "probability",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "decision" => Some(RocScoring::Decision),
            "probability" => Some(RocScoring::Probability),
            _ => None,
        }
    }

    pub fn apply(self, row: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
        match self {
            RocScoring::Decision => decision_scores(&row),
            RocScoring::Probability => row,
        }
    }
}

/// One-hot vector on the argmax (first maximum on ties).
pub fn decision_scores(row: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    out[argmax(row)] = 1.0;
    out
}

/// Scores for the attacked pool: a record's adversarial scores replace its
/// clean ones when the attack succeeded within `epsilon`. Labels stay the
/// original ones.
pub fn attacked_pool(records: &[ClassificationScore], epsilon: f64) -> (Vec<[f64; NUM_CLASSES]>, Vec<usize>) {
    records
        .iter()
        .map(|r| {
            let s = if r.success && r.l2_norm <= epsilon { r.adversarial } else { r.clean };
            (s, r.label.index())
        })
        .unzip()
}

/// Median of the successful norms (lower median for even counts), if any.
pub fn median_successful_norm(records: &[ClassificationScore]) -> Option<f64> {
    let mut norms: Vec<f64> = records.iter().filter(|r| r.success).map(|r| r.l2_norm).collect();
    if norms.is_empty() {
        return None;
    }
    norms.sort_by(f64::total_cmp);
    Some(norms[(norms.len() - 1) / 2])
}

/// Empirical CDF: one point per distinct value, carrying the fraction of
/// values at or below it.
pub fn mse_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::invalid("mse_cdf", "no values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match curve.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => curve.push((v, frac)),
        }
    }
    Ok(curve)
}

/// Index into an ascending sequence of length `n` for the nearest-rank
/// percentile: the `ceil(p·n/100)`-th order statistic, at least the first.
pub fn nearest_rank(percentile: u32, n: usize) -> usize {
    let rank = (percentile as usize * n).div_ceil(100).max(1);
    rank.min(n) - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    /// `(percentile, mse_ratio, l2)`; the columns are sorted independently.
    pub rows: Vec<(u32, f64, f64)>,
    pub max_ratio: f64,
    /// Images skipped because their clean MSE was 0.
    pub excluded: usize,
}

pub const TABLE_PERCENTILES: [u32; 5] = [10, 25, 50, 75, 90];

/// Per-image `adversarial MSE / clean MSE` and perturbation percentiles from
/// `(clean_mse, adversarial_mse, l2)` triples.
pub fn ratio_percentiles(results: &[(f64, f64, f64)], percentiles: &[u32]) -> Result<RatioTable> {
    if let Some(p) = percentiles.iter().find(|p| **p == 0 || **p > 100) {
        return Err(Error::invalid("ratio_percentiles", format!("percentile {p} outside 1..=100")));
    }
    let kept: Vec<&(f64, f64, f64)> = results.iter().filter(|r| r.0 > 0.0).collect();
    if kept.is_empty() {
        return Err(Error::invalid("ratio_percentiles", "no result with a nonzero clean MSE"));
    }
    let mut ratios: Vec<f64> = kept.iter().map(|r| r.1 / r.0).collect();
    let mut l2: Vec<f64> = kept.iter().map(|r| r.2).collect();
    ratios.sort_by(f64::total_cmp);
    l2.sort_by(f64::total_cmp);
    let n = ratios.len();
    Ok(RatioTable {
        rows: percentiles
            .iter()
            .map(|&p| (p, ratios[nearest_rank(p, n)], l2[nearest_rank(p, n)]))
            .collect(),
        max_ratio: ratios[n - 1],
        excluded: results.len() - n,
    })
}

/// Everything written to a report directory. Absent parts are omitted or
/// reported as `NA`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub n_images: usize,
    pub success_rate: Option<f64>,
    pub success_curve: Option<Vec<(f64, f64)>>,
    pub roc_clean: Option<RocCurve>,
    pub roc_attacked: Option<RocCurve>,
    pub mse_cdf_clean: Option<Vec<(f64, f64)>>,
    pub mse_cdf_attacked: Option<Vec<(f64, f64)>>,
    pub ratios: Option<RatioTable>,
}

impl EvalReport {
    /// Builds the classification report. `clean` holds clean test scores;
    /// `attacks` the attack records, whose pool is capped at `epsilon`
    /// (default: the median successful norm). Both ROC pools use `scoring`.
    pub fn classification(
        clean: &[([f64; NUM_CLASSES], usize)],
        attacks: &[ClassificationScore],
        epsilon: Option<f64>,
        scoring: RocScoring,
    ) -> Result<Self> {
        let (scores, labels): (Vec<_>, Vec<_>) = clean.iter().map(|(s, l)| (scoring.apply(*s), *l)).unzip();
        let mut report = EvalReport {
            n_images: clean.len(),
            roc_clean: Some(micro_roc(&scores, &labels)?),
            ..Default::default()
        };
        if !attacks.is_empty() {
            let outcomes: Vec<(bool, f64)> = attacks.iter().map(|r| (r.success, r.l2_norm)).collect();
            let hits = outcomes.iter().filter(|o| o.0).count();
            report.success_rate = Some(hits as f64 / outcomes.len() as f64);
            report.success_curve = Some(success_vs_distance(&outcomes, &default_epsilons(&outcomes))?);
            let eps = epsilon.or_else(|| median_successful_norm(attacks)).unwrap_or(0.0);
            let (s, l) = attacked_pool(attacks, eps);
            let s: Vec<_> = s.into_iter().map(|row| scoring.apply(row)).collect();
            report.roc_attacked = Some(micro_roc(&s, &l)?);
        }
        Ok(report)
    }

    pub fn regression(records: &[RegressionScore]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("regression report", "no records"));
        }
        let clean: Vec<f64> = records.iter().map(|r| r.clean_mse).collect();
        let adv: Vec<f64> = records.iter().map(|r| r.adversarial_mse).collect();
        let triples: Vec<(f64, f64, f64)> = records
            .iter()
            .map(|r| (r.clean_mse, r.adversarial_mse, r.l2_norm))
            .collect();
        let hits = records.iter().filter(|r| r.success).count();
        Ok(EvalReport {
            n_images: records.len(),
            success_rate: Some(hits as f64 / records.len() as f64),
            mse_cdf_clean: Some(mse_cdf(&clean)?),
            mse_cdf_attacked: Some(mse_cdf(&adv)?),
            ratios: Some(ratio_percentiles(&triples, &TABLE_PERCENTILES)?),
            ..Default::default()
        })
    }

    /// `key=value` lines: auc_clean, auc_attacked, max_ratio, n_images, success_rate.
    pub fn summary(&self) -> String {
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        format!(
            "auc_clean={}\nauc_attacked={}\nmax_ratio={}\nn_images={}\nsuccess_rate={}\n",
            na(self.roc_clean.as_ref().map(|r| r.auc)),
            na(self.roc_attacked.as_ref().map(|r| r.auc)),
            na(self.ratios.as_ref().map(|r| r.max_ratio)),
            self.n_images,
            na(self.success_rate),
        )
    }

    /// Writes the present curves and `summary.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(path, e))
        };
        let pairs = |header: &str, pts: &[(f64, f64)]| {
            let mut s = format!("{header}\n");
            for (a, b) in pts {
                let _ = writeln!(s, "{a},{b}");
            }
            s
        };
        if let Some(r) = &self.roc_clean {
            put("roc_clean.csv", pairs("fpr,tpr", &r.points))?;
        }
        if let Some(r) = &self.roc_attacked {
            put("roc_attacked.csv", pairs("fpr,tpr", &r.points))?;
        }
        if let Some(c) = &self.success_curve {
            put("success_curve.csv", pairs("epsilon,success", c))?;
        }
        if let Some(c) = &self.mse_cdf_clean {
            put("mse_cdf_clean.csv", pairs("mse,fraction", c))?;
        }
        if let Some(c) = &self.mse_cdf_attacked {
            put("mse_cdf_attacked.csv", pairs("mse,fraction", c))?;
        }
        if let Some(t) = &self.ratios {
            let mut s = String::from("percentile,mse_ratio,l2\n");
            for (p, r, l) in &t.rows {
                let _ = writeln!(s, "{p},{r},{l}");
            }
            put("ratios.csv", s)?;
        }
        put("summary.txt", self.summary())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_curve_counts() {
        let o = [(true, 0.1), (true, 0.5), (false, 0.9)];
        let c = success_vs_distance(&o, &[0.0, 0.5, f64::INFINITY]).unwrap();
        assert_eq!(c, vec![(0.0, 0.0), (0.5, 2.0 / 3.0), (f64::INFINITY, 2.0 / 3.0)]);
        assert!(success_vs_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn perfect_scores_give_unit_auc() {
        let scores = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let roc = micro_roc(&scores, &[0, 1, 2]).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn two_sample_hand_case() {
        // positives 0.6 (s0), 0.3 (s1); negatives 0.3, 0.1 (s0), 0.5, 0.2 (s1)
        let scores = [[0.6, 0.3, 0.1], [0.5, 0.3, 0.2]];
        let roc = micro_roc(&scores, &[0, 1]).unwrap();
        let want = vec![
            (0.0, 0.0),
            (0.0, 0.5),
            (0.25, 0.5),
            (0.5, 1.0),
            (0.75, 1.0),
            (1.0, 1.0),
        ];
        assert_eq!(roc.points, want);
        // pairwise: 0.6 beats all four negatives, 0.3 beats two and ties one
        assert!((roc.auc - 6.5 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pool_rejected() {
        assert!(micro_roc(&[], &[]).is_err());
        assert!(micro_roc(&[[0.2, 0.3, 0.5]], &[3]).is_err());
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(mse_cdf(&[0.002]).unwrap(), vec![(0.002, 1.0)]);
        assert_eq!(mse_cdf(&[0.5, 0.5, 0.5]).unwrap(), vec![(0.5, 1.0)]);
        assert_eq!(mse_cdf(&[3.0, 1.0, 1.0, 2.0]).unwrap(), vec![(1.0, 0.5), (2.0, 0.75), (3.0, 1.0)]);
        assert!(mse_cdf(&[]).is_err());
    }

    #[test]
    fn nearest_rank_convention() {
        assert_eq!(nearest_rank(10, 10), 0);
        assert_eq!(nearest_rank(50, 10), 4);
        assert_eq!(nearest_rank(90, 10), 8);
        assert_eq!(nearest_rank(100, 10), 9);
        assert_eq!(nearest_rank(1, 3), 0);
        assert_eq!(nearest_rank(50, 1), 0);
    }

    #[test]
    fn ratio_table_excludes_zero_clean() {
        let t = ratio_percentiles(&[(0.0, 1.0, 0.1), (1.0, 2.0, 0.2), (1.0, 3.0, 0.3)], &[50, 100]).unwrap();
        assert_eq!(t.excluded, 1);
        assert_eq!(t.rows, vec![(50, 2.0, 0.2), (100, 3.0, 0.3)]);
        assert_eq!(t.max_ratio, 3.0);
    }

    #[test]
    fn summary_keys() {
        let s = EvalReport::default().summary();
        assert_eq!(s, "auc_clean=NA\nauc_attacked=NA\nmax_ratio=NA\nn_images=0\nsuccess_rate=NA\n");
    }
}
