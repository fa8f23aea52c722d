//! Selective-classification and OOD metrics over uncertainty scores.
//!
//! All metrics are rank-based, so any strictly increasing transform of the
//! uncertainty scores leaves them unchanged. Ties are always broken by
//! stable sample order, which keeps runs byte-reproducible.

use crate::error::{Error, Result};
use crate::likelihood::ScoreRecord;

/// Aligned arrays of per-sample uncertainty and outcome bits.
#[derive(Debug, Clone)]
pub struct EvalTable {
    uncertainty: Vec<f64>,
    correctness: Option<Vec<bool>>,
    ood_flag: Option<Vec<bool>>,
}

impl EvalTable {
    /// Table for selective classification: `correctness[i]` is 1 when the
    /// downstream prediction for sample `i` was right.
    pub fn selective(uncertainty: Vec<f64>, correctness: Vec<bool>) -> Result<Self> {
        Self::validate_scores(&uncertainty)?;
        if uncertainty.len() != correctness.len() {
            return Err(Error::DimensionMismatch {
                expected: uncertainty.len(),
                got: correctness.len(),
            });
        }
        Ok(EvalTable {
            uncertainty,
            correctness: Some(correctness),
            ood_flag: None,
        })
    }

    /// Table for OOD detection: `ood_flag[i]` marks the positives.
    pub fn ood(uncertainty: Vec<f64>, ood_flag: Vec<bool>) -> Result<Self> {
        Self::validate_scores(&uncertainty)?;
        if uncertainty.len() != ood_flag.len() {
            return Err(Error::DimensionMismatch {
                expected: uncertainty.len(),
                got: ood_flag.len(),
            });
        }
        Ok(EvalTable {
            uncertainty,
            correctness: None,
            ood_flag: Some(ood_flag),
        })
    }

    fn validate_scores(u: &[f64]) -> Result<()> {
        if u.is_empty() {
            return Err(Error::EmptyInput);
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("uncertainty scores"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.uncertainty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uncertainty.is_empty()
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    /// Indices ordered from most to least uncertain, ties by sample order.
    fn descending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.uncertainty[b]
                .partial_cmp(&self.uncertainty[a])
                .expect("scores validated finite")
        });
        order
    }
}

/// Retained-set accuracy per rejection fraction.
#[derive(Debug, Clone)]
pub struct RejectionCurve {
    pub fractions: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// The 19-point grid 0, 0.05, ..., 0.90.
pub fn default_rejection_grid() -> Vec<f64> {
    (0..=18).map(|i| i as f64 * 0.05).collect()
}

/// For each fraction `r`, drops the `ceil(r n)` most uncertain samples and
/// reports the mean correctness of the remainder.
pub fn rejection_curve(table: &EvalTable, grid: &[f64]) -> Result<RejectionCurve> {
    let correctness = table
        .correctness
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("table has no correctness bits".into()))?;
    if grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "rejection fractions must be strictly increasing".into(),
        ));
    }
    if grid.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::InvalidConfig(
            "rejection fractions must lie in [0, 1]".into(),
        ));
    }
    let n = table.len();
    if n < grid.len() {
        return Err(Error::InvalidConfig(format!(
            "need at least {} samples for a {}-point grid, got {n}",
            grid.len(),
            grid.len()
        )));
    }

    let order = table.descending_order();
    let mut accuracies = Vec::with_capacity(grid.len());
    for &r in grid {
        let drop = (r * n as f64).ceil() as usize;
        let retained = &order[drop.min(n)..];
        if retained.is_empty() {
            return Err(Error::EmptyRetainedSet { fraction: r });
        }
        let correct = retained.iter().filter(|&&i| correctness[i]).count();
        accuracies.push(correct as f64 / retained.len() as f64);
    }
    Ok(RejectionCurve {
        fractions: grid.to_vec(),
        accuracies,
    })
}

/// Retained accuracy at a single rejection fraction (default interest: 0.90).
pub fn acc_at_rejection(table: &EvalTable, r: f64) -> Result<f64> {
    let curve = rejection_curve_single(table, r)?;
    Ok(curve)
}

fn rejection_curve_single(table: &EvalTable, r: f64) -> Result<f64> {
    let correctness = table
        .correctness
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("table has no correctness bits".into()))?;
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidConfig("fraction must lie in [0, 1]".into()));
    }
    let n = table.len();
    let order = table.descending_order();
    let drop = (r * n as f64).ceil() as usize;
    let retained = &order[drop.min(n)..];
    if retained.is_empty() {
        return Err(Error::EmptyRetainedSet { fraction: r });
    }
    let correct = retained.iter().filter(|&&i| correctness[i]).count();
    Ok(correct as f64 / retained.len() as f64)
}

/// Spearman rank correlation along a rejection curve, with a flag for the
/// degenerate constant-accuracy case (reported as 0).
#[derive(Debug, Clone, Copy)]
pub struct SpearmanS {
    pub value: f64,
    pub degenerate: bool,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Rank correlation between rejection fraction and retained accuracy; 1.0
/// means rejecting more always helps. Ties get average ranks.
pub fn spearman_s(curve: &RejectionCurve) -> Result<SpearmanS> {
    if curve.fractions.len() < 3 {
        return Err(Error::InvalidConfig(
            "spearman needs at least 3 grid points".into(),
        ));
    }
    let rx = average_ranks(&curve.fractions);
    let ry = average_ranks(&curve.accuracies);
    match pearson(&rx, &ry) {
        Some(v) => Ok(SpearmanS {
            value: v,
            degenerate: false,
        }),
        None => Ok(SpearmanS {
            value: 0.0,
            degenerate: true,
        }),
    }
}

/// ROC and PR curves with their areas, treating OOD as the positive class
/// and high uncertainty as positive-indicating.
#[derive(Debug, Clone)]
pub struct RocPr {
    /// (false positive rate, true positive rate), threshold descending.
    pub roc: Vec<(f64, f64)>,
    pub auroc: f64,
    /// (recall, precision), threshold descending.
    pub pr: Vec<(f64, f64)>,
    pub aupr: f64,
}

/// Threshold sweep over the uncertainty scores. Tied scores enter together,
/// which makes the trapezoidal AUROC equal to the Mann-Whitney statistic
/// with half-credit for ties.
pub fn roc_pr(table: &EvalTable) -> Result<RocPr> {
    let flags = table
        .ood_flag
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("table has no OOD flags".into()))?;
    let n_pos = flags.iter().filter(|&&f| f).count();
    let n_neg = table.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }

    let order = table.descending_order();
    let mut roc = vec![(0.0, 0.0)];
    let mut pr = Vec::new();
    let mut auroc = 0.0;
    let mut aupr = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr, mut prev_recall) = (0.0f64, 0.0f64, 0.0f64);

    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group at this threshold.
        let mut j = i;
        while j + 1 < order.len()
            && table.uncertainty[order[j + 1]] == table.uncertainty[order[i]]
        {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if flags[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        let precision = tp as f64 / (tp + fp) as f64;

        auroc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        aupr += (tpr - prev_recall) * precision;

        roc.push((fpr, tpr));
        pr.push((tpr, precision));
        prev_tpr = tpr;
        prev_fpr = fpr;
        prev_recall = tpr;
        i = j + 1;
    }

    Ok(RocPr {
        roc,
        auroc,
        pr,
        aupr,
    })
}

/// Positions of the `k` highest uncertainties, descending, stable ties.
pub fn rank_descending(uncertainty: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > uncertainty.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds available {} samples",
            uncertainty.len()
        )));
    }
    if uncertainty.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("uncertainty scores"));
    }
    let mut order: Vec<usize> = (0..uncertainty.len()).collect();
    order.sort_by(|&a, &b| uncertainty[b].partial_cmp(&uncertainty[a]).expect("finite"));
    order.truncate(k);
    Ok(order)
}

/// Curation list: ids of the `top_k` most uncertain score records.
pub fn curation_rank(scores: &[ScoreRecord], top_k: usize) -> Result<Vec<usize>> {
    let unc: Vec<f64> = scores.iter().map(|s| s.uncertainty).collect();
    rank_descending(&unc, top_k)
}

/// `fraction,accuracy` CSV for external plotting.
pub fn curve_csv(curve: &RejectionCurve) -> String {
    let mut out = String::from("fraction,accuracy\n");
    for (f, a) in curve.fractions.iter().zip(&curve.accuracies) {
        out.push_str(&format!("{f},{a}\n"));
    }
    out
}

/// `fpr,tpr` CSV of the ROC curve.
pub fn roc_csv(rp: &RocPr) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in &rp.roc {
        out.push_str(&format!("{fpr},{tpr}\n"));
    }
    out
}

/// `recall,precision` CSV of the PR curve.
pub fn pr_csv(rp: &RocPr) -> String {
    let mut out = String::from("recall,precision\n");
    for (r, p) in &rp.pr {
        out.push_str(&format!("{r},{p}\n"));
    }
    out
}

/// One machine-readable metric record (line-delimited JSON).
pub fn metric_line(name: &str, value: f64) -> String {
    format!("{{\"metric\":\"{name}\",\"value\":{value}}}")
}
