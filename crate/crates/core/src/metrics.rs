//! Evaluation metrics: Pearson correlation, BMD→T-score conversion,
//! osteoporosis labeling at T ≤ −2.5, rank-based AUC with midrank tie
//! handling, and the per-vertebra evaluation report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{DatasetManifest, VERTEBRAE};
use crate::train::PredictionTable;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("constant sequence has no defined correlation")]
    ConstantSequence,
    #[error("need at least 2 paired values, got {0}")]
    TooFewValues(usize),
    #[error("AUC needs both classes; got a single class")]
    SingleClass,
    #[error("invalid T-score table: {0}")]
    InvalidTable(String),
    #[error("prediction scan_id {0} has no ground-truth row")]
    JoinFailure(String),
    #[error("vertebra {0} has fewer than 2 evaluable rows")]
    TooFewRows(&'static str),
}

/// Product-moment correlation of two equal-length, non-constant sequences.
pub fn pearson_r(pred: &[f64], gt: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(MetricsError::TooFewValues(pred.len()));
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = gt.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in pred.iter().zip(gt) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ConstantSequence);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (midranks for ties): Pearson on the ranks.
pub fn spearman_r(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let ra = midranks(a);
    let rb = midranks(b);
    pearson_r(&ra, &rb)
}

/// Midranks (1-based; ties get the average of their rank range).
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("non-finite value"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Piecewise-linear BMD→T-score table with linear extrapolation beyond the
/// knots. Both coordinates must be strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TScoreTable {
    knots: Vec<(f64, f64)>,
}

impl TScoreTable {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, MetricsError> {
        if knots.len() < 2 {
            return Err(MetricsError::InvalidTable(
                "need at least two knots".into(),
            ));
        }
        for pair in knots.windows(2) {
            if pair[1].0 <= pair[0].0 || pair[1].1 <= pair[0].1 {
                return Err(MetricsError::InvalidTable(format!(
                    "knots must be strictly increasing in both coordinates: {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        for &(b, t) in &knots {
            if !b.is_finite() || !t.is_finite() {
                return Err(MetricsError::InvalidTable("non-finite knot".into()));
            }
        }
        Ok(Self { knots })
    }

    /// Default table for synthetic experiments: T = -2.5 at BMD 0.7, T = 0 at
    /// BMD 1.0. AUC is invariant to the exact monotone table, so this choice
    /// cannot bias the headline metric; real use loads the DXA machine's
    /// table.
    pub fn synthetic_default() -> Self {
        Self::new(vec![(0.7, -2.5), (1.0, 0.0)]).unwrap()
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn bmd_to_tscore(&self, bmd: f64) -> f64 {
        let k = &self.knots;
        // Segment for interpolation; first/last segment extrapolates.
        let seg = match k.iter().position(|&(b, _)| bmd < b) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => k.len() - 2,
        };
        let (b0, t0) = k[seg];
        let (b1, t1) = k[seg + 1];
        t0 + (bmd - b0) * (t1 - t0) / (b1 - b0)
    }

    /// Parse `bmd t_score` lines (whitespace separated, `#` comments).
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut knots = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let b = parts.next().and_then(|s| s.parse::<f64>().ok());
            let t = parts.next().and_then(|s| s.parse::<f64>().ok());
            match (b, t, parts.next()) {
                (Some(b), Some(t), None) => knots.push((b, t)),
                _ => {
                    return Err(MetricsError::InvalidTable(format!(
                        "malformed knot line: {raw}"
                    )))
                }
            }
        }
        Self::new(knots)
    }
}

/// Osteoporosis threshold on the T-score scale (boundary inclusive).
pub const OSTEO_T_THRESHOLD: f64 = -2.5;

/// Positive label iff the ground-truth BMD converts to T ≤ −2.5.
pub fn osteo_labels(gt_bmd: &[f64], table: &TScoreTable) -> Vec<bool> {
    gt_bmd
        .iter()
        .map(|&b| table.bmd_to_tscore(b) <= OSTEO_T_THRESHOLD)
        .collect()
}

/// Mann–Whitney AUC: probability a random positive outranks a random
/// negative, ties counted half. O(n log n) via midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let ranks = midranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-vertebra and averaged metrics plus the scatter points behind them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// R-value per vertebra, L1..L4 order.
    pub r_values: [f64; 4],
    /// AUC per vertebra, L1..L4 order.
    pub aucs: [f64; 4],
    pub average_r: f64,
    pub average_auc: f64,
    pub n_test: usize,
    /// Rows excluded per vertebra for missing ground truth.
    pub excluded: [usize; 4],
    pub threshold: f64,
}

impl EvalReport {
    /// Table-style human-readable rendering.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("vertebra   ");
        for v in VERTEBRAE {
            out.push_str(&format!("{:<16}", v));
        }
        out.push_str("Average\n");
        out.push_str("metric     ");
        for _ in 0..5 {
            out.push_str("R-value  AUC    ");
        }
        out.push('\n');
        out.push_str("model      ");
        for i in 0..4 {
            out.push_str(&format!("{:<9.3}{:<7.3}", self.r_values[i], self.aucs[i]));
        }
        out.push_str(&format!("{:<9.3}{:<7.3}\n", self.average_r, self.average_auc));
        out.push_str(&format!(
            "n_test={}  threshold T<={}  excluded={:?}\n",
            self.n_test, self.threshold, self.excluded
        ));
        out
    }
}

/// Scatter point for one vertebra: ground truth vs prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub vertebra: usize,
    pub gt_bmd: f64,
    pub pred_bmd: f64,
}

/// Join predictions with ground truth by scan_id and compute the report.
///
/// AUC orientation: osteoporosis (low T) is the positive class, so the
/// classifier score is the negated predicted T-score.
pub fn evaluate(
    predictions: &PredictionTable,
    gt: &DatasetManifest,
    table: &TScoreTable,
) -> Result<(EvalReport, Vec<ScatterPoint>), MetricsError> {
    let mut r_values = [0.0; 4];
    let mut aucs = [0.0; 4];
    let mut excluded = [0usize; 4];
    let mut scatter = Vec::new();

    let joined: Vec<(&crate::train::PredictionRow, &crate::manifest::ManifestRow)> = predictions
        .rows
        .iter()
        .map(|p| {
            gt.find(&p.scan_id)
                .map(|row| (p, row))
                .ok_or_else(|| MetricsError::JoinFailure(p.scan_id.clone()))
        })
        .collect::<Result<_, _>>()?;

    for v in 0..4 {
        let mut pred_v = Vec::new();
        let mut gt_v = Vec::new();
        for (p, row) in &joined {
            match row.gt[v] {
                Some(g) => {
                    pred_v.push(p.pred[v]);
                    gt_v.push(g);
                }
                None => excluded[v] += 1,
            }
        }
        if pred_v.len() < 2 {
            return Err(MetricsError::TooFewRows(VERTEBRAE[v]));
        }
        r_values[v] = pearson_r(&pred_v, &gt_v)?;
        let labels = osteo_labels(&gt_v, table);
        let scores: Vec<f64> = pred_v.iter().map(|&p| -table.bmd_to_tscore(p)).collect();
        aucs[v] = auc(&scores, &labels)?;
        for (&g, &p) in gt_v.iter().zip(&pred_v) {
            scatter.push(ScatterPoint {
                vertebra: v,
                gt_bmd: g,
                pred_bmd: p,
            });
        }
    }

    let report = EvalReport {
        r_values,
        aucs,
        average_r: r_values.iter().sum::<f64>() / 4.0,
        average_auc: aucs.iter().sum::<f64>() / 4.0,
        n_test: predictions.rows.len(),
        excluded,
        threshold: OSTEO_T_THRESHOLD,
    };
    Ok((report, scatter))
}

/// Serialize scatter points as `vertebra,gt_bmd,pred_bmd` CSV.
pub fn scatter_to_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from("vertebra,gt_bmd,pred_bmd\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            VERTEBRAE[p.vertebra], p.gt_bmd, p.pred_bmd
        ));
    }
    out
}

/// Parse the scatter CSV written by `scatter_to_csv`.
pub fn scatter_from_csv(text: &str) -> Result<Vec<ScatterPoint>, MetricsError> {
    let mut lines = text.lines();
    match lines.next() {
        Some("vertebra,gt_bmd,pred_bmd") => {}
        other => {
            return Err(MetricsError::InvalidTable(format!(
                "bad scatter header: {:?}",
                other
            )))
        }
    }
    let mut points = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let v = parts
            .next()
            .and_then(|s| VERTEBRAE.iter().position(|&name| name == s));
        let g = parts.next().and_then(|s| s.parse::<f64>().ok());
        let p = parts.next().and_then(|s| s.parse::<f64>().ok());
        match (v, g, p, parts.next()) {
            (Some(v), Some(g), Some(p), None) => points.push(ScatterPoint {
                vertebra: v,
                gt_bmd: g,
                pred_bmd: p,
            }),
            _ => {
                return Err(MetricsError::InvalidTable(format!(
                    "bad scatter line: {line}"
                )))
            }
        }
    }
    Ok(points)
}

/// O(n²) pairwise AUC used as an independent oracle in tests: counts wins
/// and half-counts ties over all positive/negative pairs.
pub fn auc_bruteforce(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::SingleClass);
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pearson_self_correlation_is_one() {
        let x = [1.0, 2.0, 5.0, 3.0];
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_positive_affine_is_one() {
        let x = [1.0, 2.0, 3.0];
        let y = [2.0, 4.0, 6.0];
        assert!((pearson_r(&x, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_worked_example_is_half() {
        // Direct product-moment evaluation: cov 1, sd²s 2 and 2 -> 0.5.
        let r = pearson_r(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pearson_rejects_constant_and_mismatch() {
        assert_eq!(
            pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(MetricsError::ConstantSequence)
        );
        assert_eq!(
            pearson_r(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn tscore_knot_lookup_and_midpoint() {
        let t = TScoreTable::synthetic_default();
        assert!((t.bmd_to_tscore(1.0) - 0.0).abs() < 1e-15);
        assert!((t.bmd_to_tscore(0.7) - (-2.5)).abs() < 1e-15);
        assert!((t.bmd_to_tscore(0.85) - (-1.25)).abs() < 1e-15);
    }

    #[test]
    fn tscore_extrapolates_linearly() {
        let t = TScoreTable::synthetic_default();
        // Slope 2.5/0.3 per unit BMD on both sides.
        assert!((t.bmd_to_tscore(1.3) - 2.5).abs() < 1e-12);
        assert!((t.bmd_to_tscore(0.4) - (-5.0)).abs() < 1e-12);
    }

    #[test]
    fn tscore_rejects_non_monotone() {
        assert!(TScoreTable::new(vec![(0.7, -2.5), (0.7, 0.0)]).is_err());
        assert!(TScoreTable::new(vec![(0.7, 0.0), (1.0, -1.0)]).is_err());
    }

    #[test]
    fn osteo_labels_boundary_is_inclusive() {
        let t = TScoreTable::synthetic_default();
        // BMD 0.7 maps exactly to T = -2.5.
        let labels = osteo_labels(&[0.64, 1.0, 0.7], &t);
        assert_eq!(labels, vec![true, false, true]);
    }

    #[test]
    fn auc_worked_example() {
        // 4 pos/neg pairs: 3 wins, 1 loss -> 0.75.
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert!((auc(&scores, &labels).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_perfect_and_all_ties() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert_eq!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(MetricsError::SingleClass)
        );
    }

    #[test]
    fn auc_matches_bruteforce_with_ties() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..120);
            let mut scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..12) as f64) / 10.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            // Ensure both classes exist.
            labels[0] = true;
            if n > 1 {
                labels[1] = false;
            }
            scores[0] += 0.0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_bruteforce(&scores, &labels).unwrap();
            assert_eq!(fast, slow, "scores={scores:?} labels={labels:?}");
        }
    }

    proptest! {
        #[test]
        fn pearson_symmetry_and_affine_invariance(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..40),
            a in 0.1f64..5.0,
            b in -3.0f64..3.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, &x)| x * 0.5 + (i as f64 % 3.0)).collect();
            if pearson_r(&xs, &ys).is_err() { return Ok(()); }
            let r_xy = pearson_r(&xs, &ys).unwrap();
            let r_yx = pearson_r(&ys, &xs).unwrap();
            prop_assert!((r_xy - r_yx).abs() < 1e-12);
            let scaled: Vec<f64> = xs.iter().map(|&x| a * x + b).collect();
            let r_scaled = pearson_r(&scaled, &ys).unwrap();
            prop_assert!((r_scaled - r_xy).abs() < 1e-12);
            let negated: Vec<f64> = xs.iter().map(|&x| -a * x + b).collect();
            let r_neg = pearson_r(&negated, &ys).unwrap();
            prop_assert!((r_neg + r_xy).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            seed in 0u64..500,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.random_range(4..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            // Random strictly monotone piecewise-linear map.
            let k0 = rng.random_range(0.1..2.0);
            let k1 = rng.random_range(0.1..2.0);
            let mapped: Vec<f64> = scores
                .iter()
                .map(|&s| if s < 1.0 { s * k0 } else { k0 + (s - 1.0) * k1 })
                .collect();
            let a0 = auc(&scores, &labels).unwrap();
            let a1 = auc(&mapped, &labels).unwrap();
            prop_assert_eq!(a0, a1);
        }
    }

    #[test]
    fn spearman_handles_ties() {
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [1.0, 2.0, 2.0, 3.0];
        assert!((spearman_r(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }
}
