//! Prediction ensembling: the unweighted per-cell mean of member tables.
//!
//! The cell mean sums member values in sorted order and clamps into the
//! member min/max, which makes permutation invariance, idempotence, and
//! bounding hold exactly in floating point.

use std::collections::HashMap;

use thiserror::Error;

use crate::train::{PredictionRow, PredictionTable};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member table")]
    EmptyEnsemble,
    #[error("member {member} covers a different scan set (at scan {scan_id})")]
    ScanSetMismatch { member: usize, scan_id: String },
    #[error("scheme {scheme} needs exactly {expected} members, got {got}")]
    WrongMemberCount {
        scheme: &'static str,
        expected: usize,
        got: usize,
    },
}

/// The two ensembling schemes: the 5 single-ROI models, or those plus the
/// multi-ROI model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleScheme {
    RoiOnly,
    All,
}

impl EnsembleScheme {
    pub fn expected_members(self) -> usize {
        match self {
            EnsembleScheme::RoiOnly => 5,
            EnsembleScheme::All => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnsembleScheme::RoiOnly => "roi",
            EnsembleScheme::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "roi" => Some(EnsembleScheme::RoiOnly),
            "all" => Some(EnsembleScheme::All),
            _ => None,
        }
    }
}

/// Validate a member list against a scheme's required count.
pub fn check_scheme(scheme: EnsembleScheme, members: usize) -> Result<(), EnsembleError> {
    if members != scheme.expected_members() {
        return Err(EnsembleError::WrongMemberCount {
            scheme: scheme.name(),
            expected: scheme.expected_members(),
            got: members,
        });
    }
    Ok(())
}

fn mean_cell(values: &mut [f64]) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return values[0];
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite prediction"));
    let lo = values[0];
    let hi = values[values.len() - 1];
    let sum: f64 = values.iter().sum();
    (sum / values.len() as f64).clamp(lo, hi)
}

/// Per scan and vertebra, the unweighted arithmetic mean of member
/// predictions. All tables must cover the same scan set; output row order
/// follows the first member.
pub fn ensemble_mean(tables: &[PredictionTable]) -> Result<PredictionTable, EnsembleError> {
    let first = tables.first().ok_or(EnsembleError::EmptyEnsemble)?;
    let n = first.rows.len();
    let indexes: Vec<HashMap<&str, usize>> = tables
        .iter()
        .map(|t| {
            t.rows
                .iter()
                .enumerate()
                .map(|(i, r)| (r.scan_id.as_str(), i))
                .collect()
        })
        .collect();
    for (m, table) in tables.iter().enumerate().skip(1) {
        if table.rows.len() != n {
            let scan_id = table
                .rows
                .iter()
                .find(|r| !indexes[0].contains_key(r.scan_id.as_str()))
                .map(|r| r.scan_id.clone())
                .unwrap_or_else(|| "<count mismatch>".to_string());
            return Err(EnsembleError::ScanSetMismatch { member: m, scan_id });
        }
    }

    let mut rows = Vec::with_capacity(n);
    for row in &first.rows {
        let mut member_rows: Vec<&PredictionRow> = Vec::with_capacity(tables.len());
        for (m, table) in tables.iter().enumerate() {
            match indexes[m].get(row.scan_id.as_str()) {
                Some(&i) => member_rows.push(&table.rows[i]),
                None => {
                    return Err(EnsembleError::ScanSetMismatch {
                        member: m,
                        scan_id: row.scan_id.clone(),
                    })
                }
            }
        }
        let mut pred = [0.0; 4];
        for (v, slot) in pred.iter_mut().enumerate() {
            let mut values: Vec<f64> = member_rows.iter().map(|r| r.pred[v]).collect();
            *slot = mean_cell(&mut values);
        }
        rows.push(PredictionRow {
            scan_id: row.scan_id.clone(),
            patient_id: row.patient_id.clone(),
            pred,
        });
    }
    Ok(PredictionTable { rows })
}
