//! Patient-grouped train/val/test splitting: all scans of one patient land
//! in the same split, patient counts within ±1 of the requested ratios,
//! deterministic per seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::manifest::{DatasetManifest, Split};

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
}

/// Assign split tags by patient. Patients are shuffled with a seeded RNG and
/// dealt to train/val/test so each achieved patient count is within ±1 of
/// `ratio × n_patients`.
pub fn patient_grouped_split(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest, SplitError> {
    if manifest.is_empty() {
        return Err(SplitError::EmptyManifest);
    }
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&v| v <= 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(r));
    }

    // BTreeMap gives a deterministic patient ordering before the shuffle.
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in manifest.rows.iter().enumerate() {
        by_patient.entry(&row.patient_id).or_default().push(i);
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let p = patients.len();
    let n_train = (ratios.0 * p as f64).round() as usize;
    let n_val = ((ratios.1 * p as f64).round() as usize).min(p - n_train.min(p));
    let n_train = n_train.min(p);

    let mut out = manifest.clone();
    for (rank, patient) in patients.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        for &row_idx in &by_patient[patient] {
            out.rows[row_idx].split = split;
        }
    }
    Ok(out)
}
