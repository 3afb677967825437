//! Dataset manifest: one row per scan binding image path, landmark path,
//! patient id, ground-truth L1–L4 BMDs, and the split tag.
//!
//! CSV with the exact header
//! `scan_id,patient_id,image_path,landmark_path,gt_L1,gt_L2,gt_L3,gt_L4,split`.
//! Missing ground truth is an empty field, never 0. Paths are stored as
//! written and resolved relative to the manifest's directory. Fields must not
//! contain commas or newlines (no quoting).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MANIFEST_HEADER: &str =
    "scan_id,patient_id,image_path,landmark_path,gt_L1,gt_L2,gt_L3,gt_L4,split";

pub const VERTEBRAE: [&str; 4] = ["L1", "L2", "L3", "L4"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Unset,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unset => "unset",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "unset" | "" => Some(Split::Unset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub scan_id: String,
    pub patient_id: String,
    pub image_path: PathBuf,
    pub landmark_path: PathBuf,
    /// Ground-truth BMD per vertebra (g/cm²), L1..L4; None = missing.
    pub gt: [Option<f64>; 4],
    pub split: Split,
}

impl ManifestRow {
    fn to_csv_line(&self) -> String {
        let gt: Vec<String> = self
            .gt
            .iter()
            .map(|g| g.map(|v| v.to_string()).unwrap_or_default())
            .collect();
        format!(
            "{},{},{},{},{},{}",
            self.scan_id,
            self.patient_id,
            self.image_path.display(),
            self.landmark_path.display(),
            gt.join(","),
            self.split.as_str()
        )
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest line {line_no}: {reason}")]
    MalformedManifest { line_no: usize, reason: String },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unresolvable path referenced by scan {scan_id}: {path}")]
    UnresolvablePath { scan_id: String, path: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn find(&self, scan_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.scan_id == scan_id)
    }

    pub fn rows_for(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == MANIFEST_HEADER => {}
            other => {
                return Err(ManifestError::MalformedManifest {
                    line_no: 1,
                    reason: format!(
                        "expected header `{MANIFEST_HEADER}`, got {:?}",
                        other.map(|(_, l)| l)
                    ),
                })
            }
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(ManifestError::MalformedManifest {
                    line_no,
                    reason: format!("expected 9 fields, got {}", fields.len()),
                });
            }
            let scan_id = fields[0].to_string();
            if scan_id.is_empty() {
                return Err(ManifestError::MalformedManifest {
                    line_no,
                    reason: "empty scan_id".into(),
                });
            }
            if !seen.insert(scan_id.clone()) {
                return Err(ManifestError::MalformedManifest {
                    line_no,
                    reason: format!("duplicate scan_id {scan_id}"),
                });
            }
            let mut gt = [None; 4];
            for (v, slot) in gt.iter_mut().enumerate() {
                let raw = fields[4 + v];
                if raw.is_empty() {
                    continue;
                }
                let value: f64 = raw.parse().map_err(|_| ManifestError::MalformedManifest {
                    line_no,
                    reason: format!("bad gt_{} value `{raw}`", VERTEBRAE[v]),
                })?;
                if !value.is_finite() || value <= 0.0 || value >= 3.0 {
                    return Err(ManifestError::MalformedManifest {
                        line_no,
                        reason: format!("gt_{} out of (0, 3): {value}", VERTEBRAE[v]),
                    });
                }
                *slot = Some(value);
            }
            let split = Split::parse(fields[8]).ok_or_else(|| ManifestError::MalformedManifest {
                line_no,
                reason: format!("unknown split tag `{}`", fields[8]),
            })?;
            rows.push(ManifestRow {
                scan_id,
                patient_id: fields[1].to_string(),
                image_path: PathBuf::from(fields[2]),
                landmark_path: PathBuf::from(fields[3]),
                gt,
                split,
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_csv()).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load a manifest; with `check_paths` every referenced file must exist
    /// (relative paths resolve against the manifest's directory).
    pub fn load(path: &Path, check_paths: bool) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest = Self::parse(&text)?;
        if check_paths {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            for row in &manifest.rows {
                for p in [&row.image_path, &row.landmark_path] {
                    let resolved = resolve_path(base, p);
                    if !resolved.exists() {
                        return Err(ManifestError::UnresolvablePath {
                            scan_id: row.scan_id.clone(),
                            path: resolved.display().to_string(),
                        });
                    }
                }
            }
        }
        Ok(manifest)
    }
}

/// Resolve a manifest-relative path.
pub fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        DatasetManifest::new(vec![
            ManifestRow {
                scan_id: "S0001".into(),
                patient_id: "P01".into(),
                image_path: "img/S0001.png".into(),
                landmark_path: "lms/S0001.txt".into(),
                gt: [Some(0.85), Some(0.9), None, Some(1.05)],
                split: Split::Train,
            },
            ManifestRow {
                scan_id: "S0002".into(),
                patient_id: "P01".into(),
                image_path: "img/S0002.png".into(),
                landmark_path: "lms/S0002.txt".into(),
                gt: [Some(0.7), Some(0.72), Some(0.74), Some(0.8)],
                split: Split::Unset,
            },
        ])
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = sample();
        let csv = m.to_csv();
        let back = DatasetManifest::parse(&csv).unwrap();
        assert_eq!(m, back);
        assert_eq!(csv, back.to_csv());
    }

    #[test]
    fn duplicate_scan_id_is_rejected() {
        let mut m = sample();
        m.rows[1].scan_id = "S0001".into();
        let err = DatasetManifest::parse(&m.to_csv()).unwrap_err();
        assert!(matches!(err, ManifestError::MalformedManifest { .. }));
    }

    #[test]
    fn empty_gt_field_loads_as_missing() {
        let m = DatasetManifest::parse(&sample().to_csv()).unwrap();
        assert_eq!(m.rows[0].gt[2], None);
        assert_eq!(m.rows[0].gt[0], Some(0.85));
    }

    #[test]
    fn out_of_range_gt_is_rejected() {
        let csv = format!("{MANIFEST_HEADER}\nS1,P1,a.png,a.txt,0,0.9,0.9,0.9,train\n");
        assert!(DatasetManifest::parse(&csv).is_err());
        let csv = format!("{MANIFEST_HEADER}\nS1,P1,a.png,a.txt,3.5,0.9,0.9,0.9,train\n");
        assert!(DatasetManifest::parse(&csv).is_err());
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(DatasetManifest::parse("scan,patient\n").is_err());
    }
}
