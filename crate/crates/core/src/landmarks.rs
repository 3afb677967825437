//! The 16-landmark schema anchoring bone structures on a radiograph, plus
//! the plain-text landmark file format.
//!
//! File format: one `NAME x y` line per landmark with normalized decimal
//! coordinates, `#` comments allowed, optional `IMAGE_SIZE w h` line for
//! provenance. Parsing is order-insensitive.

use std::fmt;

use thiserror::Error;

/// 2-D point in normalized image coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Names of the 16 landmarks: 3 per clavicle, 4 per rib cage side, one on the
/// cervical spine and one on the T12 vertebra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LandmarkName {
    ClavL1,
    ClavL2,
    ClavL3,
    ClavR1,
    ClavR2,
    ClavR3,
    RibL1,
    RibL2,
    RibL3,
    RibL4,
    RibR1,
    RibR2,
    RibR3,
    RibR4,
    Cerv1,
    T12,
}

impl LandmarkName {
    pub const ALL: [LandmarkName; 16] = [
        LandmarkName::ClavL1,
        LandmarkName::ClavL2,
        LandmarkName::ClavL3,
        LandmarkName::ClavR1,
        LandmarkName::ClavR2,
        LandmarkName::ClavR3,
        LandmarkName::RibL1,
        LandmarkName::RibL2,
        LandmarkName::RibL3,
        LandmarkName::RibL4,
        LandmarkName::RibR1,
        LandmarkName::RibR2,
        LandmarkName::RibR3,
        LandmarkName::RibR4,
        LandmarkName::Cerv1,
        LandmarkName::T12,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LandmarkName::ClavL1 => "CLAV_L_1",
            LandmarkName::ClavL2 => "CLAV_L_2",
            LandmarkName::ClavL3 => "CLAV_L_3",
            LandmarkName::ClavR1 => "CLAV_R_1",
            LandmarkName::ClavR2 => "CLAV_R_2",
            LandmarkName::ClavR3 => "CLAV_R_3",
            LandmarkName::RibL1 => "RIB_L_1",
            LandmarkName::RibL2 => "RIB_L_2",
            LandmarkName::RibL3 => "RIB_L_3",
            LandmarkName::RibL4 => "RIB_L_4",
            LandmarkName::RibR1 => "RIB_R_1",
            LandmarkName::RibR2 => "RIB_R_2",
            LandmarkName::RibR3 => "RIB_R_3",
            LandmarkName::RibR4 => "RIB_R_4",
            LandmarkName::Cerv1 => "CERV_1",
            LandmarkName::T12 => "T12_1",
        }
    }

    pub fn parse(s: &str) -> Option<LandmarkName> {
        LandmarkName::ALL.iter().copied().find(|n| n.as_str() == s)
    }

    fn index(self) -> usize {
        LandmarkName::ALL.iter().position(|&n| n == self).unwrap()
    }

    /// Left/right counterpart under a horizontal flip ("L"/"R" are image
    /// sides, not anatomical sides). Midline landmarks map to themselves.
    pub fn mirrored(self) -> LandmarkName {
        match self {
            LandmarkName::ClavL1 => LandmarkName::ClavR1,
            LandmarkName::ClavL2 => LandmarkName::ClavR2,
            LandmarkName::ClavL3 => LandmarkName::ClavR3,
            LandmarkName::ClavR1 => LandmarkName::ClavL1,
            LandmarkName::ClavR2 => LandmarkName::ClavL2,
            LandmarkName::ClavR3 => LandmarkName::ClavL3,
            LandmarkName::RibL1 => LandmarkName::RibR1,
            LandmarkName::RibL2 => LandmarkName::RibR2,
            LandmarkName::RibL3 => LandmarkName::RibR3,
            LandmarkName::RibL4 => LandmarkName::RibR4,
            LandmarkName::RibR1 => LandmarkName::RibL1,
            LandmarkName::RibR2 => LandmarkName::RibL2,
            LandmarkName::RibR3 => LandmarkName::RibL3,
            LandmarkName::RibR4 => LandmarkName::RibL4,
            LandmarkName::Cerv1 => LandmarkName::Cerv1,
            LandmarkName::T12 => LandmarkName::T12,
        }
    }
}

impl fmt::Display for LandmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LandmarkError {
    #[error("missing landmark {0}")]
    MissingLandmark(String),
    #[error("duplicate landmark {0}")]
    DuplicateLandmark(String),
    #[error("coordinate out of range for {name}: {value}")]
    OutOfRangeCoordinate { name: String, value: f64 },
    #[error("malformed landmark line {line_no}: {text}")]
    MalformedLine { line_no: usize, text: String },
}

/// The 16 named landmarks of one radiograph, coordinates normalized to
/// [0, 1]². `image_size` is provenance from the source file when present.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: [Point; 16],
    pub image_size: Option<(u32, u32)>,
}

impl LandmarkSet {
    /// Build from complete per-name coordinates, enforcing the [0, 1] bound.
    pub fn new(
        points: [Point; 16],
        image_size: Option<(u32, u32)>,
    ) -> Result<Self, LandmarkError> {
        for (name, p) in LandmarkName::ALL.iter().zip(points.iter()) {
            for v in [p.x, p.y] {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(LandmarkError::OutOfRangeCoordinate {
                        name: name.as_str().to_string(),
                        value: v,
                    });
                }
            }
        }
        Ok(Self { points, image_size })
    }

    /// Build without the [0, 1] bound check. Augmentation can legitimately
    /// move landmarks slightly outside the unit square; geometry tolerates
    /// box corners out to [-0.25, 1.25].
    pub fn new_unchecked(points: [Point; 16], image_size: Option<(u32, u32)>) -> Self {
        Self { points, image_size }
    }

    pub fn get(&self, name: LandmarkName) -> Point {
        self.points[name.index()]
    }

    pub fn set(&mut self, name: LandmarkName, p: Point) {
        self.points[name.index()] = p;
    }

    pub fn iter(&self) -> impl Iterator<Item = (LandmarkName, Point)> + '_ {
        LandmarkName::ALL.iter().map(move |&n| (n, self.points[n.index()]))
    }

    /// Apply `f` to every coordinate, keeping names in place.
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> LandmarkSet {
        let mut points = self.points;
        for p in &mut points {
            *p = f(*p);
        }
        LandmarkSet {
            points,
            image_size: self.image_size,
        }
    }

    /// Mirror about the vertical midline: x -> 1-x with L/R names swapped.
    pub fn hflip(&self) -> LandmarkSet {
        let mut points = self.points;
        for name in LandmarkName::ALL {
            let src = self.points[name.index()];
            points[name.mirrored().index()] = Point::new(1.0 - src.x, src.y);
        }
        LandmarkSet {
            points,
            image_size: self.image_size,
        }
    }

    /// Canonical file serialization; `parse_landmark_file` inverts it.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        if let Some((w, h)) = self.image_size {
            out.push_str(&format!("IMAGE_SIZE {} {}\n", w, h));
        }
        for (name, p) in self.iter() {
            out.push_str(&format!("{} {} {}\n", name, p.x, p.y));
        }
        out
    }
}

/// Parse the plain-text landmark format. Order-insensitive; requires exactly
/// the 16 schema names, each once, coordinates finite in [0, 1].
pub fn parse_landmark_file(text: &str) -> Result<LandmarkSet, LandmarkError> {
    let mut seen = [false; 16];
    let mut points = [Point::new(0.0, 0.0); 16];
    let mut image_size = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap();
        if head == "IMAGE_SIZE" {
            let w = parts.next().and_then(|s| s.parse::<u32>().ok());
            let h = parts.next().and_then(|s| s.parse::<u32>().ok());
            match (w, h, parts.next()) {
                (Some(w), Some(h), None) if w > 0 && h > 0 => image_size = Some((w, h)),
                _ => {
                    return Err(LandmarkError::MalformedLine {
                        line_no,
                        text: raw.to_string(),
                    })
                }
            }
            continue;
        }
        let name = LandmarkName::parse(head).ok_or_else(|| LandmarkError::MalformedLine {
            line_no,
            text: raw.to_string(),
        })?;
        let x = parts.next().and_then(|s| s.parse::<f64>().ok());
        let y = parts.next().and_then(|s| s.parse::<f64>().ok());
        let (x, y) = match (x, y, parts.next()) {
            (Some(x), Some(y), None) => (x, y),
            _ => {
                return Err(LandmarkError::MalformedLine {
                    line_no,
                    text: raw.to_string(),
                })
            }
        };
        if seen[name.index()] {
            return Err(LandmarkError::DuplicateLandmark(name.as_str().to_string()));
        }
        for v in [x, y] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(LandmarkError::OutOfRangeCoordinate {
                    name: name.as_str().to_string(),
                    value: v,
                });
            }
        }
        seen[name.index()] = true;
        points[name.index()] = Point::new(x, y);
    }

    for (i, name) in LandmarkName::ALL.iter().enumerate() {
        if !seen[i] {
            return Err(LandmarkError::MissingLandmark(name.as_str().to_string()));
        }
    }
    Ok(LandmarkSet { points, image_size })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_file() -> String {
        LandmarkName::ALL
            .iter()
            .map(|n| format!("{} 0.5 0.5\n", n))
            .collect()
    }

    #[test]
    fn parses_all_sixteen_at_half() {
        let set = parse_landmark_file(&uniform_file()).unwrap();
        for (_, p) in set.iter() {
            assert_eq!(p, Point::new(0.5, 0.5));
        }
    }

    #[test]
    fn missing_t12_is_reported() {
        let text: String = LandmarkName::ALL
            .iter()
            .filter(|n| **n != LandmarkName::T12)
            .map(|n| format!("{} 0.5 0.5\n", n))
            .collect();
        assert_eq!(
            parse_landmark_file(&text),
            Err(LandmarkError::MissingLandmark("T12_1".into()))
        );
    }

    #[test]
    fn out_of_range_coordinate_is_reported() {
        let mut text = uniform_file();
        text = text.replace("CERV_1 0.5 0.5", "CERV_1 1.2 0.3");
        match parse_landmark_file(&text) {
            Err(LandmarkError::OutOfRangeCoordinate { name, value }) => {
                assert_eq!(name, "CERV_1");
                assert_eq!(value, 1.2);
            }
            other => panic!("expected OutOfRangeCoordinate, got {:?}", other),
        }
    }

    #[test]
    fn duplicate_is_reported() {
        let mut text = uniform_file();
        text.push_str("CERV_1 0.4 0.4\n");
        assert_eq!(
            parse_landmark_file(&text),
            Err(LandmarkError::DuplicateLandmark("CERV_1".into()))
        );
    }

    #[test]
    fn malformed_line_is_reported_with_number() {
        let text = "CLAV_L_1 0.5\n";
        match parse_landmark_file(text) {
            Err(LandmarkError::MalformedLine { line_no, .. }) => assert_eq!(line_no, 1),
            other => panic!("expected MalformedLine, got {:?}", other),
        }
    }

    #[test]
    fn comments_and_order_are_ignored() {
        let mut lines: Vec<String> = LandmarkName::ALL
            .iter()
            .map(|n| format!("{} 0.25 0.75", n))
            .collect();
        lines.reverse();
        let text = format!("# header\n{}\n # trailing comment\n", lines.join("\n"));
        let set = parse_landmark_file(&text).unwrap();
        assert_eq!(set.get(LandmarkName::ClavL1), Point::new(0.25, 0.75));
    }

    #[test]
    fn round_trip_through_file_string() {
        let mut set = parse_landmark_file(&uniform_file()).unwrap();
        set.set(LandmarkName::RibL3, Point::new(0.125, 0.625));
        set.image_size = Some((512, 512));
        let text = set.to_file_string();
        let back = parse_landmark_file(&text).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn hflip_swaps_sides_and_mirrors_x() {
        let mut set = parse_landmark_file(&uniform_file()).unwrap();
        set.set(LandmarkName::ClavL1, Point::new(0.2, 0.3));
        let flipped = set.hflip();
        let p = flipped.get(LandmarkName::ClavR1);
        assert!((p.x - 0.8).abs() < 1e-15);
        assert!((p.y - 0.3).abs() < 1e-15);
    }
}
