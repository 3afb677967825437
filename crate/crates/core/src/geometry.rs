//! Landmark-driven ROI geometry: oriented boxes, rotation-normalizing crops,
//! and the 7-crop extraction (6 local bone ROIs plus the whole chest).
//!
//! All geometry lives in normalized [0,1]² image coordinates (x right,
//! y down); angles are measured from the +x axis toward +y.

use rayon::prelude::*;
use thiserror::Error;

use crate::image::ImageBuf;
use crate::landmarks::{LandmarkName, LandmarkSet, Point};
use crate::scalar::Real;

/// The seven ROI kinds: six local bone structures plus the global chest view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoiKind {
    ClavicleL,
    ClavicleR,
    Cervical,
    RibcageL,
    RibcageR,
    T12,
    ChestGlobal,
}

impl RoiKind {
    pub const ALL: [RoiKind; 7] = [
        RoiKind::ClavicleL,
        RoiKind::ClavicleR,
        RoiKind::Cervical,
        RoiKind::RibcageL,
        RoiKind::RibcageR,
        RoiKind::T12,
        RoiKind::ChestGlobal,
    ];

    pub const LOCAL: [RoiKind; 6] = [
        RoiKind::ClavicleL,
        RoiKind::ClavicleR,
        RoiKind::Cervical,
        RoiKind::RibcageL,
        RoiKind::RibcageR,
        RoiKind::T12,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoiKind::ClavicleL => "CLAVICLE_L",
            RoiKind::ClavicleR => "CLAVICLE_R",
            RoiKind::Cervical => "CERVICAL",
            RoiKind::RibcageL => "RIBCAGE_L",
            RoiKind::RibcageR => "RIBCAGE_R",
            RoiKind::T12 => "T12",
            RoiKind::ChestGlobal => "CHEST_GLOBAL",
        }
    }

    pub fn parse(s: &str) -> Option<RoiKind> {
        RoiKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }

    pub fn index(self) -> usize {
        RoiKind::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn is_local(self) -> bool {
        self != RoiKind::ChestGlobal
    }

    /// Landmarks anchoring this ROI, ordered so the box axis runs from the
    /// first to the last entry. Point ROIs have a single anchor.
    pub fn anchor_landmarks(self) -> &'static [LandmarkName] {
        match self {
            RoiKind::ClavicleL => &[
                LandmarkName::ClavL1,
                LandmarkName::ClavL2,
                LandmarkName::ClavL3,
            ],
            RoiKind::ClavicleR => &[
                LandmarkName::ClavR1,
                LandmarkName::ClavR2,
                LandmarkName::ClavR3,
            ],
            RoiKind::Cervical => &[LandmarkName::Cerv1],
            RoiKind::RibcageL => &[
                LandmarkName::RibL1,
                LandmarkName::RibL2,
                LandmarkName::RibL3,
                LandmarkName::RibL4,
            ],
            RoiKind::RibcageR => &[
                LandmarkName::RibR1,
                LandmarkName::RibR2,
                LandmarkName::RibR3,
                LandmarkName::RibR4,
            ],
            RoiKind::T12 => &[LandmarkName::T12],
            RoiKind::ChestGlobal => &[],
        }
    }
}

impl std::fmt::Display for RoiKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Box construction parameters. `aspect_*` is the box height/width ratio
/// (height is the extent perpendicular to the box axis).
#[derive(Debug, Clone, PartialEq)]
pub struct GeoConfig {
    /// Box length along the axis as a multiple of the landmark span.
    pub width_margin: f64,
    /// Point-ROI side length as a fraction of the CLAV_L_1..CLAV_R_1 distance.
    pub point_roi_scale: f64,
    pub aspect_clavicle: f64,
    pub aspect_ribcage: f64,
    pub aspect_cervical: f64,
    pub aspect_t12: f64,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self {
            width_margin: 1.2,
            point_roi_scale: 0.35,
            aspect_clavicle: 1.0 / 3.0,
            aspect_ribcage: 2.0 / 3.0,
            aspect_cervical: 1.0,
            aspect_t12: 1.0,
        }
    }
}

impl GeoConfig {
    pub fn aspect_for(&self, kind: RoiKind) -> f64 {
        match kind {
            RoiKind::ClavicleL | RoiKind::ClavicleR => self.aspect_clavicle,
            RoiKind::RibcageL | RoiKind::RibcageR => self.aspect_ribcage,
            RoiKind::Cervical => self.aspect_cervical,
            RoiKind::T12 => self.aspect_t12,
            RoiKind::ChestGlobal => 1.0,
        }
    }

    /// Canonical form hashed into checkpoints and crop-cache keys.
    pub fn canonical_string(&self) -> String {
        format!(
            "width_margin={};point_roi_scale={};aspect_clavicle={};aspect_ribcage={};aspect_cervical={};aspect_t12={}",
            self.width_margin,
            self.point_roi_scale,
            self.aspect_clavicle,
            self.aspect_ribcage,
            self.aspect_cervical,
            self.aspect_t12,
        )
    }
}

/// Corners of produced boxes are confined to this square; boxes that would
/// exceed it are shrunk uniformly about their center (aspect preserved).
pub const BOX_BOUND: (f64, f64) = (-0.25, 1.25);

/// Oriented rectangle in normalized coordinates. `width` runs along the box
/// axis (`angle` from +x toward +y), `height` perpendicular to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point,
    pub angle: f64,
    pub width: f64,
    pub height: f64,
}

impl OrientedBox {
    pub fn full_image() -> Self {
        Self {
            center: Point::new(0.5, 0.5),
            angle: 0.0,
            width: 1.0,
            height: 1.0,
        }
    }

    pub fn axis(&self) -> (f64, f64) {
        (self.angle.cos(), self.angle.sin())
    }

    /// Map box-local coordinates (s along axis in [-w/2, w/2], t
    /// perpendicular in [-h/2, h/2]) to normalized image coordinates.
    #[inline]
    pub fn local_to_image(&self, s: f64, t: f64) -> Point {
        let (c, sn) = (self.angle.cos(), self.angle.sin());
        Point::new(
            self.center.x + s * c - t * sn,
            self.center.y + s * sn + t * c,
        )
    }

    pub fn corners(&self) -> [Point; 4] {
        let hw = self.width / 2.0;
        let hh = self.height / 2.0;
        [
            self.local_to_image(-hw, -hh),
            self.local_to_image(hw, -hh),
            self.local_to_image(hw, hh),
            self.local_to_image(-hw, hh),
        ]
    }

    /// Shrink uniformly about the center until all corners are inside
    /// `BOX_BOUND`. The height/width ratio is untouched.
    fn clamped(mut self) -> Self {
        let (lo, hi) = BOX_BOUND;
        let mut scale: f64 = 1.0;
        for corner in self.corners() {
            for (c, v) in [(self.center.x, corner.x), (self.center.y, corner.y)] {
                let d = v - c;
                if d.abs() < f64::EPSILON {
                    continue;
                }
                let limit = if d > 0.0 { hi - c } else { lo - c };
                let t = limit / d;
                if t < scale {
                    scale = t.max(0.0);
                }
            }
        }
        if scale < 1.0 {
            self.width *= scale;
            self.height *= scale;
        }
        self
    }
}

/// 2-D affine transform on normalized coordinates, `p' = M·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    /// Row-major 2x3: [[a, b, tx], [c, d, ty]].
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    pub fn scaling(s: f64) -> Self {
        Self {
            m: [[s, 0.0, 0.0], [0.0, s, 0.0]],
        }
    }

    pub fn rotation(theta: f64) -> Self {
        let (sn, cs) = theta.sin_cos();
        Self {
            m: [[cs, -sn, 0.0], [sn, cs, 0.0]],
        }
    }

    /// x -> 1-x mirror about the vertical midline.
    pub fn hflip() -> Self {
        Self {
            m: [[-1.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
        }
    }

    /// Rotation by `theta` about `center`.
    pub fn rotation_about(theta: f64, center: Point) -> Self {
        Affine2::translation(center.x, center.y)
            .then_inner(Affine2::rotation(theta))
            .then_inner(Affine2::translation(-center.x, -center.y))
    }

    /// Uniform scaling by `s` about `center`.
    pub fn scaling_about(s: f64, center: Point) -> Self {
        Affine2::translation(center.x, center.y)
            .then_inner(Affine2::scaling(s))
            .then_inner(Affine2::translation(-center.x, -center.y))
    }

    /// self ∘ other (apply `other` first).
    fn then_inner(self, other: Affine2) -> Affine2 {
        let a = self.m;
        let b = other.m;
        let mut m = [[0.0; 3]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for j in 0..2 {
                row[j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            row[2] = a[i][0] * b[0][2] + a[i][1] * b[1][2] + a[i][2];
        }
        Affine2 { m }
    }

    /// Composition applying `self` first, then `next`.
    pub fn then(self, next: Affine2) -> Affine2 {
        next.then_inner(self)
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        Point::new(
            self.m[0][0] * p.x + self.m[0][1] * p.y + self.m[0][2],
            self.m[1][0] * p.x + self.m[1][1] * p.y + self.m[1][2],
        )
    }

    pub fn inverse(&self) -> Affine2 {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let det = a * d - b * c;
        assert!(det.abs() > 1e-12, "affine transform not invertible");
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Affine2 {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: axis landmarks coincide (separation {separation:.3e})")]
    DegenerateGeometry { separation: f64 },
    #[error("global chest ROI has no oriented box; use extract_all_rois")]
    GlobalHasNoBox,
    #[error("empty image")]
    EmptyImage,
    #[error("non-positive output size")]
    NonPositiveOutSize,
}

/// Extraction failure carrying the ROI it happened in.
#[derive(Debug, Error, PartialEq)]
#[error("roi {kind}: {source}")]
pub struct ExtractError {
    pub kind: RoiKind,
    pub source: GeometryError,
}

const DEGENERATE_EPS: f64 = 1e-6;

/// Deterministically place the oriented box for one local ROI.
///
/// Line-like groups (clavicles, rib cages) take their axis from the group's
/// first landmark toward its last, centered at that segment's midpoint, with
/// length `width_margin` times the landmark span. Point ROIs (cervical, T12)
/// are axis-aligned squares scaled by the inter-clavicle distance.
pub fn build_roi_geometry(
    landmarks: &LandmarkSet,
    kind: RoiKind,
    config: &GeoConfig,
) -> Result<OrientedBox, GeometryError> {
    let anchors = kind.anchor_landmarks();
    if anchors.is_empty() {
        return Err(GeometryError::GlobalHasNoBox);
    }
    let aspect = config.aspect_for(kind);
    let boxed = if anchors.len() == 1 {
        let center = landmarks.get(anchors[0]);
        let a = landmarks.get(LandmarkName::ClavL1);
        let b = landmarks.get(LandmarkName::ClavR1);
        let reference = a.dist(b);
        if reference < DEGENERATE_EPS {
            return Err(GeometryError::DegenerateGeometry {
                separation: reference,
            });
        }
        let side = config.point_roi_scale * reference;
        OrientedBox {
            center,
            angle: 0.0,
            width: side,
            height: side * aspect,
        }
    } else {
        let first = landmarks.get(anchors[0]);
        let last = landmarks.get(*anchors.last().unwrap());
        let span = first.dist(last);
        if span < DEGENERATE_EPS {
            return Err(GeometryError::DegenerateGeometry { separation: span });
        }
        let width = span * config.width_margin;
        OrientedBox {
            center: Point::new((first.x + last.x) / 2.0, (first.y + last.y) / 2.0),
            angle: (last.y - first.y).atan2(last.x - first.x),
            width,
            height: width * aspect,
        }
    };
    Ok(boxed.clamped())
}

/// Resample the interior of `bbox` into an upright (out_w × out_h) crop, the
/// box axis mapped to the output x-axis, bilinear everywhere, zero fill for
/// samples falling outside the image.
pub fn crop_and_normalize<F: Real>(
    image: &ImageBuf<F>,
    bbox: &OrientedBox,
    out_size: (usize, usize),
) -> Result<ImageBuf<F>, GeometryError> {
    crop_with_transform(image, bbox, out_size, None)
}

/// `crop_and_normalize` with an optional affine composed into the sampling:
/// the crop is taken from the virtually transformed image `I∘inv` without
/// materializing it (one bilinear pass instead of two).
pub fn crop_with_transform<F: Real>(
    image: &ImageBuf<F>,
    bbox: &OrientedBox,
    out_size: (usize, usize),
    inverse_transform: Option<&Affine2>,
) -> Result<ImageBuf<F>, GeometryError> {
    let (out_h, out_w) = out_size;
    if image.is_empty() {
        return Err(GeometryError::EmptyImage);
    }
    if out_h == 0 || out_w == 0 {
        return Err(GeometryError::NonPositiveOutSize);
    }

    let img_w = image.width() as f64;
    let img_h = image.height() as f64;
    let mut out = ImageBuf::zeros(out_w, out_h);
    let data = out.as_mut_slice();
    for i in 0..out_h {
        let t = ((i as f64 + 0.5) / out_h as f64 - 0.5) * bbox.height;
        for j in 0..out_w {
            let s = ((j as f64 + 0.5) / out_w as f64 - 0.5) * bbox.width;
            let mut p = bbox.local_to_image(s, t);
            if let Some(inv) = inverse_transform {
                p = inv.apply(p);
            }
            let px = p.x * img_w - 0.5;
            let py = p.y * img_h - 0.5;
            data[i * out_w + j] = image.bilinear(px, py);
        }
    }
    Ok(out)
}

/// Warp an image by an affine acting on normalized coordinates (inverse
/// mapping with bilinear sampling, zero fill). Output size equals input size.
pub fn warp_affine<F: Real>(image: &ImageBuf<F>, transform: &Affine2) -> ImageBuf<F> {
    let inv = transform.inverse();
    let w = image.width();
    let h = image.height();
    let fw = w as f64;
    let fh = h as f64;
    ImageBuf::from_fn(w, h, |x, y| {
        let p = Point::new((x as f64 + 0.5) / fw, (y as f64 + 0.5) / fh);
        let q = inv.apply(p);
        image.bilinear(q.x * fw - 0.5, q.y * fh - 0.5)
    })
}

/// The 7 normalized crops of one radiograph, indexed by `RoiKind::ALL` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCropSet<F> {
    crops: [ImageBuf<F>; 7],
}

impl<F: Real> RoiCropSet<F> {
    pub fn new(crops: [ImageBuf<F>; 7]) -> Self {
        Self { crops }
    }

    pub fn get(&self, kind: RoiKind) -> &ImageBuf<F> {
        &self.crops[kind.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (RoiKind, &ImageBuf<F>)> {
        RoiKind::ALL.iter().map(move |&k| (k, &self.crops[k.index()]))
    }

    pub fn len(&self) -> usize {
        7
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Extraction parameters: box geometry plus the square output size.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub geo: GeoConfig,
    pub crop_size: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            geo: GeoConfig::default(),
            crop_size: 256,
        }
    }
}

/// Extract all 7 ROIs. The global chest crop is the full image resized to
/// the output size; local crops are oriented-box resamplings.
pub fn extract_all_rois<F: Real>(
    image: &ImageBuf<F>,
    landmarks: &LandmarkSet,
    config: &ExtractConfig,
) -> Result<RoiCropSet<F>, ExtractError> {
    let crops = extract_rois_subset(image, landmarks, config, &RoiKind::ALL, None)?;
    let mut iter = crops.into_iter();
    Ok(RoiCropSet::new(std::array::from_fn(|_| {
        iter.next().unwrap()
    })))
}

/// Extract the named subset of ROIs in the given order, optionally sampling
/// through a composed inverse affine (see `crop_with_transform`).
pub fn extract_rois_subset<F: Real>(
    image: &ImageBuf<F>,
    landmarks: &LandmarkSet,
    config: &ExtractConfig,
    kinds: &[RoiKind],
    inverse_transform: Option<&Affine2>,
) -> Result<Vec<ImageBuf<F>>, ExtractError> {
    let out_size = (config.crop_size, config.crop_size);
    kinds
        .par_iter()
        .map(|&kind| {
            let bbox = if kind.is_local() {
                build_roi_geometry(landmarks, kind, &config.geo)
                    .map_err(|source| ExtractError { kind, source })?
            } else {
                OrientedBox::full_image()
            };
            crop_with_transform(image, &bbox, out_size, inverse_transform)
                .map_err(|source| ExtractError { kind, source })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::parse_landmark_file;

    fn base_landmarks() -> LandmarkSet {
        let text: String = LandmarkName::ALL
            .iter()
            .map(|n| format!("{} 0.5 0.5\n", n))
            .collect();
        parse_landmark_file(&text).unwrap()
    }

    #[test]
    fn horizontal_clavicle_axis_gives_zero_angle_and_midpoint_center() {
        let mut lms = base_landmarks();
        lms.set(LandmarkName::ClavL1, Point::new(0.2, 0.3));
        lms.set(LandmarkName::ClavL2, Point::new(0.3, 0.3));
        lms.set(LandmarkName::ClavL3, Point::new(0.4, 0.3));
        let cfg = GeoConfig::default();
        let b = build_roi_geometry(&lms, RoiKind::ClavicleL, &cfg).unwrap();
        assert!(b.angle.abs() < 1e-15);
        assert!((b.center.x - 0.3).abs() < 1e-15);
        assert!((b.center.y - 0.3).abs() < 1e-15);
        assert!((b.width - 0.2 * cfg.width_margin).abs() < 1e-12);
    }

    #[test]
    fn diagonal_clavicle_axis_gives_quarter_pi() {
        let mut lms = base_landmarks();
        lms.set(LandmarkName::ClavL1, Point::new(0.2, 0.2));
        lms.set(LandmarkName::ClavL3, Point::new(0.4, 0.4));
        let b = build_roi_geometry(&lms, RoiKind::ClavicleL, &GeoConfig::default()).unwrap();
        assert!((b.angle - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn coincident_axis_landmarks_are_degenerate() {
        let lms = base_landmarks();
        let err = build_roi_geometry(&lms, RoiKind::ClavicleL, &GeoConfig::default()).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateGeometry { .. }));
    }

    #[test]
    fn point_roi_scales_with_interclavicle_distance() {
        let mut lms = base_landmarks();
        lms.set(LandmarkName::ClavL1, Point::new(0.2, 0.3));
        lms.set(LandmarkName::ClavR1, Point::new(0.8, 0.3));
        lms.set(LandmarkName::Cerv1, Point::new(0.5, 0.15));
        let cfg = GeoConfig::default();
        let b = build_roi_geometry(&lms, RoiKind::Cervical, &cfg).unwrap();
        assert!((b.width - cfg.point_roi_scale * 0.6).abs() < 1e-12);
        assert_eq!(b.angle, 0.0);
        assert_eq!(b.center, Point::new(0.5, 0.15));
    }

    #[test]
    fn clamping_keeps_corners_in_bounds_and_aspect_exact() {
        let mut lms = base_landmarks();
        // Long near-edge clavicle whose unclamped box would spill far out.
        lms.set(LandmarkName::ClavL1, Point::new(0.02, 0.02));
        lms.set(LandmarkName::ClavL3, Point::new(0.98, 0.95));
        let mut cfg = GeoConfig::default();
        cfg.width_margin = 2.0;
        cfg.aspect_clavicle = 0.8;
        let b = build_roi_geometry(&lms, RoiKind::ClavicleL, &cfg).unwrap();
        for c in b.corners() {
            assert!(c.x >= BOX_BOUND.0 - 1e-12 && c.x <= BOX_BOUND.1 + 1e-12);
            assert!(c.y >= BOX_BOUND.0 - 1e-12 && c.y <= BOX_BOUND.1 + 1e-12);
        }
        assert!((b.height / b.width - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identity_crop_is_bit_exact() {
        let img = ImageBuf::<f32>::from_fn(24, 24, |x, y| ((x * 7 + y * 13) % 31) as f32 / 31.0);
        let out = crop_and_normalize(&img, &OrientedBox::full_image(), (24, 24)).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn rotated_box_on_constant_image_stays_constant() {
        let img = ImageBuf::<f64>::from_fn(32, 32, |_, _| 0.6);
        let bbox = OrientedBox {
            center: Point::new(0.5, 0.5),
            angle: std::f64::consts::FRAC_PI_2,
            width: 0.5,
            height: 0.5,
        };
        let out = crop_and_normalize(&img, &bbox, (16, 16)).unwrap();
        for &v in out.as_slice() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn ninety_degree_rotation_matches_index_permutation() {
        // Gradient image; a 90° full-image box must reproduce the explicit
        // index permutation out[i][j] = in[j][n-1-i].
        let n = 20usize;
        let img = ImageBuf::<f64>::from_fn(n, n, |x, y| (x as f64 + 2.0 * y as f64) / (3.0 * n as f64));
        let bbox = OrientedBox {
            center: Point::new(0.5, 0.5),
            angle: std::f64::consts::FRAC_PI_2,
            width: 1.0,
            height: 1.0,
        };
        let out = crop_and_normalize(&img, &bbox, (n, n)).unwrap();
        let expected = ImageBuf::<f64>::from_fn(n, n, |j, i| img.get(n - 1 - i, j));
        assert!(out.mean_abs_diff(&expected) < 2.0 / 255.0);
    }

    #[test]
    fn extract_produces_seven_crops_of_requested_size() {
        let img = ImageBuf::<f32>::from_fn(64, 64, |x, y| ((x + y) % 9) as f32 / 9.0);
        let mut lms = base_landmarks();
        lms.set(LandmarkName::ClavL1, Point::new(0.15, 0.3));
        lms.set(LandmarkName::ClavL2, Point::new(0.25, 0.29));
        lms.set(LandmarkName::ClavL3, Point::new(0.35, 0.28));
        lms.set(LandmarkName::ClavR1, Point::new(0.85, 0.3));
        lms.set(LandmarkName::ClavR2, Point::new(0.75, 0.29));
        lms.set(LandmarkName::ClavR3, Point::new(0.65, 0.28));
        lms.set(LandmarkName::RibL1, Point::new(0.15, 0.45));
        lms.set(LandmarkName::RibL2, Point::new(0.14, 0.55));
        lms.set(LandmarkName::RibL3, Point::new(0.13, 0.65));
        lms.set(LandmarkName::RibL4, Point::new(0.12, 0.75));
        lms.set(LandmarkName::RibR1, Point::new(0.85, 0.45));
        lms.set(LandmarkName::RibR2, Point::new(0.86, 0.55));
        lms.set(LandmarkName::RibR3, Point::new(0.87, 0.65));
        lms.set(LandmarkName::RibR4, Point::new(0.88, 0.75));
        lms.set(LandmarkName::Cerv1, Point::new(0.5, 0.15));
        lms.set(LandmarkName::T12, Point::new(0.5, 0.8));
        let cfg = ExtractConfig {
            geo: GeoConfig::default(),
            crop_size: 32,
        };
        let crops = extract_all_rois(&img, &lms, &cfg).unwrap();
        let mut count = 0;
        for (_, crop) in crops.iter() {
            assert_eq!(crop.width(), 32);
            assert_eq!(crop.height(), 32);
            count += 1;
        }
        assert_eq!(count, 7);

        // Determinism: identical inputs, identical output.
        let again = extract_all_rois(&img, &lms, &cfg).unwrap();
        assert_eq!(crops, again);
    }

    #[test]
    fn extract_tags_failing_roi() {
        let img = ImageBuf::<f32>::from_fn(8, 8, |_, _| 0.5);
        let lms = base_landmarks(); // all coincident -> degenerate clavicle
        let err = extract_all_rois(&img, &lms, &ExtractConfig::default()).unwrap_err();
        assert_eq!(err.kind, RoiKind::ClavicleL);
    }

    #[test]
    fn affine_inverse_round_trips() {
        let a = Affine2::rotation_about(0.3, Point::new(0.4, 0.6))
            .then(Affine2::scaling_about(1.2, Point::new(0.5, 0.5)))
            .then(Affine2::translation(0.05, -0.02));
        let inv = a.inverse();
        let p = Point::new(0.21, 0.77);
        let q = inv.apply(a.apply(p));
        assert!((q.x - p.x).abs() < 1e-12);
        assert!((q.y - p.y).abs() < 1e-12);
    }
}
