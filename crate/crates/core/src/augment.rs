//! Training-time augmentation: one affine transform (scale, rotate,
//! translate, then optional horizontal flip) applied identically to image
//! pixels and landmark coordinates, with L/R landmark names swapped on flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{warp_affine, Affine2};
use crate::image::ImageBuf;
use crate::landmarks::{LandmarkSet, Point};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Multiplicative scale range about the image center.
    pub scale_range: (f64, f64),
    /// Rotation range in degrees about the image center.
    pub rotate_range: (f64, f64),
    /// Translation range as a fraction of the image.
    pub translate_range: (f64, f64),
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.9, 1.1),
            rotate_range: (-10.0, 10.0),
            translate_range: (-0.05, 0.05),
            hflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            rotate_range: (0.0, 0.0),
            translate_range: (0.0, 0.0),
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, (lo, hi)) in [
            ("scale_range", self.scale_range),
            ("rotate_range", self.rotate_range),
            ("translate_range", self.translate_range),
        ] {
            if !(lo <= hi) {
                return Err(format!("{name} is not ordered: ({lo}, {hi})"));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(format!("hflip_prob out of [0,1]: {}", self.hflip_prob));
        }
        Ok(())
    }
}

/// Sampled transform parameters: the affine plus the flip decision. The
/// trainer composes these into crop sampling instead of warping the whole
/// image; `apply_augmentation` materializes the warped image for callers
/// that need it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawnAugment {
    pub affine: Affine2,
    pub flip: bool,
}

impl DrawnAugment {
    pub fn identity() -> Self {
        Self {
            affine: Affine2::identity(),
            flip: false,
        }
    }

    /// Full transform including the flip (flip applied after the affine).
    pub fn transform(&self) -> Affine2 {
        if self.flip {
            self.affine.then(Affine2::hflip())
        } else {
            self.affine
        }
    }

    /// Transform landmarks, remapping L/R names when flipped.
    pub fn apply_landmarks(&self, landmarks: &LandmarkSet) -> LandmarkSet {
        let moved = landmarks.map_points(|p| self.affine.apply(p));
        if self.flip {
            moved.hflip()
        } else {
            moved
        }
    }
}

/// Draw transform parameters from the config ranges. Draw order is fixed
/// (scale, rotation, translation x/y, flip) so results are reproducible for
/// a given RNG state.
pub fn draw_augment(cfg: &AugmentConfig, rng: &mut impl Rng) -> DrawnAugment {
    let range = |lo: f64, hi: f64, rng: &mut dyn FnMut() -> f64| {
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * rng()
        }
    };
    let mut unit = || rng.random::<f64>();
    let scale = range(cfg.scale_range.0, cfg.scale_range.1, &mut unit);
    let rot_deg = range(cfg.rotate_range.0, cfg.rotate_range.1, &mut unit);
    let tx = range(cfg.translate_range.0, cfg.translate_range.1, &mut unit);
    let ty = range(cfg.translate_range.0, cfg.translate_range.1, &mut unit);
    let flip = cfg.hflip_prob > 0.0 && rng.random::<f64>() < cfg.hflip_prob;

    let center = Point::new(0.5, 0.5);
    let affine = Affine2::scaling_about(scale, center)
        .then(Affine2::rotation_about(rot_deg.to_radians(), center))
        .then(Affine2::translation(tx, ty));
    DrawnAugment { affine, flip }
}

/// Augment an image/landmark pair: sample parameters, warp the image, and
/// move the landmarks identically.
pub fn augment<F: Real>(
    image: &ImageBuf<F>,
    landmarks: &LandmarkSet,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (ImageBuf<F>, LandmarkSet) {
    let drawn = draw_augment(cfg, rng);
    apply_augmentation(image, landmarks, &drawn)
}

/// Apply already-drawn parameters to an image/landmark pair.
pub fn apply_augmentation<F: Real>(
    image: &ImageBuf<F>,
    landmarks: &LandmarkSet,
    drawn: &DrawnAugment,
) -> (ImageBuf<F>, LandmarkSet) {
    let warped = warp_affine(image, &drawn.transform());
    (warped, drawn.apply_landmarks(landmarks))
}
