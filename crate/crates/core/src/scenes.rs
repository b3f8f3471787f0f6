//! Procedural toy scenes with controllable artifacts.
//!
//! A scene is a body disc with six limb slots, encoded as a 15-dimensional
//! parameter vector — the state space the diffusion model generates in.
//! The oracle predicates on that vector are exact and total, covering four
//! artifact kinds (omission, duplication, distortion, out of frame); the
//! remaining taxonomy categories have no toy predicate and are exercised by
//! the text and metrics machinery only. The renderer exists for inspection
//! and for sending scenes to an image-based classifier.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{builtin_ids, LabelSet};

/// Dimension of the scene parameter vector.
pub const SCENE_DIM: usize = 15;

/// Number of limb slots (present or not) in every scene.
pub const LIMB_SLOTS: usize = 6;

/// One limb slot: direction from the body center and length in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limb {
    pub angle: f64,
    pub length: f64,
}

/// Continuous parameters of one scene. Any real vector is a valid value;
/// interpretation thresholds live in [`SceneConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub center: [f64; 2],
    pub radius: f64,
    pub limbs: [Limb; LIMB_SLOTS],
}

impl SceneParams {
    /// Flatten to `[cx, cy, r, angle_0, length_0, .., angle_5, length_5]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(SCENE_DIM);
        v.push(self.center[0]);
        v.push(self.center[1]);
        v.push(self.radius);
        for limb in &self.limbs {
            v.push(limb.angle);
            v.push(limb.length);
        }
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != SCENE_DIM {
            return Err(Error::Domain(format!(
                "scene vector must have {} entries, got {}",
                SCENE_DIM,
                v.len()
            )));
        }
        let mut limbs = [Limb {
            angle: 0.0,
            length: 0.0,
        }; LIMB_SLOTS];
        for (i, limb) in limbs.iter_mut().enumerate() {
            limb.angle = v[3 + 2 * i];
            limb.length = v[4 + 2 * i];
        }
        Ok(Self {
            center: [v[0], v[1]],
            radius: v[2],
            limbs,
        })
    }
}

/// Thresholds and sampling margins of the scene oracle.
///
/// Clean samples keep every quantity at least one margin away from its
/// predicate boundary, so small perturbations cannot flip their label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// A limb with length >= this is present.
    pub presence_threshold: f64,
    /// Present limbs must have lengths inside this band.
    pub length_band: (f64, f64),
    /// A clean body has exactly this many present limbs.
    pub nominal_limb_count: usize,
    /// Body radii are sampled from this range.
    pub body_radius_range: (f64, f64),
    /// Clean bodies stay this far inside the unit frame.
    pub frame_margin: f64,
    /// Clean present lengths stay this far inside the length band.
    pub length_margin: f64,
    /// Clean absent lengths stay this far below the presence threshold.
    pub absent_margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            presence_threshold: 0.06,
            length_band: (0.14, 0.40),
            nominal_limb_count: 4,
            body_radius_range: (0.10, 0.18),
            frame_margin: 0.06,
            length_margin: 0.06,
            absent_margin: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.length_band;
        if !(0.0 < self.presence_threshold && self.presence_threshold < lo && lo < hi) {
            return Err(Error::Validation(format!(
                "need 0 < presence threshold ({}) < band lo ({}) < band hi ({})",
                self.presence_threshold, lo, hi
            )));
        }
        if self.absent_margin <= 0.0 || self.absent_margin >= self.presence_threshold {
            return Err(Error::Validation(
                "absent margin must lie in (0, presence threshold)".into(),
            ));
        }
        if self.length_margin <= 0.0 || 2.0 * self.length_margin >= hi - lo {
            return Err(Error::Validation(
                "length margin must leave a non-empty nominal band".into(),
            ));
        }
        if self.frame_margin <= 0.0 {
            return Err(Error::Validation("frame margin must be positive".into()));
        }
        let (r_lo, r_hi) = self.body_radius_range;
        if !(0.0 < r_lo && r_lo < r_hi && r_hi + self.frame_margin < 0.5) {
            return Err(Error::Validation(
                "body radius range must fit inside the frame with margin".into(),
            ));
        }
        if self.nominal_limb_count == 0 || self.nominal_limb_count >= LIMB_SLOTS {
            return Err(Error::Validation(format!(
                "nominal limb count must lie in 1..{}",
                LIMB_SLOTS
            )));
        }
        Ok(())
    }

    /// Narrow the body radius range to the sub-band owned by a condition
    /// class, so the class id controls the nominal body size.
    pub fn for_class(&self, class_id: usize, n_classes: usize) -> SceneConfig {
        let n = n_classes.max(1);
        let c = class_id.min(n - 1);
        let (lo, hi) = self.body_radius_range;
        let step = (hi - lo) / n as f64;
        let mut cfg = self.clone();
        cfg.body_radius_range = (lo + c as f64 * step, lo + (c + 1) as f64 * step);
        cfg
    }
}

/// Which artifact (if any) a sampled scene is constructed to contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactSpec {
    Clean,
    Omission,
    Duplication,
    Distortion,
    OutOfFrame,
}

impl ArtifactSpec {
    pub const ALL: [ArtifactSpec; 5] = [
        ArtifactSpec::Clean,
        ArtifactSpec::Omission,
        ArtifactSpec::Duplication,
        ArtifactSpec::Distortion,
        ArtifactSpec::OutOfFrame,
    ];

    /// Default-taxonomy category id of the injected artifact; `None` for clean.
    pub fn category_id(&self) -> Option<usize> {
        match self {
            ArtifactSpec::Clean => None,
            ArtifactSpec::Omission => Some(builtin_ids::OMISSION),
            ArtifactSpec::Duplication => Some(builtin_ids::DUPLICATION),
            ArtifactSpec::Distortion => Some(builtin_ids::DISTORTION),
            ArtifactSpec::OutOfFrame => Some(builtin_ids::OUT_OF_FRAME),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ArtifactSpec::Clean => "clean",
            ArtifactSpec::Omission => "omission",
            ArtifactSpec::Duplication => "duplication",
            ArtifactSpec::Distortion => "distortion",
            ArtifactSpec::OutOfFrame => "out-of-frame",
        }
    }
}

impl fmt::Display for ArtifactSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "clean" => Ok(ArtifactSpec::Clean),
            "omission" => Ok(ArtifactSpec::Omission),
            "duplication" => Ok(ArtifactSpec::Duplication),
            "distortion" => Ok(ArtifactSpec::Distortion),
            "out-of-frame" | "out_of_frame" | "outofframe" => Ok(ArtifactSpec::OutOfFrame),
            other => Err(Error::Domain(format!("unknown artifact spec {:?}", other))),
        }
    }
}

/// A categorical distribution over artifact specs, used to draw mixed
/// clean/artifact training data.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMixture {
    cumulative: Vec<(ArtifactSpec, f64)>,
}

impl SceneMixture {
    /// Weights must be non-negative and sum to 1 (within 1e-6).
    pub fn new(weights: &[(ArtifactSpec, f64)]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Validation("mixture needs at least one entry".into()));
        }
        let mut total = 0.0;
        let mut cumulative = Vec::with_capacity(weights.len());
        for &(spec, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Validation(format!(
                    "mixture weight for {} must be >= 0, got {}",
                    spec, w
                )));
            }
            total += w;
            cumulative.push((spec, total));
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "mixture weights must sum to 1, got {}",
                total
            )));
        }
        Ok(Self { cumulative })
    }

    /// `clean_fraction` clean scenes, the rest split evenly over the four
    /// artifact kinds.
    pub fn with_clean_fraction(clean_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&clean_fraction) {
            return Err(Error::Validation(format!(
                "clean fraction must lie in [0,1], got {}",
                clean_fraction
            )));
        }
        let artifact = (1.0 - clean_fraction) / 4.0;
        Self::new(&[
            (ArtifactSpec::Clean, clean_fraction),
            (ArtifactSpec::Omission, artifact),
            (ArtifactSpec::Duplication, artifact),
            (ArtifactSpec::Distortion, artifact),
            (ArtifactSpec::OutOfFrame, artifact),
        ])
    }

    pub fn sample_spec<R: Rng + ?Sized>(&self, rng: &mut R) -> ArtifactSpec {
        let u: f64 = rng.random_range(0.0..1.0);
        for &(spec, cum) in &self.cumulative {
            if u < cum {
                return spec;
            }
        }
        self.cumulative.last().expect("mixture is non-empty").0
    }
}

fn base_angle(slot: usize) -> f64 {
    -std::f64::consts::PI + (slot as f64 + 0.5) * (2.0 * std::f64::consts::PI / LIMB_SLOTS as f64)
}

/// Sample a scene that the oracle labels exactly as `spec` intends: clean
/// scenes get no label, every other spec gets exactly its own category.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, spec: ArtifactSpec, cfg: &SceneConfig) -> SceneParams {
    let (lo, hi) = cfg.length_band;
    let nominal = (lo + cfg.length_margin, hi - cfg.length_margin);
    let absent_max = cfg.presence_threshold - cfg.absent_margin;
    let (r_lo, r_hi) = cfg.body_radius_range;
    let radius = rng.random_range(r_lo..r_hi);

    let inside = |rng: &mut R, radius: f64| {
        let lo = radius + cfg.frame_margin;
        let hi = 1.0 - radius - cfg.frame_margin;
        rng.random_range(lo..hi)
    };

    let present_count = match spec {
        ArtifactSpec::Omission => cfg.nominal_limb_count - 1,
        ArtifactSpec::Duplication => cfg.nominal_limb_count + 1,
        _ => cfg.nominal_limb_count,
    };

    let mut limbs = [Limb {
        angle: 0.0,
        length: 0.0,
    }; LIMB_SLOTS];
    for (slot, limb) in limbs.iter_mut().enumerate() {
        limb.angle = base_angle(slot) + rng.random_range(-0.25..0.25);
        limb.length = if slot < present_count {
            rng.random_range(nominal.0..nominal.1)
        } else {
            rng.random_range(0.0..absent_max)
        };
    }
    if spec == ArtifactSpec::Distortion {
        // Overlong first limb, clear of the band by at least one margin.
        limbs[0].length = rng.random_range(hi + cfg.length_margin..hi + 3.0 * cfg.length_margin);
    }

    let center = match spec {
        ArtifactSpec::OutOfFrame => {
            // Body circle crosses the left frame edge.
            let overlap = rng.random_range(cfg.frame_margin / 3.0..cfg.frame_margin);
            [radius - overlap, inside(rng, radius)]
        }
        _ => [inside(rng, radius), inside(rng, radius)],
    };

    SceneParams {
        center,
        radius,
        limbs,
    }
}

/// The deterministic oracle: evaluate the artifact predicates on a scene.
///
/// Total on all real vectors; non-finite entries classify as distortion by
/// convention. Multiple predicates may fire at once (multi-label).
pub fn classify_scene(params: &SceneParams, cfg: &SceneConfig) -> LabelSet {
    if params.to_vec().iter().any(|v| !v.is_finite()) {
        return LabelSet::from_ids([builtin_ids::DISTORTION]).expect("non-empty");
    }
    let mut ids = std::collections::BTreeSet::new();
    let present: Vec<&Limb> = params
        .limbs
        .iter()
        .filter(|l| l.length >= cfg.presence_threshold)
        .collect();
    if present.len() < cfg.nominal_limb_count {
        ids.insert(builtin_ids::OMISSION);
    }
    if present.len() > cfg.nominal_limb_count {
        ids.insert(builtin_ids::DUPLICATION);
    }
    let (lo, hi) = cfg.length_band;
    if present.iter().any(|l| l.length < lo || l.length > hi) {
        ids.insert(builtin_ids::DISTORTION);
    }
    let [cx, cy] = params.center;
    let r = params.radius;
    if cx - r < 0.0 || cx + r > 1.0 || cy - r < 0.0 || cy + r > 1.0 {
        ids.insert(builtin_ids::OUT_OF_FRAME);
    }
    if ids.is_empty() {
        LabelSet::NoArtifacts
    } else {
        LabelSet::Artifacts(ids)
    }
}

/// A grayscale raster image (8-bit, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Serialize as a binary PGM (P5, maxval 255).
    pub fn pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.pgm_bytes())?;
        Ok(())
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }
}

/// Deterministic rasterization of a scene: filled body disc, limbs as line
/// segments starting at the body edge. No anti-aliasing; output bytes are
/// identical across runs.
pub fn render(params: &SceneParams, resolution: u32) -> Result<GrayImage> {
    if resolution < 16 {
        return Err(Error::Domain(format!(
            "render resolution must be >= 16, got {}",
            resolution
        )));
    }
    let res = resolution as usize;
    let mut pixels = vec![0u8; res * res];
    let [cx, cy] = params.center;
    let r = params.radius;

    if r.is_finite() && r > 0.0 && cx.is_finite() && cy.is_finite() {
        for py in 0..res {
            let y = (py as f64 + 0.5) / resolution as f64;
            for px in 0..res {
                let x = (px as f64 + 0.5) / resolution as f64;
                if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                    pixels[py * res + px] = 255;
                }
            }
        }
        for limb in &params.limbs {
            if !(limb.length.is_finite() && limb.angle.is_finite()) || limb.length <= 0.0 {
                continue;
            }
            let (sin, cos) = limb.angle.sin_cos();
            let x0 = cx + r * cos;
            let y0 = cy + r * sin;
            let steps = (limb.length * 2.0 * resolution as f64).ceil() as usize + 1;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                let x = x0 + t * limb.length * cos;
                let y = y0 + t * limb.length * sin;
                let px = (x * resolution as f64).floor();
                let py = (y * resolution as f64).floor();
                if px >= 0.0 && py >= 0.0 && (px as usize) < res && (py as usize) < res {
                    pixels[py as usize * res + px as usize] = 255;
                }
            }
        }
    }

    Ok(GrayImage {
        width: resolution,
        height: resolution,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_is_valid() {
        SceneConfig::default().validate().unwrap();
    }

    #[test]
    fn sampled_specs_hit_their_labels_over_many_seeds() {
        let cfg = SceneConfig::default();
        for spec in ArtifactSpec::ALL {
            for seed in 0..1000u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scene = sample_scene(&mut rng, spec, &cfg);
                let labels = classify_scene(&scene, &cfg);
                match spec.category_id() {
                    None => assert_eq!(
                        labels,
                        LabelSet::NoArtifacts,
                        "seed {} spec {}",
                        seed,
                        spec
                    ),
                    Some(id) => assert_eq!(
                        labels,
                        LabelSet::from_ids([id]).unwrap(),
                        "seed {} spec {}",
                        seed,
                        spec
                    ),
                }
            }
        }
    }

    #[test]
    fn per_class_config_splits_radius_range() {
        let cfg = SceneConfig::default();
        let c0 = cfg.for_class(0, 2);
        let c1 = cfg.for_class(1, 2);
        assert_eq!(c0.body_radius_range.1, c1.body_radius_range.0);
        assert_eq!(c0.body_radius_range.0, cfg.body_radius_range.0);
        assert_eq!(c1.body_radius_range.1, cfg.body_radius_range.1);
        c0.validate().unwrap();
        c1.validate().unwrap();
    }

    #[test]
    fn classify_nominal_scene_is_clean() {
        let cfg = SceneConfig::default();
        let mut limbs = [Limb { angle: 0.0, length: 0.0 }; LIMB_SLOTS];
        for (i, limb) in limbs.iter_mut().enumerate().take(4) {
            limb.angle = base_angle(i);
            limb.length = 0.25;
        }
        let scene = SceneParams {
            center: [0.5, 0.5],
            radius: 0.15,
            limbs,
        };
        assert_eq!(classify_scene(&scene, &cfg), LabelSet::NoArtifacts);
    }

    #[test]
    fn classify_body_crossing_frame() {
        let cfg = SceneConfig::default();
        let mut limbs = [Limb { angle: 0.0, length: 0.0 }; LIMB_SLOTS];
        for limb in limbs.iter_mut().take(4) {
            limb.length = 0.25;
        }
        let scene = SceneParams {
            center: [0.05, 0.5],
            radius: 0.2,
            limbs,
        };
        assert_eq!(
            classify_scene(&scene, &cfg),
            LabelSet::from_ids([builtin_ids::OUT_OF_FRAME]).unwrap()
        );
    }

    #[test]
    fn classify_multi_label_duplication_and_distortion() {
        let cfg = SceneConfig::default();
        let mut limbs = [Limb { angle: 0.0, length: 0.0 }; LIMB_SLOTS];
        for limb in limbs.iter_mut().take(5) {
            limb.length = 0.25;
        }
        limbs[0].length = 0.55; // present and overlong
        let scene = SceneParams {
            center: [0.5, 0.5],
            radius: 0.15,
            limbs,
        };
        assert_eq!(
            classify_scene(&scene, &cfg),
            LabelSet::from_ids([builtin_ids::DUPLICATION, builtin_ids::DISTORTION]).unwrap()
        );
    }

    #[test]
    fn non_finite_classifies_as_distortion() {
        let cfg = SceneConfig::default();
        let mut v = vec![0.5; SCENE_DIM];
        v[4] = f64::NAN;
        let scene = SceneParams::from_slice(&v).unwrap();
        assert_eq!(
            classify_scene(&scene, &cfg),
            LabelSet::from_ids([builtin_ids::DISTORTION]).unwrap()
        );
    }

    #[test]
    fn small_perturbations_never_flip_clean_labels() {
        let cfg = SceneConfig::default();
        let eps = cfg
            .absent_margin
            .min(cfg.length_margin)
            .min(cfg.frame_margin)
            / 2.0
            * 0.95;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = sample_scene(&mut rng, ArtifactSpec::Clean, &cfg);
            let mut v = scene.to_vec();
            for entry in v.iter_mut() {
                *entry += rng.random_range(-eps..eps);
            }
            let perturbed = SceneParams::from_slice(&v).unwrap();
            assert_eq!(
                classify_scene(&perturbed, &cfg),
                LabelSet::NoArtifacts,
                "seed {}",
                seed
            );
        }
    }

    #[test]
    fn vector_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = sample_scene(&mut rng, ArtifactSpec::Clean, &SceneConfig::default());
        let v = scene.to_vec();
        assert_eq!(v.len(), SCENE_DIM);
        assert_eq!(SceneParams::from_slice(&v).unwrap(), scene);
        assert!(SceneParams::from_slice(&v[..10]).is_err());
    }

    #[test]
    fn render_is_deterministic_and_covers_body() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = sample_scene(&mut rng, ArtifactSpec::Clean, &SceneConfig::default());
        let a = render(&scene, 64).unwrap();
        let b = render(&scene, 64).unwrap();
        assert_eq!(a.pgm_bytes(), b.pgm_bytes());
        let cx = (scene.center[0] * 64.0) as u32;
        let cy = (scene.center[1] * 64.0) as u32;
        assert_eq!(a.pixel(cx, cy), 255);
        assert_eq!(a.pixel(0, 0), 0);
    }

    #[test]
    fn render_sets_limb_endpoint_pixel() {
        // Limb along +x from (0.5,0.5), radius 0.25, length 0.2: endpoint at
        // x = 0.5 + 0.45 = 0.95 -> pixel floor(0.95 * 64) = 60 in row 32.
        let mut limbs = [Limb { angle: 0.0, length: 0.0 }; LIMB_SLOTS];
        limbs[0] = Limb {
            angle: 0.0,
            length: 0.2,
        };
        let scene = SceneParams {
            center: [0.5, 0.5],
            radius: 0.25,
            limbs,
        };
        let img = render(&scene, 64).unwrap();
        assert_eq!(img.pixel(60, 32), 255);
    }

    #[test]
    fn render_rejects_tiny_resolution() {
        let scene = SceneParams::from_slice(&[0.5; SCENE_DIM]).unwrap();
        assert!(render(&scene, 8).is_err());
    }

    #[test]
    fn pgm_header_shape() {
        let scene = SceneParams::from_slice(&vec![0.4; SCENE_DIM]).unwrap();
        let img = render(&scene, 16).unwrap();
        let bytes = img.pgm_bytes();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 256);
    }
}
