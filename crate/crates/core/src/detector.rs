//! Oracle object detector over scene latents.
//!
//! Every slot gets a confidence `logistic(4 · presence)`; slots at or above
//! the score threshold are reported. Optional noise misreads categories,
//! drops detections or jitters centers. Noise draws are made for every slot
//! before thresholding, so for a fixed RNG stream the threshold only ever
//! removes detections.

use serde::{Deserialize, Serialize};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lineage::Rng;
use crate::scenegen::{
    argmax, encode_scene, quantize, slot_geometry, CategoryId, ColorId, ObjectInstance, Scene,
    SceneLatent, World,
};

pub const CONFIDENCE_SLOPE: f64 = 4.0;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.45;

pub fn slot_confidence(presence: f64) -> f64 {
    1.0 / (1.0 + (-CONFIDENCE_SLOPE * presence).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub score_threshold: f64,
    pub flip_prob: f64,
    pub drop_prob: f64,
    pub jitter_sigma: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            flip_prob: 0.0,
            drop_prob: 0.0,
            jitter_sigma: 0.0,
        }
    }
}

impl DetectorConfig {
    pub fn with_threshold(mut self, t: f64) -> Self {
        self.score_threshold = t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "detector.score_threshold {} outside (0, 1)",
                self.score_threshold
            )));
        }
        if !prob(self.flip_prob) || !prob(self.drop_prob) {
            return Err(Error::Config(
                "detector probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(
                "detector.jitter_sigma must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.flip_prob == 0.0 && self.drop_prob == 0.0 && self.jitter_sigma == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub category: CategoryId,
    pub color: Option<ColorId>,
    /// `[cx, cy, w, h]`, cy measured from the bottom edge.
    pub bbox: [f64; 4],
    pub confidence: f64,
}

impl DetectedObject {
    pub fn center(&self) -> (f64, f64) {
        (self.bbox[0], self.bbox[1])
    }

    /// A confident detection of `o`, used by stubs and tests.
    pub fn from_object(o: &ObjectInstance, confidence: f64) -> Self {
        Self {
            category: o.category,
            color: o.color,
            bbox: [o.cx, o.cy, o.w, o.h],
            confidence,
        }
    }
}

/// Detections sorted by descending confidence; equal confidences keep slot order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    objects: Vec<DetectedObject>,
}

impl DetectionSet {
    pub fn new(mut objects: Vec<DetectedObject>) -> Self {
        objects.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Self { objects }
    }

    pub fn objects(&self) -> &[DetectedObject] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Every object of `scene` detected with confidence 1.
    pub fn from_scene(scene: &Scene) -> Self {
        Self::new(
            scene
                .objects()
                .iter()
                .map(|o| DetectedObject::from_object(o, 1.0))
                .collect(),
        )
    }

    pub fn to_records(&self, world: &World) -> Vec<DetectionRecord> {
        self.objects
            .iter()
            .map(|d| DetectionRecord::from_detection(d, world))
            .collect()
    }

    pub fn from_records(records: &[DetectionRecord], world: &World) -> Result<Self> {
        let objects = records
            .iter()
            .map(|r| r.to_detection(world))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(objects))
    }
}

/// Anything that turns a latent into detections.
pub trait Detect: Sync {
    fn detect(&self, z: &SceneLatent, rng: &mut Rng) -> Result<DetectionSet>;
}

#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub world: World,
    pub config: DetectorConfig,
}

impl OracleDetector {
    pub fn new(world: World, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { world, config })
    }
}

impl Detect for OracleDetector {
    fn detect(&self, z: &SceneLatent, rng: &mut Rng) -> Result<DetectionSet> {
        detect(z, &self.world, &self.config, rng)
    }
}

/// Runs the oracle detector on one latent.
pub fn detect(
    z: &SceneLatent,
    world: &World,
    cfg: &DetectorConfig,
    rng: &mut Rng,
) -> Result<DetectionSet> {
    let layout = world.layout();
    if z.dim() != layout.dim() {
        return Err(Error::Shape(format!(
            "latent has dimension {}, expected {}",
            z.dim(),
            layout.dim()
        )));
    }
    let n_cat = world.vocab.len();
    let jitter = Normal::new(0.0, cfg.jitter_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("detector.jitter_sigma: {e}")))?;
    let mut out = Vec::new();
    for slot in 0..layout.max_objects {
        let s = &z.0[layout.slot_offset(slot)..layout.slot_offset(slot + 1)];
        let presence = if s[0].is_nan() { -1.0 } else { s[0] };
        let confidence = slot_confidence(presence);

        let dropped = cfg.drop_prob > 0.0 && rng.random::<f64>() < cfg.drop_prob;
        let mut category = argmax(&s[layout.category_offset()..layout.color_offset()]);
        if cfg.flip_prob > 0.0 {
            let flip = rng.random::<f64>() < cfg.flip_prob;
            let other = rng.random_range(0..n_cat - 1);
            if flip {
                category = if other >= category { other + 1 } else { other };
            }
        }
        let (mut cx, mut cy, w, h) = slot_geometry(&s[layout.geometry_offset()..]);
        if cfg.jitter_sigma > 0.0 {
            let (dx, dy) = (jitter.sample(rng), jitter.sample(rng));
            cx = quantize((cx + dx).clamp(0.0, 1.0));
            cy = quantize((cy + dy).clamp(0.0, 1.0));
        }
        if dropped || confidence < cfg.score_threshold {
            continue;
        }
        let color = world
            .color_mode()
            .then(|| ColorId(argmax(&s[layout.color_offset()..layout.geometry_offset()])));
        out.push(DetectedObject {
            category: CategoryId(category),
            color,
            bbox: [cx, cy, w, h],
            confidence,
        });
    }
    Ok(DetectionSet::new(out))
}

/// Convenience for stubs: detections of a clean scene through the noiseless oracle.
pub fn detect_scene(
    scene: &Scene,
    world: &World,
    cfg: &DetectorConfig,
    rng: &mut Rng,
) -> Result<DetectionSet> {
    detect(&encode_scene(scene, world), world, cfg, rng)
}

/// One JSONL line of a detection log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub category: String,
    pub color: Option<String>,
    pub bbox: [f64; 4],
    pub confidence: f64,
}

impl DetectionRecord {
    pub fn from_detection(d: &DetectedObject, world: &World) -> Self {
        Self {
            category: world.vocab.name(d.category).to_string(),
            color: d.color.map(|c| world.color_name(c).to_string()),
            bbox: d.bbox,
            confidence: d.confidence,
        }
    }

    pub fn to_detection(&self, world: &World) -> Result<DetectedObject> {
        let category = world
            .vocab
            .lookup(&self.category)
            .ok_or_else(|| Error::Record(format!("unknown category {:?}", self.category)))?;
        let color = match (&self.color, world.color_mode()) {
            (Some(c), true) => Some(
                world
                    .lookup_color(c)
                    .ok_or_else(|| Error::Record(format!("unknown color {c:?}")))?,
            ),
            (None, false) => None,
            _ => {
                return Err(Error::Record(
                    "detection color must be present exactly in color mode".into(),
                ))
            }
        };
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.bbox.iter().all(|&v| in_unit(v)) || !in_unit(self.confidence) {
            return Err(Error::Record(
                "bbox and confidence must lie in [0, 1]".into(),
            ));
        }
        Ok(DetectedObject {
            category,
            color,
            bbox: self.bbox,
            confidence: self.confidence,
        })
    }
}
