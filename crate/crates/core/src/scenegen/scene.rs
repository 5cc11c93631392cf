//! Scenes and their fixed-size latent encoding.
//!
//! Slot layout (repeated `max_objects` times):
//! `[presence, category one-hot (|V|), color one-hot (|palette|, color mode only), cx, cy, w, h]`.
//! One-hots are signed (+1 hot, -1 elsewhere), presence is +1/-1 and
//! geometry is mapped affinely from [0, 1] to [-1, 1], so every component
//! sits on the same scale as the unit Gaussian the diffusion model starts
//! from. Centers are measured from the bottom-left corner: larger `cy`
//! means higher in the scene.
//!
//! Geometry lives on a dyadic grid of spacing 1/65536. On that grid the
//! affine map and its inverse are exact in f64, so `decode(encode(s)) == s`
//! holds bit for bit.

use serde::{Deserialize, Serialize};

use super::{CategoryId, ColorId, World};
use crate::error::{Error, Result};

pub const GRID: f64 = 65536.0;
pub const MIN_SIZE: f64 = 1.0 / 1024.0;
pub const MAX_SIZE: f64 = 0.5;

pub fn quantize(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub category: CategoryId,
    pub color: Option<ColorId>,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl ObjectInstance {
    pub fn new(category: CategoryId, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            category,
            color: None,
            cx,
            cy,
            w,
            h,
        }
    }

    pub fn with_color(mut self, color: ColorId) -> Self {
        self.color = Some(color);
        self
    }

    fn sort_key(&self) -> (CategoryId, f64, f64, f64, f64, Option<ColorId>) {
        (self.category, self.cx, self.cy, self.w, self.h, self.color)
    }
}

fn canonical_cmp(a: &ObjectInstance, b: &ObjectInstance) -> std::cmp::Ordering {
    let (ka, kb) = (a.sort_key(), b.sort_key());
    ka.0.cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then(ka.2.total_cmp(&kb.2))
        .then(ka.3.total_cmp(&kb.3))
        .then(ka.4.total_cmp(&kb.4))
        .then(ka.5.cmp(&kb.5))
}

/// A validated scene. Objects are kept in canonical order (category index,
/// then cx) and their geometry is snapped to the grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    objects: Vec<ObjectInstance>,
}

impl Scene {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(objects: Vec<ObjectInstance>, world: &World) -> Result<Self> {
        if objects.len() > world.max_objects {
            return Err(Error::InvalidArgument(format!(
                "scene has {} objects, limit is {}",
                objects.len(),
                world.max_objects
            )));
        }
        let mut objects = objects;
        for o in &mut objects {
            if o.category.0 >= world.vocab.len() {
                return Err(Error::InvalidArgument(format!(
                    "category {} out of range",
                    o.category.0
                )));
            }
            match (o.color, world.color_mode()) {
                (Some(c), true) if c.0 < world.n_colors() => {}
                (None, false) => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "object colors must be present exactly in color mode".into(),
                    ))
                }
            }
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            let in_size = |v: f64| v > 0.0 && v <= MAX_SIZE;
            if !(in_unit(o.cx) && in_unit(o.cy) && in_size(o.w) && in_size(o.h)) {
                return Err(Error::InvalidArgument(format!(
                    "object geometry out of range: {o:?}"
                )));
            }
            o.cx = quantize(o.cx);
            o.cy = quantize(o.cy);
            o.w = quantize(o.w).clamp(MIN_SIZE, MAX_SIZE);
            o.h = quantize(o.h).clamp(MIN_SIZE, MAX_SIZE);
        }
        objects.sort_by(canonical_cmp);
        Ok(Self { objects })
    }

    pub fn objects(&self) -> &[ObjectInstance] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneLatent(pub Vec<f64>);

impl SceneLatent {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub n_categories: usize,
    pub n_colors: usize,
    pub max_objects: usize,
}

impl LatentLayout {
    pub fn slot_dim(&self) -> usize {
        1 + self.n_categories + self.n_colors + 4
    }

    pub fn dim(&self) -> usize {
        self.max_objects * self.slot_dim()
    }

    pub fn slot_offset(&self, slot: usize) -> usize {
        slot * self.slot_dim()
    }

    pub fn category_offset(&self) -> usize {
        1
    }

    pub fn color_offset(&self) -> usize {
        1 + self.n_categories
    }

    pub fn geometry_offset(&self) -> usize {
        1 + self.n_categories + self.n_colors
    }
}

fn to_signed(x: f64) -> f64 {
    2.0 * x - 1.0
}

fn from_signed(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

pub fn encode_scene(scene: &Scene, world: &World) -> SceneLatent {
    let layout = world.layout();
    let mut z = vec![-1.0; layout.dim()];
    for slot in 0..layout.max_objects {
        let g = layout.slot_offset(slot) + layout.geometry_offset();
        z[g..g + 4].fill(0.0);
    }
    for (slot, o) in scene.objects().iter().enumerate() {
        let base = layout.slot_offset(slot);
        z[base] = 1.0;
        z[base + layout.category_offset() + o.category.0] = 1.0;
        if let Some(c) = o.color {
            z[base + layout.color_offset() + c.0] = 1.0;
        }
        let g = base + layout.geometry_offset();
        z[g] = to_signed(o.cx);
        z[g + 1] = to_signed(o.cy);
        z[g + 2] = to_signed(o.w);
        z[g + 3] = to_signed(o.h);
    }
    SceneLatent(z)
}

/// Index of the largest finite entry; ties and NaNs resolve to the lowest index.
pub(crate) fn argmax(block: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in block.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Decoded geometry of one slot, clipped to valid ranges and snapped to the grid.
pub(crate) fn slot_geometry(geom: &[f64]) -> (f64, f64, f64, f64) {
    let unit = |v: f64| {
        let v = if v.is_nan() { 0.0 } else { v };
        quantize(from_signed(v).clamp(0.0, 1.0))
    };
    let size = |v: f64| {
        let v = if v.is_nan() { -1.0 } else { v };
        quantize(from_signed(v).clamp(0.0, 1.0)).clamp(MIN_SIZE, MAX_SIZE)
    };
    (unit(geom[0]), unit(geom[1]), size(geom[2]), size(geom[3]))
}

/// Decodes a latent: a slot is occupied iff its presence exceeds
/// `presence_threshold`.
pub fn decode_latent(z: &SceneLatent, world: &World, presence_threshold: f64) -> Result<Scene> {
    let layout = world.layout();
    if z.dim() != layout.dim() {
        return Err(Error::Shape(format!(
            "latent has dimension {}, expected {}",
            z.dim(),
            layout.dim()
        )));
    }
    let mut objects = Vec::new();
    for slot in 0..layout.max_objects {
        let s = &z.0[layout.slot_offset(slot)..layout.slot_offset(slot + 1)];
        if !(s[0] > presence_threshold) {
            continue;
        }
        let cat = argmax(&s[layout.category_offset()..layout.color_offset()]);
        let color = world
            .color_mode()
            .then(|| ColorId(argmax(&s[layout.color_offset()..layout.geometry_offset()])));
        let (cx, cy, w, h) = slot_geometry(&s[layout.geometry_offset()..]);
        objects.push(ObjectInstance {
            category: CategoryId(cat),
            color,
            cx,
            cy,
            w,
            h,
        });
    }
    Scene::new(objects, world)
}
