use crate::error::{Error, Result};
use crate::scenegen::{PromptKind, StructuredPrompt, World};

pub const TIME_EMBED_DIM: usize = 16;

/// Sinusoidal embedding: for k = 0..8, `sin(t·T^(−k/8))` and `cos(t·T^(−k/8))`.
pub fn time_embed(t: usize, steps: usize) -> Result<[f64; TIME_EMBED_DIM]> {
    if t == 0 || t > steps {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside [1, {steps}]"
        )));
    }
    let mut out = [0.0; TIME_EMBED_DIM];
    let pairs = TIME_EMBED_DIM / 2;
    for k in 0..pairs {
        let freq = (steps as f64).powf(-(k as f64) / pairs as f64);
        let angle = t as f64 * freq;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    Ok(out)
}

/// Block offsets of the condition vector:
/// `[first category | relation (4) | second category | first color | second color | counts | kind (3) | order]`.
///
/// A relational prompt is written in latent slot order: "first" is the
/// subject with the lower category index, which the scene encoding places in
/// the earlier slot, and the relation is read from that subject. "a car right
/// of a dog" and "a dog left of a car" therefore share every block except
/// `order`, which is set when the prompt names the higher-index subject
/// first. Together with `order` the map stays injective.
///
/// The counts block holds one `(K_max + 1)`-way one-hot per category, set
/// only for counting prompts; a count of zero is left blank. All entries
/// are 0 or 1. The surface template is not encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionLayout {
    pub n_categories: usize,
    pub n_colors: usize,
    pub max_objects: usize,
}

impl ConditionLayout {
    pub fn of(world: &World) -> Self {
        Self {
            n_categories: world.vocab.len(),
            n_colors: world.n_colors(),
            max_objects: world.max_objects,
        }
    }

    pub fn relation_offset(&self) -> usize {
        self.n_categories
    }

    pub fn b_offset(&self) -> usize {
        self.n_categories + 4
    }

    pub fn color_a_offset(&self) -> usize {
        2 * self.n_categories + 4
    }

    pub fn color_b_offset(&self) -> usize {
        self.color_a_offset() + self.n_colors
    }

    pub fn counts_offset(&self) -> usize {
        self.color_b_offset() + self.n_colors
    }

    pub fn kind_offset(&self) -> usize {
        self.counts_offset() + self.n_categories * (self.max_objects + 1)
    }

    pub fn order_offset(&self) -> usize {
        self.kind_offset() + 3
    }

    pub fn dim(&self) -> usize {
        self.order_offset() + 1
    }
}

pub fn embed_condition(p: &StructuredPrompt, world: &World) -> Vec<f64> {
    let l = ConditionLayout::of(world);
    let mut v = vec![0.0; l.dim()];
    match &p.kind {
        PromptKind::Relational { a, relation, b } => {
            let (first, second, rel) = if a.category < b.category {
                (a, b, *relation)
            } else {
                v[l.order_offset()] = 1.0;
                (b, a, relation.opposite())
            };
            v[first.category.0] = 1.0;
            v[l.relation_offset() + rel.index()] = 1.0;
            v[l.b_offset() + second.category.0] = 1.0;
            if let Some(c) = first.color {
                v[l.color_a_offset() + c.0] = 1.0;
            }
            if let Some(c) = second.color {
                v[l.color_b_offset() + c.0] = 1.0;
            }
            v[l.kind_offset()] = 1.0;
        }
        PromptKind::Counting(terms) => {
            for t in terms {
                let count = t.count.min(l.max_objects);
                v[l.counts_offset() + t.category.0 * (l.max_objects + 1) + count] = 1.0;
            }
            v[l.kind_offset() + 1] = 1.0;
        }
        PromptKind::EmptyScene => v[l.kind_offset() + 2] = 1.0,
    }
    v
}
