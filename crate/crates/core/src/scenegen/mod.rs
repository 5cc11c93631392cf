//! The synthetic scene world: vocabulary, prompts, scenes and their latent
//! encoding, plus the data used to pretrain the base model.

mod prompt;
mod scene;
mod synth;

pub use prompt::{
    parse_prompt, render_prompt, CountTerm, PromptKind, PromptRecord, StructuredPrompt, Subject,
    TemplateId, TEMPLATES_PER_KIND,
};
pub(crate) use scene::{argmax, slot_geometry};
pub use scene::{
    decode_latent, encode_scene, quantize, LatentLayout, ObjectInstance, Scene, SceneLatent, GRID,
    MAX_SIZE, MIN_SIZE,
};
pub use synth::{
    all_relational_triples, generate_fresh_prompts, generate_prompt_set, read_prompt_jsonl,
    synth_pretraining_example, write_prompt_jsonl, RelationalKey, SplitTag, DEFAULT_P_ALIGN,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CATEGORIES: [&str; 10] = [
    "dog", "cat", "car", "chair", "bird", "clock", "suitcase", "airplane", "bench", "pizza",
];
pub const DEFAULT_COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const DEFAULT_MAX_OBJECTS: usize = 3;

/// Number words go up to nine, which bounds the object budget.
pub const MAX_OBJECTS_LIMIT: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Horizontal,
    Vertical,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn family(self) -> Family {
        match self {
            Relation::LeftOf | Relation::RightOf => Family::Horizontal,
            Relation::Above | Relation::Below => Family::Vertical,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    pub fn from_name(s: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

/// English plural used in counting prompts.
pub fn plural(noun: &str) -> String {
    if noun.ends_with("ch")
        || noun.ends_with("sh")
        || noun.ends_with('s')
        || noun.ends_with('x')
        || noun.ends_with('z')
    {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

const RESERVED: [&str; 32] = [
    "a",
    "an",
    "and",
    "scene",
    "with",
    "is",
    "it",
    "its",
    "positioned",
    "nothing",
    "no",
    "objects",
    "empty",
    "left",
    "right",
    "of",
    "to",
    "the",
    "on",
    "side",
    "above",
    "below",
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
];

/// Names must be single lowercase words that cannot be confused with the
/// template vocabulary.
fn is_word(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase()) && !RESERVED.contains(&s)
}

/// Ordered list of object category names. Indices are stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocab {
    names: Vec<String>,
}

impl CategoryVocab {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Config(
                "vocabulary needs at least 2 categories".into(),
            ));
        }
        for n in &names {
            if !is_word(n) {
                return Err(Error::Config(format!(
                    "category {n:?} must be a non-empty lowercase ascii word"
                )));
            }
        }
        let mut forms = std::collections::HashSet::new();
        for n in &names {
            if !forms.insert(n.clone()) || !forms.insert(plural(n)) {
                return Err(Error::Config(format!(
                    "category {n:?} is duplicated or collides with a plural"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: CategoryId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn lookup(&self, name: &str) -> Option<CategoryId> {
        self.names.iter().position(|n| n == name).map(CategoryId)
    }

    pub fn lookup_plural(&self, name: &str) -> Option<CategoryId> {
        self.names
            .iter()
            .position(|n| plural(n) == name)
            .map(CategoryId)
    }

    pub fn ids(&self) -> impl Iterator<Item = CategoryId> {
        (0..self.names.len()).map(CategoryId)
    }
}

impl Default for CategoryVocab {
    fn default() -> Self {
        Self::new(DEFAULT_CATEGORIES).expect("default vocabulary is valid")
    }
}

/// Everything that fixes the shape of the scene world.
///
/// `palette` is `Some` exactly when color mode is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub vocab: CategoryVocab,
    pub palette: Option<Vec<String>>,
    pub max_objects: usize,
}

impl Default for World {
    fn default() -> Self {
        Self {
            vocab: CategoryVocab::default(),
            palette: None,
            max_objects: DEFAULT_MAX_OBJECTS,
        }
    }
}

impl World {
    pub fn new(
        vocab: CategoryVocab,
        palette: Option<Vec<String>>,
        max_objects: usize,
    ) -> Result<Self> {
        if max_objects < 2 || max_objects > MAX_OBJECTS_LIMIT {
            return Err(Error::Config(format!(
                "max_objects must be in [2, {MAX_OBJECTS_LIMIT}], got {max_objects}"
            )));
        }
        if let Some(p) = &palette {
            if p.is_empty() {
                return Err(Error::Config("color palette is empty".into()));
            }
            let mut seen = std::collections::HashSet::new();
            for c in p {
                if !is_word(c) || !seen.insert(c.as_str()) {
                    return Err(Error::Config(format!("bad or duplicate color {c:?}")));
                }
                if vocab.lookup(c).is_some() || vocab.lookup_plural(c).is_some() {
                    return Err(Error::Config(format!(
                        "color {c:?} collides with a category"
                    )));
                }
            }
        }
        Ok(Self {
            vocab,
            palette,
            max_objects,
        })
    }

    pub fn with_colors(mut self) -> Self {
        self.palette = Some(DEFAULT_COLORS.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn color_mode(&self) -> bool {
        self.palette.is_some()
    }

    pub fn n_colors(&self) -> usize {
        self.palette.as_ref().map_or(0, Vec::len)
    }

    pub fn color_name(&self, c: ColorId) -> &str {
        &self.palette.as_ref().expect("color mode disabled")[c.0]
    }

    pub fn lookup_color(&self, name: &str) -> Option<ColorId> {
        self.palette
            .as_ref()?
            .iter()
            .position(|c| c == name)
            .map(ColorId)
    }

    pub fn layout(&self) -> LatentLayout {
        LatentLayout {
            n_categories: self.vocab.len(),
            n_colors: self.n_colors(),
            max_objects: self.max_objects,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relation_families() {
        assert_eq!(Relation::LeftOf.family(), Family::Horizontal);
        assert_eq!(Relation::RightOf.family(), Family::Horizontal);
        assert_eq!(Relation::Above.family(), Family::Vertical);
        assert_eq!(Relation::Below.family(), Family::Vertical);
        for r in Relation::ALL {
            assert_eq!(r.opposite().family(), r.family());
            assert_eq!(r.opposite().opposite(), r);
            assert_eq!(Relation::from_name(r.as_str()), Some(r));
        }
    }

    #[test]
    fn plurals() {
        assert_eq!(plural("cat"), "cats");
        assert_eq!(plural("bench"), "benches");
        assert_eq!(plural("bus"), "buses");
        assert_eq!(plural("pizza"), "pizzas");
    }

    #[test]
    fn vocab_validation() {
        assert!(CategoryVocab::new(["dog"]).is_err());
        assert!(CategoryVocab::new(["dog", "dog"]).is_err());
        assert!(CategoryVocab::new(["dog", ""]).is_err());
        assert!(CategoryVocab::new(["dog", "Cat"]).is_err());
        assert!(CategoryVocab::new(["cat", "cats"]).is_err());
        let v = CategoryVocab::default();
        assert_eq!(v.len(), 10);
        assert_eq!(v.lookup("pizza"), Some(CategoryId(9)));
        assert_eq!(v.lookup_plural("benches"), Some(CategoryId(8)));
    }

    #[test]
    fn latent_dimensions() {
        assert_eq!(World::default().layout().dim(), 45);
        assert_eq!(World::default().with_colors().layout().dim(), 57);
    }

    #[test]
    fn world_rejects_color_collisions() {
        let v = CategoryVocab::new(["red", "cat"]).unwrap();
        assert!(World::new(v, Some(vec!["red".into()]), 3).is_err());
        assert!(World::new(CategoryVocab::default(), None, 1).is_err());
    }
}
