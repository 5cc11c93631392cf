//! Structured prompts and their surface forms.
//!
//! Every prompt kind ships three templates. Template 0 is the canonical
//! form ("a car above a suitcase", "2 cats and 1 dog"); the others are
//! rephrasings ("positioned above a suitcase is a car"). Parsing accepts
//! exactly the rendered forms, so `parse(render(p)) == p` and any text that
//! parses re-renders to itself.

use serde::{Deserialize, Serialize};

use super::{plural, CategoryId, ColorId, Relation, World};
use crate::error::{Error, Result};

pub type TemplateId = u8;

pub const TEMPLATES_PER_KIND: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subject {
    pub category: CategoryId,
    pub color: Option<ColorId>,
}

impl Subject {
    pub fn plain(category: CategoryId) -> Self {
        Self {
            category,
            color: None,
        }
    }

    pub fn colored(category: CategoryId, color: ColorId) -> Self {
        Self {
            category,
            color: Some(color),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountTerm {
    pub count: usize,
    pub category: CategoryId,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    Relational {
        a: Subject,
        relation: Relation,
        b: Subject,
    },
    /// Terms in canonical order: descending count, then category index.
    Counting(Vec<CountTerm>),
    EmptyScene,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub kind: PromptKind,
    pub template: TemplateId,
}

impl StructuredPrompt {
    pub fn relational(a: Subject, relation: Relation, b: Subject) -> Self {
        Self {
            kind: PromptKind::Relational { a, relation, b },
            template: 0,
        }
    }

    /// Builds a counting prompt from an arbitrary multiset, merging repeats
    /// and sorting into canonical order.
    pub fn counting(terms: impl IntoIterator<Item = (usize, CategoryId)>) -> Self {
        let mut merged: std::collections::BTreeMap<CategoryId, usize> = Default::default();
        for (n, c) in terms {
            *merged.entry(c).or_default() += n;
        }
        let mut terms: Vec<CountTerm> = merged
            .into_iter()
            .filter(|&(_, n)| n > 0)
            .map(|(category, count)| CountTerm { count, category })
            .collect();
        terms.sort_by(|x, y| y.count.cmp(&x.count).then(x.category.cmp(&y.category)));
        if terms.is_empty() {
            return Self::empty();
        }
        Self {
            kind: PromptKind::Counting(terms),
            template: 0,
        }
    }

    pub fn empty() -> Self {
        Self {
            kind: PromptKind::EmptyScene,
            template: 0,
        }
    }

    pub fn with_template(mut self, template: TemplateId) -> Self {
        self.template = template;
        self
    }

    pub fn is_relational(&self) -> bool {
        matches!(self.kind, PromptKind::Relational { .. })
    }

    pub fn relation(&self) -> Option<Relation> {
        match self.kind {
            PromptKind::Relational { relation, .. } => Some(relation),
            _ => None,
        }
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPrompt(m));
        if self.template >= TEMPLATES_PER_KIND {
            return bad(format!("template {} out of range", self.template));
        }
        let n_cat = world.vocab.len();
        let check_subject = |s: &Subject| -> Result<()> {
            if s.category.0 >= n_cat {
                return Err(Error::InvalidPrompt(format!(
                    "category {} out of range",
                    s.category.0
                )));
            }
            if let Some(c) = s.color {
                if !world.color_mode() {
                    return Err(Error::InvalidPrompt("colors require color mode".into()));
                }
                if c.0 >= world.n_colors() {
                    return Err(Error::InvalidPrompt(format!("color {} out of range", c.0)));
                }
            }
            Ok(())
        };
        match &self.kind {
            PromptKind::Relational { a, b, .. } => {
                check_subject(a)?;
                check_subject(b)?;
                if a.category == b.category {
                    return bad("relational subjects must be distinct categories".into());
                }
            }
            PromptKind::Counting(terms) => {
                if terms.is_empty() {
                    return bad("counting prompt without terms".into());
                }
                let mut total = 0;
                for t in terms {
                    if t.count == 0 {
                        return bad("counts must be positive".into());
                    }
                    if t.category.0 >= n_cat {
                        return bad(format!("category {} out of range", t.category.0));
                    }
                    total += t.count;
                }
                if total > world.max_objects {
                    return bad(format!("total count {total} exceeds {}", world.max_objects));
                }
                let canonical =
                    StructuredPrompt::counting(terms.iter().map(|t| (t.count, t.category)));
                if canonical.kind != self.kind {
                    return bad("counting terms must be distinct and in canonical order".into());
                }
            }
            PromptKind::EmptyScene => {}
        }
        Ok(())
    }
}

const NUMBER_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

fn article_for(word: &str) -> &'static str {
    match word.as_bytes().first() {
        Some(b'a' | b'e' | b'i' | b'o' | b'u') => "an",
        _ => "a",
    }
}

fn subject_phrase(s: &Subject, world: &World) -> String {
    let noun = world.vocab.name(s.category);
    match s.color {
        Some(c) => {
            let color = world.color_name(c);
            format!("{} {color} {noun}", article_for(color))
        }
        None => format!("{} {noun}", article_for(noun)),
    }
}

fn relation_phrase(r: Relation, template: TemplateId) -> &'static str {
    match (template, r) {
        (0, Relation::LeftOf) => "left of",
        (0, Relation::RightOf) => "right of",
        (2, Relation::LeftOf) => "on its left side",
        (2, Relation::RightOf) => "on its right side",
        (2, Relation::Above) => "above it",
        (2, Relation::Below) => "below it",
        (_, Relation::LeftOf) => "to the left of",
        (_, Relation::RightOf) => "to the right of",
        (_, Relation::Above) => "above",
        (_, Relation::Below) => "below",
    }
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn count_list(terms: &[CountTerm], world: &World, words: bool) -> String {
    let items: Vec<String> = terms
        .iter()
        .map(|t| {
            let name = world.vocab.name(t.category);
            let noun = if t.count == 1 {
                name.to_string()
            } else {
                plural(name)
            };
            if words {
                format!("{} {noun}", NUMBER_WORDS[t.count])
            } else {
                format!("{} {noun}", t.count)
            }
        })
        .collect();
    join_list(&items)
}

/// Renders `p` with `template`. Fails on invalid prompts or unknown templates.
pub fn render_prompt(p: &StructuredPrompt, template: TemplateId, world: &World) -> Result<String> {
    let p = StructuredPrompt {
        kind: p.kind.clone(),
        template,
    };
    p.validate(world)?;
    Ok(match &p.kind {
        PromptKind::Relational { a, relation, b } => {
            let (sa, sb) = (subject_phrase(a, world), subject_phrase(b, world));
            let rel = relation_phrase(*relation, template);
            match template {
                0 => format!("{sa} {rel} {sb}"),
                1 => format!("positioned {rel} {sb} is {sa}"),
                _ => format!("{sb} with {sa} {rel}"),
            }
        }
        PromptKind::Counting(terms) => match template {
            0 => count_list(terms, world, false),
            1 => count_list(terms, world, true),
            _ => format!("a scene with {}", count_list(terms, world, false)),
        },
        PromptKind::EmptyScene => match template {
            0 => "an empty scene".to_string(),
            1 => "nothing".to_string(),
            _ => "a scene with no objects".to_string(),
        },
    })
}

struct Parser<'a> {
    toks: Vec<&'a str>,
    pos: usize,
    world: &'a World,
}

type PResult<T> = std::result::Result<T, String>;

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> PResult<&'a str> {
        let t = self
            .peek()
            .ok_or_else(|| "unexpected end of text".to_string())?;
        self.pos += 1;
        Ok(t)
    }

    fn eat(&mut self, words: &[&str]) -> bool {
        let end = self.pos + words.len();
        if end <= self.toks.len() && self.toks[self.pos..end] == *words {
            self.pos = end;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, words: &[&str]) -> PResult<()> {
        if self.eat(words) {
            Ok(())
        } else {
            Err(format!(
                "expected {:?} at token {}",
                words.join(" "),
                self.pos
            ))
        }
    }

    fn done(&self) -> PResult<()> {
        if self.pos == self.toks.len() {
            Ok(())
        } else {
            Err(format!("trailing text at token {}", self.pos))
        }
    }

    fn subject(&mut self) -> PResult<Subject> {
        let art = self.next()?;
        if art != "a" && art != "an" {
            return Err(format!("expected article, found {art:?}"));
        }
        let w = self.next()?;
        if let Some(color) = self.world.lookup_color(w) {
            let noun = self.next()?;
            let cat = self
                .world
                .vocab
                .lookup(noun)
                .ok_or_else(|| format!("unknown category {noun:?}"))?;
            return Ok(Subject::colored(cat, color));
        }
        let cat = self
            .world
            .vocab
            .lookup(w)
            .ok_or_else(|| format!("unknown category {w:?}"))?;
        Ok(Subject::plain(cat))
    }

    fn relation(&mut self, template: TemplateId) -> PResult<Relation> {
        for r in Relation::ALL {
            let phrase: Vec<&str> = relation_phrase(r, template).split(' ').collect();
            if self.eat(&phrase) {
                return Ok(r);
            }
        }
        Err(format!("expected a relation at token {}", self.pos))
    }

    fn count_term(&mut self, words: bool) -> PResult<(usize, CategoryId)> {
        let num = self.next()?;
        let n = if words {
            NUMBER_WORDS
                .iter()
                .position(|w| *w == num)
                .ok_or_else(|| format!("expected a number word, found {num:?}"))?
        } else {
            if num.len() != 1 || !num.as_bytes()[0].is_ascii_digit() {
                return Err(format!("expected a digit, found {num:?}"));
            }
            usize::from(num.as_bytes()[0] - b'0')
        };
        let noun = self.next()?;
        let cat = if n == 1 {
            self.world.vocab.lookup(noun)
        } else {
            self.world.vocab.lookup_plural(noun)
        }
        .ok_or_else(|| format!("unknown noun {noun:?} for count {n}"))?;
        Ok((n, cat))
    }

    fn count_list(&mut self, words: bool) -> PResult<Vec<(usize, CategoryId)>> {
        let mut terms = vec![self.count_term(words)?];
        loop {
            if self.eat(&[","]) {
                terms.push(self.count_term(words)?);
            } else if self.eat(&["and"]) {
                terms.push(self.count_term(words)?);
                return Ok(terms);
            } else {
                return Ok(terms);
            }
        }
    }

    fn prompt(&mut self) -> PResult<StructuredPrompt> {
        if self.eat(&["an", "empty", "scene"]) {
            self.done()?;
            return Ok(StructuredPrompt::empty());
        }
        if self.eat(&["nothing"]) {
            self.done()?;
            return Ok(StructuredPrompt::empty().with_template(1));
        }
        if self.eat(&["a", "scene", "with"]) {
            if self.eat(&["no", "objects"]) {
                self.done()?;
                return Ok(StructuredPrompt::empty().with_template(2));
            }
            let terms = self.count_list(false)?;
            self.done()?;
            return Ok(counting_exact(terms)?.with_template(2));
        }
        let first = self.peek().ok_or("empty text")?;
        if first.len() == 1 && first.as_bytes()[0].is_ascii_digit() {
            let terms = self.count_list(false)?;
            self.done()?;
            return Ok(counting_exact(terms)?);
        }
        if NUMBER_WORDS.contains(&first) {
            let terms = self.count_list(true)?;
            self.done()?;
            return Ok(counting_exact(terms)?.with_template(1));
        }
        if self.eat(&["positioned"]) {
            let rel = self.relation(1)?;
            let b = self.subject()?;
            self.expect(&["is"])?;
            let a = self.subject()?;
            self.done()?;
            return Ok(StructuredPrompt::relational(a, rel, b).with_template(1));
        }
        let first_subject = self.subject()?;
        if self.eat(&["with"]) {
            let a = self.subject()?;
            let rel = self.relation(2)?;
            self.done()?;
            return Ok(StructuredPrompt::relational(a, rel, first_subject).with_template(2));
        }
        let rel = self.relation(0)?;
        let b = self.subject()?;
        self.done()?;
        Ok(StructuredPrompt::relational(first_subject, rel, b))
    }
}

/// Counting terms exactly as written; repeats are rejected rather than merged.
fn counting_exact(terms: Vec<(usize, CategoryId)>) -> PResult<StructuredPrompt> {
    let mut seen = std::collections::HashSet::new();
    if !terms.iter().all(|(_, c)| seen.insert(*c)) {
        return Err("category repeated in counting prompt".into());
    }
    let kind = PromptKind::Counting(
        terms
            .into_iter()
            .map(|(count, category)| CountTerm { count, category })
            .collect(),
    );
    Ok(StructuredPrompt { kind, template: 0 })
}

fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        match w.strip_suffix(',') {
            Some(stem) => {
                out.push(stem);
                out.push(",");
            }
            None => out.push(w),
        }
    }
    out
}

/// Parses a surface form produced by [`render_prompt`] back into its
/// structured prompt, including which template produced it.
pub fn parse_prompt(text: &str, world: &World) -> Result<StructuredPrompt> {
    let err = |reason: String| Error::PromptParse {
        text: text.to_string(),
        reason,
    };
    let mut parser = Parser {
        toks: tokenize(text),
        pos: 0,
        world,
    };
    let p = parser.prompt().map_err(err)?;
    p.validate(world).map_err(|e| err(e.to_string()))?;
    let rendered = render_prompt(&p, p.template, world)?;
    if rendered.split_whitespace().ne(text.split_whitespace()) {
        return Err(err(format!(
            "not a canonical surface form (expected {rendered:?})"
        )));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub category: String,
    pub color: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub count: usize,
    pub category: String,
}

/// One line of a prompt JSONL file. Category and color are stored by name
/// so files stay readable without the vocabulary's index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub kind: String,
    pub subjects: Option<Vec<SubjectRecord>>,
    pub relation: Option<Relation>,
    pub counts: Option<Vec<CountRecord>>,
    pub template_id: TemplateId,
    pub split_tag: Option<String>,
    pub surface_text: String,
}

impl PromptRecord {
    pub fn from_prompt(
        p: &StructuredPrompt,
        world: &World,
        split_tag: Option<&str>,
    ) -> Result<Self> {
        let subject = |s: &Subject| SubjectRecord {
            category: world.vocab.name(s.category).to_string(),
            color: s.color.map(|c| world.color_name(c).to_string()),
        };
        let surface_text = render_prompt(p, p.template, world)?;
        let (kind, subjects, relation, counts) = match &p.kind {
            PromptKind::Relational { a, relation, b } => (
                "relational",
                Some(vec![subject(a), subject(b)]),
                Some(*relation),
                None,
            ),
            PromptKind::Counting(terms) => (
                "counting",
                None,
                None,
                Some(
                    terms
                        .iter()
                        .map(|t| CountRecord {
                            count: t.count,
                            category: world.vocab.name(t.category).to_string(),
                        })
                        .collect(),
                ),
            ),
            PromptKind::EmptyScene => ("empty", None, None, None),
        };
        Ok(Self {
            kind: kind.to_string(),
            subjects,
            relation,
            counts,
            template_id: p.template,
            split_tag: split_tag.map(str::to_string),
            surface_text,
        })
    }

    /// Rebuilds the structured prompt and checks that `surface_text` agrees.
    pub fn to_prompt(&self, world: &World) -> Result<StructuredPrompt> {
        let bad = |m: &str| Error::Record(m.to_string());
        let cat = |name: &str| {
            world
                .vocab
                .lookup(name)
                .ok_or_else(|| bad("unknown category"))
        };
        let subject = |r: &SubjectRecord| -> Result<Subject> {
            let color = match &r.color {
                Some(c) => Some(world.lookup_color(c).ok_or_else(|| bad("unknown color"))?),
                None => None,
            };
            Ok(Subject {
                category: cat(&r.category)?,
                color,
            })
        };
        let kind = match self.kind.as_str() {
            "relational" => {
                let subs = self
                    .subjects
                    .as_ref()
                    .ok_or_else(|| bad("missing subjects"))?;
                if subs.len() != 2 || self.counts.is_some() {
                    return Err(bad("relational record needs exactly two subjects"));
                }
                PromptKind::Relational {
                    a: subject(&subs[0])?,
                    relation: self.relation.ok_or_else(|| bad("missing relation"))?,
                    b: subject(&subs[1])?,
                }
            }
            "counting" => {
                let counts = self.counts.as_ref().ok_or_else(|| bad("missing counts"))?;
                if self.subjects.is_some() || self.relation.is_some() {
                    return Err(bad("counting record has relational fields"));
                }
                PromptKind::Counting(
                    counts
                        .iter()
                        .map(|c| {
                            Ok(CountTerm {
                                count: c.count,
                                category: cat(&c.category)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                )
            }
            "empty" => {
                if self.subjects.is_some() || self.relation.is_some() || self.counts.is_some() {
                    return Err(bad("empty record has content fields"));
                }
                PromptKind::EmptyScene
            }
            _ => return Err(bad("unknown prompt kind")),
        };
        let p = StructuredPrompt {
            kind,
            template: self.template_id,
        };
        p.validate(world)?;
        if render_prompt(&p, p.template, world)? != self.surface_text {
            return Err(bad("surface_text disagrees with structured fields"));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::default()
    }

    fn cat(name: &str) -> CategoryId {
        world().vocab.lookup(name).unwrap()
    }

    #[test]
    fn canonical_and_rephrased_relational() {
        let w = world();
        let p = StructuredPrompt::relational(
            Subject::plain(cat("car")),
            Relation::Above,
            Subject::plain(cat("suitcase")),
        );
        assert_eq!(render_prompt(&p, 0, &w).unwrap(), "a car above a suitcase");
        assert_eq!(
            render_prompt(&p, 1, &w).unwrap(),
            "positioned above a suitcase is a car"
        );
        assert_eq!(
            render_prompt(&p, 2, &w).unwrap(),
            "a suitcase with a car above it"
        );

        let q = StructuredPrompt::relational(
            Subject::plain(cat("airplane")),
            Relation::RightOf,
            Subject::plain(cat("clock")),
        );
        assert_eq!(
            render_prompt(&q, 0, &w).unwrap(),
            "an airplane right of a clock"
        );
        assert_eq!(
            render_prompt(&q, 2, &w).unwrap(),
            "a clock with an airplane on its right side"
        );
    }

    #[test]
    fn counting_forms() {
        let w = world();
        let p = StructuredPrompt::counting([(1, cat("dog")), (2, cat("cat"))]);
        assert_eq!(render_prompt(&p, 0, &w).unwrap(), "2 cats and 1 dog");
        assert_eq!(render_prompt(&p, 1, &w).unwrap(), "two cats and one dog");
        assert_eq!(
            render_prompt(&p, 2, &w).unwrap(),
            "a scene with 2 cats and 1 dog"
        );
        let three =
            StructuredPrompt::counting([(1, cat("dog")), (1, cat("bench")), (1, cat("cat"))]);
        assert_eq!(
            render_prompt(&three, 0, &w).unwrap(),
            "1 dog, 1 cat and 1 bench"
        );
        let benches = StructuredPrompt::counting([(3, cat("bench"))]);
        assert_eq!(render_prompt(&benches, 0, &w).unwrap(), "3 benches");
    }

    #[test]
    fn empty_forms() {
        let w = world();
        let e = StructuredPrompt::empty();
        assert_eq!(render_prompt(&e, 0, &w).unwrap(), "an empty scene");
        assert_eq!(render_prompt(&e, 1, &w).unwrap(), "nothing");
        assert_eq!(render_prompt(&e, 2, &w).unwrap(), "a scene with no objects");
    }

    #[test]
    fn unknown_template_rejected() {
        let p = StructuredPrompt::empty();
        assert!(render_prompt(&p, 3, &world()).is_err());
    }

    #[test]
    fn colored_subjects() {
        let w = world().with_colors();
        let red = w.lookup_color("red").unwrap();
        let p = StructuredPrompt::relational(
            Subject::colored(cat("cat"), red),
            Relation::Above,
            Subject::plain(cat("dog")),
        );
        let text = render_prompt(&p, 0, &w).unwrap();
        assert_eq!(text, "a red cat above a dog");
        assert_eq!(parse_prompt(&text, &w).unwrap(), p);
        // colors are rejected outside color mode
        assert!(p.validate(&world()).is_err());
    }

    #[test]
    fn invalid_prompts() {
        let w = world();
        let same = StructuredPrompt::relational(
            Subject::plain(cat("dog")),
            Relation::LeftOf,
            Subject::plain(cat("dog")),
        );
        assert!(same.validate(&w).is_err());
        let too_many = StructuredPrompt::counting([(4, cat("dog"))]);
        assert!(too_many.validate(&w).is_err());
        let unordered = StructuredPrompt {
            kind: PromptKind::Counting(vec![
                CountTerm {
                    count: 1,
                    category: cat("dog"),
                },
                CountTerm {
                    count: 2,
                    category: cat("cat"),
                },
            ]),
            template: 0,
        };
        assert!(unordered.validate(&w).is_err());
    }

    #[test]
    fn parse_rejects_noise() {
        let w = world();
        for bad in [
            "",
            "a dog",
            "a dog left of",
            "a dog left of a dog",
            "an dog left of a car",
            "a dog left of a car please",
            "1 dog and 2 cats",
            "1 dog, 1 dog",
            "4 dogs",
            "1 dogs",
            "positioned above a car",
            "a scene with",
        ] {
            assert!(parse_prompt(bad, &w).is_err(), "{bad:?} should not parse");
        }
    }

    #[test]
    fn record_round_trip_and_consistency() {
        let w = world();
        let p = StructuredPrompt::counting([(2, cat("cat")), (1, cat("dog"))]).with_template(1);
        let rec = PromptRecord::from_prompt(&p, &w, Some("train")).unwrap();
        let line = serde_json::to_string(&rec).unwrap();
        let back: PromptRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.to_prompt(&w).unwrap(), p);

        let mut tampered = rec.clone();
        tampered.surface_text = "2 cats and 1 car".into();
        assert!(tampered.to_prompt(&w).is_err());
    }
}
