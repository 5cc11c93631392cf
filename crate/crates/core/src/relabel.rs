//! Prompt relabeling from detections.
//!
//! A relational prompt is compared with what the detector saw:
//!
//! 1. no detections: rewrite as the empty-scene prompt;
//! 2. detected categories differ from the two prompted subjects: rewrite as
//!    a counting prompt of the detected multiset;
//! 3. in color mode, detected subject colors replace prompted ones;
//! 4. the subjects' centers decide the relation along the prompt's own axis.
//!    A different answer rewrites the relation; a tie falls back to the
//!    counting prompt.
//!
//! Anything rewritten gets weight `λ_relabel`, untouched pairs weight 1.
//! Counting and empty-scene prompts are only checked for counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectedObject, DetectionSet};
use crate::error::{Error, Result};
use crate::scenegen::{
    CategoryId, ColorId, Family, PromptKind, PromptRecord, Relation, StructuredPrompt, Subject,
    World,
};

pub const DEFAULT_LAMBDA_RELABEL: f64 = 0.5;

/// Returned when two centers are too close along the axis in question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("relation is ambiguous: centers within the margin along the axis")]
pub struct AmbiguousRelation;

/// Relation of A to B along `family`'s axis. `cy` grows upward, so a larger
/// `cy` is above.
pub fn determine_relation(
    center_a: (f64, f64),
    center_b: (f64, f64),
    family: Family,
    margin: f64,
) -> std::result::Result<Relation, AmbiguousRelation> {
    let (d, lower, higher) = match family {
        Family::Horizontal => (center_b.0 - center_a.0, Relation::RightOf, Relation::LeftOf),
        Family::Vertical => (center_a.1 - center_b.1, Relation::Below, Relation::Above),
    };
    if !(d.abs() > margin) {
        return Err(AmbiguousRelation);
    }
    Ok(if d > 0.0 { higher } else { lower })
}

/// `(category, color)` with the color only present when colors are compared.
pub type CountKey = (CategoryId, Option<ColorId>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountVerdict {
    pub expected: BTreeMap<CountKey, usize>,
    pub observed: BTreeMap<CountKey, usize>,
    pub matches: bool,
}

fn key(category: CategoryId, color: Option<ColorId>, compare_colors: bool) -> CountKey {
    (category, color.filter(|_| compare_colors))
}

/// Expected vs observed multisets. Relational prompts expect one of each
/// subject, counting prompts their stated counts, empty scenes nothing.
pub fn check_counts(p: &StructuredPrompt, d: &DetectionSet, compare_colors: bool) -> CountVerdict {
    let mut expected = BTreeMap::new();
    match &p.kind {
        PromptKind::Relational { a, b, .. } => {
            for s in [a, b] {
                *expected
                    .entry(key(s.category, s.color, compare_colors))
                    .or_insert(0) += 1;
            }
        }
        PromptKind::Counting(terms) => {
            for t in terms {
                *expected.entry((t.category, None)).or_insert(0) += t.count;
            }
        }
        PromptKind::EmptyScene => {}
    }
    // counting prompts carry no colors
    let colors = compare_colors && p.is_relational();
    let mut observed = BTreeMap::new();
    for o in d.objects() {
        *observed
            .entry(key(o.category, o.color, colors))
            .or_insert(0) += 1;
    }
    let matches = expected == observed;
    CountVerdict {
        expected,
        observed,
        matches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeKind {
    Matched,
    RelationFix,
    CountFix,
    ColorFix,
    Empty,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 5] = [
        OutcomeKind::Matched,
        OutcomeKind::RelationFix,
        OutcomeKind::CountFix,
        OutcomeKind::ColorFix,
        OutcomeKind::Empty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Matched => "matched",
            OutcomeKind::RelationFix => "relation-fix",
            OutcomeKind::CountFix => "count-fix",
            OutcomeKind::ColorFix => "color-fix",
            OutcomeKind::Empty => "empty",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelabelOutcome {
    pub kind: OutcomeKind,
    pub new_prompt: StructuredPrompt,
    pub weight: f64,
    /// Set when subject colors were rewritten, including alongside a relation fix.
    pub colors_rewritten: bool,
}

impl RelabelOutcome {
    pub fn matched(&self) -> bool {
        self.kind == OutcomeKind::Matched
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelabelConfig {
    pub lambda_relabel: f64,
    /// Minimum center separation for a relation to count as decided.
    pub margin: f64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            lambda_relabel: DEFAULT_LAMBDA_RELABEL,
            margin: 0.0,
        }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_relabel) {
            return Err(Error::Config(format!(
                "relabel.lambda {} outside [0, 1]",
                self.lambda_relabel
            )));
        }
        if !(self.margin >= 0.0 && self.margin < 1.0) {
            return Err(Error::Config(format!(
                "relabel.margin {} outside [0, 1)",
                self.margin
            )));
        }
        Ok(())
    }
}

fn observed_counting(d: &DetectionSet, template: u8) -> StructuredPrompt {
    if d.is_empty() {
        return StructuredPrompt::empty().with_template(template);
    }
    StructuredPrompt::counting(d.objects().iter().map(|o| (1, o.category))).with_template(template)
}

fn find(d: &DetectionSet, category: CategoryId) -> &DetectedObject {
    d.objects()
        .iter()
        .find(|o| o.category == category)
        .expect("count check guarantees the subject was detected")
}

/// The relabeling rule. Total: every (prompt, detections) pair gets an outcome.
pub fn relabel(
    p: &StructuredPrompt,
    d: &DetectionSet,
    cfg: &RelabelConfig,
    world: &World,
) -> RelabelOutcome {
    let keep = || RelabelOutcome {
        kind: OutcomeKind::Matched,
        new_prompt: p.clone(),
        weight: 1.0,
        colors_rewritten: false,
    };
    let rewrite = |kind, new_prompt| RelabelOutcome {
        kind,
        new_prompt,
        weight: cfg.lambda_relabel,
        colors_rewritten: false,
    };
    let fallback = || {
        let np = observed_counting(d, p.template);
        let kind = if d.is_empty() {
            OutcomeKind::Empty
        } else {
            OutcomeKind::CountFix
        };
        rewrite(kind, np)
    };

    let PromptKind::Relational { a, relation, b } = &p.kind else {
        return if check_counts(p, d, false).matches {
            keep()
        } else {
            fallback()
        };
    };
    if d.is_empty() || !check_counts(p, d, false).matches {
        return fallback();
    }
    let (da, db) = (find(d, a.category), find(d, b.category));
    let (mut na, mut nb) = (*a, *b);
    if world.color_mode() {
        na.color = da.color;
        nb.color = db.color;
    }
    let colors_rewritten = (na, nb) != (*a, *b);
    let observed = match determine_relation(da.center(), db.center(), relation.family(), cfg.margin)
    {
        Ok(r) => r,
        Err(AmbiguousRelation) => return fallback(),
    };
    if observed == *relation && !colors_rewritten {
        return keep();
    }
    let kind = if observed != *relation {
        OutcomeKind::RelationFix
    } else {
        OutcomeKind::ColorFix
    };
    RelabelOutcome {
        colors_rewritten,
        ..rewrite(
            kind,
            StructuredPrompt::relational(na, observed, nb).with_template(p.template),
        )
    }
}

/// The color step on its own: rewrites prompted subject colors to the
/// detected ones. Requires color mode and matching category counts.
pub fn relabel_color(
    p: &StructuredPrompt,
    d: &DetectionSet,
    cfg: &RelabelConfig,
    world: &World,
) -> Result<RelabelOutcome> {
    if !world.color_mode() {
        return Err(Error::InvalidArgument(
            "color relabeling needs color mode".into(),
        ));
    }
    let PromptKind::Relational { a, relation, b } = &p.kind else {
        return Err(Error::InvalidArgument(
            "color relabeling needs a relational prompt".into(),
        ));
    };
    if !check_counts(p, d, false).matches {
        return Err(Error::InvalidArgument(
            "color relabeling needs matching counts".into(),
        ));
    }
    let na = Subject {
        color: find(d, a.category).color,
        ..*a
    };
    let nb = Subject {
        color: find(d, b.category).color,
        ..*b
    };
    Ok(if (na, nb) == (*a, *b) {
        RelabelOutcome {
            kind: OutcomeKind::Matched,
            new_prompt: p.clone(),
            weight: 1.0,
            colors_rewritten: false,
        }
    } else {
        RelabelOutcome {
            kind: OutcomeKind::ColorFix,
            new_prompt: StructuredPrompt::relational(na, *relation, nb).with_template(p.template),
            weight: cfg.lambda_relabel,
            colors_rewritten: true,
        }
    })
}

/// Hex SHA-256 over the detections' JSON records.
pub fn detections_digest(d: &DetectionSet, world: &World) -> String {
    let json = serde_json::to_vec(&d.to_records(world)).expect("detection records serialize");
    hex::encode(Sha256::digest(json))
}

/// One line of a relabel log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelLogEntry {
    pub iteration: usize,
    pub index: usize,
    pub original: PromptRecord,
    pub detections_digest: String,
    pub kind: OutcomeKind,
    pub new_prompt: PromptRecord,
    pub lambda: f64,
}

impl RelabelLogEntry {
    pub fn new(
        iteration: usize,
        index: usize,
        original: &StructuredPrompt,
        d: &DetectionSet,
        outcome: &RelabelOutcome,
        world: &World,
    ) -> Result<Self> {
        Ok(Self {
            iteration,
            index,
            original: PromptRecord::from_prompt(original, world, None)?,
            detections_digest: detections_digest(d, world),
            kind: outcome.kind,
            new_prompt: PromptRecord::from_prompt(&outcome.new_prompt, world, None)?,
            lambda: outcome.weight,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{parse_prompt, render_prompt, CategoryVocab};

    fn world() -> World {
        World::default()
    }

    fn det(w: &World, name: &str, cx: f64, cy: f64) -> DetectedObject {
        DetectedObject {
            category: w.vocab.lookup(name).unwrap(),
            color: None,
            bbox: [cx, cy, 0.1, 0.1],
            confidence: 0.9,
        }
    }

    fn text(p: &StructuredPrompt, w: &World) -> String {
        render_prompt(p, p.template, w).unwrap()
    }

    #[test]
    fn relation_examples() {
        use Family::*;
        assert_eq!(
            determine_relation((0.3, 0.5), (0.7, 0.5), Horizontal, 0.0),
            Ok(Relation::LeftOf)
        );
        assert_eq!(
            determine_relation((0.7, 0.5), (0.3, 0.5), Horizontal, 0.0),
            Ok(Relation::RightOf)
        );
        assert_eq!(
            determine_relation((0.5, 0.8), (0.5, 0.2), Vertical, 0.0),
            Ok(Relation::Above)
        );
        assert_eq!(
            determine_relation((0.5, 0.2), (0.5, 0.8), Vertical, 0.0),
            Ok(Relation::Below)
        );
        for f in [Horizontal, Vertical] {
            assert_eq!(
                determine_relation((0.5, 0.5), (0.5, 0.5), f, 0.0),
                Err(AmbiguousRelation)
            );
        }
        assert_eq!(
            determine_relation((0.5, 0.5), (0.55, 0.5), Horizontal, 0.1),
            Err(AmbiguousRelation)
        );
    }

    #[test]
    fn count_examples() {
        let w = world();
        let p = parse_prompt("a dog left of a car", &w).unwrap();
        let d = DetectionSet::new(vec![det(&w, "dog", 0.3, 0.5), det(&w, "car", 0.7, 0.5)]);
        assert!(check_counts(&p, &d, false).matches);

        let p = parse_prompt("a cat above a dog", &w).unwrap();
        let d = DetectionSet::new(vec![
            det(&w, "cat", 0.3, 0.5),
            det(&w, "cat", 0.5, 0.5),
            det(&w, "dog", 0.7, 0.5),
        ]);
        let v = check_counts(&p, &d, false);
        assert!(!v.matches);
        let cat = w.vocab.lookup("cat").unwrap();
        let dog = w.vocab.lookup("dog").unwrap();
        assert_eq!(
            v.observed,
            BTreeMap::from([((cat, None), 2), ((dog, None), 1)])
        );

        assert!(!check_counts(&p, &DetectionSet::default(), false).matches);
        assert!(check_counts(&StructuredPrompt::empty(), &DetectionSet::default(), false).matches);
    }

    #[test]
    fn relabel_examples() {
        let w = world();
        let cfg = RelabelConfig::default();
        let p = parse_prompt("a dog left of a car", &w).unwrap();

        let d = DetectionSet::new(vec![det(&w, "dog", 0.3, 0.5), det(&w, "car", 0.7, 0.5)]);
        let o = relabel(&p, &d, &cfg, &w);
        assert_eq!(o.kind, OutcomeKind::Matched);
        assert_eq!(o.new_prompt, p);
        assert_eq!(o.weight, 1.0);

        let d = DetectionSet::new(vec![det(&w, "dog", 0.7, 0.5), det(&w, "car", 0.3, 0.5)]);
        let o = relabel(&p, &d, &cfg, &w);
        assert_eq!(o.kind, OutcomeKind::RelationFix);
        assert_eq!(text(&o.new_prompt, &w), "a dog right of a car");
        assert_eq!(o.weight, 0.5);

        let p = parse_prompt("a cat above a dog", &w).unwrap();
        let d = DetectionSet::new(vec![
            det(&w, "cat", 0.3, 0.5),
            det(&w, "cat", 0.5, 0.5),
            det(&w, "dog", 0.7, 0.5),
        ]);
        let o = relabel(&p, &d, &cfg, &w);
        assert_eq!(o.kind, OutcomeKind::CountFix);
        assert_eq!(text(&o.new_prompt, &w), "2 cats and 1 dog");
        assert_eq!(o.weight, 0.5);

        let o = relabel(&p, &DetectionSet::default(), &cfg, &w);
        assert_eq!(o.kind, OutcomeKind::Empty);
        assert_eq!(o.new_prompt.kind, PromptKind::EmptyScene);
    }

    #[test]
    fn ties_fall_back_to_counting() {
        let w = world();
        let p = parse_prompt("a dog above a car", &w).unwrap();
        let d = DetectionSet::new(vec![det(&w, "dog", 0.2, 0.5), det(&w, "car", 0.8, 0.5)]);
        let o = relabel(&p, &d, &RelabelConfig::default(), &w);
        assert_eq!(o.kind, OutcomeKind::CountFix);
        assert_eq!(text(&o.new_prompt, &w), "1 dog and 1 car");
    }

    #[test]
    fn template_is_preserved() {
        let w = world();
        let p = parse_prompt("positioned above a suitcase is a car", &w).unwrap();
        assert_eq!(p.template, 1);
        let d = DetectionSet::new(vec![
            det(&w, "car", 0.5, 0.2),
            det(&w, "suitcase", 0.5, 0.8),
        ]);
        let o = relabel(&p, &d, &RelabelConfig::default(), &w);
        assert_eq!(
            text(&o.new_prompt, &w),
            "positioned below a suitcase is a car"
        );
    }

    #[test]
    fn color_step() {
        let w = World::default().with_colors();
        let cfg = RelabelConfig::default();
        let colored = |name: &str, color: &str, cx: f64, cy: f64| DetectedObject {
            color: w.lookup_color(color),
            ..det(&w, name, cx, cy)
        };
        let p = parse_prompt("a red cat above a green dog", &w).unwrap();

        let d = DetectionSet::new(vec![
            colored("cat", "red", 0.5, 0.8),
            colored("dog", "green", 0.5, 0.2),
        ]);
        let o = relabel_color(&p, &d, &cfg, &w).unwrap();
        assert_eq!(o.kind, OutcomeKind::Matched);
        assert_eq!(relabel(&p, &d, &cfg, &w).kind, OutcomeKind::Matched);

        let d = DetectionSet::new(vec![
            colored("cat", "blue", 0.5, 0.8),
            colored("dog", "green", 0.5, 0.2),
        ]);
        let o = relabel_color(&p, &d, &cfg, &w).unwrap();
        assert_eq!(text(&o.new_prompt, &w), "a blue cat above a green dog");
        assert_eq!(o.weight, 0.5);
        let o = relabel(&p, &d, &cfg, &w);
        assert_eq!(o.kind, OutcomeKind::ColorFix);
        assert_eq!(text(&o.new_prompt, &w), "a blue cat above a green dog");

        let d = DetectionSet::new(vec![
            colored("cat", "blue", 0.5, 0.2),
            colored("dog", "green", 0.5, 0.8),
        ]);
        let o = relabel(&p, &d, &cfg, &w);
        assert_eq!(o.kind, OutcomeKind::RelationFix);
        assert!(o.colors_rewritten);
        assert_eq!(o.weight, 0.5);
        assert_eq!(text(&o.new_prompt, &w), "a blue cat below a green dog");
        assert_eq!(
            relabel(&o.new_prompt, &d, &cfg, &w).kind,
            OutcomeKind::Matched
        );

        assert!(relabel_color(&p, &d, &cfg, &world()).is_err());
    }

    #[test]
    fn counting_prompts_only_recheck_counts() {
        let w = World::new(CategoryVocab::new(["dog", "cat", "car"]).unwrap(), None, 3).unwrap();
        let p = parse_prompt("2 cats and 1 dog", &w).unwrap();
        let d = DetectionSet::new(vec![
            det(&w, "cat", 0.1, 0.1),
            det(&w, "cat", 0.9, 0.9),
            det(&w, "dog", 0.5, 0.5),
        ]);
        assert!(relabel(&p, &d, &RelabelConfig::default(), &w).matched());
        let d = DetectionSet::new(vec![det(&w, "cat", 0.1, 0.1)]);
        let o = relabel(&p, &d, &RelabelConfig::default(), &w);
        assert_eq!(text(&o.new_prompt, &w), "1 cat");
    }

    #[test]
    fn log_entry_serializes_kind() {
        let w = world();
        let p = parse_prompt("a dog left of a car", &w).unwrap();
        let d = DetectionSet::new(vec![det(&w, "dog", 0.7, 0.5), det(&w, "car", 0.3, 0.5)]);
        let o = relabel(&p, &d, &RelabelConfig::default(), &w);
        let e = RelabelLogEntry::new(1, 0, &p, &d, &o, &w).unwrap();
        let line = serde_json::to_string(&e).unwrap();
        assert!(line.contains("\"kind\":\"relation-fix\""));
        assert_eq!(e.detections_digest.len(), 64);
    }
}
