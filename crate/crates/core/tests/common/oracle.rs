//! Brute-force relabeling reference, written against the rule table rather
//! than the library's code path. Detections are `(category, cx, cy)`.

use std::collections::BTreeMap;

use ipr_core::detector::{DetectedObject, DetectionSet};
use ipr_core::relabel::{relabel, OutcomeKind, RelabelConfig};
use ipr_core::scenegen::{
    CategoryId, CategoryVocab, CountTerm, PromptKind, Relation, StructuredPrompt, Subject, World,
};

pub const LAMBDA: f64 = 0.5;
pub const GRID: usize = 5;

pub fn small_world() -> World {
    World::new(CategoryVocab::new(["dog", "cat", "car"]).unwrap(), None, 3).unwrap()
}

fn multiset(items: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for c in items {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

/// Expected (kind, prompt, weight) for a prompt and a detection list.
pub fn reference(
    p: &StructuredPrompt,
    dets: &[(usize, f64, f64)],
) -> (OutcomeKind, StructuredPrompt, f64) {
    let expected = match &p.kind {
        PromptKind::Relational { a, b, .. } => multiset([a.category.0, b.category.0]),
        PromptKind::Counting(terms) => {
            let mut m = BTreeMap::new();
            for t in terms {
                *m.entry(t.category.0).or_insert(0) += t.count;
            }
            m
        }
        PromptKind::EmptyScene => BTreeMap::new(),
    };
    let observed = multiset(dets.iter().map(|d| d.0));
    let same = |kind| StructuredPrompt {
        kind,
        template: p.template,
    };

    let count_relabel = || {
        if dets.is_empty() {
            return (OutcomeKind::Empty, same(PromptKind::EmptyScene), LAMBDA);
        }
        let mut terms: Vec<(usize, usize)> = observed.iter().map(|(&c, &n)| (n, c)).collect();
        terms.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
        let terms = terms
            .into_iter()
            .map(|(count, c)| CountTerm {
                count,
                category: CategoryId(c),
            })
            .collect();
        (
            OutcomeKind::CountFix,
            same(PromptKind::Counting(terms)),
            LAMBDA,
        )
    };

    if expected != observed {
        return count_relabel();
    }
    let PromptKind::Relational { a, relation, b } = p.kind else {
        return (OutcomeKind::Matched, p.clone(), 1.0);
    };
    let at = |c: CategoryId| *dets.iter().find(|d| d.0 == c.0).unwrap();
    let (da, db) = (at(a.category), at(b.category));
    let observed_relation = match relation {
        Relation::LeftOf | Relation::RightOf if da.1 < db.1 => Relation::LeftOf,
        Relation::LeftOf | Relation::RightOf if da.1 > db.1 => Relation::RightOf,
        Relation::Above | Relation::Below if da.2 > db.2 => Relation::Above,
        Relation::Above | Relation::Below if da.2 < db.2 => Relation::Below,
        _ => return count_relabel(),
    };
    if observed_relation == relation {
        (OutcomeKind::Matched, p.clone(), 1.0)
    } else {
        let kind = PromptKind::Relational {
            a,
            relation: observed_relation,
            b,
        };
        (OutcomeKind::RelationFix, same(kind), LAMBDA)
    }
}

/// Every prompt over the small world: relational pairs under each relation,
/// counting prompts with at most three objects, and the empty scene.
/// Templates cycle so preservation is checked too.
pub fn all_prompts() -> Vec<StructuredPrompt> {
    let mut out = Vec::new();
    let mut template = 0u8;
    let mut next_template = || {
        template = (template + 1) % 3;
        template
    };
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                continue;
            }
            for relation in Relation::ALL {
                out.push(StructuredPrompt {
                    kind: PromptKind::Relational {
                        a: Subject {
                            category: CategoryId(a),
                            color: None,
                        },
                        relation,
                        b: Subject {
                            category: CategoryId(b),
                            color: None,
                        },
                    },
                    template: next_template(),
                });
            }
        }
    }
    for n0 in 0..=3 {
        for n1 in 0..=3 - n0 {
            for n2 in 0..=3 - n0 - n1 {
                let counts = [n0, n1, n2];
                if counts.iter().sum::<usize>() == 0 {
                    continue;
                }
                let mut terms: Vec<CountTerm> = (0..3)
                    .filter(|&c| counts[c] > 0)
                    .map(|c| CountTerm {
                        count: counts[c],
                        category: CategoryId(c),
                    })
                    .collect();
                terms.sort_by(|x, y| y.count.cmp(&x.count).then(x.category.cmp(&y.category)));
                out.push(StructuredPrompt {
                    kind: PromptKind::Counting(terms),
                    template: next_template(),
                });
            }
        }
    }
    out.push(StructuredPrompt {
        kind: PromptKind::EmptyScene,
        template: next_template(),
    });
    out
}

/// Every multiset of at most three detections on the center grid.
pub fn all_detection_lists() -> Vec<Vec<(usize, f64, f64)>> {
    let cells: Vec<(usize, f64, f64)> = (0..3)
        .flat_map(|c| {
            (0..GRID * GRID).map(move |k| {
                let coord = |i: usize| (i as f64 + 0.5) / GRID as f64;
                (c, coord(k % GRID), coord(k / GRID))
            })
        })
        .collect();
    let n = cells.len();
    let mut out = vec![vec![]];
    for i in 0..n {
        out.push(vec![cells[i]]);
        for j in i..n {
            out.push(vec![cells[i], cells[j]]);
            for k in j..n {
                out.push(vec![cells[i], cells[j], cells[k]]);
            }
        }
    }
    out
}

pub fn detection_set(dets: &[(usize, f64, f64)]) -> DetectionSet {
    DetectionSet::new(
        dets.iter()
            .map(|&(c, cx, cy)| DetectedObject {
                category: CategoryId(c),
                color: None,
                bbox: [cx, cy, 0.1, 0.1],
                confidence: 0.9,
            })
            .collect(),
    )
}

/// Runs the library against the reference on the whole small world and
/// returns (cases checked, disagreements).
pub fn exhaustive_agreement() -> (usize, usize) {
    let world = small_world();
    let cfg = RelabelConfig {
        lambda_relabel: LAMBDA,
        margin: 0.0,
    };
    let prompts = all_prompts();
    let mut checked = 0;
    let mut bad = 0;
    for dets in all_detection_lists() {
        let d = detection_set(&dets);
        for p in &prompts {
            let got = relabel(p, &d, &cfg, &world);
            let (kind, prompt, weight) = reference(p, &dets);
            checked += 1;
            if got.kind != kind || got.new_prompt != prompt || got.weight != weight {
                bad += 1;
            }
        }
    }
    (checked, bad)
}

/// Relabels `n` random (prompt, detections) pairs, half of them in color
/// mode, then relabels each new prompt against the same detections. Returns
/// how many second passes were not a match with weight 1.
pub fn idempotence_failures(n: usize, seed: u64) -> usize {
    use ipr_core::lineage::rng_from_seed;
    use ipr_core::scenegen::ColorId;
    use rand::Rng;

    let plain = World::default();
    let colored = World::default().with_colors();
    let cfg = RelabelConfig::default();
    let mut rng = rng_from_seed(seed);
    let mut failures = 0;
    for i in 0..n {
        let world = if i % 2 == 0 { &plain } else { &colored };
        // a few categories only, so counts match often enough to reach the relation rules
        let cats = 3;
        let color = |rng: &mut ipr_core::lineage::Rng| {
            world
                .color_mode()
                .then(|| ColorId(rng.random_range(0..world.n_colors())))
        };
        let p = match rng.random_range(0..5) {
            0 => StructuredPrompt {
                kind: PromptKind::EmptyScene,
                template: rng.random_range(0..3),
            },
            1 => {
                let terms = (0..rng.random_range(1..=2)).map(|_| {
                    (
                        rng.random_range(1..=2),
                        CategoryId(rng.random_range(0..cats)),
                    )
                });
                StructuredPrompt::counting(terms).with_template(rng.random_range(0..3))
            }
            _ => {
                let a = rng.random_range(0..cats);
                let b = (a + rng.random_range(1..cats)) % cats;
                StructuredPrompt {
                    kind: PromptKind::Relational {
                        a: Subject {
                            category: CategoryId(a),
                            color: color(&mut rng),
                        },
                        relation: Relation::ALL[rng.random_range(0..4)],
                        b: Subject {
                            category: CategoryId(b),
                            color: color(&mut rng),
                        },
                    },
                    template: rng.random_range(0..3),
                }
            }
        };
        let coarse = rng.random_bool(0.5);
        let coord = |rng: &mut ipr_core::lineage::Rng| {
            if coarse {
                (rng.random_range(0..GRID) as f64 + 0.5) / GRID as f64
            } else {
                rng.random_range(0.0..1.0)
            }
        };
        let objects = (0..rng.random_range(0..=4))
            .map(|_| DetectedObject {
                category: CategoryId(rng.random_range(0..cats)),
                color: color(&mut rng),
                bbox: [coord(&mut rng), coord(&mut rng), 0.1, 0.1],
                confidence: rng.random_range(0.45..1.0),
            })
            .collect();
        let d = DetectionSet::new(objects);
        let first = relabel(&p, &d, &cfg, world);
        let second = relabel(&first.new_prompt, &d, &cfg, world);
        if second.kind != OutcomeKind::Matched
            || second.weight != 1.0
            || second.new_prompt != first.new_prompt
        {
            failures += 1;
        }
    }
    failures
}
