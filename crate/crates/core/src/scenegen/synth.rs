//! Prompt-set generation and base-model pretraining data.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{
    quantize, CategoryId, ColorId, ObjectInstance, PromptKind, PromptRecord, Relation, Scene,
    StructuredPrompt, Subject, World,
};
use crate::error::{Error, Result};
use crate::lineage::{derive_seed, rng_from_seed, Rng};

pub const DEFAULT_P_ALIGN: f64 = 0.35;

/// Minimum separation of the two centers along the relation axis.
const RELATION_MARGIN: f64 = 0.05;
const SIZE_RANGE: (f64, f64) = (0.1, 0.3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationalKey {
    pub a: CategoryId,
    pub relation: Relation,
    pub b: CategoryId,
}

impl RelationalKey {
    pub fn of(p: &StructuredPrompt) -> Option<Self> {
        match p.kind {
            PromptKind::Relational { a, relation, b } => Some(Self {
                a: a.category,
                relation,
                b: b.category,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Unseen,
    Growth(u32),
}

impl SplitTag {
    pub fn as_string(&self) -> String {
        match self {
            SplitTag::Train => "train".into(),
            SplitTag::Unseen => "unseen".into(),
            SplitTag::Growth(k) => format!("growth-{k}"),
        }
    }

    pub fn parse(s: &str) -> Option<SplitTag> {
        match s {
            "train" => Some(SplitTag::Train),
            "unseen" => Some(SplitTag::Unseen),
            _ => s
                .strip_prefix("growth-")?
                .parse()
                .ok()
                .map(SplitTag::Growth),
        }
    }
}

/// All ordered (A, relation, B) triples with A != B, in a fixed enumeration order.
pub fn all_relational_triples(world: &World, relations: &[Relation]) -> Vec<RelationalKey> {
    let mut out = Vec::new();
    for a in world.vocab.ids() {
        for b in world.vocab.ids() {
            if a == b {
                continue;
            }
            for &relation in relations {
                out.push(RelationalKey { a, relation, b });
            }
        }
    }
    out
}

fn permuted_triples(world: &World, seed: u64, relations: &[Relation]) -> Vec<RelationalKey> {
    let mut triples = all_relational_triples(world, relations);
    let mut rng = rng_from_seed(derive_seed(seed, "prompts:permutation"));
    triples.shuffle(&mut rng);
    triples
}

fn to_prompts(
    world: &World,
    seed: u64,
    tag: SplitTag,
    keys: &[RelationalKey],
) -> Vec<StructuredPrompt> {
    let mut rng = rng_from_seed(derive_seed(
        seed,
        &format!("prompts:colors:{}", tag.as_string()),
    ));
    keys.iter()
        .map(|k| {
            let mut subject = |c| match world.color_mode() {
                true => Subject::colored(c, ColorId(rng.random_range(0..world.n_colors()))),
                false => Subject::plain(c),
            };
            let a = subject(k.a);
            let b = subject(k.b);
            StructuredPrompt::relational(a, k.relation, b)
        })
        .collect()
}

/// Draws `n` distinct relational prompts for a split.
///
/// One seed-determined permutation of all triples is shared by every split:
/// `train` takes prompts from its front and `unseen` from its back, so the
/// two splits are disjoint whenever their sizes sum to at most the number of
/// triples. In color mode each subject gets a color from a split-specific
/// stream.
pub fn generate_prompt_set(
    world: &World,
    seed: u64,
    n: usize,
    relations: &[Relation],
    split: SplitTag,
) -> Result<Vec<StructuredPrompt>> {
    if relations.is_empty() {
        return Err(Error::InvalidArgument("relation set is empty".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "prompt count must be at least 1".into(),
        ));
    }
    let perm = permuted_triples(world, seed, relations);
    if n > perm.len() {
        return Err(Error::TooManyPrompts {
            requested: n,
            max: perm.len(),
        });
    }
    let keys: Vec<RelationalKey> = match split {
        SplitTag::Train => perm[..n].to_vec(),
        SplitTag::Unseen => perm.iter().rev().take(n).copied().collect(),
        SplitTag::Growth(_) => {
            return Err(Error::InvalidArgument(
                "growth prompts come from generate_fresh_prompts".into(),
            ))
        }
    };
    Ok(to_prompts(world, seed, split, &keys))
}

/// Up to `n` prompts whose triples are not in `exclude`, taken in
/// permutation order. Returns fewer when the world runs out of triples.
pub fn generate_fresh_prompts(
    world: &World,
    seed: u64,
    n: usize,
    relations: &[Relation],
    exclude: &HashSet<RelationalKey>,
    round: u32,
) -> Vec<StructuredPrompt> {
    let keys: Vec<RelationalKey> = permuted_triples(world, seed, relations)
        .into_iter()
        .filter(|k| !exclude.contains(k))
        .take(n)
        .collect();
    to_prompts(world, seed, SplitTag::Growth(round), &keys)
}

fn separated_pair(rng: &mut Rng) -> (f64, f64) {
    loop {
        let u = quantize(rng.random::<f64>());
        let v = quantize(rng.random::<f64>());
        if (u - v).abs() >= RELATION_MARGIN {
            return (u.min(v), u.max(v));
        }
    }
}

/// One pretraining pair for a relational prompt.
///
/// With probability `p_align` the two objects are laid out to satisfy the
/// prompted relation; otherwise a relation is drawn uniformly from all four
/// and the layout follows that instead. Colors follow the same rule: the
/// prompted color with probability `p_align`, a uniform palette color
/// otherwise.
pub fn synth_pretraining_example(
    world: &World,
    prompt: &StructuredPrompt,
    rng: &mut Rng,
    p_align: f64,
) -> Result<(Scene, StructuredPrompt)> {
    let PromptKind::Relational { a, relation, b } = prompt.kind else {
        return Err(Error::InvalidPrompt(
            "pretraining examples need a relational prompt".into(),
        ));
    };
    if !(0.0..=1.0).contains(&p_align) {
        return Err(Error::InvalidArgument(format!(
            "p_align {p_align} outside [0, 1]"
        )));
    }
    let chosen = if rng.random::<f64>() < p_align {
        relation
    } else {
        Relation::ALL[rng.random_range(0..4)]
    };
    let (lo, hi) = separated_pair(rng);
    let (free_a, free_b) = (quantize(rng.random::<f64>()), quantize(rng.random::<f64>()));
    // (cx_a, cy_a, cx_b, cy_b); larger cy is higher
    let (cxa, cya, cxb, cyb) = match chosen {
        Relation::LeftOf => (lo, free_a, hi, free_b),
        Relation::RightOf => (hi, free_a, lo, free_b),
        Relation::Above => (free_a, hi, free_b, lo),
        Relation::Below => (free_a, lo, free_b, hi),
    };
    let mut size = || rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1);
    let (wa, ha, wb, hb) = (size(), size(), size(), size());
    let mut oa = ObjectInstance::new(a.category, cxa, cya, wa, ha);
    let mut ob = ObjectInstance::new(b.category, cxb, cyb, wb, hb);
    if world.color_mode() {
        let mut pick = |prompted: Option<ColorId>| match prompted {
            Some(c) if rng.random::<f64>() < p_align => c,
            _ => ColorId(rng.random_range(0..world.n_colors())),
        };
        oa.color = Some(pick(a.color));
        ob.color = Some(pick(b.color));
    }
    Ok((Scene::new(vec![oa, ob], world)?, prompt.clone()))
}

pub fn write_prompt_jsonl<W: Write>(
    out: &mut W,
    prompts: &[StructuredPrompt],
    world: &World,
    split_tag: &str,
) -> Result<()> {
    for p in prompts {
        let rec = PromptRecord::from_prompt(p, world, Some(split_tag))?;
        let line = serde_json::to_string(&rec)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<prompt jsonl>", e))?;
    }
    Ok(())
}

/// Parses a prompt JSONL document; blank lines are skipped.
pub fn read_prompt_jsonl(
    text: &str,
    world: &World,
) -> Result<Vec<(StructuredPrompt, Option<String>)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let rec: PromptRecord = serde_json::from_str(l)?;
            Ok((rec.to_prompt(world)?, rec.split_tag))
        })
        .collect()
}
