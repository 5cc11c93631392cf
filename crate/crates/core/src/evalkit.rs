//! Spatial-accuracy evaluation and cross-run comparison.
//!
//! A sample is correct when the detected objects are exactly the two
//! prompted subjects (colors included in color mode) and their box centers
//! satisfy the prompted relation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::ddpm::LatentSource;
use crate::detector::{Detect, DetectionRecord, DetectionSet};
use crate::error::{Error, Result};
use crate::lineage::SeedLineage;
use crate::relabel::{check_counts, determine_relation};
use crate::scenegen::{Family, PromptKind, PromptRecord, StructuredPrompt, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub count_ok: bool,
    /// Always false when `count_ok` is false.
    pub relation_ok: bool,
    pub overall: bool,
}

/// Judges one sample against a relational prompt.
pub fn judge_image(
    p: &StructuredPrompt,
    d: &DetectionSet,
    world: &World,
    margin: f64,
) -> Result<Verdict> {
    let PromptKind::Relational { a, relation, b } = &p.kind else {
        return Err(Error::InvalidPrompt(
            "evaluation needs a relational prompt".into(),
        ));
    };
    let count_ok = check_counts(p, d, world.color_mode()).matches;
    let relation_ok = count_ok && {
        let center = |c| {
            d.objects()
                .iter()
                .find(|o| o.category == c)
                .map(|o| o.center())
        };
        match (center(a.category), center(b.category)) {
            (Some(ca), Some(cb)) => {
                determine_relation(ca, cb, relation.family(), margin) == Ok(*relation)
            }
            _ => false,
        }
    };
    Ok(Verdict {
        count_ok,
        relation_ok,
        overall: count_ok && relation_ok,
    })
}

/// One judged sample as persisted in the per-sample log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub split: String,
    pub prompt_index: usize,
    pub sample_index: usize,
    pub prompt: PromptRecord,
    pub detections: Vec<DetectionRecord>,
    pub count_ok: bool,
    pub relation_ok: bool,
    pub overall: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub prompt_index: usize,
    pub sample_index: usize,
    pub detections: DetectionSet,
    pub verdict: Verdict,
}

/// Fraction with its denominator. `value` is `None` when `n == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fraction {
    pub hits: usize,
    pub n: usize,
}

impl Fraction {
    pub fn value(&self) -> Option<f64> {
        (self.n > 0).then(|| self.hits as f64 / self.n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt_index: usize,
    pub prompt: PromptRecord,
    pub correct: usize,
    pub count_ok: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub split: String,
    pub overall: Fraction,
    pub left_right: Fraction,
    pub above_below: Fraction,
    pub object_number: Fraction,
    pub prompts: Vec<PromptRow>,
}

impl AccuracyReport {
    pub fn n_samples(&self) -> usize {
        self.overall.n
    }

    /// Aggregates judged samples. Every prompt must be relational.
    pub fn from_samples(
        split: &str,
        prompts: &[StructuredPrompt],
        samples: &[EvalSample],
        world: &World,
    ) -> Result<Self> {
        let mut rows: Vec<PromptRow> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(PromptRow {
                    prompt_index: i,
                    prompt: PromptRecord::from_prompt(p, world, Some(split))?,
                    correct: 0,
                    count_ok: 0,
                    samples: 0,
                })
            })
            .collect::<Result<_>>()?;
        let zero = Fraction { hits: 0, n: 0 };
        let (mut overall, mut lr, mut ab, mut num) = (zero, zero, zero, zero);
        for s in samples {
            let p = prompts.get(s.prompt_index).ok_or_else(|| {
                Error::InvalidArgument(format!("sample refers to prompt {}", s.prompt_index))
            })?;
            let family = p
                .relation()
                .ok_or_else(|| Error::InvalidPrompt("evaluation needs a relational prompt".into()))?
                .family();
            let fam = match family {
                Family::Horizontal => &mut lr,
                Family::Vertical => &mut ab,
            };
            let v = s.verdict;
            for f in [&mut overall, fam] {
                f.n += 1;
                f.hits += v.overall as usize;
            }
            num.n += 1;
            num.hits += v.count_ok as usize;
            let row = &mut rows[s.prompt_index];
            row.samples += 1;
            row.correct += v.overall as usize;
            row.count_ok += v.count_ok as usize;
        }
        Ok(Self {
            split: split.to_string(),
            overall,
            left_right: lr,
            above_below: ab,
            object_number: num,
            prompts: rows,
        })
    }
}

/// Samples `samples_per_prompt` latents per prompt, detects and judges them.
///
/// Sample `j` of prompt `i` draws from stream `eval:{split}:sample:{i·spp + j}`,
/// so every model evaluated under one lineage sees the same noise.
pub fn spatial_accuracy(
    source: &dyn LatentSource,
    prompts: &[StructuredPrompt],
    detector: &dyn Detect,
    samples_per_prompt: usize,
    lineage: &SeedLineage,
    split: &str,
    margin: f64,
) -> Result<(AccuracyReport, Vec<EvalSample>)> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("empty prompt set".into()));
    }
    if samples_per_prompt == 0 {
        return Err(Error::InvalidArgument(
            "samples_per_prompt must be at least 1".into(),
        ));
    }
    let world = source.world();
    let prefix = format!("eval:{split}:sample");
    let samples: Vec<EvalSample> = (0..prompts.len() * samples_per_prompt)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / samples_per_prompt, k % samples_per_prompt);
            let mut rng = lineage.indexed_rng(&prefix, k);
            let z = source.sample(&prompts[i], &mut rng)?;
            let detections = detector.detect(&z, &mut rng)?;
            let verdict = judge_image(&prompts[i], &detections, world, margin)?;
            Ok(EvalSample {
                prompt_index: i,
                sample_index: j,
                detections,
                verdict,
            })
        })
        .collect::<Result<_>>()?;
    let report = AccuracyReport::from_samples(split, prompts, &samples, world)?;
    Ok((report, samples))
}

pub fn eval_records(
    split: &str,
    prompts: &[StructuredPrompt],
    samples: &[EvalSample],
    world: &World,
) -> Result<Vec<EvalRecord>> {
    samples
        .iter()
        .map(|s| {
            Ok(EvalRecord {
                split: split.to_string(),
                prompt_index: s.prompt_index,
                sample_index: s.sample_index,
                prompt: PromptRecord::from_prompt(&prompts[s.prompt_index], world, Some(split))?,
                detections: s.detections.to_records(world),
                count_ok: s.verdict.count_ok,
                relation_ok: s.verdict.relation_ok,
                overall: s.verdict.overall,
            })
        })
        .collect()
}

/// Headline numbers of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub overall: f64,
    pub left_right: Option<f64>,
    pub above_below: Option<f64>,
    pub object_number: f64,
    pub n: usize,
}

impl From<&AccuracyReport> for AccuracySummary {
    fn from(r: &AccuracyReport) -> Self {
        Self {
            overall: r.overall.value().unwrap_or(0.0),
            left_right: r.left_right.value(),
            above_below: r.above_below.value(),
            object_number: r.object_number.value().unwrap_or(0.0),
            n: r.n_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub train: AccuracySummary,
    pub unseen: AccuracySummary,
    /// Mean minibatch loss of the last epoch; `None` before any training.
    pub train_loss: Option<f64>,
    /// Fraction of generated samples that matched their prompt.
    pub matched_frac: Option<f64>,
}

/// What [`compare_runs`] needs from a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    /// Effective configuration as `section.key -> value`.
    pub config: BTreeMap<String, String>,
    pub iterations: Vec<IterationMetrics>,
}

impl RunSummary {
    pub fn final_metrics(&self) -> Option<&IterationMetrics> {
        self.iterations.last()
    }
}

/// Keys expected to differ between runs of one comparison.
pub const PER_RUN_KEYS: [&str; 3] = ["train.seed", "train.method", "train.iterations"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub seed: u64,
    pub split: String,
    pub iteration: usize,
    pub overall: f64,
    pub left_right: Option<f64>,
    pub above_below: Option<f64>,
    pub object_number: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingResult {
    pub seed: u64,
    /// Final train-split overall accuracy per method in chain order.
    pub values: Vec<(Method, f64)>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub ordering: Vec<Method>,
    pub per_seed: Vec<OrderingResult>,
}

impl Comparison {
    pub fn passes(&self) -> usize {
        self.per_seed.iter().filter(|r| r.pass).count()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        let mut out = String::from(
            "method,seed,split,iteration,overall,left_right,above_below,object_number,n\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{},{},{:.4},{}\n",
                r.method,
                r.seed,
                r.split,
                r.iteration,
                r.overall,
                opt(r.left_right),
                opt(r.above_below),
                r.object_number,
                r.n
            ));
        }
        out
    }
}

/// Tabulates final metrics and checks `ordering` (non-decreasing train-split
/// overall accuracy along the chain) separately for every seed that has all
/// methods of the chain. Config keys other than [`PER_RUN_KEYS`] and
/// `allowed_differences` must agree across runs.
pub fn compare_runs(
    runs: &[RunSummary],
    ordering: &[Method],
    allowed_differences: &[&str],
) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to compare".into()));
    }
    let keys: BTreeSet<&String> = runs.iter().flat_map(|r| r.config.keys()).collect();
    let mismatched: Vec<String> = keys
        .into_iter()
        .filter(|k| {
            !PER_RUN_KEYS.contains(&k.as_str()) && !allowed_differences.contains(&k.as_str())
        })
        .filter(|k| {
            runs.iter()
                .any(|r| r.config.get(*k) != runs[0].config.get(*k))
        })
        .cloned()
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::IncompatibleRuns(mismatched));
    }
    let mut rows = Vec::new();
    for r in runs {
        let m = r.final_metrics().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} run with seed {} has no metrics",
                r.method, r.seed
            ))
        })?;
        for (split, s) in [("train", &m.train), ("unseen", &m.unseen)] {
            rows.push(ComparisonRow {
                method: r.method,
                seed: r.seed,
                split: split.into(),
                iteration: m.iteration,
                overall: s.overall,
                left_right: s.left_right,
                above_below: s.above_below,
                object_number: s.object_number,
                n: s.n,
            });
        }
    }
    let seeds: BTreeSet<u64> = runs.iter().map(|r| r.seed).collect();
    let mut per_seed = Vec::new();
    for seed in seeds {
        let values: Option<Vec<(Method, f64)>> = ordering
            .iter()
            .map(|&m| {
                runs.iter()
                    .find(|r| r.seed == seed && r.method == m)
                    .and_then(|r| r.final_metrics())
                    .map(|f| (m, f.train.overall))
            })
            .collect();
        if let Some(values) = values {
            let pass = values.windows(2).all(|w| w[0].1 <= w[1].1);
            per_seed.push(OrderingResult { seed, values, pass });
        }
    }
    Ok(Comparison {
        rows,
        ordering: ordering.to_vec(),
        per_seed,
    })
}
