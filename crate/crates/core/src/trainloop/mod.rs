//! Pretraining, self-training iterations and the method variants.
//!
//! | method     | iterations | prompt used       | weight                   |
//! |------------|------------|-------------------|--------------------------|
//! | `direct`   | 0          | n/a               | n/a                      |
//! | `pr`       | 1          | relabeled         | 1                        |
//! | `rldf`     | 1          | original          | 1 if matched, else λ     |
//! | `pr_rldf`  | 1          | relabeled         | 1 if matched, else λ     |
//! | `ipr_rldf` | T          | relabeled         | 1 if matched, else λ     |
//!
//! Every iteration samples from the current model, so `ipr_rldf` with
//! `T = 1` is `pr_rldf`.

mod persist;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::config::Method;
pub use persist::{read_run_summary, write_run_dir, METRICS_HEADER};

use crate::config::ExperimentConfig;
use crate::ddpm::{weighted_batch_loss, LatentSource, ModelState, TrainingExample};
use crate::detector::{Detect, OracleDetector};
use crate::error::{Error, Result};
use crate::evalkit::{
    eval_records, spatial_accuracy, AccuracyReport, AccuracySummary, EvalRecord, IterationMetrics,
    RunSummary,
};
use crate::lineage::{LineageManifest, Rng, SeedLineage};
use crate::relabel::{relabel, OutcomeKind, RelabelConfig, RelabelLogEntry};
use crate::scenegen::{
    all_relational_triples, decode_latent, encode_scene, generate_fresh_prompts,
    generate_prompt_set, synth_pretraining_example, ColorId, RelationalKey, SplitTag,
    StructuredPrompt, Subject, World,
};
use crate::tensornet::{AdamConfig, Checkpoint};

/// Minibatch passes over `data`, reshuffled every epoch. Returns the mean
/// minibatch loss of each epoch.
pub fn fit(
    model: &mut ModelState,
    data: &[TrainingExample],
    epochs: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = weighted_batch_loss(model, &batch, rng)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence(format!(
                    "loss {loss} at epoch {epoch}, batch {batches}, optimizer step {}",
                    model.optimizer.step
                )));
            }
            model.optimizer.step(model.denoiser.params_mut(), &grads)?;
            total += loss;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub model: ModelState,
    pub epoch_losses: Vec<f64>,
    pub lineage: LineageManifest,
}

/// Pretraining prompts: all relational triples in a seeded order, cycled
/// until `n` prompts; random subject colors in color mode.
fn pretraining_prompts(
    world: &World,
    cfg: &ExperimentConfig,
    rng: &mut Rng,
) -> Vec<StructuredPrompt> {
    use rand::Rng as _;
    let mut triples = all_relational_triples(world, &cfg.train.relations);
    triples.shuffle(rng);
    (0..cfg.train.pretrain_examples)
        .map(|i| {
            let k = triples[i % triples.len()];
            let mut subject = |c| match world.color_mode() {
                true => Subject::colored(c, ColorId(rng.random_range(0..world.n_colors()))),
                false => Subject::plain(c),
            };
            let a = subject(k.a);
            let b = subject(k.b);
            StructuredPrompt::relational(a, k.relation, b).with_template(cfg.train.template)
        })
        .collect()
}

pub fn pretraining_set(
    world: &World,
    cfg: &ExperimentConfig,
    lineage: &SeedLineage,
) -> Result<Vec<TrainingExample>> {
    let mut rng = lineage.rng("pretrain:data");
    let prompts = pretraining_prompts(world, cfg, &mut rng);
    prompts
        .iter()
        .map(|p| {
            let (scene, prompt) = synth_pretraining_example(world, p, &mut rng, cfg.train.p_align)?;
            Ok(TrainingExample {
                latent: encode_scene(&scene, world),
                prompt,
                weight: 1.0,
                iteration: 0,
            })
        })
        .collect()
}

/// Trains a fresh denoiser on synthetic prompt/scene pairs.
pub fn pretrain_base(cfg: &ExperimentConfig) -> Result<PretrainResult> {
    cfg.validate()?;
    let lineage = SeedLineage::new(cfg.train.seed);
    let world = cfg.world()?;
    let mut model = ModelState::new(
        world.clone(),
        cfg.model.clone(),
        AdamConfig::with_lr(cfg.train.pretrain_lr),
        &mut lineage.rng("pretrain:init"),
    )?;
    let data = pretraining_set(&world, cfg, &lineage)?;
    let epoch_losses = fit(
        &mut model,
        &data,
        cfg.train.pretrain_epochs,
        cfg.train.batch_size,
        &mut lineage.rng("pretrain:train"),
    )?;
    log::info!(
        "pretrained: final epoch loss {:.4}",
        epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(PretrainResult {
        model,
        epoch_losses,
        lineage: lineage.manifest(),
    })
}

/// Outcome counts of one iteration dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub matched: usize,
    pub relation_fix: usize,
    pub count_fix: usize,
    pub color_fix: usize,
    pub empty: usize,
}

impl Provenance {
    pub fn add(&mut self, kind: OutcomeKind) {
        match kind {
            OutcomeKind::Matched => self.matched += 1,
            OutcomeKind::RelationFix => self.relation_fix += 1,
            OutcomeKind::CountFix => self.count_fix += 1,
            OutcomeKind::ColorFix => self.color_fix += 1,
            OutcomeKind::Empty => self.empty += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.matched + self.relation_fix + self.count_fix + self.color_fix + self.empty
    }

    pub fn matched_frac(&self) -> Option<f64> {
        (self.total() > 0).then(|| self.matched as f64 / self.total() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationDataset {
    pub examples: Vec<TrainingExample>,
    pub provenance: Provenance,
    pub log: Vec<RelabelLogEntry>,
}

/// `n` prompts drawn round-robin from `pool`, then one of each `extra` prompt.
pub fn sampling_plan(
    pool: &[StructuredPrompt],
    n: usize,
    extra: &[StructuredPrompt],
) -> Vec<StructuredPrompt> {
    if pool.is_empty() {
        return extra.to_vec();
    }
    (0..n)
        .map(|i| pool[i % pool.len()].clone())
        .chain(extra.iter().cloned())
        .collect()
}

/// Samples one latent per planned prompt, detects, relabels and forms the
/// training examples for `method`. Sample `i` of iteration `k` uses stream
/// `iter:{k}:sample:{i}` for both sampling and detection.
#[allow(clippy::too_many_arguments)]
pub fn build_iteration_dataset(
    source: &dyn LatentSource,
    plan: &[StructuredPrompt],
    method: Method,
    relabel_cfg: &RelabelConfig,
    detector: &dyn Detect,
    lineage: &SeedLineage,
    iteration: usize,
) -> Result<IterationDataset> {
    if method == Method::Direct {
        return Err(Error::InvalidArgument(
            "direct does not build datasets".into(),
        ));
    }
    let world = source.world();
    let prefix = format!("iter:{iteration}:sample");
    let rows: Vec<(TrainingExample, OutcomeKind, RelabelLogEntry)> = plan
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = lineage.indexed_rng(&prefix, i);
            let latent = source.sample(p, &mut rng)?;
            let d = detector.detect(&latent, &mut rng)?;
            let out = relabel(p, &d, relabel_cfg, world);
            // train on the scene as rendered, not on the raw sampler output
            let latent = encode_scene(&decode_latent(&latent, world, 0.0)?, world);
            let prompt = if method.relabels_prompts() {
                out.new_prompt.clone()
            } else {
                p.clone()
            };
            let weight = if method.reweights() { out.weight } else { 1.0 };
            let entry = RelabelLogEntry::new(iteration, i, p, &d, &out, world)?;
            Ok((
                TrainingExample {
                    latent,
                    prompt,
                    weight,
                    iteration,
                },
                out.kind,
                entry,
            ))
        })
        .collect::<Result<_>>()?;
    let mut provenance = Provenance::default();
    let mut examples = Vec::with_capacity(rows.len());
    let mut log = Vec::with_capacity(rows.len());
    for (ex, kind, entry) in rows {
        provenance.add(kind);
        examples.push(ex);
        log.push(entry);
    }
    Ok(IterationDataset {
        examples,
        provenance,
        log,
    })
}

/// Fine-tunes on one iteration's data with a fresh optimizer.
pub fn train_iteration(
    model: &mut ModelState,
    data: &[TrainingExample],
    cfg: &ExperimentConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    model.reset_optimizer(AdamConfig::with_lr(cfg.train.lr));
    fit(
        model,
        data,
        cfg.train.epochs_per_iter,
        cfg.train.batch_size,
        rng,
    )
}

/// One completed iteration as seen by [`overfit_guard`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub train_loss: f64,
    pub unseen_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthDecision {
    Keep,
    Grow,
}

/// Unseen accuracy drop, in accuracy units, that counts as overfitting.
pub const OVERFIT_ACC_DROP: f64 = 0.02;

/// Overfitting: the latest iteration lowered the training loss while
/// unseen-split accuracy fell by more than two points.
pub fn overfit_guard(history: &[HistoryPoint]) -> GrowthDecision {
    match history {
        [.., prev, last]
            if last.train_loss < prev.train_loss
                && prev.unseen_acc - last.unseen_acc > OVERFIT_ACC_DROP =>
        {
            GrowthDecision::Grow
        }
        _ => GrowthDecision::Keep,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthEvent {
    /// Iteration whose metrics triggered the growth.
    pub after_iteration: usize,
    pub requested: usize,
    pub added: usize,
}

/// Everything recorded for one iteration. Iteration 0 is the untouched base.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub metrics: IterationMetrics,
    pub train_report: AccuracyReport,
    pub unseen_report: AccuracyReport,
    pub provenance: Option<Provenance>,
    pub epoch_losses: Vec<f64>,
    pub dataset_len: usize,
    pub checkpoint_sha256: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub base_sha256: String,
    pub iterations: Vec<IterationRecord>,
    pub model: ModelState,
    pub growth: Vec<GrowthEvent>,
    pub relabel_log: Vec<RelabelLogEntry>,
    pub eval_logs: Vec<(usize, Vec<EvalRecord>, Vec<EvalRecord>)>,
    /// Model after each training iteration, without lineage in the header.
    pub checkpoints: Vec<(usize, Checkpoint)>,
    pub lineage: LineageManifest,
}

impl RunResult {
    pub fn summary(&self) -> RunSummary {
        let config = crate::config::KEYS
            .iter()
            .map(|k| {
                let name = format!("{}.{}", k.section, k.key);
                (
                    name,
                    self.config.get(k.section, k.key).expect("documented key"),
                )
            })
            .collect();
        RunSummary {
            method: self.config.train.method,
            seed: self.config.train.seed,
            config,
            iterations: self.iterations.iter().map(|r| r.metrics.clone()).collect(),
        }
    }

    pub fn final_sha256(&self) -> Result<String> {
        self.model.checkpoint_hash()
    }
}

/// Train and unseen prompt pools: the train pool at the training template,
/// the same prompts at the evaluation template, and the unseen pool.
pub fn prompt_pools(
    cfg: &ExperimentConfig,
    world: &World,
) -> Result<(
    Vec<StructuredPrompt>,
    Vec<StructuredPrompt>,
    Vec<StructuredPrompt>,
)> {
    let t = &cfg.train;
    let train = generate_prompt_set(world, t.seed, t.n_prompts, &t.relations, SplitTag::Train)?;
    let unseen = generate_prompt_set(
        world,
        t.seed,
        cfg.eval.n_unseen,
        &t.relations,
        SplitTag::Unseen,
    )?;
    let at = |ps: &[StructuredPrompt], tpl| {
        ps.iter()
            .map(|p| p.clone().with_template(tpl))
            .collect::<Vec<_>>()
    };
    Ok((
        at(&train, t.template),
        at(&train, cfg.eval.template),
        at(&unseen, cfg.eval.template),
    ))
}

/// Runs `cfg.train.method` from `base` with the oracle detector of `cfg`.
pub fn run_method(base: &ModelState, cfg: &ExperimentConfig) -> Result<RunResult> {
    let detector = OracleDetector::new(base.world().clone(), cfg.detector)?;
    run_method_with(base, cfg, &detector)
}

pub fn run_method_with(
    base: &ModelState,
    cfg: &ExperimentConfig,
    detector: &dyn Detect,
) -> Result<RunResult> {
    cfg.validate()?;
    let world = base.world().clone();
    if world != cfg.world()? {
        return Err(Error::Config(
            "base model world differs from the configured world".into(),
        ));
    }
    let t = &cfg.train;
    let lineage = SeedLineage::new(t.seed);
    let (train_pool, train_eval, unseen_eval) = prompt_pools(cfg, &world)?;
    let evaluate = |model: &ModelState,
                    iteration: usize|
     -> Result<(
        AccuracyReport,
        AccuracyReport,
        Vec<EvalRecord>,
        Vec<EvalRecord>,
    )> {
        let spp = cfg.eval.samples_per_prompt;
        let m = cfg.relabel.margin;
        let (tr, ts) = spatial_accuracy(model, &train_eval, detector, spp, &lineage, "train", m)?;
        let (un, us) = spatial_accuracy(model, &unseen_eval, detector, spp, &lineage, "unseen", m)?;
        log::info!(
            "{} iteration {iteration}: train {:.4}, unseen {:.4}",
            t.method,
            tr.overall.value().unwrap_or(0.0),
            un.overall.value().unwrap_or(0.0)
        );
        let tl = eval_records("train", &train_eval, &ts, &world)?;
        let ul = eval_records("unseen", &unseen_eval, &us, &world)?;
        Ok((tr, un, tl, ul))
    };

    let base_sha256 = base.checkpoint_hash()?;
    let mut model = base.clone();
    let (tr, un, tl, ul) = evaluate(&model, 0)?;
    let mut iterations = vec![IterationRecord {
        metrics: IterationMetrics {
            iteration: 0,
            train: AccuracySummary::from(&tr),
            unseen: AccuracySummary::from(&un),
            train_loss: None,
            matched_frac: None,
        },
        train_report: tr,
        unseen_report: un,
        provenance: None,
        epoch_losses: Vec::new(),
        dataset_len: 0,
        checkpoint_sha256: None,
    }];
    let mut eval_logs = vec![(0, tl, ul)];
    let mut relabel_log = Vec::new();
    let mut growth = Vec::new();
    let mut checkpoints = Vec::new();

    let n_iters = match t.method {
        Method::Direct => 0,
        Method::IprRldf => t.iterations,
        _ => 1,
    };
    let mut known: HashSet<RelationalKey> = train_pool
        .iter()
        .chain(&unseen_eval)
        .filter_map(RelationalKey::of)
        .collect();
    let mut extra: Vec<StructuredPrompt> = Vec::new();
    let mut accumulated: Vec<TrainingExample> = Vec::new();
    let mut history: Vec<HistoryPoint> = Vec::new();

    for k in 1..=n_iters {
        let plan = sampling_plan(&train_pool, t.samples_per_iter, &extra);
        let ds =
            build_iteration_dataset(&model, &plan, t.method, &cfg.relabel, detector, &lineage, k)?;
        log::info!("{} iteration {k}: provenance {:?}", t.method, ds.provenance);
        let data: &[TrainingExample] = if t.accumulate_datasets {
            accumulated.extend(ds.examples.iter().cloned());
            &accumulated
        } else {
            &ds.examples
        };
        let dataset_len = data.len();
        let epoch_losses = train_iteration(
            &mut model,
            data,
            cfg,
            &mut lineage.rng(&format!("iter:{k}:train")),
        )?;
        relabel_log.extend(ds.log);
        let (tr, un, tl, ul) = evaluate(&model, k)?;
        let train_loss = *epoch_losses.last().expect("at least one epoch");
        let ck = model.to_checkpoint(None)?;
        let metrics = IterationMetrics {
            iteration: k,
            train: AccuracySummary::from(&tr),
            unseen: AccuracySummary::from(&un),
            train_loss: Some(train_loss),
            matched_frac: ds.provenance.matched_frac(),
        };
        history.push(HistoryPoint {
            train_loss,
            unseen_acc: metrics.unseen.overall,
        });
        iterations.push(IterationRecord {
            metrics,
            train_report: tr,
            unseen_report: un,
            provenance: Some(ds.provenance),
            epoch_losses,
            dataset_len,
            checkpoint_sha256: Some(ck.sha256_hex()?),
        });
        checkpoints.push((k, ck));
        eval_logs.push((k, tl, ul));
        if k < n_iters && overfit_guard(&history) == GrowthDecision::Grow {
            let fresh = generate_fresh_prompts(
                &world,
                t.seed,
                t.growth_step,
                &t.relations,
                &known,
                k as u32,
            );
            log::info!(
                "overfitting after iteration {k}: adding {} prompts",
                fresh.len()
            );
            known.extend(fresh.iter().filter_map(RelationalKey::of));
            growth.push(GrowthEvent {
                after_iteration: k,
                requested: t.growth_step,
                added: fresh.len(),
            });
            extra.extend(fresh.into_iter().map(|p| p.with_template(t.template)));
        }
    }

    Ok(RunResult {
        config: cfg.clone(),
        base_sha256,
        iterations,
        model,
        growth,
        relabel_log,
        eval_logs,
        checkpoints,
        lineage: lineage.manifest(),
    })
}
