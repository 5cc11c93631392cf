//! Experiment configuration: a flat `key = value` document in sections.
//!
//! ```text
//! # comment
//! [train]
//! seed = 7
//! method = ipr_rldf
//! ```
//!
//! Every key has a default, unknown keys and sections are errors, and
//! [`ExperimentConfig::serialize`] writes every key in a fixed order so that
//! parse → serialize → parse is the identity.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ddpm::ModelConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::relabel::RelabelConfig;
use crate::scenegen::{
    all_relational_triples, CategoryVocab, Relation, World, DEFAULT_CATEGORIES,
    DEFAULT_MAX_OBJECTS, TEMPLATES_PER_KIND,
};
use crate::tensornet::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    Pr,
    Rldf,
    PrRldf,
    IprRldf,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Direct,
        Method::Pr,
        Method::Rldf,
        Method::PrRldf,
        Method::IprRldf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Pr => "pr",
            Method::Rldf => "rldf",
            Method::PrRldf => "pr_rldf",
            Method::IprRldf => "ipr_rldf",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Whether relabeled prompts replace the originals.
    pub fn relabels_prompts(self) -> bool {
        matches!(self, Method::Pr | Method::PrRldf | Method::IprRldf)
    }

    /// Whether outcome weights are applied.
    pub fn reweights(self) -> bool {
        matches!(self, Method::Rldf | Method::PrRldf | Method::IprRldf)
    }
}

impl Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub categories: Vec<String>,
    /// `None` disables color mode.
    pub colors: Option<Vec<String>>,
    pub max_objects: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            colors: None,
            max_objects: DEFAULT_MAX_OBJECTS,
        }
    }
}

impl WorldConfig {
    pub fn build(&self) -> Result<World> {
        World::new(
            CategoryVocab::new(self.categories.clone())?,
            self.colors.clone(),
            self.max_objects,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub method: Method,
    pub iterations: usize,
    pub samples_per_iter: usize,
    pub epochs_per_iter: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub growth_step: usize,
    pub accumulate_datasets: bool,
    pub n_prompts: usize,
    pub relations: Vec<Relation>,
    pub template: u8,
    pub pretrain_examples: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub p_align: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::IprRldf,
            iterations: 2,
            samples_per_iter: 400,
            epochs_per_iter: 3,
            batch_size: 32,
            lr: 1e-3,
            growth_step: 2000,
            accumulate_datasets: false,
            n_prompts: 100,
            relations: Relation::ALL.to_vec(),
            template: 0,
            pretrain_examples: 2000,
            pretrain_epochs: 30,
            pretrain_lr: 1e-3,
            p_align: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_unseen: usize,
    pub samples_per_prompt: usize,
    pub template: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_unseen: 100,
            samples_per_prompt: 4,
            template: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub detector: DetectorConfig,
    pub relabel: RelabelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// A documented config key.
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub section: &'static str,
    pub key: &'static str,
    pub doc: &'static str,
}

const fn k(section: &'static str, key: &'static str, doc: &'static str) -> KeyDoc {
    KeyDoc { section, key, doc }
}

pub const KEYS: &[KeyDoc] = &[
    k(
        "world",
        "categories",
        "comma-separated category names, at least 2",
    ),
    k(
        "world",
        "colors",
        "comma-separated color palette, or `none` to disable color mode",
    ),
    k("world", "max_objects", "object slots per scene, 2..=9"),
    k("model", "diffusion_steps", "number of diffusion steps T"),
    k("model", "beta_start", "β at t = 1"),
    k("model", "beta_end", "β at t = T"),
    k("model", "hidden_width", "denoiser hidden width"),
    k("model", "hidden_layers", "denoiser hidden layer count"),
    k("model", "activation", "hidden activation: tanh or relu"),
    k(
        "detector",
        "score_threshold",
        "minimum confidence to report a detection, in (0, 1)",
    ),
    k(
        "detector",
        "flip_prob",
        "probability of misreading a category",
    ),
    k(
        "detector",
        "drop_prob",
        "probability of missing a detection",
    ),
    k(
        "detector",
        "jitter_sigma",
        "std-dev of Gaussian center noise",
    ),
    k(
        "relabel",
        "lambda",
        "loss weight of relabeled examples, in [0, 1]",
    ),
    k(
        "relabel",
        "margin",
        "center separation below which a relation is ambiguous",
    ),
    k("train", "seed", "master seed of the run"),
    k("train", "method", "direct, pr, rldf, pr_rldf or ipr_rldf"),
    k(
        "train",
        "iterations",
        "self-training iterations for ipr_rldf",
    ),
    k(
        "train",
        "samples_per_iter",
        "generated samples per iteration",
    ),
    k("train", "epochs_per_iter", "training epochs per iteration"),
    k("train", "batch_size", "minibatch size"),
    k("train", "lr", "fine-tuning learning rate"),
    k(
        "train",
        "growth_step",
        "fresh prompts added when overfitting is detected",
    ),
    k(
        "train",
        "accumulate_datasets",
        "train on the union of all iteration datasets",
    ),
    k("train", "n_prompts", "self-training prompts"),
    k(
        "train",
        "relations",
        "comma-separated relations used for prompts",
    ),
    k("train", "template", "surface template of training prompts"),
    k("train", "pretrain_examples", "pretraining set size"),
    k("train", "pretrain_epochs", "pretraining epochs"),
    k("train", "pretrain_lr", "pretraining learning rate"),
    k(
        "train",
        "p_align",
        "probability a pretraining scene follows its prompt",
    ),
    k("eval", "n_unseen", "prompts in the unseen evaluation split"),
    k(
        "eval",
        "samples_per_prompt",
        "samples per evaluation prompt",
    ),
    k("eval", "template", "surface template of evaluation prompts"),
];

fn list(v: &[String]) -> String {
    v.join(",")
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

impl ExperimentConfig {
    pub fn get(&self, section: &str, key: &str) -> Option<String> {
        let (w, m, d, r, t, e) = (
            &self.world,
            &self.model,
            &self.detector,
            &self.relabel,
            &self.train,
            &self.eval,
        );
        Some(match (section, key) {
            ("world", "categories") => list(&w.categories),
            ("world", "colors") => w.colors.as_deref().map_or("none".into(), list),
            ("world", "max_objects") => w.max_objects.to_string(),
            ("model", "diffusion_steps") => m.diffusion_steps.to_string(),
            ("model", "beta_start") => m.beta_start.to_string(),
            ("model", "beta_end") => m.beta_end.to_string(),
            ("model", "hidden_width") => m.hidden_width.to_string(),
            ("model", "hidden_layers") => m.hidden_layers.to_string(),
            ("model", "activation") => m.activation.as_str().to_string(),
            ("detector", "score_threshold") => d.score_threshold.to_string(),
            ("detector", "flip_prob") => d.flip_prob.to_string(),
            ("detector", "drop_prob") => d.drop_prob.to_string(),
            ("detector", "jitter_sigma") => d.jitter_sigma.to_string(),
            ("relabel", "lambda") => r.lambda_relabel.to_string(),
            ("relabel", "margin") => r.margin.to_string(),
            ("train", "seed") => t.seed.to_string(),
            ("train", "method") => t.method.to_string(),
            ("train", "iterations") => t.iterations.to_string(),
            ("train", "samples_per_iter") => t.samples_per_iter.to_string(),
            ("train", "epochs_per_iter") => t.epochs_per_iter.to_string(),
            ("train", "batch_size") => t.batch_size.to_string(),
            ("train", "lr") => t.lr.to_string(),
            ("train", "growth_step") => t.growth_step.to_string(),
            ("train", "accumulate_datasets") => t.accumulate_datasets.to_string(),
            ("train", "n_prompts") => t.n_prompts.to_string(),
            ("train", "relations") => t
                .relations
                .iter()
                .map(|r| r.as_str())
                .collect::<Vec<_>>()
                .join(","),
            ("train", "template") => t.template.to_string(),
            ("train", "pretrain_examples") => t.pretrain_examples.to_string(),
            ("train", "pretrain_epochs") => t.pretrain_epochs.to_string(),
            ("train", "pretrain_lr") => t.pretrain_lr.to_string(),
            ("train", "p_align") => t.p_align.to_string(),
            ("eval", "n_unseen") => e.n_unseen.to_string(),
            ("eval", "samples_per_prompt") => e.samples_per_prompt.to_string(),
            ("eval", "template") => e.template.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form. Does not run cross-key validation.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let name = format!("{section}.{key}");
        let n = name.as_str();
        let (w, m, d, r, t, e) = (
            &mut self.world,
            &mut self.model,
            &mut self.detector,
            &mut self.relabel,
            &mut self.train,
            &mut self.eval,
        );
        match (section, key) {
            ("world", "categories") => w.categories = parse_list(v),
            ("world", "colors") => {
                w.colors = match v {
                    "none" | "" => None,
                    _ => Some(parse_list(v)),
                }
            }
            ("world", "max_objects") => w.max_objects = num(n, v)?,
            ("model", "diffusion_steps") => m.diffusion_steps = num(n, v)?,
            ("model", "beta_start") => m.beta_start = num(n, v)?,
            ("model", "beta_end") => m.beta_end = num(n, v)?,
            ("model", "hidden_width") => m.hidden_width = num(n, v)?,
            ("model", "hidden_layers") => m.hidden_layers = num(n, v)?,
            ("model", "activation") => {
                m.activation = Activation::parse(v)
                    .ok_or_else(|| Error::Config(format!("{n}: unknown activation {v:?}")))?
            }
            ("detector", "score_threshold") => d.score_threshold = num(n, v)?,
            ("detector", "flip_prob") => d.flip_prob = num(n, v)?,
            ("detector", "drop_prob") => d.drop_prob = num(n, v)?,
            ("detector", "jitter_sigma") => d.jitter_sigma = num(n, v)?,
            ("relabel", "lambda") => r.lambda_relabel = num(n, v)?,
            ("relabel", "margin") => r.margin = num(n, v)?,
            ("train", "seed") => t.seed = num(n, v)?,
            ("train", "method") => {
                t.method = Method::parse(v)
                    .ok_or_else(|| Error::Config(format!("{n}: unknown method {v:?}")))?
            }
            ("train", "iterations") => t.iterations = num(n, v)?,
            ("train", "samples_per_iter") => t.samples_per_iter = num(n, v)?,
            ("train", "epochs_per_iter") => t.epochs_per_iter = num(n, v)?,
            ("train", "batch_size") => t.batch_size = num(n, v)?,
            ("train", "lr") => t.lr = num(n, v)?,
            ("train", "growth_step") => t.growth_step = num(n, v)?,
            ("train", "accumulate_datasets") => t.accumulate_datasets = boolean(n, v)?,
            ("train", "n_prompts") => t.n_prompts = num(n, v)?,
            ("train", "relations") => {
                t.relations = parse_list(v)
                    .iter()
                    .map(|s| {
                        Relation::from_name(s)
                            .ok_or_else(|| Error::Config(format!("{n}: unknown relation {s:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            ("train", "template") => t.template = num(n, v)?,
            ("train", "pretrain_examples") => t.pretrain_examples = num(n, v)?,
            ("train", "pretrain_epochs") => t.pretrain_epochs = num(n, v)?,
            ("train", "pretrain_lr") => t.pretrain_lr = num(n, v)?,
            ("train", "p_align") => t.p_align = num(n, v)?,
            ("eval", "n_unseen") => e.n_unseen = num(n, v)?,
            ("eval", "samples_per_prompt") => e.samples_per_prompt = num(n, v)?,
            ("eval", "template") => e.template = num(n, v)?,
            _ => return Err(Error::Config(format!("unknown key {n}"))),
        }
        Ok(())
    }

    /// Parses and validates a config document; unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let at = |m: String| Error::Config(format!("line {}: {m}", lineno + 1));
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at("unterminated section header".into()))?
                    .trim();
                if !KEYS.iter().any(|k| k.section == name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| at("key outside of a section".into()))?;
            let key = key.trim();
            if !seen.insert((sec.to_string(), key.to_string())) {
                return Err(at(format!("duplicate key {sec}.{key}")));
            }
            cfg.set(sec, key, value.trim())
                .map_err(|e| at(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in documented order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for kd in KEYS {
            if kd.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", kd.section));
                current = kd.section;
            }
            let v = self.get(kd.section, kd.key).expect("documented key");
            out.push_str(&format!("{} = {v}\n", kd.key));
        }
        out
    }

    /// Applies `section.key=value` overrides, then re-validates.
    pub fn with_overrides(mut self, overrides: &[(String, String)]) -> Result<Self> {
        for (dotted, v) in overrides {
            let (s, k) = dotted
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override {dotted:?} is not section.key")))?;
            self.set(s, k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn world(&self) -> Result<World> {
        self.world.build()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let world = self.world()?;
        let arch = self.model.arch(&world)?;
        arch.validate()?;
        self.model.schedule()?;
        self.detector.validate()?;
        self.relabel.validate()?;
        let t = &self.train;
        for (name, v) in [
            ("train.iterations", t.iterations),
            ("train.samples_per_iter", t.samples_per_iter),
            ("train.epochs_per_iter", t.epochs_per_iter),
            ("train.batch_size", t.batch_size),
            ("train.n_prompts", t.n_prompts),
            ("train.pretrain_examples", t.pretrain_examples),
            ("train.pretrain_epochs", t.pretrain_epochs),
            ("eval.n_unseen", self.eval.n_unseen),
            ("eval.samples_per_prompt", self.eval.samples_per_prompt),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [("train.lr", t.lr), ("train.pretrain_lr", t.pretrain_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite"));
            }
        }
        if !(0.0..=1.0).contains(&t.p_align) {
            return bad(format!("train.p_align {} outside [0, 1]", t.p_align));
        }
        if t.relations.is_empty() {
            return bad("train.relations is empty".into());
        }
        let mut rels = t.relations.clone();
        rels.sort();
        rels.dedup();
        if rels.len() != t.relations.len() {
            return bad("train.relations has duplicates".into());
        }
        for (name, v) in [
            ("train.template", t.template),
            ("eval.template", self.eval.template),
        ] {
            if v >= TEMPLATES_PER_KIND {
                return bad(format!(
                    "{name} {v} out of range, {TEMPLATES_PER_KIND} templates exist"
                ));
            }
        }
        let total = all_relational_triples(&world, &t.relations).len();
        if t.n_prompts + self.eval.n_unseen > total {
            return bad(format!(
                "train.n_prompts + eval.n_unseen = {} exceeds the {total} distinct triples",
                t.n_prompts + self.eval.n_unseen
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.serialize();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("[train]\nseed = 0\n"));
        assert!(text.contains("lr = 0.001\n"));
    }

    #[test]
    fn every_documented_key_is_readable_and_writable() {
        let cfg = ExperimentConfig::default();
        for kd in KEYS {
            let v = cfg.get(kd.section, kd.key).unwrap();
            let mut c2 = cfg.clone();
            c2.set(kd.section, kd.key, &v).unwrap();
            assert_eq!(c2, cfg, "{}.{}", kd.section, kd.key);
        }
    }

    #[test]
    fn comments_sections_and_overrides() {
        let text = "# top\n[train]\nseed = 7 # trailing\nmethod=rldf\n\n[detector]\nscore_threshold = 0.6\n[world]\ncolors = red,blue\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.method, Method::Rldf);
        assert_eq!(cfg.detector.score_threshold, 0.6);
        assert_eq!(cfg.world.colors, Some(vec!["red".into(), "blue".into()]));
        let again = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(again, cfg);
        let o = cfg
            .with_overrides(&[("relabel.lambda".into(), "0.1".into())])
            .unwrap();
        assert_eq!(o.relabel.lambda_relabel, 0.1);
    }

    #[test]
    fn errors() {
        for text in [
            "[train]\nbogus = 1\n",
            "[nowhere]\n",
            "seed = 1\n",
            "[train]\nseed\n",
            "[train]\nseed = -1\n",
            "[train]\nseed = 1\nseed = 2\n",
            "[train]\nmethod = magic\n",
            "[relabel]\nlambda = 1.5\n",
            "[detector]\nscore_threshold = 0\n",
            "[train]\nn_prompts = 300\n",
            "[train]\naccumulate_datasets = yes\n",
            "[world]\ncategories = dog\n",
            "[eval]\ntemplate = 3\n",
        ] {
            let e = ExperimentConfig::parse(text).unwrap_err();
            assert!(
                matches!(e, Error::Config(_) | Error::InvalidPrompt(_)),
                "{text:?}: {e}"
            );
        }
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(
            seed in any::<u64>(),
            lambda in 0.0f64..=1.0,
            thr in 0.01f64..0.99,
            lr in 1e-6f64..1e-1,
            method in 0usize..5,
            acc in any::<bool>(),
            iters in 1usize..6,
        ) {
            let mut cfg = ExperimentConfig::default();
            cfg.train.seed = seed;
            cfg.relabel.lambda_relabel = lambda;
            cfg.detector.score_threshold = thr;
            cfg.train.lr = lr;
            cfg.train.method = Method::ALL[method];
            cfg.train.accumulate_datasets = acc;
            cfg.train.iterations = iters;
            let once = ExperimentConfig::parse(&cfg.serialize()).unwrap();
            prop_assert_eq!(&once, &cfg);
            prop_assert_eq!(once.serialize(), cfg.serialize());
        }

        #[test]
        fn arbitrary_text_never_panics(text in ".{0,200}") {
            let _ = ExperimentConfig::parse(&text);
        }
    }
}
