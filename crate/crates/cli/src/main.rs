//! `ipr`: command-line driver for prompt-relabeling experiments.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 training
//! divergence, 1 anything else. Errors are printed as one line:
//! `error kind=<kind> message=<json string>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ipr_core::config::{ExperimentConfig, Method, KEYS};
use ipr_core::ddpm::ModelState;
use ipr_core::detector::OracleDetector;
use ipr_core::evalkit::{compare_runs, spatial_accuracy, AccuracySummary};
use ipr_core::lineage::SeedLineage;
use ipr_core::scenegen::{generate_prompt_set, write_prompt_jsonl, SplitTag};
use ipr_core::tensornet::Checkpoint;
use ipr_core::trainloop::{
    pretrain_base, prompt_pools, read_run_summary, run_method, write_run_dir, RunResult,
};
use ipr_core::Error;

fn config_help() -> String {
    let d = ExperimentConfig::default();
    let mut s = String::from("Config keys (section.key = default):\n");
    for k in KEYS {
        let v = d.get(k.section, k.key).unwrap_or_default();
        s.push_str(&format!(
            "  {}.{} = {v}\n      {}\n",
            k.section, k.key, k.doc
        ));
    }
    s
}

#[derive(Parser)]
#[command(name = "ipr", version, about = "Iterative prompt relabeling on a toy diffusion model", after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Config file in `key = value` form with `[section]` headers
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.seed=3`; repeatable
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        let pairs = self
            .overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| {
                        Error::Config(format!("override {o:?} is not section.key=value"))
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(base.with_overrides(&pairs)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Unseen,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Lambda,
    Threshold,
    Template,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a relational prompt set as JSONL
    GenPrompts {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain a base model and write its checkpoint
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method from a base model
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides train.method
        #[arg(long)]
        method: Option<String>,
        /// Base checkpoint file, or a directory written by `pretrain`
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method once per value of an ablation knob
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare finished run directories
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Methods whose final train accuracy must be non-decreasing, per seed
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "direct,rldf,pr_rldf,ipr_rldf"
        )]
        ordering: Vec<String>,
        /// Config keys allowed to differ between runs
        #[arg(long, value_delimiter = ',')]
        allow: Vec<String>,
    },
}

fn parse_method(s: &str) -> anyhow::Result<Method> {
    Ok(Method::parse(s).ok_or_else(|| Error::Config(format!("unknown method {s:?}")))?)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn pretty(v: &impl serde::Serialize) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn write_config_echo(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    write_file(&dir.join("config.json"), pretty(cfg)?)?;
    write_file(&dir.join("config.cfg"), cfg.serialize())
}

fn load_base(path: &Path) -> anyhow::Result<ModelState> {
    let file = if path.is_dir() {
        path.join("base.ckpt")
    } else {
        path.to_path_buf()
    };
    Ok(ModelState::from_checkpoint(&Checkpoint::read(&file)?)?)
}

fn gen_prompts(
    seed: u64,
    n: usize,
    split: Split,
    out: &Path,
    cfg: &ExperimentConfig,
) -> anyhow::Result<()> {
    let world = cfg.world()?;
    let tag = match split {
        Split::Train => SplitTag::Train,
        Split::Unseen => SplitTag::Unseen,
    };
    let prompts = generate_prompt_set(&world, seed, n, &cfg.train.relations, tag)?;
    let mut buf = Vec::new();
    write_prompt_jsonl(&mut buf, &prompts, &world, &tag.as_string())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, buf)
}

fn pretrain(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    create_dir(out)?;
    let r = pretrain_base(cfg)?;
    let ck = r.model.to_checkpoint(Some(&r.lineage))?;
    ck.write(&out.join("base.ckpt"))?;
    write_file(&out.join("base.manifest.json"), pretty(&ck.manifest()?)?)?;
    write_file(
        &out.join("pretrain.json"),
        pretty(
            &json!({ "epoch_losses": r.epoch_losses, "model_sha256": r.model.checkpoint_hash()? }),
        )?,
    )?;
    write_file(&out.join("seeds.json"), pretty(&r.lineage)?)?;
    write_config_echo(cfg, out)
}

fn run(cfg: &ExperimentConfig, base: &ModelState, out: &Path) -> anyhow::Result<RunResult> {
    let r = run_method(base, cfg)?;
    write_run_dir(&r, out)?;
    Ok(r)
}

fn summary_row(
    axis: &str,
    value: &str,
    method: Method,
    iteration: usize,
    split: &str,
    s: &AccuracySummary,
) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    format!(
        "{axis},{value},{method},{iteration},{split},{},{},{},{},{}\n",
        s.overall,
        opt(s.left_right),
        opt(s.above_below),
        s.object_number,
        s.n
    )
}

fn ablate(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    base: &ModelState,
    out: &Path,
) -> anyhow::Result<()> {
    let (name, key) = match axis {
        Axis::Lambda => ("lambda", "relabel.lambda"),
        Axis::Threshold => ("threshold", "detector.score_threshold"),
        Axis::Template => ("template", "train.template"),
    };
    create_dir(out)?;
    write_config_echo(cfg, out)?;
    let mut csv = String::from(
        "axis,value,method,iteration,split,overall,left_right,above_below,object_number,n\n",
    );
    for v in values {
        let run_cfg = cfg
            .clone()
            .with_overrides(&[(key.to_string(), v.clone())])?;
        let dir = out.join(format!("{name}_{v}"));
        let r = run(&run_cfg, base, &dir)?;
        let m = r.iterations.last().expect("iteration 0 is always present");
        let method = run_cfg.train.method;
        let it = m.metrics.iteration;
        csv.push_str(&summary_row(name, v, method, it, "train", &m.metrics.train));
        csv.push_str(&summary_row(
            name,
            v,
            method,
            it,
            "unseen",
            &m.metrics.unseen,
        ));
        if let Axis::Template = axis {
            // the trained model on the training prompts at the variant template
            let (variant, _, _) = prompt_pools(&run_cfg, r.model.world())?;
            let det = OracleDetector::new(r.model.world().clone(), run_cfg.detector)?;
            let lineage = SeedLineage::new(run_cfg.train.seed);
            let spp = run_cfg.eval.samples_per_prompt;
            let (rep, _) = spatial_accuracy(
                &r.model,
                &variant,
                &det,
                spp,
                &lineage,
                "train",
                run_cfg.relabel.margin,
            )?;
            csv.push_str(&summary_row(
                name,
                v,
                method,
                it,
                &format!("train@template{v}"),
                &(&rep).into(),
            ));
        }
    }
    write_file(&out.join("summary.csv"), csv)
}

fn report(
    runs: &[PathBuf],
    out: &Path,
    ordering: &[String],
    allow: &[String],
) -> anyhow::Result<()> {
    let summaries = runs
        .iter()
        .map(|d| read_run_summary(d))
        .collect::<Result<Vec<_>, _>>()?;
    let ordering = ordering
        .iter()
        .map(|m| parse_method(m))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let allow: Vec<&str> = allow.iter().map(String::as_str).collect();
    let cmp = compare_runs(&summaries, &ordering, &allow)?;
    create_dir(out)?;
    write_file(&out.join("comparison.csv"), cmp.to_csv())?;
    write_file(&out.join("comparison.json"), pretty(&cmp)?)?;
    let series: Vec<_> = summaries
        .iter()
        .zip(runs)
        .map(|(s, dir)| {
            json!({
                "run": dir.display().to_string(),
                "method": s.method,
                "seed": s.seed,
                "iteration": s.iterations.iter().map(|m| m.iteration).collect::<Vec<_>>(),
                "train_overall": s.iterations.iter().map(|m| m.train.overall).collect::<Vec<_>>(),
                "unseen_overall": s.iterations.iter().map(|m| m.unseen.overall).collect::<Vec<_>>(),
                "train_loss": s.iterations.iter().map(|m| m.train_loss).collect::<Vec<_>>(),
            })
        })
        .collect();
    write_file(
        &out.join("plot_data.json"),
        pretty(&json!({ "series": series }))?,
    )?;
    println!(
        "ordering passed for {} of {} seeds",
        cmp.passes(),
        cmp.per_seed.len()
    );
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenPrompts {
            seed,
            n,
            split,
            out,
            cfg,
        } => gen_prompts(seed, n, split, &out, &cfg.load()?),
        Cmd::Pretrain { cfg, out } => pretrain(&cfg.load()?, &out),
        Cmd::Run {
            cfg,
            method,
            base,
            out,
        } => {
            let mut c = cfg.load()?;
            if let Some(m) = method {
                c.train.method = parse_method(&m)?;
            }
            let base = load_base(&base)?;
            let r = run(&c, &base, &out)?;
            let last = &r
                .iterations
                .last()
                .expect("iteration 0 is always present")
                .metrics;
            println!(
                "{} train {:.4} unseen {:.4}",
                c.train.method, last.train.overall, last.unseen.overall
            );
            Ok(())
        }
        Cmd::Ablate {
            cfg,
            axis,
            values,
            method,
            base,
            out,
        } => {
            let mut c = cfg.load()?;
            if let Some(m) = method {
                c.train.method = parse_method(&m)?;
            }
            if values.is_empty() {
                bail!(Error::Config("no ablation values given".into()));
            }
            ablate(&c, axis, &values, &load_base(&base)?, &out)
        }
        Cmd::Report {
            runs,
            out,
            ordering,
            allow,
        } => report(&runs, &out, &ordering, &allow),
    }
}

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::TooManyPrompts { .. } | Error::InvalidArgument(_)) => {
            ("config", 2)
        }
        Some(Error::InvalidPrompt(_) | Error::PromptParse { .. }) => ("config", 2),
        Some(Error::Divergence(_)) => ("divergence", 3),
        Some(Error::IncompatibleRuns(_)) => ("incompatible", 1),
        Some(Error::Checkpoint(_)) => ("checkpoint", 1),
        Some(Error::Io { .. }) => ("io", 1),
        _ => ("runtime", 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error kind=args message={}", serde_json::json!(first));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = serde_json::to_string(&format!("{e:#}")).unwrap_or_else(|_| "\"?\"".into());
            eprintln!("error kind={kind} message={msg}");
            ExitCode::from(code)
        }
    }
}
