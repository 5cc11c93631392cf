//! Run directory layout:
//!
//! ```text
//! config.json          effective configuration
//! config.cfg           the same in key = value form
//! metrics.csv          one row per (iteration, split)
//! summary.json         input for run comparison
//! iterations.json      provenance, epoch losses, growth events
//! hashes.json          base and final model hashes
//! seeds.json           seed-lineage manifest
//! relabel_log.jsonl    one relabel decision per generated sample
//! checkpoints/iter_K.ckpt, iter_K.manifest.json
//! eval/iter_K_{train,unseen}.jsonl   per-sample detections and verdicts
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::json;

use super::RunResult;
use crate::error::{Error, Result};
use crate::evalkit::{AccuracySummary, RunSummary};

pub const METRICS_HEADER: &str =
    "iteration,split,overall_acc,leftright_acc,abovebelow_acc,count_acc,train_loss,matched_frac";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn metrics_csv(result: &RunResult) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in &result.iterations {
        let m = &r.metrics;
        for (split, s) in [("train", &m.train), ("unseen", &m.unseen)] {
            let s: &AccuracySummary = s;
            out.push_str(&format!(
                "{},{split},{},{},{},{},{},{}\n",
                m.iteration,
                s.overall,
                opt(s.left_right),
                opt(s.above_below),
                s.object_number,
                opt(m.train_loss),
                opt(m.matched_frac)
            ));
        }
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").expect("writing to a Vec");
    }
    write(path, buf)
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

pub fn write_run_dir(result: &RunResult, dir: &Path) -> Result<()> {
    let ck_dir = dir.join("checkpoints");
    let eval_dir = dir.join("eval");
    for d in [dir, &ck_dir, &eval_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    write(&dir.join("config.json"), pretty(&result.config)?)?;
    write(&dir.join("config.cfg"), result.config.serialize())?;
    write(&dir.join("metrics.csv"), metrics_csv(result))?;
    write(&dir.join("summary.json"), pretty(&result.summary())?)?;
    let iterations: Vec<_> = result
        .iterations
        .iter()
        .map(|r| {
            json!({
                "iteration": r.metrics.iteration,
                "provenance": r.provenance,
                "epoch_losses": r.epoch_losses,
                "dataset_len": r.dataset_len,
                "checkpoint_sha256": r.checkpoint_sha256,
            })
        })
        .collect();
    write(
        &dir.join("iterations.json"),
        pretty(&json!({ "iterations": iterations, "growth": result.growth }))?,
    )?;
    write(
        &dir.join("hashes.json"),
        pretty(
            &json!({ "base_sha256": result.base_sha256, "final_sha256": result.final_sha256()? }),
        )?,
    )?;
    write(&dir.join("seeds.json"), pretty(&result.lineage)?)?;
    jsonl(&dir.join("relabel_log.jsonl"), &result.relabel_log)?;
    for (k, ck) in &result.checkpoints {
        ck.write(&ck_dir.join(format!("iter_{k}.ckpt")))?;
        write(
            &ck_dir.join(format!("iter_{k}.manifest.json")),
            pretty(&ck.manifest()?)?,
        )?;
    }
    for (k, train, unseen) in &result.eval_logs {
        jsonl(&eval_dir.join(format!("iter_{k}_train.jsonl")), train)?;
        jsonl(&eval_dir.join(format!("iter_{k}_unseen.jsonl")), unseen)?;
    }
    Ok(())
}

pub fn read_run_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
