//! One function per subcommand. Each returns the files it wrote.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use storm_core::checkpoint::{load_checkpoint, save_checkpoint};
use storm_core::datagen::{build_dataset, Dataset, VideoSample};
use storm_core::diagnostics::{
    chance_hit_at_1, export_embeddings, extract_latent_reps, latency_bench, probe_reps, random_reps, slot_ablation,
    Aggregation, BenchMode, RepKind,
};
use storm_core::model::{init_params, ModelParams, Vocab};
use storm_core::rollout::rollout;
use storm_core::supervision::{prompt_elements, TargetCache};
use storm_core::training::{
    evaluate, load_or_build_targets, run_stage, two_stage_pipeline, TrainReport, STAGE1_CKPT, STAGE2_CKPT,
};
use storm_core::DType;

use crate::config::{RunConfig, StageSelect};

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<PathBuf> {
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// A missing or invalid argument, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| UsageError(format!("{flag} is required for this command")).into())
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = required(&cfg.data, "--data")?;
    Ok(Dataset::read(dir)?)
}

fn checkpoint(cfg: &RunConfig) -> Result<ModelParams<f64>> {
    let path = required(&cfg.ckpt, "--ckpt")?;
    Ok(load_checkpoint(path)?)
}

fn split<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Result<&'a [VideoSample]> {
    Ok(ds.split(&cfg.split)?)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let manifest = build_dataset(&cfg.generator, cfg.n, cfg.seed, out)?;
    println!("{} samples written to {}", manifest.sample_count, out.display());
    Ok(vec![out.join(storm_core::datagen::MANIFEST_FILE), out.join(storm_core::datagen::BLOB_FILE)])
}

fn report_summary(r: &TrainReport) -> serde_json::Value {
    let last = r.rows.last();
    json!({
        "stage": r.stage,
        "steps": r.rows.len(),
        "final_l_ans": last.map(|x| x.l_ans),
        "final_l_latent": last.and_then(|x| x.l_latent),
        "wall_time_s": r.wall_time_s,
    })
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = dataset(cfg)?;
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    match cfg.stage {
        StageSelect::Both => {
            if cfg.ckpt.is_some() {
                log::warn!("--stage both trains from a fresh initialization; --ckpt is ignored");
            }
            let res = two_stage_pipeline(&ds, &cfg.model, &cfg.stage1, &cfg.stage2, out, Some(out))?;
            files.push(out.join(TargetCache::<f64>::file_name(cfg.stage1.k, &targets_hash(&cfg.model)?)));
            for r in [&res.stage1, &res.stage2] {
                files.extend(r.checkpoint.clone());
                summaries.push(report_summary(r));
            }
            files.extend([out.join("stage1_report.csv"), out.join("stage2_report.csv")]);
        }
        StageSelect::One | StageSelect::Two => {
            let (stage_cfg, ckpt_name, csv) = if cfg.stage == StageSelect::One {
                (&cfg.stage1, STAGE1_CKPT, "stage1_report.csv")
            } else {
                (&cfg.stage2, STAGE2_CKPT, "stage2_report.csv")
            };
            let mut params = match &cfg.ckpt {
                Some(p) => load_checkpoint::<f64>(p)?,
                None => init_params::<f64>(&cfg.model)?,
            };
            let train = ds.train();
            let targets = if cfg.stage == StageSelect::One {
                let t = load_or_build_targets(&params, train, stage_cfg.k, Some(out))?;
                files.push(out.join(TargetCache::<f64>::file_name(t.k, &t.encoder_hash)));
                Some(t)
            } else {
                None
            };
            let mut report = run_stage(&mut params, train, targets.as_ref(), stage_cfg)?;
            let path = out.join(ckpt_name);
            save_checkpoint(&path, &params, DType::F32)?;
            report.checkpoint = Some(path.clone());
            report.write_csv(&out.join(csv))?;
            files.extend([path, out.join(csv)]);
            summaries.push(report_summary(&report));
        }
    }
    for s in &summaries {
        println!("{s}");
    }
    files.push(write_json(out.join("train_summary.json"), &summaries)?);
    Ok(files)
}

fn targets_hash(model: &storm_core::model::ModelConfig) -> Result<String> {
    let params = init_params::<f64>(model)?;
    Ok(storm_core::supervision::EncoderSnapshot::take(&params).hash)
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let params = checkpoint(cfg)?;
    let ds = dataset(cfg)?;
    let report = evaluate(&params, split(cfg, &ds)?, &cfg.rollout())?;
    println!(
        "{}",
        json!({
            "split": cfg.split,
            "accuracy": report.accuracy,
            "direction_event_accuracy": report.direction_event_accuracy,
            "per_kind": report.per_kind,
        })
    );
    Ok(vec![write_json(out.join("eval.json"), &report)?])
}

pub fn rollout_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let params = checkpoint(cfg)?;
    let ds = dataset(cfg)?;
    let vocab = Vocab::standard();
    let traces = out.join("traces");
    fs::create_dir_all(&traces).with_context(|| format!("creating {}", traces.display()))?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for s in split(cfg, &ds)? {
        let r = rollout(&prompt_elements(s, &params)?, &params, &cfg.rollout())?;
        let path = traces.join(format!("sample_{:05}.jsonl", s.sample_id));
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        r.trace.write_jsonl(&mut w)?;
        w.flush()?;
        files.push(path);
        let words: Vec<&str> = r.answer.iter().map(|&t| vocab.token(t).unwrap_or("?")).collect();
        rows.push(json!({
            "sample_id": s.sample_id,
            "kind": s.qa.kind,
            "answer": r.answer,
            "answer_text": words.join(" "),
            "expected": s.qa.answer,
            "totals": r.trace.totals,
        }));
    }
    println!("{} rollouts written to {}", rows.len(), traces.display());
    files.push(write_json(out.join("rollouts.json"), &rows)?);
    Ok(files)
}

pub fn probe(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let params = checkpoint(cfg)?;
    let ds = dataset(cfg)?;
    let reps = extract_latent_reps(&params, split(cfg, &ds)?, &cfg.rollout())?;
    let latent = probe_reps(&reps, RepKind::Latent, Aggregation::Mean)?;
    let text = probe_reps(&reps, RepKind::Text, Aggregation::Mean)?;
    let random = probe_reps(&random_reps(&reps, cfg.seed), RepKind::Random, Aggregation::Mean)?;
    let labels: Vec<u32> = reps.iter().map(|r| r.video_id).collect();
    let summary = json!({
        "queries": reps.len(),
        "chance_hit_at_1": chance_hit_at_1(&labels),
        "LATENT": latent.summary(),
        "TEXT": text.summary(),
        "RANDOM": random.summary(),
    });
    println!("{summary}");
    Ok(vec![
        write_text(out.join("retrieval_latent.csv"), &latent.to_csv())?,
        write_text(out.join("retrieval_text.csv"), &text.to_csv())?,
        write_text(out.join("retrieval_random.csv"), &random.to_csv())?,
        write_json(out.join("probe.json"), &summary)?,
    ])
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let params = checkpoint(cfg)?;
    let ds = dataset(cfg)?;
    let reps = extract_latent_reps(&params, split(cfg, &ds)?, &cfg.rollout())?;
    let report = slot_ablation(&reps)?;
    print!("{}", report.to_csv());
    Ok(vec![
        write_text(out.join("slot_ablation.csv"), &report.to_csv())?,
        write_json(out.join("slot_ablation.json"), &report)?,
    ])
}

pub fn export_embed(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let params = checkpoint(cfg)?;
    let ds = dataset(cfg)?;
    let path = out.join("embeddings.csv");
    let rows = export_embeddings(&params, split(cfg, &ds)?, &cfg.rollout(), &path)?;
    println!("{rows} points written to {}", path.display());
    Ok(vec![path])
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let params = checkpoint(cfg)?;
    let ds = dataset(cfg)?;
    let modes = [BenchMode::Latent, BenchMode::SimulatedTool(cfg.extra_passes)];
    let (results, traces) = latency_bench(&params, split(cfg, &ds)?, &cfg.rollout(), &modes)?;
    for r in &results {
        println!("{}", serde_json::to_string(r)?);
    }
    let path = out.join("bench_traces.jsonl");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for t in &traces {
        t.write_jsonl(&mut w)?;
    }
    w.flush()?;
    Ok(vec![write_json(out.join("bench.json"), &results)?, path])
}
