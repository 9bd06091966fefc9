//! Answer and latent-alignment losses, the two training stages and held-out evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::save_checkpoint;
use crate::datagen::{Dataset, QuestionKind, VideoSample};
use crate::error::{Result, StormError};
use crate::model::{forward_pieces, init_params, vocab, ModelConfig, ModelParams, ParamVars, TapeCache};
use crate::optim::{adam_step, clip_global_norm, OptimizerState};
use crate::rollout::{rollout, RolloutConfig};
use crate::scalar::{DType, Scalar};
use crate::supervision::{prompt_elements, training_pieces, EncoderSnapshot, SequenceLayout, TargetCache};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "ONE")]
    One,
    #[serde(rename = "TWO")]
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    /// Latent alignment weight; Stage II ignores it.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Total optimizer steps; `None` means `epochs × samples`.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub k: usize,
    /// Also train the `LATENT_END` prediction with the answer loss.
    #[serde(default)]
    pub include_end_in_loss: bool,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_clip() -> f64 {
    1.0
}

/// Learning rate of the large-scale recipe, kept as a preset.
pub const PAPER_LEARNING_RATE: f64 = 1e-5;

impl StageConfig {
    pub fn stage_one() -> Self {
        StageConfig {
            stage: Stage::One,
            lambda: 0.1,
            learning_rate: 3e-4,
            steps: None,
            epochs: 1,
            seed: 0,
            k: 8,
            include_end_in_loss: false,
            clip_norm: default_clip(),
        }
    }

    pub fn stage_two() -> Self {
        StageConfig {
            stage: Stage::Two,
            lambda: 0.0,
            ..Self::stage_one()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(StormError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(StormError::Config("learning_rate must be positive".into()));
        }
        if self.k == 0 {
            return Err(StormError::Config("latent budget K must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(StormError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.steps.unwrap_or(self.epochs * n_samples)
    }
}

/// `(1/K)·Σᵢ ‖zᵢ − gᵢ‖²`.
pub fn latent_loss<T: Scalar>(z: &Tensor<T>, g: &Tensor<T>) -> Result<T> {
    if z.shape() != g.shape() || z.shape().len() != 2 {
        return Err(StormError::Dimension {
            op: "latent_loss",
            lhs: z.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let mut s = T::zero();
    for (a, b) in z.data().iter().zip(g.data()) {
        s += (*a - *b) * (*a - *b);
    }
    Ok(s / T::of(z.rows() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnswerLoss<T> {
    /// Mean negative log-likelihood over masked positions.
    pub mean: T,
    pub sum: T,
    pub count: usize,
}

/// Next-token negative log-likelihood over the layout's loss mask.
pub fn answer_loss<T: Scalar>(logits: &Tensor<T>, layout: &SequenceLayout<T>, include_end: bool) -> Result<AnswerLoss<T>> {
    let pairs = layout.loss_targets(include_end);
    if pairs.is_empty() {
        return Err(StormError::Config("answer loss mask is empty".into()));
    }
    let v = logits.cols();
    let mut sum = T::zero();
    for &(row, class) in &pairs {
        if class >= v {
            return Err(StormError::Vocab { id: class, size: v });
        }
        let r = logits.row(row);
        let m = r.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + r.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
        sum += lse - r[class];
    }
    Ok(AnswerLoss {
        mean: sum / T::of(pairs.len() as f64),
        sum,
        count: pairs.len(),
    })
}

/// `L_ans + λ·L_latent`.
pub fn stage1_loss<T: Scalar>(l_ans: T, l_latent: T, lambda: T) -> T {
    l_ans + lambda * l_latent
}

/// Loss nodes of one training sequence.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub l_ans: Var,
    pub l_ans_sum: Var,
    pub l_latent: Option<Var>,
    /// Hidden states at the latent slots, `K×d`.
    pub z: Var,
    pub logits: Var,
}

fn loss_pairs(sample: &VideoSample, spans: &crate::supervision::Spans, include_end: bool) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if include_end {
        pairs.push((spans.latent_end.start - 1, vocab::LATENT_END as usize));
    }
    pairs.extend(spans.answer.clone().map(|p| (p - 1, sample.qa.answer as usize)));
    pairs.push((spans.eos.start - 1, vocab::EOS as usize));
    pairs
}

/// Records the stage objective for one sample. Stage I needs `targets` (`K×d`).
#[allow(clippy::too_many_arguments)]
pub fn build_objective<T: Scalar>(
    g: &mut Graph<'_, T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    sample: &VideoSample,
    stage: Stage,
    k: usize,
    lambda: T,
    targets: Option<Var>,
    include_end: bool,
) -> Result<ObjectiveVars> {
    let (pieces, spans) = training_pieces(g, pv, cfg, sample, k)?;
    let out = forward_pieces(g, pv, cfg, &pieces, &mut TapeCache::new(cfg.n_layers))?;
    let pairs = loss_pairs(sample, &spans, include_end);
    let l_ans_sum = g.cross_entropy(out.logits, &pairs)?;
    let l_ans = g.scale(l_ans_sum, T::one() / T::of(pairs.len() as f64));
    let z = g.slice_rows(out.hidden, spans.latent_slots.start, spans.latent_slots.end)?;
    let (total, l_latent) = match stage {
        Stage::Two => (l_ans, None),
        Stage::One => {
            let t = targets.ok_or_else(|| StormError::Config("Stage I needs latent targets".into()))?;
            let diff = g.sub(z, t)?;
            let sq = g.sum_squares(diff);
            let l_lat = g.scale(sq, T::one() / T::of(k as f64));
            let weighted = g.scale(l_lat, lambda);
            (g.add(l_ans, weighted)?, Some(l_lat))
        }
    };
    Ok(ObjectiveVars {
        total,
        l_ans,
        l_ans_sum,
        l_latent,
        z,
        logits: out.logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss<T> {
    pub l_ans: T,
    pub l_ans_sum: T,
    pub l_latent: Option<T>,
    pub total: T,
}

/// Stage objective and its gradient for every parameter, in parameter order.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    sample: &VideoSample,
    cfg: &StageConfig,
    targets: Option<&Tensor<T>>,
) -> Result<(SampleLoss<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, true);
    let t = targets.map(|t| g.borrowed(t, false));
    let obj = build_objective(
        &mut g,
        &pv,
        &params.config,
        sample,
        cfg.stage,
        cfg.k,
        T::of(cfg.lambda),
        t,
        cfg.include_end_in_loss,
    )?;
    let scalar = |v: Var| g.value(v).data()[0];
    let loss = SampleLoss {
        l_ans: scalar(obj.l_ans),
        l_ans_sum: scalar(obj.l_ans_sum),
        l_latent: obj.l_latent.map(scalar),
        total: scalar(obj.total),
    };
    if !loss.total.is_finite() {
        return Err(StormError::NonFiniteLoss(sample.sample_id as usize));
    }
    let grads = g.backward(obj.total)?;
    let grads = pv.all.iter().map(|&v| grads.get(&g, v)).collect();
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub sample_id: u32,
    pub l_ans: f64,
    pub l_ans_sum: f64,
    pub l_latent: Option<f64>,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub rows: Vec<StepRow>,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l_ans,l_latent,total,grad_norm,l_ans_sum,sample_id\n");
        for r in &self.rows {
            let lat = r.l_latent.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step, r.l_ans, lat, r.total, r.grad_norm, r.l_ans_sum, r.sample_id
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| StormError::io(path, e))
    }

    /// Mean of a per-step value over the first or last `n` rows.
    pub fn window_mean(&self, n: usize, last: bool, f: impl Fn(&StepRow) -> Option<f64>) -> Option<f64> {
        let n = n.min(self.rows.len());
        let rows = if last {
            &self.rows[self.rows.len() - n..]
        } else {
            &self.rows[..n]
        };
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Sample visiting order: one seeded permutation per epoch.
pub fn sample_order(n: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    while out.len() < steps && n > 0 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch)));
        out.extend(perm.into_iter().take(steps - out.len()));
        epoch += 1;
    }
    out
}

/// Runs one stage with batch size 1 and a fresh optimizer.
pub fn run_stage<T: Scalar>(
    params: &mut ModelParams<T>,
    samples: &[VideoSample],
    targets: Option<&TargetCache<T>>,
    cfg: &StageConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(StormError::Config("training set is empty".into()));
    }
    if cfg.stage == Stage::One {
        match targets {
            Some(t) if t.k == cfg.k => {}
            Some(t) => {
                return Err(StormError::Config(format!("targets were pooled for K={}, stage uses K={}", t.k, cfg.k)))
            }
            None => return Err(StormError::Config("Stage I needs cached latent targets".into())),
        }
    }
    let start = Instant::now();
    let mut state = OptimizerState::adam(&params.params, T::of(cfg.learning_rate));
    let order = sample_order(samples.len(), cfg.total_steps(samples.len()), cfg.seed);
    let mut rows = Vec::with_capacity(order.len());
    for (step, &i) in order.iter().enumerate() {
        let s = &samples[i];
        let target = match (cfg.stage, targets) {
            (Stage::One, Some(t)) => Some(
                &t.get(s.sample_id)
                    .ok_or_else(|| StormError::Config(format!("no latent targets for sample {}", s.sample_id)))?
                    .g,
            ),
            _ => None,
        };
        let (loss, mut grads) = loss_and_grads(params, s, cfg, target)?;
        let norm = clip_global_norm(&mut grads, T::of(cfg.clip_norm));
        adam_step(&mut params.params, &grads, &mut state)?;
        rows.push(StepRow {
            step,
            sample_id: s.sample_id,
            l_ans: loss.l_ans.as_f64(),
            l_ans_sum: loss.l_ans_sum.as_f64(),
            l_latent: loss.l_latent.map(|v| v.as_f64()),
            total: loss.total.as_f64(),
            grad_norm: norm.as_f64(),
        });
        if step % 200 == 0 {
            log::debug!("{:?} step {step}: total {:.4}", cfg.stage, loss.total.as_f64());
        }
    }
    Ok(TrainReport {
        stage: cfg.stage,
        rows,
        checkpoint: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult<T> {
    pub params: ModelParams<T>,
    pub stage1: TrainReport,
    pub stage2: TrainReport,
}

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";

/// Stage I then Stage II on the training split, saving a checkpoint and a CSV report after each stage.
pub fn two_stage_pipeline(
    dataset: &Dataset,
    model: &ModelConfig,
    stage1: &StageConfig,
    stage2: &StageConfig,
    out_dir: &Path,
    target_dir: Option<&Path>,
) -> Result<PipelineResult<f64>> {
    if stage1.stage != Stage::One || stage2.stage != Stage::Two {
        return Err(StormError::Config("pipeline needs a Stage ONE and a Stage TWO config".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| StormError::io(out_dir, e))?;
    let mut params = init_params::<f64>(model)?;
    let train = dataset.train();
    let targets = load_or_build_targets(&params, train, stage1.k, target_dir)?;
    let mut r1 = run_stage(&mut params, train, Some(&targets), stage1)?;
    r1.checkpoint = Some(out_dir.join(STAGE1_CKPT));
    save_checkpoint(&out_dir.join(STAGE1_CKPT), &params, DType::F32)?;
    r1.write_csv(&out_dir.join("stage1_report.csv"))?;
    let mut r2 = run_stage(&mut params, train, None, stage2)?;
    r2.checkpoint = Some(out_dir.join(STAGE2_CKPT));
    save_checkpoint(&out_dir.join(STAGE2_CKPT), &params, DType::F32)?;
    r2.write_csv(&out_dir.join("stage2_report.csv"))?;
    Ok(PipelineResult {
        params,
        stage1: r1,
        stage2: r2,
    })
}

/// Targets from a snapshot of `params`' encoder, reusing a cache in `dir` when present.
pub fn load_or_build_targets<T: Scalar>(
    params: &ModelParams<T>,
    samples: &[VideoSample],
    k: usize,
    dir: Option<&Path>,
) -> Result<TargetCache<T>> {
    let snap = EncoderSnapshot::take(params);
    if let Some(dir) = dir {
        if let Some(c) = TargetCache::load(dir, k, &snap.hash)? {
            if samples.iter().all(|s| c.get(s.sample_id).is_some()) {
                return Ok(c);
            }
        }
    }
    let c = TargetCache::build(samples, &snap, k)?;
    if let Some(dir) = dir {
        c.save(dir)?;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: u32,
    pub kind: QuestionKind,
    pub predicted: Option<u32>,
    pub answer: u32,
    pub slots_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy over direction and event questions.
    pub direction_event_accuracy: f64,
    pub per_kind: BTreeMap<String, f64>,
    pub predictions: Vec<Prediction>,
}

fn ratio(hit: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Greedy rollout accuracy: the first answer token must equal the stored answer.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, samples: &[VideoSample], cfg: &RolloutConfig) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let r = rollout(&prompt_elements(s, params)?, params, cfg)?;
        predictions.push(Prediction {
            sample_id: s.sample_id,
            kind: s.qa.kind,
            predicted: r.answer.first().copied(),
            answer: s.qa.answer,
            slots_used: r.trace.totals.slots_used,
        });
    }
    let correct = |p: &Prediction| p.predicted == Some(p.answer);
    let mut per_kind = BTreeMap::new();
    for kind in QuestionKind::ALL {
        let of: Vec<&Prediction> = predictions.iter().filter(|p| p.kind == kind).collect();
        if !of.is_empty() {
            per_kind.insert(kind.to_string(), ratio(of.iter().filter(|p| correct(p)).count(), of.len()));
        }
    }
    let de: Vec<&Prediction> = predictions.iter().filter(|p| p.kind.is_direction_or_event()).collect();
    Ok(EvalReport {
        accuracy: ratio(predictions.iter().filter(|p| correct(p)).count(), predictions.len()),
        direction_event_accuracy: ratio(de.iter().filter(|p| correct(p)).count(), de.len()),
        per_kind,
        predictions,
    })
}
