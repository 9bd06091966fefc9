//! Same-video retrieval probe, latent slot ablation, PCA embedding export and
//! the decode-pass latency benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::VideoSample;
use crate::error::{Result, StormError};
use crate::model::{DecodeCache, ModelParams};
use crate::rollout::{rollout, Decoder, RolloutConfig, RolloutTrace};
use crate::supervision::{encode_frames, prompt_elements};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RepKind {
    Latent,
    Text,
    Random,
}

/// Per-sample representations for the probes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleReps {
    pub sample_id: u32,
    pub video_id: u32,
    /// `K×d` latent slot states; slots skipped by an early exit are zero rows.
    pub latent: Tensor<f64>,
    /// Mean hidden state over answer-token positions (the last fed position if no answer was produced).
    pub text: Vec<f64>,
}

fn check_pairs(samples: &[VideoSample]) -> Result<()> {
    let mut per_video: BTreeMap<u32, usize> = BTreeMap::new();
    for s in samples {
        *per_video.entry(s.video_id).or_default() += 1;
    }
    if let Some((v, _)) = per_video.iter().find(|(_, &n)| n < 2) {
        return Err(StormError::Config(format!(
            "video {v} has fewer than 2 QA samples; same-video matches need at least 2"
        )));
    }
    Ok(())
}

/// Runs inference on every sample and records latent and text representations.
pub fn extract_latent_reps(params: &ModelParams<f64>, samples: &[VideoSample], cfg: &RolloutConfig) -> Result<Vec<SampleReps>> {
    check_pairs(samples)?;
    let d = params.config.d;
    samples
        .iter()
        .map(|s| {
            let r = rollout(&prompt_elements(s, params)?, params, cfg)?;
            let mut latent = vec![0.0; cfg.k * d];
            for (i, z) in r.latent_states.iter().enumerate().take(cfg.k) {
                latent[i * d..(i + 1) * d].copy_from_slice(z);
            }
            let text = if r.answer_states.is_empty() {
                r.hidden.last().cloned().unwrap_or_else(|| vec![0.0; d])
            } else {
                mean_rows(&r.answer_states)
            };
            Ok(SampleReps {
                sample_id: s.sample_id,
                video_id: s.video_id,
                latent: Tensor::new(vec![cfg.k, d], latent)?,
                text,
            })
        })
        .collect()
}

/// Seeded random baseline: uniform `[-1, 1)` entries with the same shapes.
pub fn random_reps(like: &[SampleReps], seed: u64) -> Vec<SampleReps> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    like.iter()
        .map(|r| {
            let data = (0..r.latent.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let latent = Tensor::new(r.latent.shape().to_vec(), data).expect("same shape");
            let text = r.text.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            SampleReps {
                latent,
                text,
                ..r.clone()
            }
        })
        .collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Mean,
    Slot(usize),
    Concat,
    /// Mean of every slot except one.
    Drop(usize),
    /// Concatenation in reversed slot order.
    Reverse,
}

impl Aggregation {
    pub fn label(&self) -> String {
        match self {
            Aggregation::Mean => "mean".into(),
            Aggregation::Slot(i) => format!("single_{i}"),
            Aggregation::Concat => "concat".into(),
            Aggregation::Drop(i) => format!("drop_{i}"),
            Aggregation::Reverse => "reverse".into(),
        }
    }
}

/// Collapses a `K×d` slot matrix into one vector.
pub fn aggregate(latent: &Tensor<f64>, agg: Aggregation) -> Result<Vec<f64>> {
    let k = latent.rows();
    let rows: Vec<Vec<f64>> = (0..k).map(|i| latent.row(i).to_vec()).collect();
    let bad = |i: usize| StormError::Config(format!("slot {i} out of range for K={k}"));
    Ok(match agg {
        Aggregation::Mean => mean_rows(&rows),
        Aggregation::Slot(i) => rows.get(i).ok_or_else(|| bad(i))?.clone(),
        Aggregation::Concat => rows.concat(),
        Aggregation::Drop(i) => {
            if i >= k || k < 2 {
                return Err(bad(i));
            }
            let kept: Vec<Vec<f64>> = rows.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.clone()).collect();
            mean_rows(&kept)
        }
        Aggregation::Reverse => rows.into_iter().rev().collect::<Vec<_>>().concat(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u32,
    pub reciprocal_rank: f64,
    /// 1-based rank of the first same-video candidate.
    pub first_match_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub kind: RepKind,
    pub aggregation: String,
    pub hit_at_1: f64,
    pub hit_at_5: f64,
    pub mrr: f64,
    pub per_query: Vec<QueryResult>,
}

impl RetrievalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# kind={:?} aggregation={} candidates=all QA samples except the query\nquery_id,reciprocal_rank,first_match_rank\n",
            self.kind, self.aggregation
        );
        for q in &self.per_query {
            let rank = q.first_match_rank.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", q.query_id, q.reciprocal_rank, rank);
        }
        s
    }

    pub fn summary(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("hit_at_1".to_string(), self.hit_at_1),
            ("hit_at_5".to_string(), self.hit_at_5),
            ("mrr".to_string(), self.mrr),
        ])
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; `0` when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // `+ 0.0` folds -0.0 into 0.0 so the total order used for ranking ties them.
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb) + 0.0
}

/// Ranks every other item by cosine similarity to each query (ties broken
/// by ascending candidate index) and scores the first same-label hit.
pub fn retrieval_probe(vectors: &[Vec<f64>], labels: &[u32], ids: &[u32], kind: RepKind, aggregation: &str) -> Result<RetrievalReport> {
    let n = vectors.len();
    if labels.len() != n || ids.len() != n {
        return Err(StormError::Dimension {
            op: "retrieval_probe",
            lhs: vec![n],
            rhs: vec![labels.len(), ids.len()],
        });
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(StormError::Config("retrieval needs at least 2 distinct videos".into()));
    }
    let zero = vectors.iter().filter(|v| norm(v) == 0.0).count();
    if zero > 0 {
        log::warn!("{zero} zero-norm representations scored with similarity 0");
    }
    let mut per_query = Vec::with_capacity(n);
    for q in 0..n {
        let mut cands: Vec<(f64, usize)> = (0..n)
            .filter(|&c| c != q)
            .map(|c| (cosine(&vectors[q], &vectors[c]), c))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let rank = cands.iter().position(|&(_, c)| labels[c] == labels[q]).map(|p| p + 1);
        per_query.push(QueryResult {
            query_id: ids[q],
            reciprocal_rank: rank.map_or(0.0, |r| 1.0 / r as f64),
            first_match_rank: rank,
        });
    }
    let frac = |k: usize| per_query.iter().filter(|q| q.first_match_rank.is_some_and(|r| r <= k)).count() as f64 / n as f64;
    Ok(RetrievalReport {
        kind,
        aggregation: aggregation.to_string(),
        hit_at_1: frac(1),
        hit_at_5: frac(5),
        mrr: per_query.iter().map(|q| q.reciprocal_rank).sum::<f64>() / n as f64,
        per_query,
    })
}

/// Probe over a representation kind with one aggregation of the latent slots.
pub fn probe_reps(reps: &[SampleReps], kind: RepKind, agg: Aggregation) -> Result<RetrievalReport> {
    let vectors = reps
        .iter()
        .map(|r| match kind {
            RepKind::Text => Ok(r.text.clone()),
            _ => aggregate(&r.latent, agg),
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u32> = reps.iter().map(|r| r.video_id).collect();
    let ids: Vec<u32> = reps.iter().map(|r| r.sample_id).collect();
    let label = if kind == RepKind::Text { "answer_mean".to_string() } else { agg.label() };
    retrieval_probe(&vectors, &labels, &ids, kind, &label)
}

/// Expected Hit@1 of a uniformly random ranking: mean over queries of
/// `(same-video candidates) / (n − 1)`.
pub fn chance_hit_at_1(labels: &[u32]) -> f64 {
    let n = labels.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = labels
        .iter()
        .map(|l| (labels.iter().filter(|m| *m == l).count() - 1) as f64 / (n - 1) as f64)
        .sum();
    total / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAblationReport {
    pub k: usize,
    pub variants: Vec<RetrievalReport>,
}

impl SlotAblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,hit_at_1,hit_at_5,mrr\n");
        for v in &self.variants {
            let _ = writeln!(s, "{},{},{},{}", v.aggregation, v.hit_at_1, v.hit_at_5, v.mrr);
        }
        s
    }

    pub fn get(&self, label: &str) -> Option<&RetrievalReport> {
        self.variants.iter().find(|v| v.aggregation == label)
    }
}

/// Single slots, drop-one means, reversed concatenation and the slot mean.
pub fn slot_ablation(reps: &[SampleReps]) -> Result<SlotAblationReport> {
    let k = reps.first().map_or(0, |r| r.latent.rows());
    if k < 2 {
        return Err(StormError::Config("slot ablation needs K >= 2".into()));
    }
    let mut aggs: Vec<Aggregation> = (0..k).map(Aggregation::Slot).collect();
    aggs.extend((0..k).map(Aggregation::Drop));
    aggs.extend([Aggregation::Reverse, Aggregation::Mean]);
    let variants = aggs
        .into_iter()
        .map(|a| probe_reps(reps, RepKind::Latent, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(SlotAblationReport { k, variants })
}

/// Two leading principal coordinates of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Fewer than two nonzero principal directions; the second coordinate is meaningless.
    pub rank_deficient: bool,
}

/// PCA via eigendecomposition of the covariance of the mean-centered points.
/// Each axis is signed so that its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n == 0 {
        return Err(StormError::Config("PCA needs at least one point".into()));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(StormError::Dimension {
            op: "pca_2d",
            lhs: vec![n, d],
            rhs: vec![],
        });
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]);
    let second = order.get(1).map_or(0.0, |&i| eig.eigenvalues[i]);
    let rank_deficient = d < 2 || second <= 1e-12 * top.max(f64::MIN_POSITIVE);
    let axis = |slot: usize| -> Vec<f64> {
        let Some(&i) = order.get(slot) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        v
    };
    let (a0, a1) = (axis(0), axis(1));
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(r, c)| r * c).sum::<f64>();
            [dot(&a0), if rank_deficient { 0.0 } else { dot(&a1) }]
        })
        .collect();
    if rank_deficient {
        log::warn!("embedding set has rank < 2; only the first PCA coordinate is meaningful");
    }
    Ok(Projection { coords, rank_deficient })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PointKind {
    Frame,
    Keyframe,
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPoint {
    pub sample_id: u32,
    pub kind: PointKind,
    pub index: usize,
    pub vector: Vec<f64>,
}

/// Frame and keyframe embeddings (mean of each frame's visual tokens) plus the `K` latent states per sample.
pub fn embedding_points(params: &ModelParams<f64>, samples: &[VideoSample], cfg: &RolloutConfig) -> Result<Vec<EmbeddingPoint>> {
    let mut out = Vec::new();
    for s in samples {
        let frame_vec = |f: &crate::datagen::Frame| -> Result<Vec<f64>> {
            let t = encode_frames(std::slice::from_ref(f), params)?;
            Ok(mean_rows(&(0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()))
        };
        for (i, f) in s.frames.iter().enumerate() {
            out.push(EmbeddingPoint {
                sample_id: s.sample_id,
                kind: PointKind::Frame,
                index: i,
                vector: frame_vec(f)?,
            });
        }
        for &k in &s.keyframes {
            out.push(EmbeddingPoint {
                sample_id: s.sample_id,
                kind: PointKind::Keyframe,
                index: k,
                vector: frame_vec(&s.frames[k])?,
            });
        }
        let r = rollout(&prompt_elements(s, params)?, params, cfg)?;
        for i in 0..cfg.k {
            out.push(EmbeddingPoint {
                sample_id: s.sample_id,
                kind: PointKind::Latent,
                index: i,
                vector: r.latent_states.get(i).cloned().unwrap_or_else(|| vec![0.0; params.config.d]),
            });
        }
    }
    Ok(out)
}

/// Writes `sample_id,kind,index,x,y` rows; `y` is left empty for rank-deficient sets.
pub fn export_embeddings(params: &ModelParams<f64>, samples: &[VideoSample], cfg: &RolloutConfig, out_path: &Path) -> Result<usize> {
    if samples.is_empty() {
        return Err(StormError::Config("nothing to export: dataset is empty".into()));
    }
    let points = embedding_points(params, samples, cfg)?;
    let vectors: Vec<Vec<f64>> = points.iter().map(|p| p.vector.clone()).collect();
    let proj = pca_2d(&vectors)?;
    let mut s = String::from("sample_id,kind,index,x,y\n");
    for (p, c) in points.iter().zip(&proj.coords) {
        let kind = match p.kind {
            PointKind::Frame => "FRAME",
            PointKind::Keyframe => "KEYFRAME",
            PointKind::Latent => "LATENT",
        };
        if proj.rank_deficient {
            let _ = writeln!(s, "{},{kind},{},{},", p.sample_id, p.index, c[0]);
        } else {
            let _ = writeln!(s, "{},{kind},{},{},{}", p.sample_id, p.index, c[0], c[1]);
        }
    }
    fs::write(out_path, s).map_err(|e| StormError::io(out_path, e))?;
    Ok(points.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchMode {
    Latent,
    /// Extra full-prompt prefills per item, emulating frame reinsertion by a tool call.
    SimulatedTool(usize),
}

impl BenchMode {
    pub fn label(&self) -> String {
        match self {
            BenchMode::Latent => "LATENT".into(),
            BenchMode::SimulatedTool(e) => format!("SIMULATED_TOOL({e})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: String,
    pub items: usize,
    pub passes_per_item: f64,
    /// Prompt positions run through prefill per item.
    pub prefill_positions_per_item: f64,
    /// Positions whose logits were computed, latent slots included.
    pub logit_positions_per_item: f64,
    pub items_per_s: f64,
    pub wall_time_s: f64,
}

/// Decode-pass accounting and throughput per mode. Traces of the LATENT runs are returned for export.
pub fn latency_bench(
    params: &ModelParams<f64>,
    samples: &[VideoSample],
    cfg: &RolloutConfig,
    modes: &[BenchMode],
) -> Result<(Vec<BenchResult>, Vec<RolloutTrace>)> {
    if samples.len() < 10 {
        return Err(StormError::Config(format!("benchmark needs at least 10 items, got {}", samples.len())));
    }
    let prompts = samples
        .iter()
        .map(|s| prompt_elements(s, params))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    let mut traces = Vec::new();
    for &mode in modes {
        let extra = match mode {
            BenchMode::Latent => 0,
            BenchMode::SimulatedTool(e) => e,
        };
        let start = Instant::now();
        let (mut passes, mut prefill, mut logit_rows) = (0usize, 0usize, 0usize);
        for p in &prompts {
            let r = rollout(p, params, cfg)?;
            for _ in 0..extra {
                let mut cache = DecodeCache::new(params);
                Decoder::feed(&mut cache, p)?;
            }
            passes += r.trace.totals.decode_passes + extra;
            prefill += p.len() * (1 + extra);
            logit_rows += p.len() * (1 + extra) + r.inputs.len();
            if mode == BenchMode::Latent {
                traces.push(r.trace);
            }
        }
        let wall = start.elapsed().as_secs_f64();
        let n = prompts.len() as f64;
        results.push(BenchResult {
            mode: mode.label(),
            items: prompts.len(),
            passes_per_item: passes as f64 / n,
            prefill_positions_per_item: prefill as f64 / n,
            logit_positions_per_item: logit_rows as f64 / n,
            items_per_s: if wall > 0.0 { n / wall } else { f64::INFINITY },
            wall_time_s: wall,
        });
    }
    Ok((results, traces))
}
