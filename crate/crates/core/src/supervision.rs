//! Training sequence layout, frame encoding and pooled latent targets.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{read_tensor_record, write_tensor_record, Reader};
use crate::datagen::{Frame, VideoSample};
use crate::error::{Result, StormError};
use crate::model::{vocab, InputElement, ModelConfig, ModelParams, ParamVars, Piece, VectorRole};
use crate::scalar::{DType, Scalar};
use crate::tensor::{matmul, Tensor};

/// Flattens frames into one row per `p×p` patch, pixel values scaled to `[0, 1]`.
///
/// Patches are ordered by frame, then patch row, then patch column; within a
/// patch the layout is row, column, channel.
pub fn patch_matrix<T: Scalar>(frames: &[Frame], cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (g, p, c) = (cfg.frame_grid, cfg.patch_size, cfg.channels);
    if p == 0 || g % p != 0 {
        return Err(StormError::Config(format!("frame_grid={g} not divisible by patch_size={p}")));
    }
    let per_side = g / p;
    let width = p * p * c;
    let mut data = Vec::with_capacity(frames.len() * per_side * per_side * width);
    for f in frames {
        if f.0.len() != g * g * c {
            return Err(StormError::Dimension {
                op: "encode_frames",
                lhs: vec![f.0.len()],
                rhs: vec![g, g, c],
            });
        }
        for pr in 0..per_side {
            for pc in 0..per_side {
                for r in 0..p {
                    for col in 0..p {
                        for ch in 0..c {
                            let v = f.pixel(g, c, pr * p + r, pc * p + col, ch);
                            data.push(T::of(v as f64 / 255.0));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![frames.len() * per_side * per_side, width], data)
}

fn project<T: Scalar>(patches: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = matmul(patches, w)?;
    let d = out.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % d];
    }
    Ok(out)
}

/// Visual tokens `M_tok×d` for a frame list, `M_tok = n_frames·(G/p)²`.
pub fn encode_frames<T: Scalar>(frames: &[Frame], params: &ModelParams<T>) -> Result<Tensor<T>> {
    let patches = patch_matrix(frames, &params.config)?;
    project(&patches, params.vis_w(), params.vis_b())
}

/// Same projection as [`encode_frames`], recorded on a graph.
pub fn encode_frames_on<T: Scalar>(
    g: &mut Graph<'_, T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    frames: &[Frame],
) -> Result<Var> {
    let patches = g.constant(patch_matrix(frames, cfg)?);
    let x = g.matmul(patches, pv.vis_w())?;
    g.add_row_bias(x, pv.vis_b())
}

/// Frozen copy of the visual projection used to compute latent targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSnapshot<T> {
    pub config: ModelConfig,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    /// Hex SHA-256 over the little-endian `f64` values of `w` then `b`.
    pub hash: String,
}

impl<T: Scalar> EncoderSnapshot<T> {
    pub fn take(params: &ModelParams<T>) -> Self {
        let mut h = Sha256::new();
        for t in [params.vis_w(), params.vis_b()] {
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        let hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        EncoderSnapshot {
            config: params.config.clone(),
            w: params.vis_w().clone(),
            b: params.vis_b().clone(),
            hash,
        }
    }

    pub fn encode(&self, frames: &[Frame]) -> Result<Tensor<T>> {
        project(&patch_matrix(frames, &self.config)?, &self.w, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledTargets<T> {
    /// `K×d` target rows.
    pub g: Tensor<T>,
    pub source_tokens: usize,
    pub k: usize,
}

/// Row ranges `[floor(i·M/K), ceil((i+1)·M/K))` for `i in 0..K`.
pub fn pool_segments(m: usize, k: usize) -> Vec<Range<usize>> {
    (0..k).map(|i| (i * m / k)..((i + 1) * m).div_ceil(k)).collect()
}

/// One-dimensional adaptive average pooling over rows.
pub fn adaptive_avg_pool<T: Scalar>(h: &Tensor<T>, k: usize) -> Result<PooledTargets<T>> {
    if k == 0 {
        return Err(StormError::Config("pooling needs K >= 1".into()));
    }
    if h.shape().len() != 2 || h.rows() == 0 {
        return Err(StormError::Dimension {
            op: "adaptive_avg_pool",
            lhs: h.shape().to_vec(),
            rhs: vec![k],
        });
    }
    let (m, d) = (h.rows(), h.cols());
    let mut data = Vec::with_capacity(k * d);
    for seg in pool_segments(m, k) {
        let n = T::of(seg.len() as f64);
        for c in 0..d {
            let mut s = T::zero();
            for r in seg.clone() {
                s += h.row(r)[c];
            }
            data.push(s / n);
        }
    }
    Ok(PooledTargets {
        g: Tensor::new(vec![k, d], data)?,
        source_tokens: m,
        k,
    })
}

/// Pooled thought-video features for one sample.
pub fn build_targets<T: Scalar>(sample: &VideoSample, snapshot: &EncoderSnapshot<T>, k: usize) -> Result<PooledTargets<T>> {
    if sample.thought_frames.is_empty() {
        return Err(StormError::Config(format!("sample {} has no thought frames", sample.sample_id)));
    }
    adaptive_avg_pool(&snapshot.encode(&sample.thought_frames)?, k)
}

/// Index ranges of each span; together they partition the sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spans {
    pub bos: Range<usize>,
    pub video: Range<usize>,
    pub question: Range<usize>,
    pub latent_start: Range<usize>,
    pub latent_slots: Range<usize>,
    pub latent_end: Range<usize>,
    pub answer: Range<usize>,
    pub eos: Range<usize>,
}

impl Spans {
    fn new(video: usize, question: usize, k: usize, answer: usize) -> Spans {
        let mut at = 0;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Spans {
            bos: next(1),
            video: next(video),
            question: next(question),
            latent_start: next(1),
            latent_slots: next(k),
            latent_end: next(1),
            answer: next(answer),
            eos: next(1),
        }
    }

    pub fn in_order(&self) -> [&Range<usize>; 8] {
        [
            &self.bos,
            &self.video,
            &self.question,
            &self.latent_start,
            &self.latent_slots,
            &self.latent_end,
            &self.answer,
            &self.eos,
        ]
    }

    pub fn total(&self) -> usize {
        self.eos.end
    }

    /// Positions up to and including the question: the inference prompt.
    pub fn prompt(&self) -> Range<usize> {
        0..self.question.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout<T> {
    /// Slot positions hold `LATENT_PAD` placeholders; during training they
    /// are fed the previous position's hidden state instead.
    pub elements: Vec<InputElement<T>>,
    pub spans: Spans,
    pub loss_mask: Vec<bool>,
}

impl<T: Scalar> SequenceLayout<T> {
    /// `(row, class)` pairs for next-token loss: logits at `p-1` predict the element at `p`.
    pub fn loss_targets(&self, include_end: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (p, e) in self.elements.iter().enumerate() {
            let masked = self.loss_mask[p] || (include_end && self.spans.latent_end.contains(&p));
            if let (true, InputElement::Token(id)) = (masked && p > 0, e) {
                out.push((p - 1, *id as usize));
            }
        }
        out
    }

    pub fn prompt(&self) -> &[InputElement<T>] {
        &self.elements[self.spans.prompt()]
    }
}

fn answer_ids(sample: &VideoSample) -> Vec<u32> {
    vec![sample.qa.answer]
}

fn layout_spans(sample: &VideoSample, cfg: &ModelConfig, k: usize) -> Result<Spans> {
    if k == 0 {
        return Err(StormError::Config("latent budget K must be at least 1".into()));
    }
    if sample.qa.question.is_empty() {
        return Err(StormError::Config(format!("sample {} has no question", sample.sample_id)));
    }
    let video = sample.keyframes.len() * cfg.tokens_per_frame();
    let spans = Spans::new(video, sample.qa.question.len(), k, answer_ids(sample).len());
    if spans.total() > cfg.max_seq_len {
        return Err(StormError::SequenceLength {
            len: spans.total(),
            max: cfg.max_seq_len,
        });
    }
    Ok(spans)
}

/// `[BOS] ++ keyframe tokens ++ question ++ [START] ++ K pads ++ [END] ++ answer ++ [EOS]`.
pub fn build_sequence_layout<T: Scalar>(
    sample: &VideoSample,
    params: &ModelParams<T>,
    k: usize,
) -> Result<SequenceLayout<T>> {
    let spans = layout_spans(sample, &params.config, k)?;
    let keyframes: Vec<Frame> = sample.keyframe_images().into_iter().cloned().collect();
    let video = encode_frames(&keyframes, params)?;
    let mut elements = Vec::with_capacity(spans.total());
    elements.push(InputElement::Token(vocab::BOS));
    for r in 0..video.rows() {
        elements.push(InputElement::Vector {
            role: VectorRole::VideoToken,
            values: video.row(r).to_vec(),
        });
    }
    elements.extend(sample.qa.question.iter().map(|&t| InputElement::Token(t)));
    elements.push(InputElement::Token(vocab::LATENT_START));
    elements.extend((0..k).map(|_| InputElement::Token(vocab::LATENT_PAD)));
    elements.push(InputElement::Token(vocab::LATENT_END));
    elements.extend(answer_ids(sample).into_iter().map(InputElement::Token));
    elements.push(InputElement::Token(vocab::EOS));
    let loss_mask = (0..spans.total())
        .map(|p| spans.answer.contains(&p) || spans.eos.contains(&p))
        .collect();
    Ok(SequenceLayout {
        elements,
        spans,
        loss_mask,
    })
}

/// Inference prompt for a sample: `[BOS] ++ keyframe tokens ++ question`.
pub fn prompt_elements<T: Scalar>(sample: &VideoSample, params: &ModelParams<T>) -> Result<Vec<InputElement<T>>> {
    let mut layout = build_sequence_layout(sample, params, 1)?;
    layout.elements.truncate(layout.spans.question.end);
    Ok(layout.elements)
}

/// Graph pieces for the training sequence, with video tokens encoded on the
/// graph and each slot fed the hidden state of the position before it.
pub fn training_pieces<T: Scalar>(
    g: &mut Graph<'_, T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    sample: &VideoSample,
    k: usize,
) -> Result<(Vec<Piece>, Spans)> {
    let spans = layout_spans(sample, cfg, k)?;
    let keyframes: Vec<Frame> = sample.keyframe_images().into_iter().cloned().collect();
    let video = encode_frames_on(g, pv, cfg, &keyframes)?;
    let mut prompt: Vec<usize> = sample.qa.question.iter().map(|&t| t as usize).collect();
    prompt.push(vocab::LATENT_START as usize);
    let mut tail = vec![vocab::LATENT_END as usize];
    tail.extend(answer_ids(sample).into_iter().map(|t| t as usize));
    tail.push(vocab::EOS as usize);
    let mut pieces = vec![
        Piece::Tokens(vec![vocab::BOS as usize]),
        Piece::Rows(video, VectorRole::VideoToken),
        Piece::Tokens(prompt),
    ];
    pieces.extend((0..k).map(|_| Piece::Feedback));
    pieces.push(Piece::Tokens(tail));
    Ok((pieces, spans))
}

const TARGET_MAGIC: &[u8; 8] = b"STRMTGTS";
const TARGET_VERSION: u16 = 1;

/// Pooled targets for a set of samples, all computed with one encoder snapshot and one `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCache<T> {
    pub k: usize,
    pub encoder_hash: String,
    pub targets: BTreeMap<u32, PooledTargets<T>>,
}

impl<T: Scalar> TargetCache<T> {
    pub fn build(samples: &[VideoSample], snapshot: &EncoderSnapshot<T>, k: usize) -> Result<Self> {
        let mut targets = BTreeMap::new();
        for s in samples {
            targets.insert(s.sample_id, build_targets(s, snapshot, k)?);
        }
        Ok(TargetCache {
            k,
            encoder_hash: snapshot.hash.clone(),
            targets,
        })
    }

    pub fn get(&self, sample_id: u32) -> Option<&PooledTargets<T>> {
        self.targets.get(&sample_id)
    }

    /// Cache file name for a `(K, encoder hash)` key.
    pub fn file_name(k: usize, encoder_hash: &str) -> String {
        format!("targets_k{k}_{}.bin", &encoder_hash[..16.min(encoder_hash.len())])
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(self.k, &self.encoder_hash));
        let mut out = Vec::new();
        out.extend_from_slice(TARGET_MAGIC);
        out.extend_from_slice(&TARGET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.encoder_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.encoder_hash.as_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.targets.len() as u32).to_le_bytes());
        for (id, t) in &self.targets {
            out.extend_from_slice(&(t.source_tokens as u32).to_le_bytes());
            write_tensor_record(&mut out, &format!("sample{id}"), &t.g, DType::F64);
        }
        fs::write(&path, out).map_err(|e| StormError::io(&path, e))?;
        Ok(path)
    }

    /// Loads the cache for `(K, encoder_hash)` from `dir`; `None` if absent.
    pub fn load(dir: &Path, k: usize, encoder_hash: &str) -> Result<Option<Self>> {
        let path = dir.join(Self::file_name(k, encoder_hash));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(StormError::io(&path, e)),
        };
        let mut r = Reader::new(&bytes, &path);
        if r.bytes(8)? != TARGET_MAGIC || r.u16()? != TARGET_VERSION {
            return Err(r.fail("not a target cache"));
        }
        let n = r.u32()? as usize;
        let hash = std::str::from_utf8(r.bytes(n)?).map_err(|_| r.fail("hash is not UTF-8"))?;
        if hash != encoder_hash || r.u32()? as usize != k {
            return Ok(None);
        }
        let count = r.u32()? as usize;
        let mut targets = BTreeMap::new();
        for _ in 0..count {
            let source_tokens = r.u32()? as usize;
            let (name, g) = read_tensor_record::<T>(&mut r)?;
            let id: u32 = name
                .strip_prefix("sample")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| r.fail(format!("bad record name {name}")))?;
            targets.insert(id, PooledTargets { g, source_tokens, k });
        }
        Ok(Some(TargetCache {
            k,
            encoder_hash: encoder_hash.to_string(),
            targets,
        }))
    }
}
