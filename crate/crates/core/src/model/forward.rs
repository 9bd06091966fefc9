use crate::autodiff::{Graph, Var};
use crate::error::{Result, StormError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{InputElement, ModelConfig, ModelParams, ParamVars, VectorRole};

/// A run of sequence positions to be embedded on a graph.
#[derive(Debug, Clone)]
pub enum Piece {
    Tokens(Vec<usize>),
    /// Precomputed `m×d` rows (video tokens or explicit feedback vectors).
    Rows(Var, VectorRole),
    /// One position whose input is the final hidden state of the position before it.
    Feedback,
}

/// Per-layer key/value history held on a graph.
#[derive(Debug, Clone)]
pub struct TapeCache {
    layers: Vec<Option<(Var, Var)>>,
    len: usize,
    last_hidden: Option<Var>,
}

impl TapeCache {
    pub fn new(n_layers: usize) -> Self {
        TapeCache {
            layers: vec![None; n_layers],
            len: 0,
            last_hidden: None,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn sinusoid<T: Scalar>(start: usize, m: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(m * d);
    for pos in start..start + m {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let a = pos as f64 * freq;
            data.push(T::of(a.sin()));
            data.push(T::of(a.cos()));
        }
    }
    Tensor::new(vec![m, d], data).expect("sinusoid shape")
}

/// Fixed sinusoidal position table rows `[start, start+m)`.
pub fn positions<T: Scalar>(start: usize, m: usize, d: usize) -> Tensor<T> {
    sinusoid(start, m, d)
}

enum ChunkPart {
    Tokens(Vec<usize>),
    Rows(Var, VectorRole),
}

fn project_role<T: Scalar>(g: &mut Graph<'_, T>, pv: &ParamVars, v: Var, role: VectorRole) -> Result<Var> {
    match (role, pv.feedback()) {
        (VectorRole::LatentFeedback, Some(w)) => g.matmul(v, w),
        _ => Ok(v),
    }
}

fn embed_chunk<T: Scalar>(
    g: &mut Graph<'_, T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    parts: &[ChunkPart],
    start: usize,
) -> Result<(Var, usize)> {
    let mut rows = Vec::with_capacity(parts.len());
    let mut m = 0;
    for part in parts {
        let v = match part {
            ChunkPart::Tokens(ids) => g.gather(pv.tok_emb(), ids)?,
            ChunkPart::Rows(v, role) => {
                let cols = g.value(*v).cols();
                if cols != cfg.d {
                    return Err(StormError::Dimension {
                        op: "embed",
                        lhs: g.value(*v).shape().to_vec(),
                        rhs: vec![cfg.d],
                    });
                }
                project_role(g, pv, *v, *role)?
            }
        };
        m += g.value(v).rows();
        rows.push(v);
    }
    let x = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let pe = g.constant(sinusoid(start, m, cfg.d));
    Ok((g.add(x, pe)?, m))
}

fn forward_chunk<T: Scalar>(
    g: &mut Graph<'_, T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    mut x: Var,
    m: usize,
    cache: &mut TapeCache,
) -> Result<(Var, Var)> {
    if cache.len + m > cfg.max_seq_len {
        return Err(StormError::SequenceLength {
            len: cache.len + m,
            max: cfg.max_seq_len,
        });
    }
    let eps = T::of(cfg.ln_eps);
    for l in 0..cfg.n_layers {
        let lv = pv.layer(l);
        let h = g.layer_norm(x, lv.ln1_g, lv.ln1_b, eps)?;
        let q = g.matmul(h, lv.wq)?;
        let k = g.matmul(h, lv.wk)?;
        let v = g.matmul(h, lv.wv)?;
        let (k, v) = match cache.layers[l] {
            Some((pk, pvv)) => (g.concat_rows(&[pk, k])?, g.concat_rows(&[pvv, v])?),
            None => (k, v),
        };
        cache.layers[l] = Some((k, v));
        let a = g.causal_attention(q, k, v, cfg.n_heads)?;
        let a = g.matmul(a, lv.wo)?;
        x = g.add(x, a)?;
        let h2 = g.layer_norm(x, lv.ln2_g, lv.ln2_b, eps)?;
        let f = g.matmul(h2, lv.w1)?;
        let f = g.add_row_bias(f, lv.b1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, lv.w2)?;
        let f = g.add_row_bias(f, lv.b2)?;
        x = g.add(x, f)?;
    }
    let hidden = g.layer_norm(x, pv.lnf_g(), pv.lnf_b(), eps)?;
    let logits = g.matmul(hidden, pv.head())?;
    cache.len += m;
    cache.last_hidden = Some(g.slice_rows(hidden, m - 1, m)?);
    Ok((hidden, logits))
}

/// Hidden states and logits for the positions covered by one `forward_pieces` call.
#[derive(Debug, Clone, Copy)]
pub struct PiecesOutput {
    pub hidden: Var,
    pub logits: Var,
    pub len: usize,
}

/// Runs `pieces` through the model, appending to `cache`.
///
/// Consecutive non-feedback pieces are evaluated as one causal block; each
/// [`Piece::Feedback`] position is evaluated on its own because its input is
/// the final hidden state produced immediately before it.
pub fn forward_pieces<T: Scalar>(
    g: &mut Graph<'_, T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    pieces: &[Piece],
    cache: &mut TapeCache,
) -> Result<PiecesOutput> {
    let mut hidden = Vec::new();
    let mut logits = Vec::new();
    let mut pending: Vec<ChunkPart> = Vec::new();
    let mut total = 0;

    let flush = |g: &mut Graph<'_, T>,
                     pending: &mut Vec<ChunkPart>,
                     cache: &mut TapeCache,
                     hidden: &mut Vec<Var>,
                     logits: &mut Vec<Var>|
     -> Result<usize> {
        if pending.is_empty() {
            return Ok(0);
        }
        let (x, m) = embed_chunk(g, pv, cfg, pending, cache.len)?;
        pending.clear();
        if m == 0 {
            return Ok(0);
        }
        let (h, l) = forward_chunk(g, pv, cfg, x, m, cache)?;
        hidden.push(h);
        logits.push(l);
        Ok(m)
    };

    for piece in pieces {
        match piece {
            Piece::Tokens(ids) => pending.push(ChunkPart::Tokens(ids.clone())),
            Piece::Rows(v, role) => pending.push(ChunkPart::Rows(*v, *role)),
            Piece::Feedback => {
                total += flush(g, &mut pending, cache, &mut hidden, &mut logits)?;
                let prev = cache.last_hidden.ok_or_else(|| {
                    StormError::Config("latent feedback requested before any position".into())
                })?;
                pending.push(ChunkPart::Rows(prev, VectorRole::LatentFeedback));
                total += flush(g, &mut pending, cache, &mut hidden, &mut logits)?;
            }
        }
    }
    total += flush(g, &mut pending, cache, &mut hidden, &mut logits)?;
    if hidden.is_empty() {
        return Err(StormError::Dimension {
            op: "forward",
            lhs: vec![0],
            rhs: vec![cfg.d],
        });
    }
    let (hidden, logits) = if hidden.len() == 1 {
        (hidden[0], logits[0])
    } else {
        (g.concat_rows(&hidden)?, g.concat_rows(&logits)?)
    };
    Ok(PiecesOutput {
        hidden,
        logits,
        len: total,
    })
}

fn element_pieces<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    elements: &[InputElement<T>],
) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut ids = Vec::new();
    for e in elements {
        match e {
            InputElement::Token(id) => {
                if *id as usize >= cfg.vocab_size {
                    return Err(StormError::Vocab {
                        id: *id as usize,
                        size: cfg.vocab_size,
                    });
                }
                ids.push(*id as usize);
            }
            InputElement::Vector { role, values } => {
                if values.len() != cfg.d {
                    return Err(StormError::Dimension {
                        op: "input vector",
                        lhs: vec![values.len()],
                        rhs: vec![cfg.d],
                    });
                }
                if !ids.is_empty() {
                    pieces.push(Piece::Tokens(std::mem::take(&mut ids)));
                }
                let v = g.constant(Tensor::new(vec![1, cfg.d], values.clone())?);
                pieces.push(Piece::Rows(v, *role));
            }
        }
    }
    if !ids.is_empty() {
        pieces.push(Piece::Tokens(ids));
    }
    Ok(pieces)
}

/// Input rows after embedding lookup and position encoding.
pub fn embed_inputs<T: Scalar>(elements: &[InputElement<T>], params: &ModelParams<T>) -> Result<Tensor<T>> {
    let cfg = &params.config;
    if elements.is_empty() {
        return Ok(Tensor::zeros(vec![0, cfg.d]));
    }
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let pieces = element_pieces(&mut g, cfg, elements)?;
    let parts: Vec<ChunkPart> = pieces
        .into_iter()
        .map(|p| match p {
            Piece::Tokens(ids) => ChunkPart::Tokens(ids),
            Piece::Rows(v, r) => ChunkPart::Rows(v, r),
            Piece::Feedback => unreachable!("elements never produce implicit feedback"),
        })
        .collect();
    let (x, _) = embed_chunk(&mut g, &pv, cfg, &parts, 0)?;
    Ok(g.value(x).clone())
}

/// Full causal forward over a sequence: `(hidden, logits)`, one row per position.
pub fn forward<T: Scalar>(
    elements: &[InputElement<T>],
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut cache = DecodeCache::new(params);
    cache.feed(elements)
}

/// Last-position outputs of an incremental step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
}

/// Key/value history of one decoding session.
pub struct DecodeCache<'p, T: Scalar> {
    graph: Graph<'p, T>,
    vars: ParamVars,
    tape: TapeCache,
    config: &'p ModelConfig,
}

impl<'p, T: Scalar> DecodeCache<'p, T> {
    pub fn new(params: &'p ModelParams<T>) -> Self {
        let mut graph = Graph::new();
        let vars = params.bind(&mut graph, false);
        DecodeCache {
            graph,
            vars,
            tape: TapeCache::new(params.config.n_layers),
            config: &params.config,
        }
    }

    /// Number of positions processed so far.
    pub fn len(&self) -> usize {
        self.tape.len()
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn is_empty(&self) -> bool {
        self.tape.is_empty()
    }

    /// Appends a block of positions; returns hidden states and logits for them.
    pub fn feed(&mut self, elements: &[InputElement<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
        if elements.is_empty() {
            return Ok((Tensor::zeros(vec![0, self.config.d]), Tensor::zeros(vec![0, self.config.vocab_size])));
        }
        if self.tape.len() + elements.len() > self.config.max_seq_len {
            return Err(StormError::SequenceLength {
                len: self.tape.len() + elements.len(),
                max: self.config.max_seq_len,
            });
        }
        let pieces = element_pieces(&mut self.graph, self.config, elements)?;
        let out = forward_pieces(&mut self.graph, &self.vars, self.config, &pieces, &mut self.tape)?;
        Ok((
            self.graph.value(out.hidden).clone(),
            self.graph.value(out.logits).clone(),
        ))
    }
}

/// Appends one position and returns its hidden state and logits.
pub fn forward_incremental<T: Scalar>(
    element: &InputElement<T>,
    cache: &mut DecodeCache<'_, T>,
) -> Result<StepOutput<T>> {
    let (h, l) = cache.feed(std::slice::from_ref(element))?;
    Ok(StepOutput {
        hidden: h.into_data(),
        logits: l.into_data(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, vocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelParams<f64> {
        let cfg = ModelConfig {
            d: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            max_seq_len: 32,
            seed: 3,
            ..ModelConfig::default()
        };
        init_params(&cfg).unwrap()
    }

    fn random_elements(rng: &mut ChaCha8Rng, n: usize, d: usize, vocab: usize) -> Vec<InputElement<f64>> {
        (0..n)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    InputElement::Vector {
                        role: VectorRole::VideoToken,
                        values: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    }
                } else {
                    InputElement::Token(rng.gen_range(0..vocab as u32))
                }
            })
            .collect()
    }

    #[test]
    fn embed_discrete_rows_are_lookup_plus_position() {
        let p = small();
        let ids = [vocab::BOS, 7, 12];
        let els: Vec<_> = ids.iter().map(|&i| InputElement::Token(i)).collect();
        let x = embed_inputs(&els, &p).unwrap();
        let pe = positions::<f64>(0, 3, 16);
        let table = p.params.get(0);
        for (r, &id) in ids.iter().enumerate() {
            for c in 0..16 {
                assert_eq!(x.row(r)[c], table.row(id as usize)[c] + pe.row(r)[c]);
            }
        }
    }

    #[test]
    fn embed_feedback_is_identity_plus_position() {
        let p = small();
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let els = vec![
            InputElement::Token(vocab::BOS),
            InputElement::Vector {
                role: VectorRole::LatentFeedback,
                values: v.clone(),
            },
        ];
        let x = embed_inputs(&els, &p).unwrap();
        let pe = positions::<f64>(0, 2, 16);
        for c in 0..16 {
            assert_eq!(x.row(1)[c], v[c] + pe.row(1)[c]);
        }
    }

    #[test]
    fn embed_empty_and_bad_id() {
        let p = small();
        assert_eq!(embed_inputs::<f64>(&[], &p).unwrap().shape(), &[0, 16]);
        let err = embed_inputs(&[InputElement::<f64>::Token(10_000)], &p).unwrap_err();
        assert!(matches!(err, StormError::Vocab { .. }));
    }

    #[test]
    fn single_position_shapes() {
        let p = small();
        let (h, l) = forward(&[InputElement::Token(vocab::BOS)], &p).unwrap();
        assert_eq!(h.shape(), &[1, 16]);
        assert_eq!(l.shape(), &[1, p.config.vocab_size]);
    }

    #[test]
    fn overlength_is_rejected() {
        let p = small();
        let els = vec![InputElement::Token(vocab::BOS); 33];
        assert!(matches!(forward(&els, &p), Err(StormError::SequenceLength { .. })));
    }

    #[test]
    fn causality_suffix_changes_do_not_leak() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..20);
            let els = random_elements(&mut rng, n, 16, p.config.vocab_size);
            let t = rng.gen_range(1..n);
            let mut altered = els.clone();
            for e in altered.iter_mut().skip(t) {
                *e = InputElement::Vector {
                    role: VectorRole::VideoToken,
                    values: vec![0.0; 16],
                };
            }
            let (_, a) = forward(&els, &p).unwrap();
            let (_, b) = forward(&altered, &p).unwrap();
            for r in 0..t {
                assert_eq!(a.row(r), b.row(r));
            }
        }
    }

    #[test]
    fn incremental_matches_batch() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.gen_range(1..25);
            let els = random_elements(&mut rng, n, 16, p.config.vocab_size);
            let (h, l) = forward(&els, &p).unwrap();
            let mut cache = DecodeCache::new(&p);
            for (t, e) in els.iter().enumerate() {
                let out = forward_incremental(e, &mut cache).unwrap();
                assert_eq!(cache.len(), t + 1);
                for (a, b) in out.hidden.iter().zip(h.row(t)) {
                    assert!((a - b).abs() < 1e-9);
                }
                for (a, b) in out.logits.iter().zip(l.row(t)) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn first_step_equals_forward_of_bos() {
        let p = small();
        let mut cache = DecodeCache::new(&p);
        let out = forward_incremental(&InputElement::Token(vocab::BOS), &mut cache).unwrap();
        let (h, l) = forward(&[InputElement::Token(vocab::BOS)], &p).unwrap();
        assert_eq!(out.hidden.as_slice(), h.row(0));
        assert_eq!(out.logits.as_slice(), l.row(0));
    }

    #[test]
    fn cache_overflow_is_an_error() {
        let p = small();
        let mut cache = DecodeCache::new(&p);
        for _ in 0..32 {
            forward_incremental(&InputElement::Token(vocab::BOS), &mut cache).unwrap();
        }
        assert!(forward_incremental(&InputElement::Token(vocab::BOS), &mut cache).is_err());
    }
}
