//! Bounded latent decoding: text mode, latent mode with hidden-state
//! feedback, budget enforcement and forced termination.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StormError};
use crate::model::{vocab, DecodeCache, InputElement, ModelParams, VectorRole};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Text,
    /// Latent mode with this many slots already used.
    Latent(usize),
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Text => f.write_str("TEXT"),
            DecodeMode::Latent(s) => write!(f, "LATENT({s})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision<T> {
    pub emitted: u32,
    pub next_mode: DecodeMode,
    pub next_input: InputElement<T>,
    /// The budget ran out: `LATENT_END` must be inserted after `next_input`.
    pub forced_close: bool,
}

/// Index of the first maximal logit.
pub fn argmax<T: Scalar>(logits: &[T]) -> Result<u32> {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v.is_nan() {
            return Err(StormError::Numeric(format!("NaN logit at index {i}")));
        }
        if v > logits[best] {
            best = i;
        }
    }
    if logits.is_empty() {
        return Err(StormError::Dimension {
            op: "argmax",
            lhs: vec![0],
            rhs: vec![1],
        });
    }
    Ok(best as u32)
}

/// One transition of the decoding state machine.
pub fn decode_step<T: Scalar>(mode: DecodeMode, last_hidden: &[T], last_logits: &[T], k: usize) -> Result<StepDecision<T>> {
    if k == 0 {
        return Err(StormError::Config("latent budget K must be at least 1".into()));
    }
    let top = argmax(last_logits)?;
    Ok(match mode {
        DecodeMode::Text => StepDecision {
            emitted: top,
            next_mode: if top == vocab::LATENT_START {
                DecodeMode::Latent(0)
            } else {
                DecodeMode::Text
            },
            next_input: InputElement::Token(top),
            forced_close: false,
        },
        DecodeMode::Latent(_) if top == vocab::LATENT_END => StepDecision {
            emitted: vocab::LATENT_END,
            next_mode: DecodeMode::Text,
            next_input: InputElement::Token(vocab::LATENT_END),
            forced_close: false,
        },
        DecodeMode::Latent(s) => {
            let feedback = InputElement::Vector {
                role: VectorRole::LatentFeedback,
                values: last_hidden.to_vec(),
            };
            let forced = s + 1 >= k;
            StepDecision {
                emitted: vocab::LATENT_PAD,
                next_mode: if forced { DecodeMode::Text } else { DecodeMode::Latent(s + 1) },
                next_input: feedback,
                forced_close: forced,
            }
        }
    })
}

/// Source of next-position outputs during decoding.
pub trait Decoder<T: Scalar> {
    /// Appends positions; returns their hidden states and logits.
    fn feed(&mut self, elements: &[InputElement<T>]) -> Result<(Tensor<T>, Tensor<T>)>;
    fn max_seq_len(&self) -> usize;
}

impl<T: Scalar> Decoder<T> for DecodeCache<'_, T> {
    fn feed(&mut self, elements: &[InputElement<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
        DecodeCache::feed(self, elements)
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InputKind {
    Discrete,
    LatentFeedback,
    /// The emitted token is never fed back (final `EOS`).
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub index: usize,
    /// Mode before the step, `TEXT` or `LATENT(s)`.
    pub mode: String,
    pub token: u32,
    pub input: InputKind,
    pub forced_close: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceTotals {
    pub slots_used: usize,
    pub decode_passes: usize,
    pub answer_len: usize,
    pub forced_close: bool,
    /// The answer budget ran out before `EOS`.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub steps: Vec<TraceStep>,
    pub totals: TraceTotals,
}

impl RolloutTrace {
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    /// JSON lines: one per step, then the totals record.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &self.totals)?;
        w.write_all(b"\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub k: usize,
    /// Text tokens allowed after the latent segment, `EOS` included.
    pub max_answer_len: usize,
    pub force_latent_entry: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            k: 8,
            max_answer_len: 2,
            force_latent_entry: true,
        }
    }
}

/// Everything a rollout produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T> {
    /// Answer tokens, `EOS` excluded.
    pub answer: Vec<u32>,
    pub trace: RolloutTrace,
    pub prompt_len: usize,
    /// Elements fed after the prompt, in order.
    pub inputs: Vec<InputElement<T>>,
    /// Final hidden state of each fed element.
    pub hidden: Vec<Vec<T>>,
    /// Hidden states at latent slot positions.
    pub latent_states: Vec<Vec<T>>,
    /// Hidden states at positions holding answer tokens.
    pub answer_states: Vec<Vec<T>>,
}

struct Session<'d, T: Scalar, D: Decoder<T>> {
    decoder: &'d mut D,
    passes: usize,
    last_hidden: Vec<T>,
    last_logits: Vec<T>,
    inputs: Vec<InputElement<T>>,
    hidden: Vec<Vec<T>>,
}

impl<T: Scalar, D: Decoder<T>> Session<'_, T, D> {
    fn feed(&mut self, elements: &[InputElement<T>], record: bool) -> Result<()> {
        let (h, l) = self.decoder.feed(elements)?;
        self.passes += 1;
        let last = h.rows() - 1;
        self.last_hidden = h.row(last).to_vec();
        self.last_logits = l.row(last).to_vec();
        if record {
            self.inputs.extend_from_slice(elements);
            self.hidden.push(self.last_hidden.clone());
        }
        Ok(())
    }
}

/// Runs bounded latent decoding on any [`Decoder`].
pub fn rollout_with<T: Scalar, D: Decoder<T>>(
    decoder: &mut D,
    prompt: &[InputElement<T>],
    cfg: &RolloutConfig,
) -> Result<Rollout<T>> {
    let k = cfg.k;
    if k == 0 {
        return Err(StormError::Config("latent budget K must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(StormError::Config("rollout prompt is empty".into()));
    }
    let needed = prompt.len() + 2 + k + cfg.max_answer_len;
    if needed > decoder.max_seq_len() {
        return Err(StormError::SequenceLength {
            len: needed,
            max: decoder.max_seq_len(),
        });
    }
    let mut s = Session {
        decoder,
        passes: 0,
        last_hidden: Vec::new(),
        last_logits: Vec::new(),
        inputs: Vec::new(),
        hidden: Vec::new(),
    };
    s.feed(prompt, false)?;

    let mut steps = Vec::new();
    let mut push = |mode: DecodeMode, token: u32, input: InputKind, forced_close: bool| {
        steps.push(TraceStep {
            index: steps.len(),
            mode: mode.to_string(),
            token,
            input,
            forced_close,
        })
    };
    let mut mode = DecodeMode::Text;
    let mut segment_done = false;
    if cfg.force_latent_entry {
        push(mode, vocab::LATENT_START, InputKind::Discrete, false);
        s.feed(&[InputElement::Token(vocab::LATENT_START)], true)?;
        mode = DecodeMode::Latent(0);
    }

    let mut answer = Vec::new();
    let mut answer_states = Vec::new();
    let mut latent_states = Vec::new();
    let mut text_emitted = 0;
    let mut forced = false;
    let mut truncated = false;
    loop {
        let d = decode_step(mode, &s.last_hidden, &s.last_logits, k)?;
        match mode {
            DecodeMode::Text => {
                if text_emitted >= cfg.max_answer_len {
                    truncated = true;
                    break;
                }
                if d.emitted == vocab::EOS {
                    push(mode, d.emitted, InputKind::None, false);
                    break;
                }
                if d.next_mode != DecodeMode::Text && !segment_done {
                    push(mode, d.emitted, InputKind::Discrete, false);
                    s.feed(&[d.next_input], true)?;
                    mode = d.next_mode;
                    continue;
                }
                text_emitted += 1;
                push(mode, d.emitted, InputKind::Discrete, false);
                s.feed(&[d.next_input], true)?;
                answer.push(d.emitted);
                answer_states.push(s.last_hidden.clone());
            }
            DecodeMode::Latent(used) => {
                if d.emitted == vocab::LATENT_END {
                    push(mode, d.emitted, InputKind::Discrete, false);
                    s.feed(&[d.next_input], true)?;
                    segment_done = true;
                    mode = DecodeMode::Text;
                    continue;
                }
                push(mode, d.emitted, InputKind::LatentFeedback, false);
                s.feed(&[d.next_input], true)?;
                latent_states.push(s.last_hidden.clone());
                if d.forced_close {
                    push(DecodeMode::Latent(used + 1), vocab::LATENT_END, InputKind::Discrete, true);
                    s.feed(&[InputElement::Token(vocab::LATENT_END)], true)?;
                    forced = true;
                    segment_done = true;
                }
                mode = d.next_mode;
            }
        }
    }

    let trace = RolloutTrace {
        totals: TraceTotals {
            slots_used: latent_states.len(),
            decode_passes: s.passes,
            answer_len: answer.len(),
            forced_close: forced,
            truncated,
        },
        steps,
    };
    Ok(Rollout {
        answer,
        trace,
        prompt_len: prompt.len(),
        inputs: s.inputs,
        hidden: s.hidden,
        latent_states,
        answer_states,
    })
}

/// Prefills `prompt` and decodes with the model.
pub fn rollout<T: Scalar>(prompt: &[InputElement<T>], params: &ModelParams<T>, cfg: &RolloutConfig) -> Result<Rollout<T>> {
    let mut cache = DecodeCache::new(params);
    rollout_with(&mut cache, prompt, cfg)
}

/// Answer tokens and trace for one prompt.
pub fn run_inference<T: Scalar>(
    prompt: &[InputElement<T>],
    params: &ModelParams<T>,
    k: usize,
    max_answer_len: usize,
    force_latent_entry: bool,
) -> Result<(Vec<u32>, RolloutTrace)> {
    let cfg = RolloutConfig {
        k,
        max_answer_len,
        force_latent_entry,
    };
    let r = rollout(prompt, params, &cfg)?;
    Ok((r.answer, r.trace))
}
