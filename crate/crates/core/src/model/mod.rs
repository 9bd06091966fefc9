//! Small decoder-only causal transformer over mixed token / vector inputs.

mod forward;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, StormError};
use crate::optim::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use forward::{
    embed_inputs, forward, forward_incremental, forward_pieces, positions, DecodeCache, Piece, PiecesOutput,
    StepOutput, TapeCache,
};
pub use vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub patch_size: usize,
    pub frame_grid: usize,
    pub channels: usize,
    pub seed: u64,
    /// Learned `d×d` map applied to fed-back latent states; identity when off.
    #[serde(default)]
    pub feedback_projection: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            vocab_size: Vocab::standard().len(),
            patch_size: 4,
            frame_grid: 8,
            channels: 1,
            seed: 0,
            feedback_projection: false,
            ln_eps: default_ln_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(StormError::Config(m));
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return fail(format!("d={} must be a positive multiple of n_heads={}", self.d, self.n_heads));
        }
        if self.d % 2 != 0 {
            return fail(format!("d={} must be even for sinusoidal positions", self.d));
        }
        if self.patch_size == 0 || self.frame_grid % self.patch_size != 0 {
            return fail(format!(
                "frame_grid={} must be divisible by patch_size={}",
                self.frame_grid, self.patch_size
            ));
        }
        if self.vocab_size < Vocab::standard().len() {
            return fail(format!(
                "vocab_size={} smaller than the task vocabulary ({})",
                self.vocab_size,
                Vocab::standard().len()
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 || self.channels == 0 {
            return fail("n_layers, d_ff, max_seq_len and channels must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Flattened patch width `p·p·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Visual tokens per frame, `(G/p)²`.
    pub fn tokens_per_frame(&self) -> usize {
        let s = self.frame_grid / self.patch_size;
        s * s
    }
}

/// Role of a continuous input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorRole {
    VideoToken,
    LatentFeedback,
}

/// One sequence position: a discrete token or a width-`d` vector.
#[derive(Debug, Clone, PartialEq)]
pub enum InputElement<T> {
    Token(u32),
    Vector { role: VectorRole, values: Vec<T> },
}

impl<T> InputElement<T> {
    pub fn is_feedback(&self) -> bool {
        matches!(
            self,
            InputElement::Vector {
                role: VectorRole::LatentFeedback,
                ..
            }
        )
    }
}

const LAYER_TENSORS: usize = 12;

/// Model configuration plus parameters in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Parameter tensors bound into a graph.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub all: Vec<Var>,
    n_layers: usize,
    feedback: bool,
}

pub(crate) struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    pub fn tok_emb(&self) -> Var {
        self.all[0]
    }
    pub fn vis_w(&self) -> Var {
        self.all[1]
    }
    pub fn vis_b(&self) -> Var {
        self.all[2]
    }
    pub(crate) fn layer(&self, l: usize) -> LayerVars {
        let b = 3 + l * LAYER_TENSORS;
        let a = &self.all;
        LayerVars {
            ln1_g: a[b],
            ln1_b: a[b + 1],
            wq: a[b + 2],
            wk: a[b + 3],
            wv: a[b + 4],
            wo: a[b + 5],
            ln2_g: a[b + 6],
            ln2_b: a[b + 7],
            w1: a[b + 8],
            b1: a[b + 9],
            w2: a[b + 10],
            b2: a[b + 11],
        }
    }
    fn tail(&self) -> usize {
        3 + self.n_layers * LAYER_TENSORS
    }
    pub fn lnf_g(&self) -> Var {
        self.all[self.tail()]
    }
    pub fn lnf_b(&self) -> Var {
        self.all[self.tail() + 1]
    }
    pub fn head(&self) -> Var {
        self.all[self.tail() + 2]
    }
    pub fn feedback(&self) -> Option<Var> {
        self.feedback.then(|| self.all[self.tail() + 3])
    }
}

/// Names and shapes of every parameter in canonical order.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (c.d, c.d_ff, c.vocab_size);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("vis.w".to_string(), vec![c.patch_dim(), d]),
        ("vis.b".to_string(), vec![d]),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.wo"), vec![d, d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w1"), vec![d, f]),
            (p("mlp.b1"), vec![f]),
            (p("mlp.w2"), vec![f, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.extend([
        ("lnf.g".to_string(), vec![d]),
        ("lnf.b".to_string(), vec![d]),
        ("head".to_string(), vec![d, v]),
    ]);
    if c.feedback_projection {
        out.push(("feedback.w".to_string(), vec![d, d]));
    }
    out
}

/// Deterministic initialization: matrices uniform in `±1/√d`, gains 1, biases 0.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 1.0 / (config.d as f64).sqrt();
    let mut params = ParamSet::new();
    for (name, shape) in param_shapes(config) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if name.ends_with(".g") {
            vec![T::one(); n]
        } else if shape.len() == 1 {
            vec![T::zero(); n]
        } else {
            (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
        };
        params.push(name, Tensor::new(shape, data)?);
    }
    Ok(ModelParams {
        config: config.clone(),
        params,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(StormError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(StormError::Config(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams { config, params })
    }

    /// Inserts every parameter as a borrowed leaf.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>, requires_grad: bool) -> ParamVars {
        let all = self
            .params
            .tensors()
            .iter()
            .map(|t| g.borrowed(t, requires_grad))
            .collect();
        ParamVars {
            all,
            n_layers: self.config.n_layers,
            feedback: self.config.feedback_projection,
        }
    }

    pub fn vis_w(&self) -> &Tensor<T> {
        self.params.get(1)
    }

    pub fn vis_b(&self) -> &Tensor<T> {
        self.params.get(2)
    }
}
