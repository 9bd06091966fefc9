//! Run configuration: defaults, then a JSON file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use storm_core::datagen::GenConfig;
use storm_core::model::ModelConfig;
use storm_core::rollout::RolloutConfig;
use storm_core::training::StageConfig;

pub const CONFIG_COPY: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageSelect {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "both")]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Samples generated by `gen-data`.
    pub n: usize,
    pub split: String,
    pub stage: StageSelect,
    pub out_dir: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    /// Text tokens allowed after the latent segment, `EOS` included.
    pub max_answer_len: usize,
    pub force_latent_entry: bool,
    /// Extra prefills per item in the simulated tool-call benchmark arm.
    pub extra_passes: usize,
    pub generator: GenConfig,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n: 512,
            split: "heldout".into(),
            stage: StageSelect::Both,
            out_dir: None,
            data: None,
            ckpt: None,
            max_answer_len: 2,
            force_latent_entry: true,
            extra_passes: 3,
            generator: GenConfig::default(),
            model: ModelConfig::default(),
            stage1: StageConfig::stage_one(),
            stage2: StageConfig::stage_two(),
        }
    }
}

/// Values given on the command line; `None` leaves the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub latent_k: Option<usize>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub stage: Option<StageSelect>,
    pub steps: Option<usize>,
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Option<String>,
    pub density: Option<usize>,
    pub force_latent_entry: Option<bool>,
    pub extra_passes: Option<usize>,
}

impl RunConfig {
    /// Inference settings; the budget follows the Stage II `K`.
    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            k: self.stage2.k,
            max_answer_len: self.max_answer_len,
            force_latent_entry: self.force_latent_entry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.max_answer_len == 0 {
            bail!("configuration error: max_answer_len must be at least 1");
        }
        if !["train", "heldout", "all"].contains(&self.split.as_str()) {
            bail!("configuration error: split must be train, heldout or all, got {:?}", self.split);
        }
        Ok(())
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.model.seed = s;
            self.stage1.seed = s;
            self.stage2.seed = s;
        }
        if let Some(k) = o.latent_k {
            self.stage1.k = k;
            self.stage2.k = k;
        }
        if let Some(l) = o.lambda {
            self.stage1.lambda = l;
        }
        if let Some(lr) = o.lr {
            self.stage1.learning_rate = lr;
            self.stage2.learning_rate = lr;
        }
        if let Some(s) = o.steps {
            self.stage1.steps = Some(s);
            self.stage2.steps = Some(s);
        }
        if let Some(d) = o.density {
            self.generator.density = d;
        }
        set(&mut self.n, o.n);
        set(&mut self.stage, o.stage);
        set(&mut self.split, o.split.clone());
        set(&mut self.force_latent_entry, o.force_latent_entry);
        set(&mut self.extra_passes, o.extra_passes);
        if o.out_dir.is_some() {
            self.out_dir = o.out_dir.clone();
        }
        if o.data.is_some() {
            self.data = o.data.clone();
        }
        if o.ckpt.is_some() {
            self.ckpt = o.ckpt.clone();
        }
    }

    pub fn write_copy(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(CONFIG_COPY);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Objects merge key by key; anything else replaces the default.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Resolves defaults < `file` < `flags` and validates the result.
pub fn load_config(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value =
            serde_json::from_str(&text).with_context(|| format!("configuration error: {} is not valid JSON", path.display()))?;
        if !patch.is_object() {
            bail!("configuration error: {} must hold a JSON object", path.display());
        }
        merge(&mut value, patch);
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("configuration error")?;
    cfg.apply(flags);
    cfg.validate()?;
    Ok(cfg)
}
