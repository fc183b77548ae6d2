//! Run configuration: line-oriented `key = value` text with command-line overrides.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::SynthConfig;
use crate::downstream::{FinetuneConfig, TaskKind};
use crate::error::{Result, TdenError};
use crate::nn::{IsmPlacement, ModelConfig};
use crate::proxy::LossSet;
use crate::sampling::{SamplingMode, Scheme};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Name of the preset the model fields started from.
    pub model_preset: String,
    pub model: ModelConfig,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Directory written by `gen-data`; empty means generate in memory.
    pub data_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub task: TaskKind,
    pub finetune: FinetuneConfig,
    /// Training items used for finetuning (0: the whole train split).
    pub ft_train: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_preset: "desk".into(),
            model: ModelConfig::desk(),
            data_seed: 0,
            n_train: 2048,
            n_val: 256,
            n_test: 256,
            data_dir: None,
            train: TrainConfig::default(),
            task: TaskKind::Classification,
            finetune: FinetuneConfig::default(),
            ft_train: 0,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "model",
    "d_model",
    "n_heads",
    "d_ff",
    "k_object",
    "k_sentence",
    "k_cross",
    "k_decoder",
    "max_seq_len",
    "init_std",
    "tie_word_classifier",
    "ism_placement",
    "ism_margin",
    "data_seed",
    "n_train",
    "n_val",
    "n_test",
    "data_dir",
    "seed",
    "steps",
    "batch_size",
    "scheme",
    "losses",
    "sampling",
    "word_mask_prob",
    "region_mask_prob",
    "lr",
    "warmup_steps",
    "clip_norm",
    "eval_every",
    "eval_size",
    "checkpoint_every",
    "task",
    "ft_steps",
    "ft_batch_size",
    "ft_lr",
    "head_lr_scale",
    "ft_train",
    "retrieval_pool",
    "beam",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TdenError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_losses(value: &str) -> Result<LossSet> {
    let mut set = LossSet {
        mlm: false,
        moc: false,
        ism: false,
        msg: false,
    };
    for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "mlm" => set.mlm = true,
            "moc" => set.moc = true,
            "ism" => set.ism = true,
            "msg" => set.msg = true,
            other => return Err(TdenError::Config(format!("unknown loss `{other}`"))),
        }
    }
    if !(set.mlm || set.moc || set.ism || set.msg) {
        return Err(TdenError::Config("`losses` must name at least one objective".into()));
    }
    Ok(set)
}

pub fn losses_to_string(set: LossSet) -> String {
    let names = [("mlm", set.mlm), ("moc", set.moc), ("ism", set.ism), ("msg", set.msg)];
    names
        .iter()
        .filter(|n| n.1)
        .map(|n| n.0)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Defaults with the model fields of the named preset.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            model_preset: name.to_string(),
            model: ModelConfig::preset(name)?,
            ..RunConfig::default()
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let f = &mut self.finetune;
        match key {
            "model" => {
                *m = ModelConfig::preset(value)?;
                self.model_preset = value.to_string();
            }
            "d_model" => m.d_model = num(key, value)?,
            "n_heads" => m.n_heads = num(key, value)?,
            "d_ff" => m.d_ff = num(key, value)?,
            "k_object" => m.k_object = num(key, value)?,
            "k_sentence" => m.k_sentence = num(key, value)?,
            "k_cross" => m.k_cross = num(key, value)?,
            "k_decoder" => m.k_decoder = num(key, value)?,
            "max_seq_len" => m.max_seq_len = num(key, value)?,
            "init_std" => m.init_std = num(key, value)?,
            "tie_word_classifier" => m.tie_word_classifier = num(key, value)?,
            "ism_placement" => m.ism_placement = IsmPlacement::parse(value)?,
            "ism_margin" => m.ism_margin = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_val" => self.n_val = num(key, value)?,
            "n_test" => self.n_test = num(key, value)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "seed" => {
                t.seed = num(key, value)?;
                f.seed = t.seed;
            }
            "steps" => t.steps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "scheme" => t.step.scheme = Scheme::parse(value)?,
            "losses" => t.step.losses = parse_losses(value)?,
            "sampling" => t.step.sampling = SamplingMode::parse(value)?,
            "word_mask_prob" => t.mask.word_prob = num(key, value)?,
            "region_mask_prob" => t.mask.region_prob = num(key, value)?,
            "lr" => t.adam.lr = num(key, value)?,
            "warmup_steps" => t.adam.warmup_steps = num(key, value)?,
            "clip_norm" => {
                t.adam.clip_norm = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "eval_every" => t.eval_every = num(key, value)?,
            "eval_size" => t.eval_size = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "task" => self.task = TaskKind::parse(value)?,
            "ft_steps" => f.steps = num(key, value)?,
            "ft_batch_size" => f.batch_size = num(key, value)?,
            "ft_lr" => f.adam.lr = num(key, value)?,
            "head_lr_scale" => f.head_lr_scale = num(key, value)?,
            "ft_train" => self.ft_train = num(key, value)?,
            "retrieval_pool" => f.retrieval_pool = num(key, value)?,
            "beam" => f.beam = num(key, value)?,
            other => return Err(TdenError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (m, t, f) = (&self.model, &self.train, &self.finetune);
        Ok(match key {
            "model" => self.model_preset.clone(),
            "d_model" => m.d_model.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "k_object" => m.k_object.to_string(),
            "k_sentence" => m.k_sentence.to_string(),
            "k_cross" => m.k_cross.to_string(),
            "k_decoder" => m.k_decoder.to_string(),
            "max_seq_len" => m.max_seq_len.to_string(),
            "init_std" => m.init_std.to_string(),
            "tie_word_classifier" => m.tie_word_classifier.to_string(),
            "ism_placement" => m.ism_placement.as_str().into(),
            "ism_margin" => m.ism_margin.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "n_test" => self.n_test.to_string(),
            "data_dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "seed" => t.seed.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "scheme" => t.step.scheme.as_str().into(),
            "losses" => losses_to_string(t.step.losses),
            "sampling" => t.step.sampling.as_str().into(),
            "word_mask_prob" => t.mask.word_prob.to_string(),
            "region_mask_prob" => t.mask.region_prob.to_string(),
            "lr" => t.adam.lr.to_string(),
            "warmup_steps" => t.adam.warmup_steps.to_string(),
            "clip_norm" => t.adam.clip_norm.map_or("none".into(), |c| c.to_string()),
            "eval_every" => t.eval_every.to_string(),
            "eval_size" => t.eval_size.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "task" => self.task.as_str().into(),
            "ft_steps" => f.steps.to_string(),
            "ft_batch_size" => f.batch_size.to_string(),
            "ft_lr" => f.adam.lr.to_string(),
            "head_lr_scale" => f.head_lr_scale.to_string(),
            "ft_train" => self.ft_train.to_string(),
            "retrieval_pool" => f.retrieval_pool.to_string(),
            "beam" => f.beam.to_string(),
            other => return Err(TdenError::Config(format!("unknown key `{other}`"))),
        })
    }

    /// Applies `key = value` lines. `#` starts a comment. A `model` line is
    /// applied first so field overrides survive regardless of order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TdenError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|p| p.1 != "model");
        for (n, k, v) in pairs {
            self.set(&k, &v)
                .map_err(|e| TdenError::Config(format!("line {n}: {e}")))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// One `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| TdenError::Config(format!("override `{spec}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Effective configuration, every key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let v = self.get(k).expect("listed key");
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: &str| Err(TdenError::Config(m.into()));
        if self.train.batch_size == 0 || self.finetune.batch_size == 0 {
            return fail("batch sizes must be positive");
        }
        for p in [self.train.mask.word_prob, self.train.mask.region_prob] {
            if !(0.0..=1.0).contains(&p) {
                return fail("mask probabilities must lie in [0, 1]");
            }
        }
        if self.train.step.scheme != Scheme::None && !(self.train.step.losses.mlm && self.train.step.losses.msg) {
            return fail("two-pass schemes need both mlm and msg in `losses`");
        }
        if self.train.step.losses.ism && self.train.batch_size < 2 {
            return fail("ism needs batch_size >= 2");
        }
        if !(self.train.adam.lr > 0.0 && self.finetune.adam.lr > 0.0) {
            return fail("learning rates must be positive");
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig::for_model(&self.model)
    }
}
