//! Flat `key = value` run configuration. `#` starts a comment; unknown keys
//! and malformed values are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::modeling::{PretrainWeights, TokenEncoderConfig};
use crate::selection::{DropPolicy, FinetuneConfig, FinetuneMode};
use crate::tensor::AdamConfig;
use crate::vq::TokenizerConfig;

use super::dataset::{NUM_CLASSES, SIDE};
use super::train::{ProbeConfig, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherKind {
    Toy,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    InProcess,
    Tcp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data_seed: u64,
    pub train_size: usize,
    pub test_size: usize,

    pub codebook_size: usize,
    pub code_dim: usize,
    pub downsample: usize,
    pub tokenizer_hidden: usize,
    pub beta: f64,
    pub tokenizer_steps: usize,
    pub tokenizer_batch: usize,
    pub tokenizer_lr: f64,

    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,

    pub mask_ratio: f64,
    pub lambda_dist: f64,
    pub lambda_contra: f64,
    pub tau: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub teacher: TeacherKind,
    pub teacher_seed: u64,
    pub teacher_images: Option<PathBuf>,
    pub teacher_labels: Option<PathBuf>,

    pub finetune_mode: FinetuneMode,
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub gating: bool,
    pub drop_policy: DropPolicy,

    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub k_list: Vec<usize>,
    pub channel: ChannelKind,
    pub log_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            train_size: 8000,
            test_size: 2000,
            codebook_size: 64,
            code_dim: 16,
            downsample: 4,
            tokenizer_hidden: 32,
            beta: 0.25,
            tokenizer_steps: 1500,
            tokenizer_batch: 32,
            tokenizer_lr: 2e-3,
            d_model: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            decoder_depth: 1,
            mask_ratio: 0.75,
            lambda_dist: 1.0,
            lambda_contra: 1.0,
            tau: 0.07,
            pretrain_steps: 1500,
            pretrain_batch: 32,
            pretrain_lr: 1e-3,
            teacher: TeacherKind::Toy,
            teacher_seed: 0,
            teacher_images: None,
            teacher_labels: None,
            finetune_mode: FinetuneMode::Variable { k_min: 16, k_max: 64 },
            finetune_steps: 1500,
            finetune_batch: 32,
            finetune_lr: 5e-4,
            gating: true,
            drop_policy: DropPolicy::Omit,
            probe_epochs: 300,
            probe_lr: 1e-2,
            k_list: vec![64, 56, 49, 42, 32, 16],
            channel: ChannelKind::InProcess,
            log_every: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

pub fn parse_k_list(v: &str) -> Result<Vec<usize>> {
    let ks = v
        .split(',')
        .map(|s| parse::<usize>("k_list", s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("invalid K list `{v}`")));
    }
    Ok(ks)
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "test_size" => self.test_size = parse(key, v)?,
            "codebook_size" => self.codebook_size = parse(key, v)?,
            "code_dim" => self.code_dim = parse(key, v)?,
            "downsample" => self.downsample = parse(key, v)?,
            "tokenizer_hidden" => self.tokenizer_hidden = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "tokenizer_steps" => self.tokenizer_steps = parse(key, v)?,
            "tokenizer_batch" => self.tokenizer_batch = parse(key, v)?,
            "tokenizer_lr" => self.tokenizer_lr = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "decoder_depth" => self.decoder_depth = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "lambda_dist" => self.lambda_dist = parse(key, v)?,
            "lambda_contra" => self.lambda_contra = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "teacher" => {
                self.teacher = match v {
                    "toy" => TeacherKind::Toy,
                    "file" => TeacherKind::File,
                    _ => return Err(Error::Config(format!("unknown teacher `{v}`"))),
                }
            }
            "teacher_seed" => self.teacher_seed = parse(key, v)?,
            "teacher_images" => self.teacher_images = Some(PathBuf::from(v)),
            "teacher_labels" => self.teacher_labels = Some(PathBuf::from(v)),
            "finetune_mode" => {
                self.finetune_mode = match v {
                    "fixed" => FinetuneMode::Fixed(self.k_max()),
                    "variable" => FinetuneMode::Variable {
                        k_min: self.k_min(),
                        k_max: self.k_max(),
                    },
                    _ => return Err(Error::Config(format!("unknown finetune mode `{v}`"))),
                }
            }
            "k" => self.finetune_mode = FinetuneMode::Fixed(parse(key, v)?),
            "k_min" | "k_max" => {
                let x: usize = parse(key, v)?;
                let (mut lo, mut hi) = (self.k_min(), self.k_max());
                if key == "k_min" {
                    lo = x;
                } else {
                    hi = x;
                }
                self.finetune_mode = match self.finetune_mode {
                    FinetuneMode::Fixed(_) if key == "k_max" => FinetuneMode::Fixed(hi),
                    FinetuneMode::Fixed(k) => FinetuneMode::Fixed(k),
                    FinetuneMode::Variable { .. } => FinetuneMode::Variable { k_min: lo, k_max: hi },
                };
            }
            "finetune_steps" => self.finetune_steps = parse(key, v)?,
            "finetune_batch" => self.finetune_batch = parse(key, v)?,
            "finetune_lr" => self.finetune_lr = parse(key, v)?,
            "gating" => self.gating = parse_bool(key, v)?,
            "drop_policy" => {
                self.drop_policy = match v {
                    "omit" => DropPolicy::Omit,
                    "fill" => DropPolicy::FillClassToken,
                    _ => return Err(Error::Config(format!("unknown drop policy `{v}`"))),
                }
            }
            "probe_epochs" => self.probe_epochs = parse(key, v)?,
            "probe_lr" => self.probe_lr = parse(key, v)?,
            "k_list" => self.k_list = parse_k_list(v)?,
            "channel" => {
                self.channel = match v {
                    "inproc" => ChannelKind::InProcess,
                    "tcp" => ChannelKind::Tcp,
                    _ => return Err(Error::Config(format!("unknown channel `{v}`"))),
                }
            }
            "log_every" => self.log_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn k_min(&self) -> usize {
        match self.finetune_mode {
            FinetuneMode::Fixed(k) => k,
            FinetuneMode::Variable { k_min, .. } => k_min,
        }
    }

    fn k_max(&self) -> usize {
        match self.finetune_mode {
            FinetuneMode::Fixed(k) => k,
            FinetuneMode::Variable { k_max, .. } => k_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer_config().validate()?;
        self.encoder_config(1).validate()?;
        let total = self.tokens();
        let (lo, hi) = (self.k_min(), self.k_max());
        if lo == 0 || lo > hi || hi > total {
            return Err(Error::Config(format!("K range [{lo}, {hi}] invalid for {total} tokens")));
        }
        if self.k_list.iter().any(|&k| k == 0 || k > total) {
            return Err(Error::Config(format!("K list {:?} outside 1..={total}", self.k_list)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || !(self.tau > 0.0) {
            return Err(Error::Config("mask_ratio must be in (0,1) and tau > 0".into()));
        }
        if self.teacher == TeacherKind::File && (self.teacher_images.is_none() || self.teacher_labels.is_none()) {
            return Err(Error::Config("file teacher needs teacher_images and teacher_labels".into()));
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`Config::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("train_size", self.train_size.to_string());
        kv("test_size", self.test_size.to_string());
        kv("codebook_size", self.codebook_size.to_string());
        kv("code_dim", self.code_dim.to_string());
        kv("downsample", self.downsample.to_string());
        kv("tokenizer_hidden", self.tokenizer_hidden.to_string());
        kv("beta", self.beta.to_string());
        kv("tokenizer_steps", self.tokenizer_steps.to_string());
        kv("tokenizer_batch", self.tokenizer_batch.to_string());
        kv("tokenizer_lr", self.tokenizer_lr.to_string());
        kv("d_model", self.d_model.to_string());
        kv("depth", self.depth.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("decoder_depth", self.decoder_depth.to_string());
        kv("mask_ratio", self.mask_ratio.to_string());
        kv("lambda_dist", self.lambda_dist.to_string());
        kv("lambda_contra", self.lambda_contra.to_string());
        kv("tau", self.tau.to_string());
        kv("pretrain_steps", self.pretrain_steps.to_string());
        kv("pretrain_batch", self.pretrain_batch.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv("teacher", if self.teacher == TeacherKind::Toy { "toy" } else { "file" }.into());
        kv("teacher_seed", self.teacher_seed.to_string());
        if let Some(p) = &self.teacher_images {
            kv("teacher_images", p.display().to_string());
        }
        if let Some(p) = &self.teacher_labels {
            kv("teacher_labels", p.display().to_string());
        }
        match self.finetune_mode {
            FinetuneMode::Fixed(k) => {
                kv("finetune_mode", "fixed".into());
                kv("k", k.to_string());
            }
            FinetuneMode::Variable { k_min, k_max } => {
                kv("finetune_mode", "variable".into());
                kv("k_min", k_min.to_string());
                kv("k_max", k_max.to_string());
            }
        }
        kv("finetune_steps", self.finetune_steps.to_string());
        kv("finetune_batch", self.finetune_batch.to_string());
        kv("finetune_lr", self.finetune_lr.to_string());
        kv("gating", self.gating.to_string());
        kv("drop_policy", if self.drop_policy == DropPolicy::Omit { "omit" } else { "fill" }.into());
        kv("probe_epochs", self.probe_epochs.to_string());
        kv("probe_lr", self.probe_lr.to_string());
        let ks: Vec<String> = self.k_list.iter().map(usize::to_string).collect();
        kv("k_list", ks.join(","));
        kv("channel", if self.channel == ChannelKind::InProcess { "inproc" } else { "tcp" }.into());
        kv("log_every", self.log_every.to_string());
        s
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            height: SIDE,
            width: SIDE,
            channels: 3,
            downsample: self.downsample,
            hidden: self.tokenizer_hidden,
            codebook_size: self.codebook_size,
            code_dim: self.code_dim,
            beta: self.beta,
        }
    }

    pub fn tokens(&self) -> usize {
        (SIDE / self.downsample.max(1)).pow(2)
    }

    pub fn classes(&self) -> usize {
        NUM_CLASSES
    }

    /// `teacher_dim` is the semantic teacher's embedding size.
    pub fn encoder_config(&self, teacher_dim: usize) -> TokenEncoderConfig {
        TokenEncoderConfig {
            d_model: self.d_model,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            max_tokens: self.tokens(),
            vocab: self.codebook_size,
            decoder_depth: self.decoder_depth,
            teacher_dim,
        }
    }

    pub fn pretrain_weights(&self) -> PretrainWeights {
        PretrainWeights {
            lambda_dist: self.lambda_dist,
            lambda_contra: self.lambda_contra,
            tau: self.tau,
            mask_ratio: self.mask_ratio,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            mode: self.finetune_mode,
            gating: self.gating,
        }
    }

    pub fn tokenizer_schedule(&self) -> Schedule {
        Schedule {
            steps: self.tokenizer_steps,
            batch: self.tokenizer_batch,
            adam: AdamConfig::with_lr(self.tokenizer_lr),
            log_every: self.log_every,
        }
    }

    pub fn pretrain_schedule(&self) -> Schedule {
        Schedule {
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            adam: AdamConfig::with_lr(self.pretrain_lr),
            log_every: self.log_every,
        }
    }

    pub fn finetune_schedule(&self) -> Schedule {
        Schedule {
            steps: self.finetune_steps,
            batch: self.finetune_batch,
            adam: AdamConfig::with_lr(self.finetune_lr),
            log_every: self.log_every,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
        }
    }
}
