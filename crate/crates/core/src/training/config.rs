//! `key = value` run descriptions and checkpoint metadata.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decoder::DecoderMode;
use crate::error::{Error, Result};
use crate::model::{AblationMode, ModelConfig, PromptStrategy};
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub lr: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Fixed `(α, β)` for the balanced cross-entropy; per-episode balance when `None`.
    pub loss_weights: Option<(f64, f64)>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: AdamWConfig::default(),
            lr: 5e-5,
            epochs: 50,
            episodes_per_epoch: 64,
            loss_weights: None,
            seed: 0,
            data: None,
            split: None,
            out: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("invalid value `{v}` for `{key}`"))
}

impl RunConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(Error::InvalidArgument(
                "epochs and episodes_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Applies one setting. Errors are plain messages; callers attach location.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let e = &mut self.model.encoder;
        let a = &mut self.model.apl;
        match key {
            "image_size" => e.image_size = num(key, v)?,
            "patch_size" => e.patch_size = num(key, v)?,
            "embed_dim" => e.embed_dim = num(key, v)?,
            "num_layers" => e.num_layers = num(key, v)?,
            "num_heads" => e.num_heads = num(key, v)?,
            "adapter_dim" => e.adapter_dim = num(key, v)?,
            "hfc_ratio" => e.hfc_ratio = num(key, v)?,
            "a_sp" => a.a_sp = num(key, v)?,
            "n_max" => a.n_max = num(key, v)?,
            "omega" => a.omega = num(key, v)?,
            "iterations" => a.iterations = num(key, v)?,
            "n_tokens" => a.n_tokens = num(key, v)?,
            "prompt" => {
                self.model.ablation.prompt =
                    v.parse::<PromptStrategy>().map_err(|e| e.to_string())?
            }
            "decoder" => {
                self.model.ablation.decoder = v.parse::<DecoderMode>().map_err(|e| e.to_string())?
            }
            "lr" => self.lr = num(key, v)?,
            "weight_decay" => self.optim.weight_decay = num(key, v)?,
            "beta1" => self.optim.beta1 = num(key, v)?,
            "beta2" => self.optim.beta2 = num(key, v)?,
            "eps" => self.optim.eps = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "episodes_per_epoch" => self.episodes_per_epoch = num(key, v)?,
            "loss_weights" => {
                self.loss_weights = if v == "auto" {
                    None
                } else {
                    let (x, y) = v
                        .split_once(',')
                        .ok_or_else(|| format!("expected `auto` or `alpha,beta`, got `{v}`"))?;
                    Some((num(key, x.trim())?, num(key, y.trim())?))
                }
            }
            "seed" => self.seed = num(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "split" => self.split = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `origin` names the
    /// source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            apply_line(origin, i + 1, raw, |k, v| cfg.set(k, v))?;
        }
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let e = &self.model.encoder;
        let a = &self.model.apl;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", e.image_size.to_string());
        kv("patch_size", e.patch_size.to_string());
        kv("embed_dim", e.embed_dim.to_string());
        kv("num_layers", e.num_layers.to_string());
        kv("num_heads", e.num_heads.to_string());
        kv("adapter_dim", e.adapter_dim.to_string());
        kv("hfc_ratio", e.hfc_ratio.to_string());
        kv("a_sp", a.a_sp.to_string());
        kv("n_max", a.n_max.to_string());
        kv("omega", a.omega.to_string());
        kv("iterations", a.iterations.to_string());
        kv("n_tokens", a.n_tokens.to_string());
        kv("prompt", self.model.ablation.prompt.name().to_string());
        kv("decoder", self.model.ablation.decoder.name().to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.optim.weight_decay.to_string());
        kv("beta1", self.optim.beta1.to_string());
        kv("beta2", self.optim.beta2.to_string());
        kv("eps", self.optim.eps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("episodes_per_epoch", self.episodes_per_epoch.to_string());
        kv(
            "loss_weights",
            match self.loss_weights {
                None => "auto".to_string(),
                Some((x, y)) => format!("{x},{y}"),
            },
        );
        kv("seed", self.seed.to_string());
        for (k, p) in [("data", &self.data), ("split", &self.split), ("out", &self.out)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }

    pub fn ablation(&self) -> AblationMode {
        self.model.ablation
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn apply_line(
    origin: &str,
    line: usize,
    raw: &str,
    mut f: impl FnMut(&str, &str) -> std::result::Result<(), String>,
) -> Result<()> {
    let text = raw.split('#').next().unwrap_or("").trim();
    if text.is_empty() {
        return Ok(());
    }
    let err = |reason: String| Error::Config {
        path: origin.to_string(),
        line,
        reason,
    };
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| err(format!("expected `key = value`, got `{text}`")))?;
    f(k.trim(), v.trim()).map_err(err)
}

/// What a checkpoint was trained with, stored beside it as `<ckpt>.meta`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub train_classes: BTreeSet<String>,
    pub frozen_hash: String,
}

impl CheckpointMeta {
    pub fn path_for(ckpt: &Path) -> PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.config.to_text();
        let classes: Vec<&str> = self.train_classes.iter().map(String::as_str).collect();
        let _ = writeln!(s, "train_classes = {}", classes.join(","));
        let _ = writeln!(s, "frozen_hash = {}", self.frozen_hash);
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut train_classes = BTreeSet::new();
        let mut frozen_hash = String::new();
        for (i, raw) in text.lines().enumerate() {
            apply_line(origin, i + 1, raw, |k, v| match k {
                "train_classes" => {
                    train_classes = v
                        .split(',')
                        .map(str::trim)
                        .filter(|c| !c.is_empty())
                        .map(String::from)
                        .collect();
                    Ok(())
                }
                "frozen_hash" => {
                    frozen_hash = v.to_string();
                    Ok(())
                }
                _ => config.set(k, v),
            })?;
        }
        Ok(Self {
            config,
            train_classes,
            frozen_hash,
        })
    }

    pub fn save(&self, ckpt: &Path) -> Result<()> {
        fs::write(Self::path_for(ckpt), self.to_text())?;
        Ok(())
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let p = Self::path_for(ckpt);
        Self::parse(&read(&p)?, &p.display().to_string())
    }
}
