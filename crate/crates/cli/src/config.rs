//! Flat `key = value` run configuration with `--key value` overrides.
//!
//! Every getter records the resolved value, so a run's manifest echoes the
//! complete configuration (defaults included) and is itself a valid config
//! file. Keys that no getter consumed are reported as unknown, by name.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub struct Cfg {
    values: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    command: String,
}

impl Cfg {
    pub fn load(command: &str, path: Option<&Path>, overrides: &[String]) -> Result<Cfg> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    anyhow!("{}:{}: expected `key = value`", path.display(), ln + 1)
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let mut it = overrides.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| anyhow!("override `{}` must look like --key value", flag))?;
            let value = it
                .next()
                .ok_or_else(|| anyhow!("override --{} is missing its value", key))?;
            values.insert(key.to_string(), value.clone());
        }
        Ok(Cfg {
            values,
            resolved: BTreeMap::new(),
            consumed: BTreeSet::new(),
            command: command.to_string(),
        })
    }

    fn record(&mut self, key: &str, value: String) {
        self.consumed.insert(key.to_string());
        self.resolved.insert(key.to_string(), value);
    }

    /// Typed value with a default.
    pub fn get_or<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let out = match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow!("config key `{}`: {}", key, e))?,
            None => default,
        };
        self.record(key, out.to_string());
        Ok(out)
    }

    /// Typed value that must be present.
    pub fn require<T: FromStr + ToString>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| anyhow!("missing required config key `{}`", key))?;
        let out = raw
            .parse::<T>()
            .map_err(|e| anyhow!("config key `{}`: {}", key, e))?;
        self.record(key, out.to_string());
        Ok(out)
    }

    /// Optional value, recorded only when present.
    pub fn optional<T: FromStr + ToString>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.consumed.insert(key.to_string());
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => {
                let out = raw
                    .parse::<T>()
                    .map_err(|e| anyhow!("config key `{}`: {}", key, e))?;
                self.resolved.insert(key.to_string(), out.to_string());
                Ok(Some(out))
            }
        }
    }

    /// A path that must exist on disk.
    pub fn existing_path(&mut self, key: &str) -> Result<PathBuf> {
        let p: PathBuf = self.require(key)?;
        if !p.exists() {
            bail!("config key `{}`: path {} does not exist", key, p.display());
        }
        Ok(p)
    }

    pub fn optional_existing_path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        match self.optional::<PathBuf>(key)? {
            None => Ok(None),
            Some(p) => {
                if !p.exists() {
                    bail!("config key `{}`: path {} does not exist", key, p.display());
                }
                Ok(Some(p))
            }
        }
    }

    /// Output directory (created on demand), defaulting per command.
    pub fn out_dir(&mut self) -> Result<PathBuf> {
        let default = PathBuf::from(format!("tg-runs/{}", self.command));
        let dir: PathBuf = self.get_or("out_dir", default)?;
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create out_dir {}", dir.display()))?;
        Ok(dir)
    }

    /// Fail on any key no getter consumed, naming the offender.
    pub fn reject_unknown(&self) -> Result<()> {
        for key in self.values.keys() {
            if !self.consumed.contains(key) {
                bail!("unknown config key `{}`", key);
            }
        }
        Ok(())
    }

    /// The resolved configuration as a reusable config file.
    pub fn manifest(&self) -> String {
        let mut out = format!("# command: {}\n", self.command);
        for (k, v) in &self.resolved {
            out.push_str(&format!("{} = {}\n", k, v));
        }
        out
    }

    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.txt"), self.manifest())
            .with_context(|| format!("cannot write manifest in {}", dir.display()))
    }
}

/// Model configuration from config keys (vocab size supplied by the caller
/// when it comes from a vocabulary file).
pub fn model_config(cfg: &mut Cfg, vocab_size: Option<usize>) -> Result<tg_core::model::ModelConfig> {
    use tg_core::model::{ModelConfig, Variant};
    let defaults = ModelConfig::default();
    let vocab_size = match vocab_size {
        Some(v) => {
            // Recorded for the manifest; the vocabulary file decides it.
            cfg.consumed.insert("vocab_size".into());
            cfg.resolved.insert("vocab_size".into(), v.to_string());
            v
        }
        None => cfg.get_or("vocab_size", defaults.vocab_size)?,
    };
    let variant: Variant = cfg
        .get_or("variant", defaults.variant.to_string())?
        .parse()
        .map_err(|e| anyhow!("config key `variant`: {}", e))?;
    cfg.resolved.insert("variant".into(), variant.to_string());
    let mc = ModelConfig {
        vocab_size,
        n_layers: cfg.get_or("n_layers", defaults.n_layers)?,
        d_model: cfg.get_or("d_model", defaults.d_model)?,
        n_heads: cfg.get_or("n_heads", defaults.n_heads)?,
        ffn_mult: cfg.get_or("ffn_mult", defaults.ffn_mult)?,
        lexical_cap: cfg.get_or("lexical_cap", defaults.lexical_cap)?,
        memory_capacity: cfg.get_or("memory_capacity", defaults.memory_capacity)?,
        sentence_layer: cfg.get_or("sentence_layer", defaults.sentence_layer)?,
        sentence_head_depth: cfg.get_or("sentence_head_depth", defaults.sentence_head_depth)?,
        context_window: cfg.get_or("context_window", defaults.context_window)?,
        variant,
        dropout_token: cfg.get_or("dropout_token", defaults.dropout_token)?,
        dropout_sentence_rep: cfg.get_or("dropout_sentence_rep", defaults.dropout_sentence_rep)?,
        dropout_attention: cfg.get_or("dropout_attention", defaults.dropout_attention)?,
        gate_init: cfg.get_or("gate_init", defaults.gate_init)?,
    };
    mc.validate()?;
    Ok(mc)
}

/// Training configuration from config keys.
pub fn train_config(cfg: &mut Cfg) -> Result<tg_core::training::TrainConfig> {
    use tg_core::training::TrainConfig;
    let d = TrainConfig::default;
    let tc = TrainConfig {
        peak_lr: cfg.get_or("peak_lr", d().peak_lr)?,
        beta1: cfg.get_or("beta1", d().beta1)?,
        beta2: cfg.get_or("beta2", d().beta2)?,
        weight_decay: cfg.get_or("weight_decay", d().weight_decay)?,
        adam_eps: cfg.get_or("adam_eps", d().adam_eps)?,
        clip_norm: cfg.get_or("clip_norm", d().clip_norm)?,
        warmup_frac: cfg.get_or("warmup_frac", d().warmup_frac)?,
        epochs_max: cfg.get_or("epochs_max", d().epochs_max)?,
        max_steps: cfg.optional("max_steps")?,
        s_initial: cfg.get_or("s_initial", d().s_initial)?,
        s_step: cfg.get_or("s_step", d().s_step)?,
        s_every: cfg.get_or("s_every", d().s_every)?,
        eos_w_warm: cfg.get_or("eos_w_warm", d().eos_w_warm)?,
        eos_w_after: cfg.get_or("eos_w_after", d().eos_w_after)?,
        warmin_low: cfg.get_or("warmin_low", d().warmin_low)?,
        warmin_high: cfg.get_or("warmin_high", d().warmin_high)?,
        early_stop_min_delta: cfg.get_or("early_stop_min_delta", d().early_stop_min_delta)?,
        early_stop_patience: cfg.get_or("early_stop_patience", d().early_stop_patience)?,
        batch_budget: cfg.get_or("batch_budget", d().batch_budget)?,
        max_streams: cfg.get_or("max_streams", d().max_streams)?,
        bucket_width: cfg.get_or("bucket_width", d().bucket_width)?,
        log_every: cfg.get_or("log_every", d().log_every)?,
        seed: cfg.get_or("seed", d().seed)?,
    };
    Ok(tc)
}
