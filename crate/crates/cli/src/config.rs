//! `key = value` run settings: built-in defaults, overridden by a config
//! file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use tunegen::model::ModelConfig;
use tunegen::pretrain::{MlmSplit, PretrainConfig};
use tunegen::train::TrainConfig;

use crate::UsageError;

/// Marks a model setting that keeps the preset's value.
const FROM_PRESET: &str = "preset";

/// Every recognized key with its default and a one-line description.
const SETTINGS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for initialization, shuffling, splitting and dropout"),
    ("lr", "1e-4", "peak learning rate"),
    ("warmup_steps", "1000", "linear warmup steps"),
    ("epochs", "20", "passes over the training set"),
    ("batch_size", "8", "examples per optimizer step"),
    ("beta1", "0.9", "AdamW first-moment decay"),
    ("beta2", "0.999", "AdamW second-moment decay"),
    ("eps", "1e-8", "AdamW denominator epsilon"),
    ("weight_decay", "0.01", "decoupled weight decay"),
    ("max_src_len", "1024", "cap on encoder tokens per example"),
    ("max_tgt_len", "1024", "cap on decoder tokens per example"),
    ("grad_clip", "none", "global gradient-norm clip, or none"),
    ("val_fraction", "0.01", "share of pairs held out for validation; 0 disables"),
    ("bpe_min_freq", "2", "minimum pair frequency when training a BPE vocabulary"),
    ("model", "tiny", "preset: tiny, rnd, bert, gpt2, bart-base or bart-large"),
    ("model.enc_layers", FROM_PRESET, "encoder layers"),
    ("model.dec_layers", FROM_PRESET, "decoder layers"),
    ("model.hidden", FROM_PRESET, "hidden width"),
    ("model.heads", FROM_PRESET, "attention heads"),
    ("model.ffn", FROM_PRESET, "feed-forward width"),
    ("model.max_src_len", FROM_PRESET, "encoder positions"),
    ("model.max_tgt_len", FROM_PRESET, "decoder positions"),
    ("model.dropout", FROM_PRESET, "dropout probability"),
    ("mlm_rate", "0.15", "share of tokens selected for masked prediction"),
    ("mlm_mask", "0.8", "selected tokens replaced by the mask token"),
    ("mlm_random", "0.1", "selected tokens replaced by a random token"),
    ("span_rate", "0.3", "share of tokens covered by infilled spans"),
    ("mean_span_len", "3.0", "mean infilled span length"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn split_assignment(line: &str) -> Result<(String, String)> {
    let Some((k, v)) = line.split_once('=') else {
        bail!(UsageError(format!("expected `key = value`, got {line:?}")));
    };
    let (k, v) = (k.trim(), v.trim());
    if !SETTINGS.iter().any(|(name, ..)| *name == k) {
        bail!(UsageError(format!("unknown setting `{k}`")));
    }
    Ok((k.to_string(), v.to_string()))
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: SETTINGS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Defaults, then `file`, then each `key=value` override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        for o in overrides {
            cfg.set_line(o)?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_line(line).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set_line(&mut self, line: &str) -> Result<()> {
        let (k, v) = split_assignment(line)?;
        self.values.insert(k, v);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.set_line(&format!("{key}={}", value.to_string()))
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .expect("every key has a default")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| UsageError(format!("setting `{key}` has invalid value {raw:?}")).into())
    }

    fn get_opt<T: FromStr>(&self, key: &str, absent: &str) -> Result<Option<T>> {
        if self.raw(key) == absent {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.get("lr")?,
            warmup_steps: self.get("warmup_steps")?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("eps")?,
            weight_decay: self.get("weight_decay")?,
            seed: self.seed()?,
            max_src_len: self.get("max_src_len")?,
            max_tgt_len: self.get("max_tgt_len")?,
            grad_clip: self.get_opt("grad_clip", "none")?,
        };
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            train: self.train_config()?,
            mlm_rate: self.get("mlm_rate")?,
            mlm_split: MlmSplit {
                mask: self.get("mlm_mask")?,
                random: self.get("mlm_random")?,
            },
            span_rate: self.get("span_rate")?,
            mean_span_len: self.get("mean_span_len")?,
        })
    }

    /// The preset with any `model.*` overrides. `src_vocab` sizes the `tiny`
    /// preset's source embeddings.
    pub fn model_config(&self, src_vocab: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(self.raw("model"), src_vocab)
            .map_err(|e| UsageError(e.to_string()))?;
        let fields: [(&str, &mut usize); 7] = [
            ("model.enc_layers", &mut c.enc_layers),
            ("model.dec_layers", &mut c.dec_layers),
            ("model.hidden", &mut c.hidden),
            ("model.heads", &mut c.heads),
            ("model.ffn", &mut c.ffn),
            ("model.max_src_len", &mut c.max_src_len),
            ("model.max_tgt_len", &mut c.max_tgt_len),
        ];
        for (key, slot) in fields {
            if let Some(v) = self.get_opt(key, FROM_PRESET)? {
                *slot = v;
            }
        }
        if let Some(d) = self.get_opt("model.dropout", FROM_PRESET)? {
            c.dropout = d;
        }
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }

    /// Loadable `key = value` text with each setting's description.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (key, _, doc) in SETTINGS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{key} = {}", self.raw(key));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())
            .with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut cfg = RunConfig::defaults();
        cfg.apply_text("# comment\nlr = 3e-4\nepochs=2  # trailing\n\n").unwrap();
        cfg.set_line("epochs=5").unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.lr, 3e-4);
        assert_eq!(t.epochs, 5);
        assert_eq!(t.grad_clip, None);
    }

    #[test]
    fn written_file_reloads_identically() {
        let mut cfg = RunConfig::defaults();
        cfg.set("model.hidden", 64).unwrap();
        cfg.set("grad_clip", 1.0).unwrap();
        let mut back = RunConfig::defaults();
        back.apply_text(&cfg.to_file_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model_config(300).unwrap().hidden, 64);
        assert_eq!(back.train_config().unwrap().grad_clip, Some(1.0));
    }

    #[test]
    fn bad_settings_are_usage_errors() {
        let mut cfg = RunConfig::defaults();
        let unknown = cfg.set_line("nope = 1").unwrap_err();
        assert!(unknown.downcast_ref::<UsageError>().is_some());
        cfg.set_line("epochs = many").unwrap();
        assert!(cfg.train_config().unwrap_err().downcast_ref::<UsageError>().is_some());
        cfg.set_line("epochs = 1").unwrap();
        cfg.set_line("model.heads = 5").unwrap();
        assert!(cfg.model_config(300).is_err());
    }

    #[test]
    fn presets_keep_their_shape() {
        let mut cfg = RunConfig::defaults();
        cfg.set_line("model = rnd").unwrap();
        assert_eq!(cfg.model_config(300).unwrap(), ModelConfig::rnd());
    }
}
