//! Nucleus (top-p) sampling and autoregressive tune generation.

use serde::{Deserialize, Serialize};

use crate::abc::{self, detect_degeneration, parse_headers, AbcVocab};
use crate::bpe::BpeVocab;
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Slack when comparing cumulative mass against `p`, so that a prefix whose
/// exact mass equals `p` is not rejected over rounding.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Consecutive identical bars that mark a generation as degenerate.
pub const DEGENERATION_REPEATS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub top_p: f64,
    /// Cap on generated tokens, EOS excluded.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_p: 0.9,
            max_len: 1024,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nucleus {
    /// Kept ids in descending probability, ties by ascending id.
    pub kept: Vec<usize>,
    /// Renormalized distribution over the full vocabulary; zero outside `kept`.
    pub probs: Vec<f64>,
}

/// Smallest descending-probability prefix whose mass reaches `p`,
/// renormalized. `p >= 1` keeps every id.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Nucleus {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = order.len();
    if p < 1.0 {
        let mut cum = 0.0;
        for (i, &id) in order.iter().enumerate() {
            cum += probs[id];
            if cum >= p - MASS_TOLERANCE {
                keep = i + 1;
                break;
            }
        }
    }
    order.truncate(keep);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order {
        out[i] = probs[i] / mass;
    }
    Nucleus {
        kept: order,
        probs: out,
    }
}

/// Softmax in double precision. Every logit being `-inf` is an error.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::InvalidArgument("logits contain NaN or +inf".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("every logit is masked".into()));
    }
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Categorical draw from the nucleus of `softmax(logits)`.
pub fn sample_token(logits: &[f64], top_p: f64, rng: &mut Rng) -> Result<usize> {
    let nucleus = nucleus_filter(&softmax(logits)?, top_p);
    let u = rng.uniform();
    let mut cum = 0.0;
    for &id in &nucleus.kept {
        cum += nucleus.probs[id];
        if u < cum {
            return Ok(id);
        }
    }
    Ok(*nucleus.kept.last().expect("nucleus is never empty"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub abc: String,
    /// Generated tune ids, without BOS or EOS.
    pub ids: Vec<usize>,
    /// The repeating bar when the body degenerated.
    pub degenerate: Option<String>,
    /// The description was cut to fit the encoder.
    pub input_truncated: bool,
    /// Decoding stopped at the length cap instead of EOS.
    pub hit_max_len: bool,
}

fn check_compat<T: Scalar>(model: &Seq2SeqModel<T>, bpe: &BpeVocab, abc_vocab: &AbcVocab) -> Result<()> {
    let c = model.config();
    if bpe.len() > c.src_vocab {
        return Err(Error::Config(format!(
            "text vocabulary of {} does not fit the model's {} source embeddings",
            bpe.len(),
            c.src_vocab
        )));
    }
    if abc_vocab.len() != c.tgt_vocab {
        return Err(Error::Config(format!(
            "tune vocabulary of {} does not match the model's {} output classes",
            abc_vocab.len(),
            c.tgt_vocab
        )));
    }
    Ok(())
}

/// Samples a tune for `text`, seeded by `cfg.seed`.
pub fn generate<T: Scalar>(
    model: &Seq2SeqModel<T>,
    text: &str,
    bpe: &BpeVocab,
    abc_vocab: &AbcVocab,
    cfg: &SamplerConfig,
) -> Result<Generation> {
    generate_with_rng(model, text, bpe, abc_vocab, cfg, &mut Rng::new(cfg.seed))
}

/// Encodes `text` (truncated to the encoder length), then samples from BOS
/// until EOS or `min(cfg.max_len, max_tgt_len)` tokens. BOS and PAD are never
/// sampled.
pub fn generate_with_rng<T: Scalar>(
    model: &Seq2SeqModel<T>,
    text: &str,
    bpe: &BpeVocab,
    abc_vocab: &AbcVocab,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Generation> {
    cfg.validate()?;
    check_compat(model, bpe, abc_vocab)?;
    if text.trim().is_empty() {
        return Err(Error::Empty("description".into()));
    }
    let enc = bpe.encode(text, model.config().max_src_len);
    let mut state = model.start_decoding(&enc.ids, &vec![false; enc.ids.len()])?;
    let max_len = cfg.max_len.min(model.config().max_tgt_len);
    let mut ids = Vec::new();
    let mut token = abc::BOS;
    let mut hit_max_len = true;
    let mut logits = vec![0.0; model.config().tgt_vocab];
    while ids.len() < max_len {
        let out = model.decode_step(&mut state, token)?;
        for (l, v) in logits.iter_mut().zip(out) {
            *l = v.to_f64_lossy();
        }
        logits[abc::BOS] = f64::NEG_INFINITY;
        logits[abc::PAD] = f64::NEG_INFINITY;
        token = sample_token(&logits, cfg.top_p, rng)?;
        if token == abc::EOS {
            hit_max_len = false;
            break;
        }
        ids.push(token);
    }
    let abc = abc_vocab.detokenize(&ids)?;
    let degenerate = detect_degeneration(&parse_headers(&abc).body, DEGENERATION_REPEATS);
    Ok(Generation {
        abc,
        ids,
        degenerate,
        input_truncated: enc.truncated,
        hit_max_len,
    })
}
