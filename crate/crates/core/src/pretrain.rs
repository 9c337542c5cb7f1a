//! Pretraining objectives that produce checkpoints for initializing the
//! fine-tuned model: masked language modelling and causal language modelling
//! on a single stack, and sentence-shuffle plus span-infilling denoising on
//! the full encoder-decoder.

use std::ops::Range;
use std::str::FromStr;

use crate::abc::{self, AbcVocab};
use crate::bpe::{self, BpeVocab};
use crate::error::{Error, Result};
use crate::model::layers::{Dropout, Linear, Norm};
use crate::model::{Checkpoint, Example, Gradients, ModelConfig, ParamStore, Part, Seq2SeqModel, IGNORE_ID};
use crate::nn::ops::cross_entropy_sum_into;
use crate::nn::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::train::{adamw_step, lr_at, AdamWState, TrainConfig};

/// Corrupted input and its prediction targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionOutput {
    pub input_ids: Vec<usize>,
    /// [`IGNORE_ID`] marks positions without a prediction.
    pub target_ids: Vec<usize>,
}

/// The token ids a corruption may use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpace {
    pub size: usize,
    pub mask: usize,
    pub specials: Vec<usize>,
}

impl TokenSpace {
    pub fn bpe(vocab: &BpeVocab) -> Self {
        TokenSpace {
            size: vocab.len(),
            mask: bpe::MASK,
            specials: vec![bpe::PAD, bpe::BOS, bpe::EOS, bpe::MASK],
        }
    }

    fn is_special(&self, id: usize) -> bool {
        self.specials.contains(&id)
    }

    fn random_regular(&self, rng: &mut Rng) -> usize {
        loop {
            let id = rng.below(self.size);
            if !self.is_special(id) {
                return id;
            }
        }
    }
}

/// How selected MLM positions are rewritten; the remainder stays unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmSplit {
    pub mask: f64,
    pub random: f64,
}

impl Default for MlmSplit {
    fn default() -> Self {
        MlmSplit {
            mask: 0.8,
            random: 0.1,
        }
    }
}

/// Selects each non-special position with probability `rate`; selected
/// positions are rewritten per `split` and become targets.
pub fn mlm_corrupt(
    ids: &[usize],
    rate: f64,
    split: MlmSplit,
    rng: &mut Rng,
    space: &TokenSpace,
) -> CorruptionOutput {
    let mut input_ids = ids.to_vec();
    let mut target_ids = vec![IGNORE_ID; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if space.is_special(id) || !rng.bernoulli(rate) {
            continue;
        }
        target_ids[i] = id;
        let u = rng.uniform();
        if u < split.mask {
            input_ids[i] = space.mask;
        } else if u < split.mask + split.random {
            input_ids[i] = space.random_regular(rng);
        }
    }
    CorruptionOutput {
        input_ids,
        target_ids,
    }
}

/// Next-token prediction pairs: input `ids[..n-1]`, target `ids[1..]`.
pub fn lm_shift(ids: &[usize]) -> Result<CorruptionOutput> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "language modelling needs at least 2 tokens, got {}",
            ids.len()
        )));
    }
    Ok(CorruptionOutput {
        input_ids: ids[..ids.len() - 1].to_vec(),
        target_ids: ids[1..].to_vec(),
    })
}

/// Replaces each span with one `mask` id. Spans must be sorted and disjoint.
pub fn infill_spans(ids: &[usize], spans: &[Range<usize>], mask: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len());
    let mut pos = 0;
    for s in spans {
        out.extend_from_slice(&ids[pos..s.start]);
        out.push(mask);
        pos = s.end;
    }
    out.extend_from_slice(&ids[pos..]);
    out
}

/// Span length: 2 plus a geometric count with mean `mean_span_len − 2`, so
/// every infilled span shortens the sequence.
fn span_length(mean_span_len: f64, rng: &mut Rng) -> usize {
    let extra_mean = (mean_span_len - 2.0).max(0.0);
    if extra_mean == 0.0 {
        return 2;
    }
    let q = 1.0 / (1.0 + extra_mean);
    let mut len = 2;
    while !rng.bernoulli(q) {
        len += 1;
    }
    len
}

/// Shuffles sentences (given by their start offsets), then infills
/// non-overlapping spans covering about `span_rate` of the tokens. The target
/// is the original sequence.
pub fn denoise_corrupt(
    ids: &[usize],
    sentence_starts: &[usize],
    span_rate: f64,
    mean_span_len: f64,
    mask: usize,
    rng: &mut Rng,
) -> Result<CorruptionOutput> {
    if !(0.0..=1.0).contains(&span_rate) {
        return Err(Error::InvalidArgument(format!("span rate {span_rate} outside [0, 1]")));
    }
    let valid_starts = sentence_starts.first().is_none_or(|&s| s == 0)
        && sentence_starts.windows(2).all(|w| w[0] < w[1])
        && sentence_starts.last().is_none_or(|&s| s < ids.len().max(1));
    if !valid_starts {
        return Err(Error::InvalidArgument(
            "sentence starts must be increasing offsets beginning at 0".into(),
        ));
    }
    let mut sentences: Vec<&[usize]> = sentence_starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let end = sentence_starts.get(i + 1).copied().unwrap_or(ids.len());
            &ids[s..end]
        })
        .collect();
    rng.shuffle(&mut sentences);
    let shuffled: Vec<usize> = if sentences.is_empty() {
        ids.to_vec()
    } else {
        sentences.concat()
    };

    let n = shuffled.len();
    let budget = (span_rate * n as f64).round() as usize;
    let mut taken = vec![false; n];
    let mut spans: Vec<Range<usize>> = Vec::new();
    let mut covered = 0;
    let mut attempts = 0;
    while budget.saturating_sub(covered) >= 2 && attempts < 20 * n.max(1) {
        attempts += 1;
        let len = span_length(mean_span_len, rng).min(budget - covered);
        if len > n {
            break;
        }
        let start = rng.below(n - len + 1);
        // Keep a gap so neighbouring spans never merge into one.
        let lo = start.saturating_sub(1);
        let hi = (start + len + 1).min(n);
        if taken[lo..hi].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        spans.push(start..start + len);
        covered += len;
    }
    spans.sort_by_key(|s| s.start);
    Ok(CorruptionOutput {
        input_ids: infill_spans(&shuffled, &spans, mask),
        target_ids: ids.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Mlm,
    Lm,
    Denoise,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Objective::Mlm),
            "lm" => Ok(Objective::Lm),
            "denoise" => Ok(Objective::Denoise),
            other => Err(Error::InvalidArgument(format!(
                "unknown objective `{other}` (expected mlm, lm or denoise)"
            ))),
        }
    }
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Lm => "lm",
            Objective::Denoise => "denoise",
        }
    }

    /// Prefix of the temporary prediction head, if the objective needs one.
    pub fn head_prefix(self) -> Option<&'static str> {
        match self {
            Objective::Mlm => Some("mlm_head"),
            Objective::Lm => Some("lm_head"),
            Objective::Denoise => None,
        }
    }
}

/// Supported combinations: encoder with MLM or LM, decoder with LM, and the
/// full model with denoising.
pub fn check_compatible(part: Part, objective: Objective) -> Result<()> {
    match (part, objective) {
        (Part::Encoder, Objective::Mlm | Objective::Lm)
        | (Part::Decoder, Objective::Lm)
        | (Part::All, Objective::Denoise) => Ok(()),
        _ => Err(Error::Config(format!(
            "objective {} cannot pretrain the {part:?} part",
            objective.name()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub mlm_rate: f64,
    pub mlm_split: MlmSplit,
    pub span_rate: f64,
    pub mean_span_len: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            train: TrainConfig::default(),
            mlm_rate: 0.15,
            mlm_split: MlmSplit::default(),
            span_rate: 0.3,
            mean_span_len: 3.0,
        }
    }
}

/// Start offsets of `. `-separated sentences in the BPE encoding of `text`,
/// with the encoding itself (no BOS/EOS).
pub fn sentence_ids(text: &str, vocab: &BpeVocab) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut starts = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let cut = rest.find(". ").map_or(rest.len(), |i| i + 1);
        let piece = vocab.encode_raw(&rest[..cut]);
        if !piece.is_empty() {
            starts.push(ids.len());
            ids.extend(piece);
        }
        rest = &rest[cut..];
    }
    (ids, starts)
}

/// ABC-vocabulary ids for arbitrary text; characters outside the vocabulary
/// become `?`.
fn abc_ids_lossy(text: &str, vocab: &AbcVocab) -> Result<Vec<usize>> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            let mut buf = [0u8; 4];
            if vocab.id_of(c.encode_utf8(&mut buf)).is_some() {
                c
            } else {
                '?'
            }
        })
        .collect();
    vocab.tokenize(&cleaned)
}

enum Doc {
    Single(Vec<usize>),
    Pair {
        src: Vec<usize>,
        starts: Vec<usize>,
        tgt: Vec<usize>,
    },
}

fn prepare_docs(
    docs: &[String],
    part: Part,
    config: &ModelConfig,
    bpe: &BpeVocab,
    abc_vocab: &AbcVocab,
) -> Result<Vec<Doc>> {
    let mut out = Vec::with_capacity(docs.len());
    for d in docs.iter().filter(|d| !d.trim().is_empty()) {
        let doc = match part {
            Part::Encoder => Doc::Single(bpe.encode(d, config.max_src_len).ids),
            Part::Decoder => {
                let mut ids = vec![abc::BOS];
                ids.extend(abc_ids_lossy(d, abc_vocab)?);
                ids.push(abc::EOS);
                ids.truncate(config.max_tgt_len + 1);
                Doc::Single(ids)
            }
            Part::All => {
                let (mut src, mut starts) = sentence_ids(d, bpe);
                src.truncate(config.max_src_len - 2);
                starts.retain(|&s| s < src.len());
                let tgt = abc_ids_lossy(d, abc_vocab)?;
                Doc::Pair { src, starts, tgt }
            }
        };
        out.push(doc);
    }
    if out.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    Ok(out)
}

struct Head {
    norm: Norm,
    dense: Linear,
}

fn head_params<T: Scalar>(prefix: &str, hidden: usize, vocab: usize, rng: &mut Rng) -> Result<ParamStore<T>> {
    let mut p = ParamStore::new();
    p.push(format!("{prefix}.norm.weight"), Tensor::full(&[hidden], T::one()));
    p.push(format!("{prefix}.norm.bias"), Tensor::zeros(&[hidden]));
    let w: Vec<T> = (0..hidden * vocab)
        .map(|_| T::from_f64_lossy(rng.normal(0.0, crate::model::INIT_STD)))
        .collect();
    p.push(format!("{prefix}.dense.weight"), Tensor::new(vec![hidden, vocab], w)?);
    p.push(format!("{prefix}.dense.bias"), Tensor::zeros(&[vocab]));
    Ok(p)
}

struct Task<'a, T> {
    model: &'a Seq2SeqModel<T>,
    head: Option<(&'a ParamStore<T>, &'a Head)>,
    objective: Objective,
    part: Part,
    cfg: &'a PretrainConfig,
    space: &'a TokenSpace,
}

impl<T: Scalar> Task<'_, T> {
    /// Loss sum and target count for one document; gradients of
    /// `scale · sum` are accumulated.
    fn loss(
        &self,
        doc: &Doc,
        scale: T,
        g: &mut Gradients<T>,
        hg: &mut Gradients<T>,
        corrupt_rng: &mut Rng,
        drop_rng: &mut Rng,
    ) -> Result<(f64, usize)> {
        match (self.part, doc) {
            (Part::Encoder, Doc::Single(ids)) => {
                let c = match self.objective {
                    Objective::Mlm => {
                        mlm_corrupt(ids, self.cfg.mlm_rate, self.cfg.mlm_split, corrupt_rng, self.space)
                    }
                    _ => lm_shift(ids)?,
                };
                if c.target_ids.iter().all(|&t| t == IGNORE_ID) {
                    return Ok((0.0, 0));
                }
                let causal = self.objective == Objective::Lm;
                let valid = vec![true; c.input_ids.len()];
                let mut drop = Dropout::new(self.model.config().dropout, Some(drop_rng));
                let (h, cache) = self.model.encode_fwd(&c.input_ids, &valid, causal, &mut drop)?;
                let (hp, head) = self.head.expect("single-stack objectives carry a head");
                let len = c.input_ids.len();
                let (normed, ln) = head.norm.forward(hp, &h);
                let logits = head.dense.forward(hp, &normed, len);
                let mut dlogits = vec![T::zero(); logits.len()];
                let (sum, count) =
                    cross_entropy_sum_into(&logits, self.space.size, &c.target_ids, IGNORE_ID, scale, &mut dlogits)?;
                let mut dnormed = vec![T::zero(); normed.len()];
                head.dense.backward(hp, hg, &normed, len, &dlogits, Some(&mut dnormed), false);
                let mut dh = vec![T::zero(); h.len()];
                head.norm.backward_add(hp, hg, &ln, &dnormed, &mut dh);
                self.model.encode_bwd(&cache, dh, g);
                Ok((sum, count))
            }
            (Part::Decoder, Doc::Single(ids)) => {
                let c = lm_shift(ids)?;
                let len = c.input_ids.len();
                let mut drop = Dropout::new(self.model.config().dropout, Some(drop_rng));
                let (h, cache) = self.model.decode_fwd(&c.input_ids, None, &mut drop)?;
                let (logits, normed, ln) = self.model.head_fwd(&h, len);
                let mut dlogits = vec![T::zero(); logits.len()];
                let (sum, count) = cross_entropy_sum_into(
                    &logits,
                    self.model.config().tgt_vocab,
                    &c.target_ids,
                    IGNORE_ID,
                    scale,
                    &mut dlogits,
                )?;
                let dh = self.model.head_bwd(&normed, &ln, len, &dlogits, g);
                self.model.decode_bwd(&cache, dh, None, g);
                Ok((sum, count))
            }
            (Part::All, Doc::Pair { src, starts, tgt }) => {
                let c = denoise_corrupt(
                    src,
                    starts,
                    self.cfg.span_rate,
                    self.cfg.mean_span_len,
                    self.space.mask,
                    corrupt_rng,
                )?;
                let mut input = Vec::with_capacity(c.input_ids.len() + 2);
                input.push(bpe::BOS);
                input.extend(c.input_ids);
                input.push(bpe::EOS);
                let max_tgt = self.model.config().max_tgt_len;
                let mut tgt_in = vec![abc::BOS];
                tgt_in.extend_from_slice(tgt);
                let mut tgt_out = tgt.clone();
                tgt_out.push(abc::EOS);
                tgt_in.truncate(max_tgt);
                tgt_out.truncate(max_tgt);
                let ex = Example {
                    src: input,
                    src_pad: Vec::new(),
                    tgt_in,
                    tgt_out,
                };
                self.model.example_loss(&ex, scale, Some(g), Some(drop_rng))
            }
            _ => unreachable!("documents are prepared for their part"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Only the pretrained part's tensors.
    pub checkpoint: Checkpoint,
    pub step_losses: Vec<f64>,
    /// Token-mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a freshly initialized model of `config` on `docs` with the
/// objective, masking afresh each epoch, and returns the checkpoint of
/// `part`. Encoder LM uses a causal mask. Single-stack objectives train a
/// temporary head that is not part of the checkpoint. Encoder objectives and
/// the denoising input use BPE ids; decoder targets use the ABC vocabulary,
/// with unknown characters replaced by `?`.
pub fn pretrain<T: Scalar>(
    config: &ModelConfig,
    part: Part,
    docs: &[String],
    objective: Objective,
    bpe: &BpeVocab,
    abc_vocab: &AbcVocab,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    check_compatible(part, objective)?;
    cfg.train.validate()?;
    if bpe.len() > config.src_vocab {
        return Err(Error::Config(format!(
            "BPE vocabulary of {} exceeds the model's source vocabulary of {}",
            bpe.len(),
            config.src_vocab
        )));
    }
    let tc = &cfg.train;
    let mut model = Seq2SeqModel::<T>::new(config.clone(), tc.seed)?;
    let space = TokenSpace {
        size: config.src_vocab,
        ..TokenSpace::bpe(bpe)
    };
    let prepared = prepare_docs(docs, part, config, bpe, abc_vocab)?;
    let total = tc.total_steps(prepared.len());
    lr_at(0, total, tc)?;

    let mut init_rng = Rng::derive(tc.seed, 7);
    let mut head_store = match objective.head_prefix() {
        Some(prefix) => head_params(prefix, config.hidden, config.src_vocab, &mut init_rng)?,
        None => ParamStore::new(),
    };
    let head = objective.head_prefix().map(|prefix| Head {
        norm: Norm::lookup(&head_store, &format!("{prefix}.norm")),
        dense: Linear::lookup(&head_store, &format!("{prefix}.dense")),
    });

    let hp = tc.adamw();
    let mut state = AdamWState::new(model.params());
    let mut head_state = AdamWState::new(&head_store);
    let mut g = model.zero_grads();
    let mut hg = Gradients::zeros_like(&head_store);
    let mut drop_rng = Rng::derive(tc.seed, u64::MAX);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step_losses = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut step = 0;

    for epoch in 1..=tc.epochs {
        Rng::derive(tc.seed, epoch as u64).shuffle(&mut order);
        let mut corrupt_rng = Rng::derive(tc.seed ^ 0x5eed, epoch as u64);
        let (mut epoch_sum, mut epoch_count) = (0.0, 0usize);
        for batch in order.chunks(tc.batch_size) {
            step += 1;
            g.zero();
            hg.zero();
            // Two passes: corrupt and count first so the batch mean is exact.
            let mut snapshot = corrupt_rng.clone();
            let mut tokens = 0usize;
            {
                let task = Task {
                    model: &model,
                    head: head.as_ref().map(|h| (&head_store, h)),
                    objective,
                    part,
                    cfg,
                    space: &space,
                };
                for &i in batch {
                    tokens += target_count(&task, &prepared[i], &mut snapshot)?;
                }
                if tokens > 0 {
                    let scale = T::from_f64_lossy(1.0 / tokens as f64);
                    let mut sum = 0.0;
                    for &i in batch {
                        sum += task
                            .loss(&prepared[i], scale, &mut g, &mut hg, &mut corrupt_rng, &mut drop_rng)?
                            .0;
                    }
                    let loss = sum / tokens as f64;
                    if !loss.is_finite() {
                        return Err(Error::Diverged { step, loss });
                    }
                    step_losses.push(loss);
                    epoch_sum += sum;
                    epoch_count += tokens;
                } else {
                    corrupt_rng = snapshot;
                }
            }
            if tokens == 0 {
                continue;
            }
            let lr = lr_at(step, total, tc)?;
            adamw_step(model.params_mut(), &g, &mut state, lr, &hp)
                .and_then(|_| adamw_step(&mut head_store, &hg, &mut head_state, lr, &hp))
                .map_err(|e| match e {
                    Error::NonFiniteGradient(_) => Error::Diverged {
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
        }
        epoch_losses.push(epoch_sum / epoch_count.max(1) as f64);
    }

    let mut checkpoint = Checkpoint::from_model_part(&model, part);
    checkpoint.meta.insert("objective".into(), objective.name().into());
    checkpoint.meta.insert("steps".into(), step.to_string());
    Ok(PretrainOutcome {
        checkpoint,
        step_losses,
        epoch_losses,
    })
}

/// Number of targets `doc` will contribute, consuming `rng` exactly as the
/// loss computation does.
fn target_count<T: Scalar>(task: &Task<'_, T>, doc: &Doc, rng: &mut Rng) -> Result<usize> {
    Ok(match (task.part, doc) {
        (Part::Encoder, Doc::Single(ids)) => match task.objective {
            Objective::Mlm => mlm_corrupt(ids, task.cfg.mlm_rate, task.cfg.mlm_split, rng, task.space)
                .target_ids
                .iter()
                .filter(|&&t| t != IGNORE_ID)
                .count(),
            _ => ids.len().saturating_sub(1),
        },
        (Part::Decoder, Doc::Single(ids)) => ids.len().saturating_sub(1),
        (Part::All, Doc::Pair { src, starts, tgt }) => {
            denoise_corrupt(src, starts, task.cfg.span_rate, task.cfg.mean_span_len, task.space.mask, rng)?;
            (tgt.len() + 1).min(task.model.config().max_tgt_len)
        }
        _ => 0,
    })
}
